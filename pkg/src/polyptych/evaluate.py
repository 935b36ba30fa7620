"""Identity and text-alignment metrics, benchmark runs and their reports."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .flow import Vocab, compose_prompt, euler_sample_batch, make_mask
from .forge import PALETTE, SHAPES, Item, read_embeddings
from .geometry import assemble_polyptych, extract_panel, quantize
from .icma import TaskMode
from .masks import dominant_blob, synthesize_user_mask
from .seeding import child_seed, stream

log = logging.getLogger(__name__)

HIST_BINS = 8
MOMENT_WEIGHT = 2.0
# degree of each invariant in the normalised central moments; used to bring them to one scale
_HU_DEGREE = np.array([1, 2, 2, 2, 4, 3, 4], dtype=np.float64)


class ProviderError(ValueError):
    pass


class CaptionParseError(ValueError):
    pass


def hu_moments(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return np.zeros(7)
    x = xs - xs.mean()
    y = ys - ys.mean()
    m00 = float(len(xs))

    def eta(p, q):
        return float(np.sum(x**p * y**q)) / m00 ** (1 + (p + q) / 2)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03, n21, n12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    a, b = n30 + n12, n21 + n03
    return np.array([
        n20 + n02,
        (n20 - n02) ** 2 + 4 * n11**2,
        (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2,
        a**2 + b**2,
        (n30 - 3 * n12) * a * (a**2 - 3 * b**2) + (3 * n21 - n03) * b * (3 * a**2 - b**2),
        (n20 - n02) * (a**2 - b**2) + 4 * n11 * a * b,
        (3 * n21 - n03) * a * (a**2 - 3 * b**2) - (n30 - 3 * n12) * b * (3 * a**2 - b**2),
    ])


def shape_moments(mask: np.ndarray) -> np.ndarray:
    h = hu_moments(mask)
    return np.sign(h) * np.abs(h) ** (1.0 / _HU_DEGREE)


def color_histogram(pixels: np.ndarray) -> np.ndarray:
    """8 bins per channel over an (N, 3) pixel list, each channel normalised to sum 1."""
    bins = np.clip((pixels * HIST_BINS).astype(int), 0, HIST_BINS - 1)
    hist = np.stack([np.bincount(bins[:, c], minlength=HIST_BINS) for c in range(pixels.shape[1])])
    return (hist / max(len(pixels), 1)).ravel().astype(np.float64)


def toy_embed(image: np.ndarray) -> np.ndarray:
    """Unit vector: colour histogram of the dominant blob, then its 7 scaled shape moments."""
    image = np.asarray(image, dtype=np.float64)
    blob = dominant_blob(image)
    if blob.any():
        hist = color_histogram(image[blob])
        moments = shape_moments(blob)
    else:
        hist = color_histogram(image.reshape(-1, image.shape[-1]))
        moments = np.zeros(7)
    hist = hist / np.linalg.norm(hist)
    v = np.concatenate([hist, MOMENT_WEIGHT * moments])
    return v / np.linalg.norm(v)


class ToyEmbedder:
    name = "toy"

    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        return toy_embed(image)


class TableEmbedder:
    """Precomputed vectors (e.g. from an external vision backbone) looked up by image key."""

    name = "table"

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise ProviderError(f"embedding table {self.path} does not exist")
        self.table = read_embeddings(self.path)

    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        if key is None or key not in self.table:
            raise ProviderError(f"no precomputed embedding for {key!r} in {self.path}")
        return self.table[key]


PROVIDERS = {"toy": ToyEmbedder, "table": TableEmbedder}


def get_provider(name: str, path=None):
    if name not in PROVIDERS:
        raise ProviderError(f"unknown embedding provider {name!r}; registered: {', '.join(sorted(PROVIDERS))}")
    if name == "table":
        if path is None:
            raise ProviderError("provider 'table' needs an embedding file")
        return TableEmbedder(path)
    return PROVIDERS[name]()


def identity_score(generated: np.ndarray, reference, provider=None) -> float:
    """Cosine between embeddings; a list of references gives the mean over them."""
    provider = provider or ToyEmbedder()
    refs = reference if isinstance(reference, (list, tuple)) else [reference]
    g = provider.embed(generated)
    return float(np.mean([float(g @ provider.embed(r)) for r in refs]))


# -- text alignment ------------------------------------------------------------


def parse_attributes(caption: str) -> dict:
    """Colour and shape words of the subject (the words before ``on``)."""
    words = caption.replace("[TARGET-SCENE]", " ").split()
    subject = words[: words.index("on")] if "on" in words else words
    color = next((w for w in subject if w in PALETTE), None)
    shape = next((w for w in subject if w in SHAPES), None)
    if color is None or shape is None:
        raise CaptionParseError(f"caption {caption!r} names no colour and shape for the subject")
    return {"color": color, "shape": shape}


def classify_color(image: np.ndarray, blob: np.ndarray) -> str:
    med = np.median(image[blob], axis=0)
    names = [n for n in PALETTE if n != "gray"]
    dists = [np.linalg.norm(med - np.asarray(PALETTE[n]) / 255.0) for n in names]
    return names[int(np.argmin(dists))]


def classify_shape(blob: np.ndarray) -> str:
    """Squares fill their bounding-box corners; triangles carry most of their mass in the lower half."""
    rows = np.flatnonzero(blob.any(axis=1))
    cols = np.flatnonzero(blob.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1], cols[0], cols[-1]
    if blob[r0, c0] and blob[r0, c1] and blob[r1, c0] and blob[r1, c1]:
        return "square"
    ys = np.nonzero(blob)[0]
    mid = (r0 + r1) / 2
    top = (ys < mid).sum() + 0.5 * (ys == mid).sum()
    # lower-half over upper-half mass: about 3 for triangles, about 1 for circles
    return "triangle" if len(ys) - top > 1.6 * top else "circle"


def text_score(generated: np.ndarray, caption: str, provider=None) -> float:
    """Fraction of the caption's subject attributes (colour, shape) the dominant blob satisfies."""
    if provider is not None and hasattr(provider, "text_similarity"):
        return float(np.clip((provider.text_similarity(generated, caption) + 1) / 2, 0, 1))
    attrs = parse_attributes(caption)
    blob = dominant_blob(np.asarray(generated, dtype=np.float64))
    if not blob.any():
        return 0.0
    hits = (classify_color(generated, blob) == attrs["color"]) + (classify_shape(blob) == attrs["shape"])
    return hits / 2.0


# -- benchmark -------------------------------------------------------------------


@dataclass
class BenchmarkItem:
    item_id: str
    refs: list[np.ndarray]
    target: np.ndarray
    precise: np.ndarray
    user: np.ndarray
    caption: str
    ref_captions: list[str]
    rigid: bool


def benchmark_items(items: Sequence[Item], seed: int = 0) -> list[BenchmarkItem]:
    out = []
    for item in items:
        sil = item.silhouettes[item.target]
        if not sil.any():
            continue
        user, _ = synthesize_user_mask(sil, stream(seed, "bench-user-mask", item.id))
        out.append(BenchmarkItem(
            item.id, [item.images[i] for i in item.refs], item.images[item.target], sil, user,
            item.captions[item.target], [item.captions[i] for i in item.refs], bool(item.identity["rigid"]),
        ))
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class MetricReport:
    rows: list[dict]
    fingerprint: str = ""
    missing: list[dict] = field(default_factory=list)

    def means(self) -> dict[str, dict[str, float]]:
        out = {}
        for mode in dict.fromkeys(r["mode"] for r in self.rows):
            sel = [r for r in self.rows if r["mode"] == mode]
            out[mode] = {
                "identity": float(np.mean([r["identity"] for r in sel])),
                "text": float(np.mean([r["text"] for r in sel])),
                "n": len(sel),
            }
        return out

    def to_text(self) -> str:
        lines = [f"{'mode':<14}{'n':>4}{'identity':>12}{'text':>10}"]
        means = self.means()
        for mode, m in means.items():
            lines.append(f"{mode:<14}{m['n']:>4}{m['identity']:>12.4f}{m['text']:>10.4f}")
        lines += ["", "[summary]", f"fingerprint={self.fingerprint}", f"rows={len(self.rows)}", f"missing={len(self.missing)}"]
        for mode, m in means.items():
            lines += [f"mean.{mode}.identity={_fmt(m['identity'])}", f"mean.{mode}.text={_fmt(m['text'])}"]
        lines.append("[rows]")
        for r in self.rows:
            lines.append(f"row={r['item']},{r['mode']},{_fmt(r['identity'])},{_fmt(r['text'])},{r['rigid']}")
        for r in self.missing:
            lines.append(f"lost={r['item']},{r['mode']},{r['error']}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        rows, missing, fp = [], [], ""
        for line in text.splitlines():
            if line.startswith("row="):
                item, mode, ident, txt, rigid = line[4:].split(",")
                rows.append({"item": item, "mode": mode, "identity": float(ident), "text": float(txt),
                             "rigid": rigid == "True"})
            elif line.startswith("lost="):
                item, mode, err = line[5:].split(",", 2)
                missing.append({"item": item, "mode": mode, "error": err})
            elif line.startswith("fingerprint="):
                fp = line.split("=", 1)[1]
        return cls(rows, fp, missing)


def fingerprint(**parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _sample_mode(model, vocab, bench: Sequence[BenchmarkItem], mode: TaskMode, seed: int, steps: int,
                 ref_count: int, batch: int):
    canvases, masks, texts, seeds = [], [], [], []
    for b in bench:
        refs = b.refs[:ref_count]
        known = b.target if mode.position_aware else np.zeros_like(b.target)
        cv = assemble_polyptych(refs, known)
        region = b.precise if mode is TaskMode.PRECISE else b.user
        masks.append(make_mask(mode, cv, b.precise, user_mask=region))
        texts.append(compose_prompt(vocab, b.ref_captions[:ref_count], b.caption))
        seeds.append(child_seed(seed, "bench", b.item_id, mode.label, ref_count))
        canvases.append(cv)
    outs = []
    for s in range(0, len(bench), batch):
        sl = slice(s, s + batch)
        outs.extend(euler_sample_batch(model, canvases[sl], masks[sl], texts[sl], [int(mode)] * len(canvases[sl]),
                                       steps, seeds[sl], vocab))
    return [quantize(extract_panel(o, cv.target)) for o, cv in zip(outs, canvases)]


def run_benchmark(
    model,
    items: Sequence[BenchmarkItem],
    modes: Sequence[TaskMode],
    provider,
    seed: int,
    vocab: Vocab,
    steps: int = 20,
    ref_count: int = 1,
    batch: int = 32,
) -> MetricReport:
    """Sample every item under every mode and score identity (vs the references used) and text."""
    rows, missing = [], []
    groups: dict[tuple, list[BenchmarkItem]] = {}
    for b in items:
        groups.setdefault((b.target.shape, tuple(r.shape for r in b.refs[:ref_count])), []).append(b)
    for mode in modes:
        mode = TaskMode.parse(mode)
        for group in groups.values():
            try:
                outs = _sample_mode(model, vocab, group, mode, seed, steps, ref_count, batch)
            except FloatingPointError as exc:
                missing += [{"item": b.item_id, "mode": mode.label, "error": str(exc)} for b in group]
                continue
            for b, gen in zip(group, outs):
                try:
                    rows.append({
                        "item": b.item_id,
                        "mode": mode.label,
                        "identity": identity_score(gen, b.refs[:ref_count], provider),
                        "text": text_score(gen, b.caption),
                        "rigid": b.rigid,
                    })
                except (ValueError, FloatingPointError) as exc:
                    missing.append({"item": b.item_id, "mode": mode.label, "error": str(exc)})
    order = {b.item_id: i for i, b in enumerate(items)}
    mode_order = {TaskMode.parse(m).label: i for i, m in enumerate(modes)}
    rows.sort(key=lambda r: (mode_order[r["mode"]], order[r["item"]]))
    fp = fingerprint(seed=seed, steps=steps, ref_count=ref_count, modes=[TaskMode.parse(m).label for m in modes],
                     items=[b.item_id for b in items], provider=getattr(provider, "name", "?"))
    return MetricReport(rows, fp, missing)


@dataclass
class ComparisonRow:
    model: str
    ref_count: int
    identity: float
    text: float
    n: int


def multiref_compare(models: dict, items: Sequence[BenchmarkItem], ref_counts: Sequence[int], provider,
                     seed: int, vocab: Vocab, steps: int = 20) -> tuple[list[ComparisonRow], list[str]]:
    """Position-free generation from the first k references, per model and k."""
    need = max(ref_counts)
    usable = [b for b in items if len(b.refs) >= need]
    notes = [f"skip {b.item_id}: {len(b.refs)} reference(s) < {need}" for b in items if len(b.refs) < need]
    rows = []
    for name, model in models.items():
        for k in ref_counts:
            rep = run_benchmark(model, usable, [TaskMode.POSITION_FREE], provider, seed, vocab, steps, ref_count=k)
            m = rep.means().get(TaskMode.POSITION_FREE.label, {"identity": float("nan"), "text": float("nan"), "n": 0})
            rows.append(ComparisonRow(name, k, m["identity"], m["text"], m["n"]))
    return rows, notes


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    lines = [f"{'model':<10}{'refs':>5}{'n':>5}{'identity':>12}{'text':>10}"]
    lines += [f"{r.model:<10}{r.ref_count:>5}{r.n:>5}{r.identity:>12.4f}{r.text:>10.4f}" for r in rows]
    lines.append("")
    lines += [f"{r.model}.r{r.ref_count}.identity={_fmt(r.identity)}\n{r.model}.r{r.ref_count}.text={_fmt(r.text)}" for r in rows]
    return "\n".join(lines) + "\n"
