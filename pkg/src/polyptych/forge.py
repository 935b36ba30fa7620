"""Synthetic identity-consistent items, curation filters, shards and multi-reference synthesis."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .bucketing import Bucket
from .flow import PolyptychSample, Vocab, compose_prompt, euler_sample_batch
from .geometry import assemble_polyptych, extract_panel, quantize, read_kv, read_pgm, read_ppm, write_pgm, write_ppm
from .icma import TaskMode
from .masks import dominant_blob, synthesize_user_mask
from .seeding import child_seed, stream

log = logging.getLogger(__name__)

PALETTE = {
    "red": (230, 40, 40),
    "green": (40, 190, 60),
    "blue": (40, 80, 230),
    "yellow": (240, 215, 40),
    "purple": (150, 50, 190),
    "orange": (245, 140, 25),
    "cyan": (30, 200, 215),
    "gray": (128, 128, 128),
}
OBJECT_COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "cyan")
BACKGROUND_COLORS = ("gray", "red", "green", "blue", "yellow", "purple", "orange", "cyan")
PLACES = {"field": 0.45, "room": 0.3, "studio": 0.65}
SHAPES = ("circle", "square", "triangle")
TEXTURE_WORD = "dotted"
TEXTURE_DARKEN = 0.55
EMPTY_WORD = "empty"


class WorldConfigError(ValueError):
    pass


class ShardError(ValueError):
    pass


@dataclass
class WorldConfig:
    shapes: tuple[str, ...] = SHAPES
    palette: dict = field(default_factory=lambda: dict(PALETTE))
    object_colors: tuple[str, ...] = OBJECT_COLORS
    background_colors: tuple[str, ...] = BACKGROUND_COLORS
    places: dict = field(default_factory=lambda: dict(PLACES))
    sizes: tuple[tuple[int, int], ...] = ((16, 16),)
    patch: int = 2
    scenes: tuple[int, int] = (2, 4)
    radius: tuple[float, float] = (0.2, 0.3)  # fraction of the panel's short side
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    center_jitter: float = 0.15  # fraction of the panel side
    stretch: tuple[float, float] = (0.75, 1.33)
    texture_prob: float = 0.3
    nonrigid_prob: float = 0.5
    blank_prob: float = 0.0
    mismatch_prob: float = 0.0
    min_contrast: float = 0.25
    target: str = "last"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for h, w in self.sizes:
            if h % self.patch or w % self.patch:
                raise WorldConfigError(f"panel size {h}x{w} is not divisible by patch {self.patch}")
            if min(h, w) < 8:
                raise WorldConfigError(f"panel size {h}x{w} too small (minimum 8)")
        if not 2 <= self.scenes[0] <= self.scenes[1]:
            raise WorldConfigError(f"scenes range {self.scenes} must satisfy 2 <= lo <= hi")
        for name in (*self.object_colors, *self.background_colors):
            if name not in self.palette:
                raise WorldConfigError(f"colour {name!r} missing from palette")
        if self.target not in ("last", "first"):
            raise WorldConfigError("target designation must be 'last' or 'first'")

    def vocabulary(self) -> list[str]:
        words = set(self.palette) | set(self.shapes) | set(self.places) | {TEXTURE_WORD, EMPTY_WORD, "on"}
        return sorted(words)

    def rgb(self, name: str) -> np.ndarray:
        return np.asarray(self.palette[name], dtype=np.float64) / 255.0

    def background_rgb(self, color: str, place: str) -> np.ndarray:
        return quantize(0.5 * self.rgb(color) + 0.5 * self.places[place])


def world_vocab(world: WorldConfig) -> Vocab:
    return Vocab(world.vocabulary())


@dataclass
class Item:
    id: str
    images: list[np.ndarray]
    silhouettes: list[np.ndarray]
    captions: list[str]
    identity: dict
    scenes: list[dict]
    target: int

    @property
    def refs(self) -> list[int]:
        return [i for i in range(len(self.images)) if i != self.target]

    @property
    def size(self) -> tuple[int, int]:
        return self.images[0].shape[:2]


def shape_support(shape: str, h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    """Pixels whose centres fall inside the shape."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if shape == "circle":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if shape == "square":
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if shape == "triangle":
        top = cy - ry
        frac = (yy - top) / (2 * ry)
        return (frac >= 0) & (frac <= 1) & (np.abs(xx - cx) <= rx * frac)
    raise WorldConfigError(f"unknown shape {shape!r}")


def texture_pattern(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy + xx) % 3 == 0


def render_scene(world: WorldConfig, size, identity: dict | None, scene: dict) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    img = np.broadcast_to(world.background_rgb(scene["bg"], scene["place"]), (h, w, 3)).copy()
    if identity is None:
        return img, np.zeros((h, w), dtype=bool)
    sil = shape_support(identity["shape"], h, w, scene["cy"], scene["cx"], scene["ry"], scene["rx"])
    color = world.rgb(identity["color"])
    obj = np.broadcast_to(color, (h, w, 3)).copy()
    if identity["textured"]:
        obj[texture_pattern(h, w)] = quantize(TEXTURE_DARKEN * color)
    img[sil] = quantize(obj[sil])
    return img, sil


def caption_for(identity: dict | None, scene: dict) -> str:
    bg = f"{scene['bg']} {scene['place']}"
    if identity is None:
        return f"{EMPTY_WORD} {bg}"
    tex = f"{TEXTURE_WORD} " if identity["textured"] else ""
    return f"{tex}{identity['color']} {identity['shape']} on {bg}"


def random_identity(world: WorldConfig, rng: np.random.Generator) -> dict:
    return {
        "shape": str(rng.choice(world.shapes)),
        "color": str(rng.choice(world.object_colors)),
        "textured": bool(rng.random() < world.texture_prob),
        "rigid": bool(rng.random() >= world.nonrigid_prob),
        "radius": float(rng.uniform(*world.radius)),
    }


def random_scene(world: WorldConfig, rng: np.random.Generator, size, identity: dict) -> dict:
    h, w = size
    tones = [world.rgb(identity["color"])]
    if identity["textured"]:
        tones.append(quantize(TEXTURE_DARKEN * tones[0]))
    place = str(rng.choice(sorted(world.places)))
    # every tone of the subject must stand out, or segmentation splits textured shapes
    bgs = [b for b in world.background_colors if b != identity["color"] and all(
        np.abs(world.background_rgb(b, place) - t).max() >= world.min_contrast for t in tones)]
    if not bgs:
        raise WorldConfigError(f"no background contrasts with {identity['color']} in {place}")
    bg = str(rng.choice(bgs))
    r = identity["radius"] * min(h, w) * rng.uniform(*world.scale_jitter)
    if identity["rigid"]:
        ry = rx = r
    else:
        s = rng.uniform(*world.stretch)
        ry, rx = r * np.sqrt(s), r / np.sqrt(s)
    cy = h / 2 + rng.uniform(-1, 1) * world.center_jitter * h
    cx = w / 2 + rng.uniform(-1, 1) * world.center_jitter * w
    cy = float(np.clip(cy, ry + 0.5, h - ry - 0.5))
    cx = float(np.clip(cx, rx + 0.5, w - rx - 0.5))
    return {"bg": bg, "place": place, "cy": cy, "cx": cx, "ry": float(ry), "rx": float(rx)}


def generate_item(world: WorldConfig, rng: np.random.Generator, item_id: str = "item") -> Item:
    """One identity rendered into 2-4 scenes with exact silhouettes and templated captions."""
    size = tuple(world.sizes[int(rng.integers(len(world.sizes)))])
    identity = random_identity(world, rng)
    n = int(rng.integers(world.scenes[0], world.scenes[1] + 1))
    images, sils, caps, scenes = [], [], [], []
    for k in range(n):
        ident = identity
        kind = "object"
        if world.mismatch_prob and rng.random() < world.mismatch_prob:
            ident = dict(identity)
            ident["color"] = str(rng.choice([c for c in world.object_colors if c != identity["color"]]))
            ident["shape"] = str(rng.choice([s for s in world.shapes if s != identity["shape"]] or world.shapes))
            kind = "mismatch"
        scene = random_scene(world, rng, size, ident)
        if world.blank_prob and rng.random() < world.blank_prob:
            ident, kind = None, "blank"
        scene["kind"] = kind
        img, sil = render_scene(world, size, ident, scene)
        images.append(img)
        sils.append(sil)
        caps.append(caption_for(ident, scene))
        scenes.append(scene)
    target = n - 1 if world.target == "last" else 0
    return Item(item_id, images, sils, caps, identity, scenes, target)


def generate_items(world: WorldConfig, n_items: int, seed: int | None = None) -> list[Item]:
    seed = world.seed if seed is None else seed
    return [generate_item(world, stream(seed, "item", i), f"item{i:05d}") for i in range(n_items)]


# -- curation ----------------------------------------------------------------


class EmbedProvider(Protocol):
    name: str

    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray: ...


def blank_background_detect(image: np.ndarray, silhouette: np.ndarray | None = None,
                            var_threshold: float = 1e-4, coverage: float = 0.005) -> bool:
    """Blank iff every channel's variance is below the threshold and no silhouette covers >0.5% of pixels."""
    flat = np.asarray(image, dtype=np.float64).reshape(-1, image.shape[-1])
    if not (flat.var(axis=0) < var_threshold).all():
        return False
    if silhouette is not None and np.asarray(silhouette, dtype=bool).mean() > coverage:
        return False
    return True


@dataclass
class CurationLog:
    kept: list[str] = field(default_factory=list)
    rejected: dict[str, str] = field(default_factory=dict)
    redesignated: dict[str, tuple[int, int]] = field(default_factory=dict)
    quarantined: dict[str, str] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"kept {k}" for k in self.kept]
        out += [f"rejected {k} {why}" for k, why in self.rejected.items()]
        out += [f"redesignated {k} target {a}->{b}" for k, (a, b) in self.redesignated.items()]
        out += [f"quarantined {k} {why}" for k, why in self.quarantined.items()]
        return out


def image_key(item: Item, k: int) -> str:
    return f"{item.id}/{k}"


def curate(items: Sequence[Item], embed: EmbedProvider, threshold: float = 0.2) -> tuple[list[Item], CurationLog]:
    """Apply the three item filters.

    rule 2: every image blank -> drop; rule 1: some pair below ``threshold``
    cosine -> drop; rule 3: a blank target is re-designated to the last
    non-blank image.
    """
    report = CurationLog()
    kept = []
    for item in items:
        blank = [blank_background_detect(img, sil) for img, sil in zip(item.images, item.silhouettes)]
        if all(blank):
            report.rejected[item.id] = "rule2:all-blank"
            continue
        try:
            vecs = [np.asarray(embed.embed(img, image_key(item, k)), dtype=np.float64)
                    for k, img in enumerate(item.images)]
        except Exception as exc:  # provider failures quarantine the item
            report.quarantined[item.id] = f"{type(exc).__name__}: {exc}"
            continue
        if any(abs(np.linalg.norm(v) - 1.0) > 1e-6 for v in vecs):
            report.quarantined[item.id] = "provider returned a non-unit vector"
            continue
        worst = min(float(a @ b) for a, b in combinations(vecs, 2))
        if worst < threshold:
            report.rejected[item.id] = f"rule1:cosine={worst:.4f}<{threshold}"
            continue
        if blank[item.target]:
            new = max(i for i, b in enumerate(blank) if not b)
            report.redesignated[item.id] = (item.target, new)
            item = Item(item.id, item.images, item.silhouettes, item.captions, item.identity, item.scenes, new)
        kept.append(item)
        report.kept.append(item.id)
    return kept, report


# -- samples -----------------------------------------------------------------


def item_samples(item: Item, ref_counts: Sequence[int] = (1,), user_mask_seed: int = 0) -> list[PolyptychSample]:
    """Training samples of an item: the first k references (k in ref_counts) against the designated target."""
    refs = item.refs
    sil = item.silhouettes[item.target]
    user = None
    if sil.any():
        user, _ = synthesize_user_mask(sil, stream(user_mask_seed, "user-mask", item.id))
    out = []
    for k in ref_counts:
        if k > len(refs):
            continue
        chosen = refs[:k]
        out.append(PolyptychSample(
            refs=[item.images[i] for i in chosen],
            target=item.images[item.target],
            silhouette=sil,
            user_mask=user,
            ref_captions=[item.captions[i] for i in chosen],
            target_caption=item.captions[item.target],
            item_id=item.id if len(ref_counts) == 1 else f"{item.id}/r{k}",
        ))
    return out


def diptych_samples(items: Sequence[Item], seed: int = 0) -> list[PolyptychSample]:
    """Every (reference, target) pairing of each item as a single-reference diptych."""
    out = []
    for item in items:
        sil = item.silhouettes[item.target]
        user = synthesize_user_mask(sil, stream(seed, "user-mask", item.id))[0] if sil.any() else None
        for r in item.refs:
            out.append(PolyptychSample([item.images[r]], item.images[item.target], sil, user,
                                       [item.captions[r]], item.captions[item.target], f"{item.id}/{r}"))
    return out


def sample_bucket(sample: PolyptychSample) -> Bucket:
    return sample.bucket


# -- multi-reference synthesis -----------------------------------------------


def synthesize_multiref(
    model,
    items: Sequence[Item],
    world: WorldConfig,
    vocab: Vocab,
    seed: int,
    embed: EmbedProvider,
    threshold: float = 0.2,
    steps: int = 20,
    per_item: int = 1,
) -> tuple[list[PolyptychSample], list[str]]:
    """New target scenes drawn by the diptych model, stitched behind 2-3 real references.

    Each generated target is segmented (its silhouette is the dominant blob),
    then checked against its references with the curation identity rule.
    """
    samples, notes = [], []
    for item in items:
        real = [i for i in range(len(item.images)) if item.silhouettes[i].any()]
        if len(real) < 2:
            notes.append(f"skip {item.id}: fewer than 2 non-blank images")
            continue
        for j in range(per_item):
            rng = stream(seed, "multiref", item.id, j)
            k = int(rng.integers(2, min(3, len(real)) + 1))
            chosen = [int(i) for i in rng.choice(real, size=k, replace=False)]
            scene = random_scene(world, rng, item.size, item.identity)
            caption = caption_for(item.identity, scene)
            blank = np.broadcast_to(world.background_rgb(scene["bg"], scene["place"]), item.images[0].shape).copy()
            canvas = assemble_polyptych([item.images[chosen[0]]], blank)
            mask = np.ones(canvas.pixels.shape[:2])
            mask[:, canvas.target.offset:] = 0.0
            text = compose_prompt(vocab, item.captions[chosen[0]], caption)
            try:
                out = euler_sample_batch(model, [canvas], [mask], [text], [TaskMode.POSITION_FREE], steps,
                                         [child_seed(seed, "multiref-noise", item.id, j)], vocab)[0]
            except FloatingPointError as exc:
                notes.append(f"skip {item.id}/{j}: generation failed ({exc})")
                continue
            generated = quantize(extract_panel(out, canvas.target))
            sil = dominant_blob(generated)
            if not sil.any():
                notes.append(f"discard {item.id}/{j}: no subject in generated target")
                continue
            target_vec = embed.embed(generated)
            worst = min(float(target_vec @ embed.embed(item.images[i])) for i in chosen)
            if worst < threshold:
                notes.append(f"discard {item.id}/{j}: identity cosine {worst:.4f} < {threshold}")
                continue
            user, _ = synthesize_user_mask(sil, stream(seed, "multiref-user", item.id, j))
            samples.append(PolyptychSample(
                refs=[item.images[i] for i in chosen],
                target=generated,
                silhouette=sil,
                user_mask=user,
                ref_captions=[item.captions[i] for i in chosen],
                target_caption=caption,
                item_id=f"{item.id}/syn{j}",
            ))
    return samples, notes


# -- shard files ---------------------------------------------------------------


def item_bucket(item: Item) -> Bucket:
    h, w = item.size
    return Bucket(h, w, len(item.refs))


def write_item(root: Path, item: Item) -> None:
    d = root / item.id
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"id={item.id}", f"images={len(item.images)}", f"target={item.target}", f"bucket={item_bucket(item)}"]
    for key in ("shape", "color", "textured", "rigid", "radius"):
        lines.append(f"identity.{key}={item.identity[key]!r}" if key == "radius" else f"identity.{key}={item.identity[key]}")
    for k, (img, sil, cap, scene) in enumerate(zip(item.images, item.silhouettes, item.captions, item.scenes)):
        write_ppm(d / f"image{k}.ppm", img)
        write_pgm(d / f"mask{k}.pgm", sil.astype(np.float64))
        role = "target" if k == item.target else "reference"
        lines += [f"image.{k}.role={role}", f"image.{k}.caption={cap}", f"image.{k}.kind={scene.get('kind', 'object')}"]
        lines += [f"image.{k}.{f}={scene[f]!r}" for f in ("cy", "cx", "ry", "rx")]
        lines += [f"image.{k}.bg={scene['bg']}", f"image.{k}.place={scene['place']}"]
    (d / "meta.txt").write_text("\n".join(lines) + "\n")


def read_item(d: Path) -> Item:
    kv = read_kv(d / "meta.txt")
    n = int(kv["images"])
    ident = {
        "shape": kv["identity.shape"],
        "color": kv["identity.color"],
        "textured": kv["identity.textured"] == "True",
        "rigid": kv["identity.rigid"] == "True",
        "radius": float(kv["identity.radius"]),
    }
    images = [read_ppm(d / f"image{k}.ppm") for k in range(n)]
    sils = [read_pgm(d / f"mask{k}.pgm") > 0.5 for k in range(n)]
    caps = [kv[f"image.{k}.caption"] for k in range(n)]
    scenes = [{"bg": kv[f"image.{k}.bg"], "place": kv[f"image.{k}.place"], "kind": kv[f"image.{k}.kind"],
               **{f: float(kv[f"image.{k}.{f}"]) for f in ("cy", "cx", "ry", "rx")}} for k in range(n)]
    return Item(kv["id"], images, sils, caps, ident, scenes, int(kv["target"]))


def shard_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.txt":
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_shard(root, items: Sequence[Item], extra: dict | None = None) -> dict:
    root = Path(root)
    (root / "items").mkdir(parents=True, exist_ok=True)
    for item in items:
        write_item(root / "items", item)
    counts: dict[str, int] = {}
    for item in items:
        counts[str(item_bucket(item))] = counts.get(str(item_bucket(item)), 0) + 1
    manifest = {"items": len(items), **{f"bucket.{k}": v for k, v in sorted(counts.items())}}
    manifest.update(extra or {})
    manifest["hash"] = shard_hash(root)
    (root / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))
    return manifest


def read_shard(root) -> list[Item]:
    root = Path(root)
    if not (root / "manifest.txt").exists():
        raise ShardError(f"{root} has no manifest.txt")
    items_dir = root / "items"
    if not items_dir.exists():
        return []
    return [read_item(d) for d in sorted(items_dir.iterdir()) if d.is_dir()]


# -- embedding tables ----------------------------------------------------------

EMBED_MAGIC = b"ICXE"


def write_embeddings(path, table: dict[str, np.ndarray]) -> None:
    """Binary table: magic, u32 count, u32 dim, then (u16 id length, id, dim float64) records."""
    dims = {len(v) for v in table.values()}
    if len(dims) > 1:
        raise ShardError(f"embedding table mixes dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0
    chunks = [EMBED_MAGIC, struct.pack("<II", len(table), dim)]
    for key in sorted(table):
        v = np.asarray(table[key], dtype="<f8")
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ShardError(f"embedding for {key!r} is not unit-norm")
        enc = key.encode()
        chunks.append(struct.pack("<H", len(enc)) + enc + v.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_embeddings(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != EMBED_MAGIC:
        raise ShardError(f"{path}: not an embedding table")
    count, dim = struct.unpack_from("<II", data, 4)
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        key = data[pos : pos + n].decode()
        pos += n
        out[key] = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).astype(np.float64)
        pos += 8 * dim
    return out
