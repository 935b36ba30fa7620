"""Rectified-flow training and sampling on polyptych canvases.

Orientation: ``x_t = t * data + (1 - t) * noise``, so t=0 is pure noise, t=1 is
data, and the regression target ``data - noise`` does not depend on t.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .bucketing import Bucket, bucket_batches, starved
from .geometry import Canvas, assemble_polyptych, extract_panel, grid_positions, patch_grid, patchify, token_tags, unpatchify
from .icma import TaskMode
from .masks import DegenerateMaskError, UserMaskRules, synthesize_user_mask
from .model import DiT, TextLengthError, set_phase
from .seeding import child_seed, stream
from .tensor import DTYPE, AdamW

log = logging.getLogger(__name__)

PAD, REF_SCENE, TARGET_SCENE, AND = "<pad>", "[REF-SCENE]", "[TARGET-SCENE]", "and"
SPECIALS = (PAD, REF_SCENE, TARGET_SCENE, AND)


class OutOfVocabularyError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class StageError(ValueError):
    pass


class Vocab:
    def __init__(self, words: Sequence[str]):
        rest = sorted(set(words) - set(SPECIALS))
        self.words = list(SPECIALS) + rest
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in text.split():
            if w not in self.index:
                raise OutOfVocabularyError(f"word {w!r} is not in the caption vocabulary")
            ids.append(self.index[w])
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids if i != self.index[PAD])

    def pad(self, ids: Sequence[int], length: int) -> np.ndarray:
        if len(ids) > length:
            raise TextLengthError(f"prompt has {len(ids)} tokens, limit is {length}")
        return np.asarray(list(ids) + [self.index[PAD]] * (length - len(ids)), dtype=np.int64)


def compose_prompt(
    vocab: Vocab,
    ref_scene: "str | Sequence[str]",
    target_scene: str,
    drop_rng: np.random.Generator | None = None,
    p_drop: float = 0.0,
) -> list[int]:
    """``[REF-SCENE] a [TARGET-SCENE] b``; the reference part is omitted with probability ``p_drop``."""
    if not isinstance(ref_scene, str):
        ref_scene = f" {AND} ".join(ref_scene)
    u = drop_rng.random() if drop_rng is not None else 1.0
    drop = p_drop >= 1.0 or u < p_drop
    text = f"{TARGET_SCENE} {target_scene}" if drop or not ref_scene else f"{REF_SCENE} {ref_scene} {TARGET_SCENE} {target_scene}"
    return vocab.encode(text)


def noising(x_data, noise, t):
    """Returns ``(x_t, velocity_target)``."""
    x_data = np.asarray(x_data) if not torch.is_tensor(x_data) else x_data
    if tuple(x_data.shape) != tuple(noise.shape):
        raise ValueError(f"data {tuple(x_data.shape)} and noise {tuple(noise.shape)} differ in shape")
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return t * x_data + (1 - t) * noise, x_data - noise


def make_mask(
    mode: TaskMode,
    canvas: Canvas,
    silhouette: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    user_mask: np.ndarray | None = None,
    rules: UserMaskRules | None = None,
) -> np.ndarray:
    """Full-canvas keep-map: 1 keeps the pixel, 0 asks for it to be generated."""
    mode = TaskMode(mode)
    m = np.ones((canvas.height, canvas.width))
    tp = canvas.target
    panel = m[:, tp.offset : tp.offset + tp.width]
    if mode is TaskMode.POSITION_FREE:
        panel[:] = 0.0
        return m
    sil = None if silhouette is None else np.asarray(silhouette, dtype=bool)
    if sil is None or not sil.any():
        raise DegenerateMaskError(f"{mode.label} mode needs a non-empty target silhouette")
    if mode is TaskMode.PRECISE:
        region = sil
    elif user_mask is not None:
        region = np.asarray(user_mask, dtype=bool)
    else:
        region, _ = synthesize_user_mask(sil, rng if rng is not None else np.random.default_rng(0), rules)
    panel[region] = 0.0
    return m


def build_model_input(canvas_pixels: np.ndarray, mask: np.ndarray, noise: np.ndarray, t: float, panels, p: int):
    """Tokens of ``[x_t | canvas * M | M]`` stacked along channels."""
    if canvas_pixels.shape != noise.shape or mask.shape != canvas_pixels.shape[:2]:
        raise ValueError(
            f"channel mismatch: canvas {canvas_pixels.shape}, noise {noise.shape}, mask {mask.shape}"
        )
    x_t, _ = noising(canvas_pixels, noise, t)
    m = mask[..., None]
    return patchify(np.concatenate([x_t, canvas_pixels * m, m], axis=-1), panels, p)


@dataclass
class PolyptychSample:
    refs: list[np.ndarray]
    target: np.ndarray
    silhouette: np.ndarray | None = None
    user_mask: np.ndarray | None = None
    ref_captions: list[str] = field(default_factory=list)
    target_caption: str = ""
    item_id: str = ""

    @property
    def bucket(self) -> Bucket:
        return Bucket(self.target.shape[0], self.target.shape[1], len(self.refs))

    def canvas(self) -> Canvas:
        return assemble_polyptych(self.refs, self.target)


@dataclass
class TrainConfig:
    mode_probs: tuple[float, float, float] = (0.4, 0.3, 0.3)
    prompt_drop: float = 0.3
    steps: int = 2000
    batch_size: int = 4
    lr: float = 5e-5
    weight_decay: float = 0.0
    seed: int = 0
    t_sampling: str = "uniform"
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    target_only: bool = False
    masked_only: bool = False
    checkpoint_every: int = 0
    buckets: tuple[str, ...] = ()

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        probs = np.asarray(self.mode_probs, dtype=float)
        if probs.shape != (3,) or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"mode_probs must be three non-negative numbers summing to 1, got {self.mode_probs}")
        if not 0.0 <= self.prompt_drop <= 1.0:
            raise ValueError("prompt_drop must be in [0, 1]")
        if self.t_sampling not in ("uniform", "logit_normal"):
            raise ValueError("t_sampling must be uniform or logit_normal")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be constant or cosine")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.target_only and self.masked_only:
            raise ValueError("target_only and masked_only are exclusive")

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``: linear warmup, then constant or cosine decay to zero."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.lr_schedule == "constant":
            return self.lr
        span = max(self.steps - self.warmup_steps, 1)
        frac = min((step - self.warmup_steps) / span, 1.0)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def sample_modes(rng: np.random.Generator, probs, n: int) -> np.ndarray:
    return rng.choice(3, size=n, p=np.asarray(probs, dtype=float))


def sample_t(rng: np.random.Generator, how: str = "uniform") -> float:
    if how == "logit_normal":
        return float(1.0 / (1.0 + np.exp(-rng.standard_normal())))
    return float(rng.random())


@dataclass
class ModelBatch:
    tokens: torch.Tensor
    velocity: torch.Tensor
    tags: np.ndarray
    positions: np.ndarray
    text: np.ndarray
    t: torch.Tensor
    modes: np.ndarray
    weights: torch.Tensor


def prepare_batch(
    samples: Sequence[PolyptychSample],
    vocab: Vocab,
    cfg: TrainConfig,
    rng: np.random.Generator,
    patch: int,
    max_text_len: int,
    stage: int = 1,
    modes: Sequence[int] | None = None,
) -> ModelBatch:
    """Noised channel-concat tokens for one homogeneous batch.

    Stage 0 (base pretraining) masks the whole canvas and keeps the full prompt,
    i.e. plain text-to-image over the polyptych.
    """
    if modes is None:
        modes = [TaskMode.POSITION_FREE] * len(samples) if stage == 0 else sample_modes(rng, cfg.mode_probs, len(samples))
    tokens, vel, texts, ts, unknown = [], [], [], [], []
    layout = None
    for s, mode in zip(samples, modes):
        canvas = s.canvas()
        if layout is None:
            layout = canvas
        elif [(p.role, p.width) for p in canvas.panels] != [(p.role, p.width) for p in layout.panels] or canvas.height != layout.height:
            raise ValueError("batch mixes canvas layouts; bucket the samples first")
        if stage == 0:
            mask = np.zeros((canvas.height, canvas.width))
        else:
            mask = make_mask(TaskMode(int(mode)), canvas, s.silhouette, rng, s.user_mask)
        noise = rng.standard_normal(canvas.pixels.shape)
        t = sample_t(rng, cfg.t_sampling)
        seq = build_model_input(canvas.pixels, mask, noise, t, canvas.panels, patch)
        tokens.append(seq.tokens)
        # share of each token's pixels the model has to generate
        unknown.append(patch_grid(1.0 - mask[..., None], patch).mean(axis=-1))
        vel.append(patch_grid(canvas.pixels - noise, patch))
        drop = 0.0 if stage == 0 else cfg.prompt_drop
        texts.append(vocab.pad(compose_prompt(vocab, s.ref_captions, s.target_caption, rng, drop), max_text_len))
        ts.append(t)
    tags = token_tags(layout.panels, layout.height, layout.width, patch)
    if cfg.target_only:
        weights = torch.as_tensor((tags < 0).astype(np.float64))
    elif cfg.masked_only and stage != 0:
        weights = torch.as_tensor(np.stack(unknown), dtype=DTYPE)
    else:
        weights = torch.ones(len(tags), dtype=DTYPE)
    return ModelBatch(
        tokens=torch.as_tensor(np.stack(tokens), dtype=DTYPE),
        velocity=torch.as_tensor(np.stack(vel), dtype=DTYPE),
        tags=tags,
        positions=grid_positions(layout.height, layout.width, patch),
        text=np.stack(texts),
        t=torch.as_tensor(ts, dtype=DTYPE),
        modes=np.asarray(modes, dtype=np.int64),
        weights=weights,
    )


def velocity_loss(pred: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over tokens of the squared per-token error norm."""
    per_token = ((pred - target) ** 2).sum(dim=-1)
    if weights is None:
        return per_token.mean()
    w = weights.expand_as(per_token)
    return (per_token * w).sum() / w.sum()


def polyptych_loss(model: DiT, samples, vocab: Vocab, rng, cfg: TrainConfig, stage: int = 1, modes=None) -> torch.Tensor:
    b = prepare_batch(samples, vocab, cfg, rng, model.cfg.patch, model.cfg.max_text_len, stage, modes)
    pred = model(b.tokens, b.tags, b.positions, b.text, b.t, b.modes)
    return velocity_loss(pred, b.velocity, b.weights)


def baseline_seq_loss(model: DiT, samples, vocab: Vocab, rng, cfg: TrainConfig, return_pred: bool = False):
    """Sequence-concat conditioning: ``[Z_t; Z_ref]`` with no mask channels, loss on the target rows only."""
    p = model.cfg.patch
    toks, vel, texts, ts = [], [], [], []
    for s in samples:
        canvas = s.canvas()
        tp = canvas.target
        noise = rng.standard_normal(s.target.shape)
        t = sample_t(rng, cfg.t_sampling)
        x_t, v = noising(s.target, noise, t)
        pad = np.zeros(s.target.shape[:2] + (s.target.shape[2] + 1,))
        rows = [patch_grid(np.concatenate([x_t, pad], axis=-1), p)]
        for r in s.refs:
            rows.append(patch_grid(np.concatenate([r, np.zeros(r.shape[:2] + (r.shape[2] + 1,))], axis=-1), p))
        toks.append(np.concatenate(rows))
        vel.append(patch_grid(v, p))
        texts.append(vocab.pad(compose_prompt(vocab, s.ref_captions, s.target_caption, rng, cfg.prompt_drop),
                               model.cfg.max_text_len))
        ts.append(t)
    canvas = samples[0].canvas()
    tags_all = token_tags(canvas.panels, canvas.height, canvas.width, p)
    pos_all = grid_positions(canvas.height, canvas.width, p)
    tgt = tags_all < 0
    tags = np.concatenate([tags_all[tgt], tags_all[~tgt]])
    positions = np.concatenate([pos_all[tgt], pos_all[~tgt]])
    n_t = int(tgt.sum())
    pred = model(torch.as_tensor(np.stack(toks), dtype=DTYPE), tags, positions, np.stack(texts),
                 torch.as_tensor(ts, dtype=DTYPE), TaskMode.POSITION_FREE)[:, :n_t]
    loss = velocity_loss(pred, torch.as_tensor(np.stack(vel), dtype=DTYPE))
    return (loss, pred) if return_pred else loss


# -- sampling ----------------------------------------------------------------


def euler_integrate(field_fn: Callable, x0, steps: int, t0: float = 0.0, t1: float = 1.0):
    """Forward Euler on a uniform grid; raises NumericalError naming the failing step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = (t1 - t0) / steps
    x = x0
    for k in range(steps):
        x = x + dt * field_fn(x, t0 + k * dt)
        if not np.isfinite(np.asarray(x)).all():
            raise NumericalError(f"non-finite state after Euler step {k}")
    return x


@torch.no_grad()
def euler_sample_batch(
    model: DiT,
    canvases: Sequence[Canvas],
    masks: Sequence[np.ndarray],
    texts: Sequence[Sequence[int]],
    modes: Sequence[int],
    steps: int,
    seeds: Sequence[int],
    vocab: Vocab,
    paste_known: bool = True,
) -> np.ndarray:
    """Integrate the velocity field from noise (t=0) to data (t=1) for canvases sharing one layout."""
    p = model.cfg.patch
    ref = canvases[0]
    h, w, c = ref.pixels.shape
    known = np.stack([cv.pixels for cv in canvases])
    m = np.stack(masks)[..., None]
    context = np.concatenate([known * m, np.broadcast_to(m, known.shape[:3] + (1,))], axis=-1)
    tags = token_tags(ref.panels, h, w, p)
    positions = grid_positions(h, w, p)
    text = np.stack([vocab.pad(t, model.cfg.max_text_len) for t in texts])
    modes = np.asarray(modes, dtype=np.int64)
    noise = np.stack([stream(s, "euler-noise").standard_normal((h, w, c)) for s in seeds])

    def velocity(x, t):
        # channels are stacked per pixel before patching, exactly as in training
        full = np.concatenate([x, context], axis=-1)
        tokens = torch.as_tensor(np.stack([patch_grid(f, p) for f in full]), dtype=DTYPE)
        out = model(tokens, tags, positions, text,
                    torch.full((len(x),), t, dtype=DTYPE), modes).numpy()
        return np.stack([unpatchify(o, h, w, p, c) for o in out])

    x = euler_integrate(velocity, noise, steps)
    if paste_known:
        x = m * known + (1 - m) * x
    return np.clip(x, 0.0, 1.0)


def euler_sample(
    model: DiT,
    refs: Sequence[np.ndarray],
    target_known: np.ndarray,
    mask: np.ndarray,
    text_ids: Sequence[int],
    mode: TaskMode,
    steps: int,
    seed: int,
    vocab: Vocab,
    paste_known: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Generate one canvas; returns ``(canvas, target_panel)``."""
    canvas = assemble_polyptych(refs, target_known)
    out = euler_sample_batch(model, [canvas], [mask], [text_ids], [int(mode)], steps, [seed], vocab, paste_known)[0]
    return out, extract_panel(out, canvas.target).copy()


# -- training ----------------------------------------------------------------


def smoothed(losses: Sequence[float], window: int = 50) -> np.ndarray:
    x = np.asarray(losses, dtype=float)
    if len(x) < window:
        return np.array([x.mean()]) if len(x) else x
    return np.convolve(x, np.ones(window) / window, mode="valid")


@dataclass
class StageResult:
    losses: list[float]
    optimizer: AdamW
    steps_run: int


def stage_samples(samples: Sequence[PolyptychSample], stage: int) -> list[PolyptychSample]:
    if stage == 1:
        chosen = [s for s in samples if len(s.refs) == 1]
        if not chosen:
            raise StageError("stage 1 needs single-reference diptychs")
        return chosen
    if stage == 2:
        if not any(len(s.refs) >= 2 for s in samples):
            raise StageError("stage 2 needs multi-reference polyptychs")
        return list(samples)
    if stage == 0:
        return list(samples)
    raise StageError(f"unknown stage {stage}")


def make_optimizer(model: DiT, cfg: TrainConfig) -> AdamW:
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    return AdamW(named, lr=cfg.lr, weight_decay=cfg.weight_decay)


def run_stage(
    model: DiT,
    samples: Sequence[PolyptychSample],
    cfg: TrainConfig,
    stage: int,
    vocab: Vocab,
    *,
    start_step: int = 0,
    optimizer: AdamW | None = None,
    log_path: "str | Path | None" = None,
    on_checkpoint: Callable[[int, DiT, AdamW], None] | None = None,
    stop_after: int | None = None,
) -> StageResult:
    """Train for ``cfg.steps`` steps (0 = base pretraining, 1 = diptychs, 2 = 1-3 references).

    Step k draws its batch from a seeded epoch schedule and its noise from the
    stream ``(seed, stage, k)``, so resuming at any step reproduces the
    uninterrupted run exactly.
    """
    set_phase(model, "pretrain" if stage == 0 else "customize")
    data = stage_samples(samples, stage)
    keys = [s.bucket for s in data]
    if cfg.buckets:
        buckets = [Bucket.parse(b) for b in cfg.buckets]
        for b in starved(keys, buckets):
            log.warning("bucket %s has no samples in stage %d; skipped", b, stage)
        buckets = [b for b in buckets if b in set(keys)]
        keep = [i for i, k in enumerate(keys) if k in set(buckets)]
        data = [data[i] for i in keep]
        keys = [keys[i] for i in keep]
    else:
        buckets = sorted(set(keys))
    if stage == 2:
        for missing in sorted({1, 2, 3} - {k.ref_count for k in keys}):
            log.warning("stage 2 has no samples with %d reference(s); bucket skipped", missing)
    names = [s.item_id for s in data]
    sched_seed = child_seed(cfg.seed, "schedule", stage)
    epochs: dict[int, list] = {}

    def batch_for(step: int):
        first = epochs.setdefault(0, bucket_batches(keys, buckets, cfg.batch_size, sched_seed, 0, names))
        e, j = divmod(step, len(first))
        if e not in epochs:
            epochs.clear()
            epochs[0] = first
            epochs[e] = bucket_batches(keys, buckets, cfg.batch_size, sched_seed, e, names)
        return epochs[e][j]

    opt = optimizer or make_optimizer(model, cfg)
    losses = []
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    fh = open(log_path, "a") if log_path else None
    try:
        for step in range(start_step, end):
            batch = batch_for(step)
            rng = stream(cfg.seed, "train", stage, step)
            modes = None
            if stage > 0:
                modes = sample_modes(rng, cfg.mode_probs, len(batch.indices))
            opt.state.lr = cfg.lr_at(step)
            opt.zero_grad()
            loss = polyptych_loss(model, [data[i] for i in batch.indices], vocab, rng, cfg, stage, modes)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at stage {stage} step {step}")
            loss.backward()
            opt.step()
            value = float(loss.detach())
            losses.append(value)
            if fh:
                mode_txt = "t2i" if modes is None else ",".join(TaskMode(int(m)).label for m in modes)
                fh.write(f"step={step + 1} stage={stage} bucket={batch.bucket} mode={mode_txt} loss={value!r} lr={opt.state.lr!r}\n")
            if on_checkpoint and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                on_checkpoint(step + 1, model, opt)
    finally:
        if fh:
            fh.close()
    return StageResult(losses, opt, end - start_step)
