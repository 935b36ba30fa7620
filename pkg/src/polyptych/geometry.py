"""Polyptych canvases, patch tokens and 2-D rotary positions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

TARGET = -1


class PanelError(ValueError):
    pass


class BoundaryError(ValueError):
    pass


class RopeConfigError(ValueError):
    pass


def role_name(tag: int) -> str:
    return "target" if tag == TARGET else f"reference:{tag}"


def parse_role(text: str) -> int:
    if text == "target":
        return TARGET
    kind, _, idx = text.partition(":")
    if kind != "reference" or not idx.isdigit():
        raise PanelError(f"unknown panel role {text!r}")
    return int(idx)


@dataclass(frozen=True)
class Panel:
    role: int  # TARGET or reference index
    offset: int
    width: int

    @property
    def is_target(self) -> bool:
        return self.role == TARGET


@dataclass
class Canvas:
    pixels: np.ndarray  # H x W x C
    panels: list[Panel]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def target(self) -> Panel:
        return next(p for p in self.panels if p.is_target)

    @property
    def n_refs(self) -> int:
        return len(self.panels) - 1


def assemble_polyptych(
    refs: Sequence[np.ndarray],
    target: np.ndarray,
    unconditional: bool = False,
) -> Canvas:
    """Stitch references (by index) and then the target left to right."""
    if not refs and not unconditional:
        raise PanelError("at least one reference panel is required outside unconditional mode")
    images = list(refs) + [target]
    h, c = target.shape[0], target.shape[2]
    for i, img in enumerate(images):
        if img.ndim != 3:
            raise PanelError(f"panel {i} must be H x W x C, got shape {img.shape}")
        if img.shape[0] != h or img.shape[2] != c:
            raise PanelError(
                f"panel {i} is {img.shape[0]}x{img.shape[2]}ch, target is {h}x{c}ch; heights and channels must match"
            )
    panels, offset = [], 0
    for i, img in enumerate(images):
        role = TARGET if i == len(refs) else i
        panels.append(Panel(role, offset, img.shape[1]))
        offset += img.shape[1]
    return Canvas(np.concatenate(images, axis=1), panels)


def extract_panel(pixels: np.ndarray, panel: Panel) -> np.ndarray:
    return pixels[:, panel.offset : panel.offset + panel.width]


@dataclass
class TokenSequence:
    tokens: np.ndarray  # n x (p*p*C)
    tags: np.ndarray  # n, TARGET or reference index
    positions: np.ndarray  # n x 2 (row, col) in patch units
    patch: int
    height: int
    width: int
    channels: int

    def __len__(self) -> int:
        return self.tokens.shape[0]


def patch_grid(x: np.ndarray, p: int) -> np.ndarray:
    """H x W x C -> raster-ordered (H/p * W/p) x (p*p*C)."""
    h, w, c = x.shape
    if h % p or w % p:
        raise BoundaryError(f"canvas {h}x{w} is not divisible by patch size {p}")
    g = x.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return g.reshape((h // p) * (w // p), p * p * c)


def unpatchify(tokens: np.ndarray, height: int, width: int, p: int, channels: int) -> np.ndarray:
    gh, gw = height // p, width // p
    if tokens.shape != (gh * gw, p * p * channels):
        raise BoundaryError(f"{tokens.shape} tokens do not tile a {height}x{width}x{channels} canvas at p={p}")
    g = tokens.reshape(gh, gw, p, p, channels).transpose(0, 2, 1, 3, 4)
    return g.reshape(height, width, channels)


def grid_positions(height: int, width: int, p: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height // p), np.arange(width // p), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def token_tags(panels: Sequence[Panel], height: int, width: int, p: int) -> np.ndarray:
    col_tag = np.full(width // p, np.iinfo(np.int64).min, dtype=np.int64)
    for panel in panels:
        if panel.offset % p or panel.width % p:
            raise BoundaryError(f"panel {role_name(panel.role)} at {panel.offset}+{panel.width} straddles a patch boundary")
        col_tag[panel.offset // p : (panel.offset + panel.width) // p] = panel.role
    if (col_tag == np.iinfo(np.int64).min).any():
        raise BoundaryError("panels do not cover the canvas width")
    return np.tile(col_tag, height // p)


def patchify(pixels: np.ndarray, panels: Sequence[Panel], p: int) -> TokenSequence:
    h, w, c = pixels.shape
    if sum(pn.width for pn in panels) != w:
        raise BoundaryError(f"panel widths sum to {sum(pn.width for pn in panels)}, canvas is {w} wide")
    return TokenSequence(
        tokens=patch_grid(pixels, p),
        tags=token_tags(panels, h, w, p),
        positions=grid_positions(h, w, p),
        patch=p,
        height=h,
        width=w,
        channels=c,
    )


class RopeTable:
    """Axial rotary angles: first half of the head dim turns with the row, second with the column."""

    def __init__(self, head_dim: int, base: float = 100.0):
        if head_dim % 4:
            raise RopeConfigError(f"head dim {head_dim} must be divisible by 4 for 2-axis rotary pairs")
        self.head_dim = head_dim
        self.base = base
        quarter = head_dim // 4
        self.freqs = base ** (-torch.arange(quarter, dtype=torch.float64) / quarter)

    def angles(self, positions) -> torch.Tensor:
        pos = torch.as_tensor(np.asarray(positions), dtype=torch.float64)
        if pos.dim() != 2 or pos.shape[1] != 2:
            raise RopeConfigError(f"positions must be n x 2, got {tuple(pos.shape)}")
        row = pos[:, :1] * self.freqs
        col = pos[:, 1:] * self.freqs
        return torch.cat([row, col], dim=1)  # n x head_dim/2


def rope_apply(x: torch.Tensor, positions, table: RopeTable) -> torch.Tensor:
    """Rotate adjacent pairs of the last axis of ``x`` (..., n, head_dim)."""
    if x.shape[-1] != table.head_dim:
        raise RopeConfigError(f"vector dim {x.shape[-1]} does not match rope head dim {table.head_dim}")
    theta = table.angles(positions)
    cos, sin = torch.cos(theta), torch.sin(theta)
    pairs = x.reshape(*x.shape[:-1], -1, 2)
    a, b = pairs[..., 0], pairs[..., 1]
    rotated = torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1)
    return rotated.reshape(x.shape)


# -- pixmap and layout files -------------------------------------------------


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    return to_bytes(img).astype(np.float64) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    Image.fromarray(to_bytes(img), mode="RGB").save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    Image.fromarray(to_bytes(mask), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_layout(path, canvas: Canvas, **extra) -> None:
    lines = [f"height={canvas.height}", f"width={canvas.width}", f"panels={len(canvas.panels)}"]
    for i, pn in enumerate(canvas.panels):
        lines += [
            f"panel.{i}.role={role_name(pn.role)}",
            f"panel.{i}.offset={pn.offset}",
            f"panel.{i}.width={pn.width}",
        ]
    lines += [f"{k}={v}" for k, v in extra.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def read_layout(path) -> list[Panel]:
    kv = read_kv(path)
    return [
        Panel(parse_role(kv[f"panel.{i}.role"]), int(kv[f"panel.{i}.offset"]), int(kv[f"panel.{i}.width"]))
        for i in range(int(kv["panels"]))
    ]
