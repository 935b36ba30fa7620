"""Silhouettes, foreground segmentation and synthetic user-drawn masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError


class DegenerateMaskError(ValueError):
    pass


@dataclass
class UserMaskRules:
    dilate_radius: tuple[int, int] = (1, 3)
    bbox_pad: tuple[int, int] = (1, 3)
    hull_points: tuple[int, int] = (3, 8)
    hull_margin: tuple[int, int] = (1, 4)
    min_ratio: float = 1.2
    max_ratio: float = 4.0
    max_tries: int = 32


FAMILIES = ("dilate", "bbox", "hull")


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius)) | mask


def bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1], cols[0], cols[-1]


def padded_bbox(mask: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    h, w = mask.shape
    r0, r1, c0, c1 = bbox(mask)
    out = np.zeros_like(mask, dtype=bool)
    out[max(r0 - pad[0], 0) : min(r1 + pad[1], h - 1) + 1, max(c0 - pad[2], 0) : min(c1 + pad[3], w - 1) + 1] = True
    return out


def convex_blob(mask: np.ndarray, rng: np.random.Generator, n_points: int, margin: int) -> np.ndarray:
    """Convex hull of the silhouette and a few random points near its bounding box."""
    h, w = mask.shape
    r0, r1, c0, c1 = bbox(mask)
    pts = np.argwhere(mask).astype(np.float64)
    extra = np.column_stack([
        rng.uniform(r0 - margin, r1 + margin, n_points),
        rng.uniform(c0 - margin, c1 + margin, n_points),
    ])
    try:
        hull = Delaunay(np.vstack([pts, extra]))
    except QhullError:
        return padded_bbox(mask, (margin,) * 4)
    grid = np.argwhere(np.ones((h, w), dtype=bool)).astype(np.float64)
    inside = (hull.find_simplex(grid, tol=1e-9) >= 0).reshape(h, w)
    return inside | mask


def touches_all_borders(mask: np.ndarray) -> bool:
    return bool(mask[0].any() and mask[-1].any() and mask[:, 0].any() and mask[:, -1].any())


def synthesize_user_mask(
    precise: np.ndarray,
    rng: np.random.Generator,
    rules: UserMaskRules | None = None,
) -> tuple[np.ndarray, str]:
    """A rough superset of ``precise``, as a user would scribble it. Returns (mask, family)."""
    rules = rules or UserMaskRules()
    precise = np.asarray(precise, dtype=bool)
    area = precise.sum()
    if area == 0:
        raise DegenerateMaskError("cannot draw a user mask around an empty silhouette")
    if touches_all_borders(precise):
        return padded_bbox(precise, (0, 0, 0, 0)), "bbox"
    family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    for _ in range(rules.max_tries):
        if family == "dilate":
            out = dilate(precise, int(rng.integers(rules.dilate_radius[0], rules.dilate_radius[1] + 1)))
        elif family == "bbox":
            pad = tuple(int(v) for v in rng.integers(rules.bbox_pad[0], rules.bbox_pad[1] + 1, size=4))
            out = padded_bbox(precise, pad)
        else:
            out = convex_blob(
                precise, rng,
                int(rng.integers(rules.hull_points[0], rules.hull_points[1] + 1)),
                int(rng.integers(rules.hull_margin[0], rules.hull_margin[1] + 1)),
            )
        if rules.min_ratio <= out.sum() / area <= rules.max_ratio:
            return out, family
    # a one-pixel cross dilation is the tightest rule-conforming fallback
    return ndimage.binary_dilation(precise) | precise, "dilate"


# -- segmentation ------------------------------------------------------------


def background_color(image: np.ndarray) -> np.ndarray:
    border = np.concatenate([image[0], image[-1], image[:, 0], image[:, -1]], axis=0)
    return np.median(border, axis=0)


def dominant_blob(image: np.ndarray, threshold: float = 0.2, min_area: int = 3) -> np.ndarray:
    """Largest 4-connected region that differs from the border colour; empty if none."""
    bg = background_color(image)
    fg = np.abs(image - bg).max(axis=-1) > threshold
    labels, count = ndimage.label(fg)
    if count == 0:
        return np.zeros(fg.shape, dtype=bool)
    sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, count + 1))
    best = int(np.argmax(sizes))
    if sizes[best] < min_area:
        return np.zeros(fg.shape, dtype=bool)
    return labels == best + 1
