"""Resolution / reference-count buckets and homogeneous batch schedules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .seeding import stream


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Bucket:
    height: int
    width: int
    ref_count: int

    def __str__(self) -> str:
        return f"{self.height}x{self.width}/r{self.ref_count}"

    @classmethod
    def parse(cls, text: str) -> "Bucket":
        size, _, refs = text.partition("/r")
        h, _, w = size.partition("x")
        return cls(int(h), int(w), int(refs))


@dataclass
class Batch:
    bucket: Bucket
    indices: list[int]


def bucket_batches(
    keys: Sequence[Bucket],
    buckets: Sequence[Bucket],
    batch_size: int,
    seed: int,
    epoch: int = 0,
    names: Sequence[Hashable] | None = None,
) -> list[Batch]:
    """One epoch: every sample once, batches never mix buckets.

    Samples are shuffled within their bucket, chunked (last chunk may be short),
    and the chunks are interleaved in a seeded order.
    """
    if batch_size < 1:
        raise ScheduleError("batch_size must be >= 1")
    allowed = set(buckets)
    members: dict[Bucket, list[int]] = {b: [] for b in buckets}
    for i, key in enumerate(keys):
        if key not in allowed:
            label = names[i] if names is not None else i
            raise ScheduleError(f"sample {label!r} has bucket {key} which is not in the bucket list")
        members[key].append(i)
    rng = stream(seed, "bucket-epoch", epoch)
    batches = []
    for b in sorted(members):
        idx = np.asarray(members[b], dtype=np.int64)
        idx = idx[rng.permutation(len(idx))]
        for s in range(0, len(idx), batch_size):
            batches.append(Batch(b, idx[s : s + batch_size].tolist()))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def starved(keys: Sequence[Bucket], buckets: Sequence[Bucket]) -> list[Bucket]:
    present = set(keys)
    return [b for b in buckets if b not in present]
