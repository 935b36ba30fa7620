"""Named random streams derived from one root seed.

Every consumer asks for ``stream(seed, "purpose", ...)``; the child seed depends
only on the root seed and the names, so adding a consumer never shifts another.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np
import torch

SEED_ENV = "ICX_SEED"


def _name_key(name) -> int:
    digest = hashlib.blake2b(str(name).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def child_seed(seed: int, *names) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_name_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, *names))


def torch_generator(seed: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(child_seed(seed, *names))
    return g


def resolve_seed(configured: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else int(configured)
