"""In-context multi-modal attention.

Visual queries and keys get a role embedding (condition + reference index, or
target) plus a rotary term; text rows pass through untouched; a per-task bank
of register tokens is appended to keys and values only.
"""

from __future__ import annotations

import enum
import math

import numpy as np
import torch
from torch import nn

from .geometry import TARGET, RopeTable, rope_apply
from .tensor import DimensionError, matmul, softmax_rows

ROPE_STYLES = ("additive", "replace")


class ICMAConfigError(ValueError):
    pass


class TaskMode(enum.IntEnum):
    PRECISE = 0
    USER_DRAWN = 1
    POSITION_FREE = 2

    @property
    def label(self) -> str:
        return ("precise", "user_drawn", "position_free")[self.value]

    @property
    def position_aware(self) -> bool:
        return self is not TaskMode.POSITION_FREE

    @classmethod
    def parse(cls, text: "str | int | TaskMode") -> "TaskMode":
        if isinstance(text, (int, TaskMode)):
            return cls(int(text))
        key = text.strip().lower().replace("-", "_")
        aliases = {"precise": 0, "user_drawn": 1, "user": 1, "position_free": 2, "free": 2}
        if key not in aliases:
            raise ICMAConfigError(f"unknown task mode {text!r}; expected one of precise, user_drawn, position_free")
        return cls(aliases[key])


class BoundaryEmbeddings(nn.Module):
    def __init__(self, head_dim: int, ie_capacity: int):
        super().__init__()
        self.ce = nn.Parameter(torch.zeros(head_dim, dtype=torch.float64))
        self.te = nn.Parameter(torch.zeros(head_dim, dtype=torch.float64))
        self.ie = nn.Parameter(torch.zeros(ie_capacity, head_dim, dtype=torch.float64))

    def rows(self, tags) -> torch.Tensor:
        tags = torch.as_tensor(np.asarray(tags), dtype=torch.long)
        if tags.numel() and int(tags.max()) >= self.ie.shape[0]:
            raise ICMAConfigError(
                f"reference index {int(tags.max())} exceeds index-embedding capacity {self.ie.shape[0]}"
            )
        is_target = (tags == TARGET).unsqueeze(-1)
        ref_rows = self.ce + self.ie[tags.clamp(min=0)]
        return torch.where(is_target, self.te.expand_as(ref_rows), ref_rows)


class RegisterBank(nn.Module):
    def __init__(self, dim: int, num_tokens: int = 4, num_modes: int = len(TaskMode)):
        super().__init__()
        self.tokens = nn.Parameter(torch.zeros(num_modes, num_tokens, dim, dtype=torch.float64))

    def select(self, modes) -> torch.Tensor:
        """Bank rows for each sample: (B, num_tokens, dim)."""
        idx = torch.as_tensor(np.atleast_1d(np.array(modes, dtype=np.int64)))
        return self.tokens[idx]


def pos_augment(
    x: torch.Tensor,
    tags,
    positions,
    emb: BoundaryEmbeddings,
    rope: RopeTable | None,
    rope_style: str = "additive",
) -> torch.Tensor:
    """x + role embedding + RoPE(x); ``replace`` style drops the un-rotated x, ``rope=None`` drops RoPE."""
    if x.shape[-2] != len(tags) or len(tags) != len(positions):
        raise DimensionError(f"{x.shape[-2]} rows but {len(tags)} tags and {len(positions)} positions")
    e = emb.rows(tags)
    if rope is None:
        return x + e
    r = rope_apply(x, positions, rope)
    if rope_style == "additive":
        return x + e + r
    if rope_style == "replace":
        return r + e
    raise ICMAConfigError(f"rope_style must be one of {ROPE_STYLES}, got {rope_style!r}")


def _split(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(1, 2)


def _merge(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


def icma_attention(
    q_vis: torch.Tensor,
    k_vis: torch.Tensor,
    v_vis: torch.Tensor,
    q_txt: torch.Tensor,
    k_txt: torch.Tensor,
    v_txt: torch.Tensor,
    tags,
    positions,
    mode,
    emb: BoundaryEmbeddings,
    registers: RegisterBank,
    heads: int,
    rope: RopeTable | None,
    rope_style: str = "additive",
    register_logit_bias: float = 0.0,
) -> torch.Tensor:
    """Joint attention over ``[visual; text]`` rows with task registers as extra keys/values.

    Inputs are (B, rows, d); the result is (B, n + l, d) with visual rows first.
    ``register_logit_bias`` is added to the register score columns; a large
    negative value switches the registers off.
    """
    if q_vis.dim() == 2:
        args = [a.unsqueeze(0) for a in (q_vis, k_vis, v_vis, q_txt, k_txt, v_txt)]
        return icma_attention(*args, tags, positions, mode, emb, registers, heads, rope,
                              rope_style, register_logit_bias)[0]
    b, n, d = q_vis.shape
    if n < 1:
        raise DimensionError("icma needs at least one visual row")
    if d % heads:
        raise ICMAConfigError(f"model dim {d} not divisible by {heads} heads")
    if k_vis.shape != v_vis.shape or k_txt.shape != v_txt.shape:
        raise DimensionError(
            f"key/value rows differ: visual {tuple(k_vis.shape)} vs {tuple(v_vis.shape)}, "
            f"text {tuple(k_txt.shape)} vs {tuple(v_txt.shape)}"
        )
    if q_txt.shape[1] != k_txt.shape[1] or q_vis.shape != k_vis.shape:
        raise DimensionError(f"query rows ({n}+{q_txt.shape[1]}) do not match key rows ({k_vis.shape[1]}+{k_txt.shape[1]})")
    dh = d // heads
    modes = np.broadcast_to(np.asarray(mode, dtype=np.int64), (b,))
    reg = _split(registers.select(modes), heads)
    qv = pos_augment(_split(q_vis, heads), tags, positions, emb, rope, rope_style)
    kv = pos_augment(_split(k_vis, heads), tags, positions, emb, rope, rope_style)
    q = torch.cat([qv, _split(q_txt, heads)], dim=2)
    k = torch.cat([kv, _split(k_txt, heads), reg], dim=2)
    v = torch.cat([_split(v_vis, heads), _split(v_txt, heads), reg], dim=2)
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
    if register_logit_bias:
        bias = torch.zeros(k.shape[2], dtype=scores.dtype)
        bias[-reg.shape[2]:] = register_logit_bias
        scores = scores + bias
    return _merge(matmul(softmax_rows(scores), v))


def multimodal_attention(q_vis, k_vis, v_vis, q_txt, k_txt, v_txt, positions, heads, rope, rope_style="additive"):
    """Plain joint attention (RoPE only, no role embeddings, no registers), row by row in numpy.

    Deliberately written without the batched path above; it is the reference
    the reduction check compares against. Inputs are single samples (rows, d).
    """
    qv, kv, vv, qt, kt, vt = (np.asarray(torch.as_tensor(a).detach(), dtype=np.float64)
                              for a in (q_vis, k_vis, v_vis, q_txt, k_txt, v_txt))
    n, d = qv.shape
    dh = d // heads
    out = np.zeros((n + qt.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh = qv[:, sl], kv[:, sl]
        if rope is not None:
            rq = rope_apply(torch.from_numpy(qh.copy()), positions, rope).numpy()
            rk = rope_apply(torch.from_numpy(kh.copy()), positions, rope).numpy()
            qh, kh = (qh + rq, kh + rk) if rope_style == "additive" else (rq, rk)
        Q = np.vstack([qh, qt[:, sl]])
        K = np.vstack([kh, kt[:, sl]])
        V = np.vstack([vv[:, sl], vt[:, sl]])
        for i in range(Q.shape[0]):
            s = np.array([Q[i] @ K[j] for j in range(K.shape[0])]) / math.sqrt(dh)
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, sl] = w @ V
    return out


def vanilla_reduction_check(
    q_vis, k_vis, v_vis, q_txt, k_txt, v_txt, tags, positions, mode,
    emb: BoundaryEmbeddings, registers: RegisterBank, heads: int, rope: RopeTable | None,
    rope_style: str = "additive", tol: float = 1e-6,
) -> bool:
    """True iff ICMA with registers switched off matches plain multi-modal attention."""
    with torch.no_grad():
        got = icma_attention(q_vis, k_vis, v_vis, q_txt, k_txt, v_txt, tags, positions, mode,
                             emb, registers, heads, rope, rope_style, register_logit_bias=-1e6)
    ref = multimodal_attention(q_vis, k_vis, v_vis, q_txt, k_txt, v_txt, positions, heads, rope, rope_style)
    return bool(np.max(np.abs(got.numpy() - ref)) <= tol)
