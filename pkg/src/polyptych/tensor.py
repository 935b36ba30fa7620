"""Dense float64 tensor ops and the AdamW optimizer.

Autograd comes from torch; this module adds the shape discipline the rest of
the package relies on (named shapes in every error) and a hand-written AdamW
that refuses non-finite gradients instead of corrupting the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

DTYPE = torch.float64
LN_EPS = 1e-6


class DimensionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def _shape(x: torch.Tensor) -> str:
    return "x".join(str(s) for s in x.shape) or "scalar"


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes; leading axes must agree or be absent on ``b``."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs matrices, got {_shape(a)} and {_shape(b)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {_shape(a)} @ {_shape(b)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {_shape(a)} @ {_shape(b)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = LN_EPS,
) -> torch.Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a feature axis of at least 2, got {_shape(x)}")
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and tuple(p.shape) != (d,):
            raise DimensionError(f"layer_norm {name} {_shape(p)} does not match features of {_shape(x)}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def concat(parts: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    ref = parts[0]
    for p in parts[1:]:
        if p.dim() != ref.dim() or any(
            p.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != dim % ref.dim()
        ):
            raise DimensionError(f"concat along {dim}: {_shape(ref)} vs {_shape(p)}")
    return torch.cat(list(parts), dim=dim)


@dataclass
class OptimState:
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimState,
) -> OptimState:
    """One bias-corrected AdamW update with decoupled weight decay, in place.

    All gradients are validated before any parameter moves, so a rejected step
    leaves both the parameters and the moments untouched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} is {_shape(g)}, parameter is {_shape(p)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(
                f"non-finite gradient in {name!r} at step {state.step + 1}; update rejected"
            )
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        if m.shape != p.shape:
            raise DimensionError(f"moment for {name} is {_shape(m)}, parameter is {_shape(p)}")
        if state.weight_decay:
            p.mul_(1.0 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m / c1, denom, value=-state.lr)
    return state


class AdamW:
    """Named-parameter AdamW; grads are read from ``param.grad``."""

    def __init__(
        self,
        named_params: Iterable[tuple[str, torch.Tensor]],
        lr: float = 5e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        weight_decay: float = 0.0,
        eps: float = 1e-8,
    ):
        self.params = dict(named_params)
        self.state = OptimState(lr=lr, betas=betas, weight_decay=weight_decay, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, m in self.state.exp_avg.items():
            out[f"optim.exp_avg.{name}"] = m
            out[f"optim.exp_avg_sq.{name}"] = self.state.exp_avg_sq[name]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step: int) -> None:
        self.state.step = step
        for key, value in tensors.items():
            if key.startswith("optim.exp_avg."):
                self.state.exp_avg[key[len("optim.exp_avg."):]] = value.clone()
            elif key.startswith("optim.exp_avg_sq."):
                self.state.exp_avg_sq[key[len("optim.exp_avg_sq."):]] = value.clone()


def central_difference(f, x: torch.Tensor, index: tuple, h: float = 1e-5) -> float:
    """d f / d x[index] by central difference; restores ``x`` afterwards."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + h
        fp = float(f())
        x[index] = orig - h
        fm = float(f())
        x[index] = orig
    return (fp - fm) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def is_finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())

