"""A tiny MM-DiT: double blocks (two streams, joint ICMA), single blocks (fused stream).

Weights follow the ``x @ W`` convention, so a LoRA adapter on ``W`` (d_in x d_out)
is ``down`` (d_in x r) followed by ``up`` (r x d_out).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import RopeTable
from .icma import ROPE_STYLES, BoundaryEmbeddings, RegisterBank, icma_attention
from .seeding import torch_generator
from .tensor import DTYPE, DimensionError, layer_norm, matmul

MAGIC = b"ICX1"
FORMAT_VERSION = 1

GROUPS = ("input_layers", "lora", "icma_extras", "base")


class ModelConfigError(ValueError):
    pass


class TextLengthError(ValueError):
    pass


class VocabError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    double_blocks: int = 2
    single_blocks: int = 2
    patch: int = 2
    channels: int = 3
    vocab_size: int = 64
    max_text_len: int = 32
    ie_capacity: int = 4
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_double_prefix: int = 1
    lora_single_prefix: int = 1
    rope_base: float = 100.0
    rope_style: str = "additive"
    num_registers: int = 4
    share_registers: bool = False
    mlp_ratio: int = 2
    time_dim: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ModelConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 4:
            raise ModelConfigError(f"head dim {self.dim // self.heads} must be divisible by 4")
        if not 0 <= self.lora_double_prefix <= self.double_blocks:
            raise ModelConfigError(f"lora_double_prefix {self.lora_double_prefix} outside 0..{self.double_blocks}")
        if not 0 <= self.lora_single_prefix <= self.single_blocks:
            raise ModelConfigError(f"lora_single_prefix {self.lora_single_prefix} outside 0..{self.single_blocks}")
        if self.lora_rank < 1:
            raise ModelConfigError("lora_rank must be >= 1")
        if self.rope_style not in ROPE_STYLES:
            raise ModelConfigError(f"rope_style must be one of {ROPE_STYLES}")
        if self.time_dim % 2:
            raise ModelConfigError("time_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def in_dim(self) -> int:
        return self.patch * self.patch * (2 * self.channels + 1)

    @property
    def out_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class LoRAAdapter(nn.Module):
    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, gen: torch.Generator):
        super().__init__()
        self.scale = alpha / rank
        self.down = nn.Parameter(torch.randn(d_in, rank, generator=gen, dtype=DTYPE) / math.sqrt(d_in))
        self.up = nn.Parameter(torch.zeros(rank, d_out, dtype=DTYPE))

    def forward(self, x):
        return self.scale * matmul(matmul(x, self.down), self.up)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator, zero: bool = False):
        super().__init__()
        w = torch.zeros(d_in, d_out, dtype=DTYPE) if zero else (
            torch.randn(d_in, d_out, generator=gen, dtype=DTYPE) / math.sqrt(d_in))
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))
        self.lora: LoRAAdapter | None = None

    def forward(self, x):
        y = matmul(x, self.weight) + self.bias
        if self.lora is not None:
            y = y + self.lora(x)
        return y


class Attention(nn.Module):
    """q/k/v/out projections; the LoRA targets."""

    def __init__(self, d: int, gen):
        super().__init__()
        self.q = Linear(d, d, gen)
        self.k = Linear(d, d, gen)
        self.v = Linear(d, d, gen)
        self.out = Linear(d, d, gen)

    def projections(self):
        return (self.q, self.k, self.v, self.out)


class ICMAExtras(nn.Module):
    def __init__(self, cfg: ModelConfig, with_bank: bool):
        super().__init__()
        self.emb = BoundaryEmbeddings(cfg.head_dim, cfg.ie_capacity)
        self.registers = RegisterBank(cfg.dim, cfg.num_registers) if with_bank else None


class Stream(nn.Module):
    def __init__(self, cfg: ModelConfig, gen):
        super().__init__()
        d = cfg.dim
        self.mod = Linear(d, 6 * d, gen, zero=True)
        self.attn = Attention(d, gen)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, gen)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, gen)

    def mlp(self, h):
        return self.fc2(F.gelu(self.fc1(h)))


def _modulate(x, shift, scale):
    return layer_norm(x) * (1 + scale) + shift


class DoubleBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, gen, with_bank: bool):
        super().__init__()
        self.img = Stream(cfg, gen)
        self.txt = Stream(cfg, gen)
        self.icma = ICMAExtras(cfg, with_bank)

    def forward(self, img, txt, vec, ctx):
        im = self.img.mod(vec).unsqueeze(1).chunk(6, dim=-1)
        tm = self.txt.mod(vec).unsqueeze(1).chunk(6, dim=-1)
        hi = _modulate(img, im[0], im[1])
        ht = _modulate(txt, tm[0], tm[1])
        a = self.img.attn
        b = self.txt.attn
        out = ctx.attend(self.icma, a.q(hi), a.k(hi), a.v(hi), b.q(ht), b.k(ht), b.v(ht))
        n = img.shape[1]
        img = img + im[2] * a.out(out[:, :n])
        txt = txt + tm[2] * b.out(out[:, n:])
        img = img + im[5] * self.img.mlp(_modulate(img, im[3], im[4]))
        txt = txt + tm[5] * self.txt.mlp(_modulate(txt, tm[3], tm[4]))
        return img, txt


class SingleBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, gen, with_bank: bool):
        super().__init__()
        d = cfg.dim
        self.mod = Linear(d, 3 * d, gen, zero=True)
        self.attn = Attention(d, gen)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, gen)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, gen)
        self.icma = ICMAExtras(cfg, with_bank)

    def forward(self, x, vec, n, ctx):
        shift, scale, gate = self.mod(vec).unsqueeze(1).chunk(3, dim=-1)
        h = _modulate(x, shift, scale)
        q, k, v = self.attn.q(h), self.attn.k(h), self.attn.v(h)
        a = ctx.attend(self.icma, q[:, :n], k[:, :n], v[:, :n], q[:, n:], k[:, n:], v[:, n:])
        return x + gate * (self.attn.out(a) + self.fc2(F.gelu(self.fc1(h))))


class _AttendContext:
    def __init__(self, model: "DiT", tags, positions, modes):
        self.model = model
        self.tags = tags
        self.positions = positions
        self.modes = modes

    def attend(self, extras: ICMAExtras, qv, kv, vv, qt, kt, vt):
        m = self.model
        bank = extras.registers if extras.registers is not None else m.shared_registers
        return icma_attention(qv, kv, vv, qt, kt, vt, self.tags, self.positions, self.modes,
                              extras.emb, bank, m.cfg.heads, m.rope, m.cfg.rope_style)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = 1000.0 * t.unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class DiT(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = torch_generator(seed, "model-init")
        d = cfg.dim
        self.img_in = Linear(cfg.in_dim, d, gen)
        self.txt_embed = nn.Parameter(torch.randn(cfg.vocab_size, d, generator=gen, dtype=DTYPE) * 0.5)
        self.txt_in = Linear(d, d, gen)
        self.time_in = Linear(cfg.time_dim, d, gen)
        self.time_out = Linear(d, d, gen)
        per_block = not cfg.share_registers
        self.doubles = nn.ModuleList(DoubleBlock(cfg, gen, per_block) for _ in range(cfg.double_blocks))
        self.singles = nn.ModuleList(SingleBlock(cfg, gen, per_block) for _ in range(cfg.single_blocks))
        self.shared_registers = None if per_block else RegisterBank(d, cfg.num_registers)
        self.final_mod = Linear(d, 2 * d, gen, zero=True)
        self.head = Linear(d, cfg.out_dim, gen, zero=True)
        self.rope = RopeTable(cfg.head_dim, cfg.rope_base)
        self.lora_attached = False

    def time_vector(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_out(F.silu(self.time_in(timestep_embedding(t, self.cfg.time_dim))))

    def check_text(self, text_ids: torch.Tensor) -> None:
        if text_ids.shape[-1] > self.cfg.max_text_len:
            raise TextLengthError(f"text length {text_ids.shape[-1]} exceeds max {self.cfg.max_text_len}")
        if text_ids.numel() and (int(text_ids.min()) < 0 or int(text_ids.max()) >= self.cfg.vocab_size):
            raise VocabError(f"token id outside vocabulary of size {self.cfg.vocab_size}")

    def forward(self, tokens, tags, positions, text_ids, t, modes) -> torch.Tensor:
        """Velocity per visual token: (B, n, p*p*C)."""
        tokens = torch.as_tensor(tokens, dtype=DTYPE)
        if tokens.dim() == 2:
            tokens = tokens.unsqueeze(0)
        if tokens.shape[-1] != self.cfg.in_dim:
            raise DimensionError(f"token dim {tokens.shape[-1]} != expected {self.cfg.in_dim}")
        b, n, _ = tokens.shape
        text_ids = torch.as_tensor(np.asarray(text_ids), dtype=torch.long).reshape(b, -1)
        self.check_text(text_ids)
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1).expand(b)
        if bool(((t < 0) | (t > 1)).any()):
            raise ValueError("t must lie in [0, 1]")
        modes = np.broadcast_to(np.asarray(modes, dtype=np.int64), (b,))
        ctx = _AttendContext(self, tags, positions, modes)

        vec = F.silu(self.time_vector(t))
        img = self.img_in(tokens)
        txt = self.txt_in(self.txt_embed[text_ids])
        for blk in self.doubles:
            img, txt = blk(img, txt, vec, ctx)
        x = torch.cat([img, txt], dim=1)
        for blk in self.singles:
            x = blk(x, vec, n, ctx)
        shift, scale = self.final_mod(vec).unsqueeze(1).chunk(2, dim=-1)
        return self.head(_modulate(x[:, :n], shift, scale))

    # -- parameter groups --------------------------------------------------

    def lora_targets(self) -> list[tuple[str, Linear]]:
        out = []
        for i, blk in enumerate(self.doubles[: self.cfg.lora_double_prefix]):
            for stream in ("img", "txt"):
                for name, lin in zip("qkvo", getattr(blk, stream).attn.projections()):
                    out.append((f"doubles.{i}.{stream}.attn.{name}", lin))
        for i, blk in enumerate(self.singles[: self.cfg.lora_single_prefix]):
            for name, lin in zip("qkvo", blk.attn.projections()):
                out.append((f"singles.{i}.attn.{name}", lin))
        return out


def param_group(name: str) -> str:
    if name.startswith(("img_in.", "txt_in.")) or name == "txt_embed":
        return "input_layers"
    if ".lora." in name:
        return "lora"
    if ".icma." in name or name.startswith("shared_registers."):
        return "icma_extras"
    return "base"


def attach_lora(model: DiT, rank: int | None = None, alpha: float | None = None, seed: int = 0) -> DiT:
    """Attach zero-output LoRA adapters to q/k/v/out of the configured block prefix."""
    if model.lora_attached:
        raise ModelConfigError("LoRA adapters are already attached")
    cfg = model.cfg
    if rank is not None:
        cfg.lora_rank = rank
    if alpha is not None:
        cfg.lora_alpha = alpha
    cfg.validate()
    gen = torch_generator(seed, "lora-init")
    for _, lin in model.lora_targets():
        d_in, d_out = lin.weight.shape
        lin.lora = LoRAAdapter(d_in, d_out, cfg.lora_rank, cfg.lora_alpha, gen)
    model.lora_attached = True
    return model


def set_phase(model: DiT, phase: str) -> None:
    """``pretrain``: base and input layers learn; ``customize``: base frozen, the rest learns."""
    trainable = {
        "pretrain": {"base", "input_layers"},
        "customize": {"input_layers", "lora", "icma_extras"},
        "frozen": set(),
    }
    if phase not in trainable:
        raise ModelConfigError(f"unknown training phase {phase!r}")
    for name, p in model.named_parameters():
        p.requires_grad_(param_group(name) in trainable[phase])


def trainable_param_report(model: DiT) -> dict:
    groups = {g: {"count": 0, "trainable": 0} for g in GROUPS}
    for name, p in model.named_parameters():
        g = groups[param_group(name)]
        g["count"] += p.numel()
        if p.requires_grad:
            g["trainable"] += p.numel()
    total = sum(g["count"] for g in groups.values())
    trainable = sum(g["trainable"] for g in groups.values())
    return {"groups": groups, "total": total, "trainable": trainable,
            "fraction": trainable / total if total else 0.0}


def format_param_report(report: dict) -> str:
    lines = [f"{'group':<14}{'params':>10}{'trainable':>11}"]
    for name, g in report["groups"].items():
        lines.append(f"{name:<14}{g['count']:>10}{g['trainable']:>11}")
    lines.append(f"{'total':<14}{report['total']:>10}{report['trainable']:>11}")
    lines.append(f"trainable fraction = {report['fraction']:.6f}")
    return "\n".join(lines)


# -- checkpoints ---------------------------------------------------------------


def write_checkpoint(path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    """ICX1: magic, u32 version, u32 config length, config JSON, u32 count, then named float64 arrays."""
    blob = json.dumps(meta, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f8")
        enc = name.encode()
        chunks.append(struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: not an ICX1 checkpoint")
    version, clen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = 12
    meta = json.loads(data[pos : pos + clen])
    pos += clen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float64))
    return meta, tensors


def save_model(path, model: DiT, extra_meta: dict | None = None, extra_tensors: dict | None = None) -> None:
    meta = {"model": asdict(model.cfg), "lora_attached": model.lora_attached}
    meta.update(extra_meta or {})
    tensors = {n: p for n, p in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    write_checkpoint(path, meta, tensors)


def load_model(path, expect: ModelConfig | None = None) -> tuple[DiT, dict, dict[str, torch.Tensor]]:
    meta, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"])
    if expect is not None and asdict(expect) != asdict(cfg):
        raise CheckpointVersionError(f"{path}: checkpoint model config does not match the requested config")
    model = DiT(cfg)
    if meta.get("lora_attached"):
        attach_lora(model)
    state = {n: t for n, t in tensors.items() if not n.startswith("optim.")}
    model.load_state_dict(state, strict=True)
    extra = {n: t for n, t in tensors.items() if n.startswith("optim.")}
    return model, meta, extra
