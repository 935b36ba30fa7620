import numpy as np
import pytest
import torch

from polyptych.geometry import assemble_polyptych, grid_positions, patchify, token_tags
from polyptych.icma import TaskMode
from polyptych.model import (
    CheckpointVersionError,
    DiT,
    ModelConfig,
    ModelConfigError,
    TextLengthError,
    VocabError,
    attach_lora,
    format_param_report,
    load_model,
    read_checkpoint,
    save_model,
    set_phase,
    timestep_embedding,
    trainable_param_report,
    write_checkpoint,
)
from polyptych.tensor import central_difference, relative_error


def diptych_inputs(cfg, batch=2, seed=0, h=8, w=8):
    rng = np.random.default_rng(seed)
    cv = assemble_polyptych([rng.random((h, w, 3))], rng.random((h, w, 3)))
    c = 2 * cfg.channels + 1
    toks = np.stack([patchify(rng.random((h, 2 * w, c)), cv.panels, cfg.patch).tokens for _ in range(batch)])
    tags = token_tags(cv.panels, h, 2 * w, cfg.patch)
    pos = grid_positions(h, 2 * w, cfg.patch)
    text = rng.integers(0, cfg.vocab_size, size=(batch, 6))
    return torch.as_tensor(toks), tags, pos, text


def randomize_all(model, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * scale)


def closed_form_trainable(cfg: ModelConfig, lora: bool) -> int:
    d, dh = cfg.dim, cfg.head_dim
    inputs = (cfg.in_dim * d + d) + cfg.vocab_size * d + (d * d + d)
    blocks = cfg.double_blocks + cfg.single_blocks
    extras = blocks * dh * (2 + cfg.ie_capacity)
    extras += (blocks if not cfg.share_registers else 1) * 3 * cfg.num_registers * d
    adapters = 0
    if lora:
        per = cfg.lora_rank * (d + d)
        adapters = per * 4 * (2 * cfg.lora_double_prefix + cfg.lora_single_prefix)
    return inputs + extras + adapters


def test_output_shape_and_zero_head():
    cfg = ModelConfig()
    model = DiT(cfg)
    toks, tags, pos, text = diptych_inputs(cfg)
    out = model(toks, tags, pos, text, torch.tensor([0.2, 0.7]), [0, 2])
    assert out.shape == (2, 32, 12)
    assert torch.equal(out, torch.zeros_like(out))


def test_finite_for_grid_of_t():
    cfg = ModelConfig(dim=32, heads=2)
    model = DiT(cfg)
    randomize_all(model, 3)
    toks, tags, pos, text = diptych_inputs(cfg, batch=1)
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        out = model(toks, tags, pos, text, t, TaskMode.USER_DRAWN)
        assert torch.isfinite(out).all()


def test_input_errors():
    cfg = ModelConfig(dim=32, heads=2, max_text_len=8)
    model = DiT(cfg)
    toks, tags, pos, text = diptych_inputs(cfg, batch=1)
    with pytest.raises(TextLengthError):
        model(toks, tags, pos, np.zeros((1, 9), dtype=int), 0.5, 0)
    with pytest.raises(VocabError):
        model(toks, tags, pos, np.full((1, 3), cfg.vocab_size), 0.5, 0)
    with pytest.raises(ValueError):
        model(toks, tags, pos, text, 1.5, 0)


def test_config_validation():
    with pytest.raises(ModelConfigError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ModelConfigError):
        ModelConfig(lora_double_prefix=3)
    with pytest.raises(ModelConfigError):
        ModelConfig(dim=24, heads=4)  # head dim 6 cannot split into two rotary axes


def test_lora_attach_is_output_identity():
    cfg = ModelConfig(dim=32, heads=2)
    model = DiT(cfg)
    randomize_all(model, 1)
    toks, tags, pos, text = diptych_inputs(cfg)
    before = model(toks, tags, pos, text, torch.tensor([0.3, 0.9]), [1, 2])
    attach_lora(model)
    after = model(toks, tags, pos, text, torch.tensor([0.3, 0.9]), [1, 2])
    assert torch.equal(before, after)
    with pytest.raises(ModelConfigError):
        attach_lora(model)


def test_single_matrix_lora_count():
    cfg = ModelConfig(double_blocks=1, single_blocks=1, lora_double_prefix=0, lora_single_prefix=1)
    model = attach_lora(DiT(cfg))
    q = model.singles[0].attn.q
    assert sum(p.numel() for p in q.lora.parameters()) == 2 * 4 * 64 == 512


@pytest.mark.parametrize("kw", [
    {},
    {"lora_rank": 8, "lora_double_prefix": 2, "lora_single_prefix": 0},
    {"dim": 32, "heads": 2, "lora_rank": 2, "share_registers": True, "ie_capacity": 2},
])
def test_trainable_count_closed_form(kw):
    cfg = ModelConfig(**kw)
    model = attach_lora(DiT(cfg))
    set_phase(model, "customize")
    rep = trainable_param_report(model)
    assert rep["trainable"] == closed_form_trainable(cfg, lora=True)
    assert rep["fraction"] == rep["trainable"] / rep["total"]
    assert "trainable fraction" in format_param_report(rep)


def test_doubling_rank_doubles_lora_group():
    counts = []
    for r in (3, 6):
        rep = trainable_param_report(attach_lora(DiT(ModelConfig(lora_rank=r))))
        counts.append(rep["groups"]["lora"]["count"])
    assert counts[1] == 2 * counts[0]


def test_no_lora_customize_fraction():
    cfg = ModelConfig()
    model = DiT(cfg)
    set_phase(model, "customize")
    rep = trainable_param_report(model)
    assert rep["groups"]["lora"]["count"] == 0
    assert rep["trainable"] == closed_form_trainable(cfg, lora=False)


def test_phases():
    model = attach_lora(DiT(ModelConfig(dim=32, heads=2)))
    set_phase(model, "pretrain")
    rep = trainable_param_report(model)
    assert rep["groups"]["lora"]["trainable"] == 0 and rep["groups"]["icma_extras"]["trainable"] == 0
    assert rep["groups"]["base"]["trainable"] == rep["groups"]["base"]["count"]
    set_phase(model, "customize")
    rep = trainable_param_report(model)
    assert rep["groups"]["base"]["trainable"] == 0
    with pytest.raises(ModelConfigError):
        set_phase(model, "finetune")


def test_frozen_base_identity_after_attach():
    """A trained base, then LoRA + untouched extras: the customized model equals the base."""
    cfg = ModelConfig(dim=32, heads=2)
    base = DiT(cfg)
    g = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for name, p in base.named_parameters():
            if ".icma." not in name:
                p.add_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.2)
    toks, tags, pos, text = diptych_inputs(cfg)
    ref = base(toks, tags, pos, text, torch.tensor([0.1, 0.6]), [0, 1])
    attach_lora(base)
    set_phase(base, "customize")
    assert torch.equal(base(toks, tags, pos, text, torch.tensor([0.1, 0.6]), [0, 1]), ref)


def test_zero_time_embedding_reduces_modulation_to_bias():
    cfg = ModelConfig(dim=32, heads=2)
    model = DiT(cfg)
    randomize_all(model, 2)
    blk = model.doubles[0]
    zero = torch.zeros(1, cfg.dim, dtype=torch.float64)
    assert torch.equal(blk.img.mod(zero), blk.img.mod.bias.expand(1, -1))
    assert timestep_embedding(torch.tensor([0.0], dtype=torch.float64), 8)[0, :4].eq(1).all()


def test_small_model_gradient_fd():
    cfg = ModelConfig(dim=16, heads=2, double_blocks=1, single_blocks=1, vocab_size=8)
    model = attach_lora(DiT(cfg))
    randomize_all(model, 7, scale=0.4)
    toks, tags, pos, text = diptych_inputs(cfg, batch=1, h=4, w=4)
    target = torch.randn(1, len(tags), cfg.out_dim, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

    def loss():
        return ((model(toks, tags, pos, text, 0.4, 1) - target) ** 2).mean()

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    named = dict(model.named_parameters())
    for name in ("doubles.0.icma.emb.te", "singles.0.icma.registers.tokens", "head.weight",
                 "doubles.0.img.attn.q.lora.up", "txt_embed"):
        p = named[name]
        idx = tuple(int(i) for i in np.unravel_index(rng.integers(p.numel()), p.shape))
        num = central_difference(loss, p.data, idx)
        assert relative_error(float(p.grad[idx]), num, floor=1e-6) <= 1e-4, name


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(dim=32, heads=2)
    model = attach_lora(DiT(cfg, seed=3))
    randomize_all(model, 4)
    extra = {"optim.exp_avg.x": torch.arange(6, dtype=torch.float64).reshape(2, 3)}
    save_model(tmp_path / "m.icx", model, {"stage": 1, "step": 12}, extra)
    data = (tmp_path / "m.icx").read_bytes()
    assert data[:4] == b"ICX1"
    loaded, meta, opt = load_model(tmp_path / "m.icx", expect=cfg)
    assert meta["step"] == 12 and torch.equal(opt["optim.exp_avg.x"], extra["optim.exp_avg.x"])
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    with pytest.raises(CheckpointVersionError):
        load_model(tmp_path / "m.icx", expect=ModelConfig(dim=64))


def test_checkpoint_version_and_magic(tmp_path):
    write_checkpoint(tmp_path / "a.icx", {"x": 1}, {"w": torch.ones(2, dtype=torch.float64)})
    raw = bytearray((tmp_path / "a.icx").read_bytes())
    raw[4] = 9
    (tmp_path / "b.icx").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version"):
        read_checkpoint(tmp_path / "b.icx")
    (tmp_path / "c.icx").write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(CheckpointVersionError):
        read_checkpoint(tmp_path / "c.icx")
