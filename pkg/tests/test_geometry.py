import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from polyptych.geometry import (
    TARGET,
    BoundaryError,
    PanelError,
    Panel,
    RopeConfigError,
    RopeTable,
    assemble_polyptych,
    extract_panel,
    grid_positions,
    patchify,
    parse_role,
    quantize,
    read_layout,
    read_pgm,
    read_ppm,
    role_name,
    rope_apply,
    unpatchify,
    write_layout,
    write_pgm,
    write_ppm,
)


def img(h, w, c=3, seed=0):
    return np.random.default_rng(seed).random((h, w, c))


def test_diptych_offsets():
    cv = assemble_polyptych([img(8, 8)], img(8, 8, seed=1))
    assert cv.pixels.shape == (8, 16, 3)
    assert [(p.role, p.offset) for p in cv.panels] == [(0, 0), (TARGET, 8)]


def test_three_refs_offsets():
    cv = assemble_polyptych([img(8, 8, seed=i) for i in range(3)], img(8, 8, seed=9))
    assert cv.width == 32
    assert [p.offset for p in cv.panels] == [0, 8, 16, 24]
    assert [p.role for p in cv.panels] == [0, 1, 2, TARGET]


def test_height_and_channel_mismatch():
    with pytest.raises(PanelError):
        assemble_polyptych([img(8, 8), img(16, 8)], img(8, 8))
    with pytest.raises(PanelError):
        assemble_polyptych([img(8, 8, c=1)], img(8, 8))


def test_zero_refs_only_when_unconditional():
    with pytest.raises(PanelError):
        assemble_polyptych([], img(8, 8))
    cv = assemble_polyptych([], img(8, 8), unconditional=True)
    assert cv.n_refs == 0 and cv.target.offset == 0


def test_extract_recovers_inputs_bit_exactly():
    refs = [img(8, 4, seed=1), img(8, 12, seed=2)]
    tgt = img(8, 8, seed=3)
    cv = assemble_polyptych(refs, tgt)
    for pn, original in zip(cv.panels, refs + [tgt]):
        assert np.array_equal(extract_panel(cv.pixels, pn), original)


def test_patchify_diptych_tags():
    cv = assemble_polyptych([img(8, 8)], img(8, 8, seed=1))
    seq = patchify(cv.pixels, cv.panels, 2)
    assert seq.tokens.shape == (32, 12)
    rows = seq.tags.reshape(4, 8)
    assert (rows == np.array([0] * 4 + [TARGET] * 4)).all()


def test_one_patch_per_panel():
    cv = assemble_polyptych([img(4, 4), img(4, 4, seed=1)], img(4, 4, seed=2))
    seq = patchify(cv.pixels, cv.panels, 4)
    assert len(seq) == 3
    assert seq.tags.tolist() == [0, 1, TARGET]


def test_raster_order_matches_manual_loop():
    x = img(4, 6, c=2, seed=5)
    seq = patchify(x, [Panel(0, 0, 2), Panel(TARGET, 2, 4)], 2)
    manual = []
    for r in range(2):
        for c in range(3):
            manual.append(x[2 * r : 2 * r + 2, 2 * c : 2 * c + 2].reshape(-1))
    assert np.array_equal(seq.tokens, np.stack(manual))
    assert seq.positions.tolist() == [[r, c] for r in range(2) for c in range(3)]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(1, 4),
       st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(0, 999))
def test_round_trip_and_tag_partition(gh, ref_w, tgt_w, p, c, seed):
    h = gh * p
    refs = [img(h, w * p, c, seed + i) for i, w in enumerate(ref_w)]
    tgt = img(h, tgt_w * p, c, seed + 50)
    cv = assemble_polyptych(refs, tgt)
    seq = patchify(cv.pixels, cv.panels, p)
    assert np.array_equal(unpatchify(seq.tokens, cv.height, cv.width, p, c), cv.pixels)
    for pn in cv.panels:
        assert (seq.tags == pn.role).sum() == (h // p) * (pn.width // p)
    again = patchify(cv.pixels, cv.panels, p)
    assert np.array_equal(again.tokens, seq.tokens) and np.array_equal(again.tags, seq.tags)


def test_indivisible_canvas_rejected():
    with pytest.raises(BoundaryError):
        patchify(img(6, 6), [Panel(0, 0, 3), Panel(TARGET, 3, 3)], 2)


def test_rope_origin_is_identity():
    table = RopeTable(8)
    x = torch.randn(3, 8, dtype=torch.float64)
    assert torch.equal(rope_apply(x, np.zeros((3, 2)), table), x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 999))
def test_rope_isometry(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(6, 16, generator=g, dtype=torch.float64)
    pos = np.random.default_rng(seed).integers(0, 20, size=(6, 2))
    y = rope_apply(x, pos, RopeTable(16))
    assert torch.allclose(y.norm(dim=-1), x.norm(dim=-1), atol=1e-12, rtol=0)


@pytest.mark.parametrize("axis", [0, 1])
def test_rope_relative_position(axis):
    rng = np.random.default_rng(axis)
    table = RopeTable(8)
    q = torch.as_tensor(rng.standard_normal((1, 8)))
    k = torch.as_tensor(rng.standard_normal((1, 8)))
    a, b = np.array([[2, 3]]), np.array([[5, 1]])
    shift = np.zeros((1, 2), dtype=int)
    shift[0, axis] = 7
    lhs = float((rope_apply(q, a, table) * rope_apply(k, b, table)).sum())
    rhs = float((rope_apply(q, a + shift, table) * rope_apply(k, b + shift, table)).sum())
    assert abs(lhs - rhs) <= 1e-9


def test_rope_matches_complex_oracle():
    """Pair (2j, 2j+1) is a complex number turned by pos * base^(-j'/quarter)."""
    dh, base = 8, 100.0
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, dh))
    pos = rng.integers(0, 9, size=(4, 2))
    out = rope_apply(torch.as_tensor(x), pos, RopeTable(dh, base)).numpy()
    quarter = dh // 4
    for i in range(4):
        for j in range(dh // 2):
            axis, jj = divmod(j, quarter)
            theta = pos[i, axis] * base ** (-jj / quarter)
            z = complex(x[i, 2 * j], x[i, 2 * j + 1]) * np.exp(1j * theta)
            assert abs(out[i, 2 * j] - z.real) < 1e-12 and abs(out[i, 2 * j + 1] - z.imag) < 1e-12


def test_rope_head_dim_must_split_in_two_axes():
    with pytest.raises(RopeConfigError):
        RopeTable(7)
    with pytest.raises(RopeConfigError):
        RopeTable(6)


def test_grid_positions_are_global():
    pos = grid_positions(4, 8, 2)
    assert pos[:4].tolist() == [[0, 0], [0, 1], [0, 2], [0, 3]]
    assert pos[-1].tolist() == [1, 3]


def test_roles_round_trip():
    for tag in (TARGET, 0, 3):
        assert parse_role(role_name(tag)) == tag
    with pytest.raises(PanelError):
        parse_role("ref:1")


def test_pixmap_and_layout_files(tmp_path):
    cv = assemble_polyptych([quantize(img(8, 8))], quantize(img(8, 8, seed=1)))
    write_ppm(tmp_path / "c.ppm", cv.pixels)
    assert (tmp_path / "c.ppm").read_bytes()[:2] == b"P6"
    assert np.array_equal(read_ppm(tmp_path / "c.ppm"), cv.pixels)
    mask = np.zeros((8, 8))
    mask[2:5, 3:6] = 1
    write_pgm(tmp_path / "m.pgm", mask)
    assert (tmp_path / "m.pgm").read_bytes()[:2] == b"P5"
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), mask)
    write_layout(tmp_path / "layout.txt", cv, mode="position_free")
    assert read_layout(tmp_path / "layout.txt") == cv.panels
