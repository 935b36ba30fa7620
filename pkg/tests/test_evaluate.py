import numpy as np
import pytest

from polyptych.evaluate import (
    CaptionParseError,
    MetricReport,
    ProviderError,
    TableEmbedder,
    ToyEmbedder,
    benchmark_items,
    classify_shape,
    format_comparison,
    get_provider,
    identity_score,
    multiref_compare,
    parse_attributes,
    run_benchmark,
    text_score,
    toy_embed,
)
from polyptych.forge import WorldConfig, generate_items, render_scene, world_vocab, write_embeddings
from polyptych.icma import TaskMode
from polyptych.model import DiT, ModelConfig

WORLD = WorldConfig()


def scene_image(shape="square", color="red", cy=8.0, cx=8.0, r=4.0, textured=False, bg="gray", place="field"):
    ident = {"shape": shape, "color": color, "textured": textured, "rigid": True, "radius": 0.25}
    img, _ = render_scene(WORLD, (16, 16), ident, {"bg": bg, "place": place, "cy": cy, "cx": cx, "ry": r, "rx": r})
    return img


def test_embedding_is_unit_norm():
    for img in (scene_image(), scene_image("circle", "blue"), np.full((16, 16, 3), 0.5)):
        v = toy_embed(img)
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-12 and v.shape == (31,)


def test_same_identity_beats_different_colour():
    red, red2, blue = scene_image(), scene_image(cy=6.0, cx=10.0, bg="cyan"), scene_image(color="blue")
    assert identity_score(red, red2) > identity_score(red, blue)
    assert identity_score(red, red) == pytest.approx(1.0, abs=1e-12)


def test_translation_invariance():
    a = scene_image("triangle", "green", cy=7.0, cx=7.0)
    b = scene_image("triangle", "green", cy=9.0, cx=10.0)
    assert identity_score(a, b) >= 0.95


def test_identity_score_mean_over_references():
    g, r1, r2 = scene_image(), scene_image(cx=9.0), scene_image("circle", "blue")
    want = (identity_score(g, r1) + identity_score(g, r2)) / 2
    assert identity_score(g, [r1, r2]) == pytest.approx(want, abs=1e-15)


def test_text_score_examples():
    img = scene_image("circle", "yellow")
    assert text_score(img, "yellow circle on gray field") == 1.0
    assert text_score(img, "yellow square on gray field") == 0.5
    assert text_score(img, "[TARGET-SCENE] red triangle on blue room") == 0.0
    assert text_score(np.full((16, 16, 3), 0.4), "red circle on gray field") == 0.0
    with pytest.raises(CaptionParseError):
        parse_attributes("empty gray field")


@pytest.mark.parametrize("shape", ["circle", "square", "triangle"])
def test_shape_classifier_on_ground_truth(shape):
    for r in (2.6, 3.5, 4.5):
        from polyptych.forge import shape_support
        assert classify_shape(shape_support(shape, 16, 16, 8.0, 8.0, r, r)) == shape


def test_ground_truth_scores_on_forged_items():
    items = generate_items(WORLD, 30, seed=4)
    for item in items:
        tgt = item.images[item.target]
        assert text_score(tgt, item.captions[item.target]) == 1.0
        assert identity_score(tgt, [item.images[i] for i in item.refs]) >= 0.9


def test_provider_registry(tmp_path):
    assert isinstance(get_provider("toy"), ToyEmbedder)
    with pytest.raises(ProviderError, match="registered: table, toy"):
        get_provider("clip")
    with pytest.raises(ProviderError):
        get_provider("table", tmp_path / "none.bin")
    v = np.array([0.6, 0.8])
    write_embeddings(tmp_path / "t.bin", {"x/0": v})
    prov = get_provider("table", tmp_path / "t.bin")
    assert isinstance(prov, TableEmbedder) and np.array_equal(prov.embed(None, "x/0"), v)
    with pytest.raises(ProviderError):
        prov.embed(None, "x/1")


@pytest.fixture(scope="module")
def tiny():
    items = generate_items(WORLD, 4, seed=6)
    vocab = world_vocab(WORLD)
    model = DiT(ModelConfig(dim=32, heads=2, double_blocks=1, single_blocks=1, vocab_size=len(vocab)), seed=2)
    return benchmark_items(items), vocab, model


def test_report_shape_and_determinism(tiny):
    bench, vocab, model = tiny
    modes = list(TaskMode)
    a = run_benchmark(model, bench, modes, ToyEmbedder(), seed=1, vocab=vocab, steps=2)
    b = run_benchmark(model, bench, modes, ToyEmbedder(), seed=1, vocab=vocab, steps=2)
    assert len(a.rows) == 12 and set(a.means()) == {m.label for m in modes}
    assert a.to_text() == b.to_text()
    back = MetricReport.from_text(a.to_text())
    assert back.to_text() == a.to_text()
    for r in a.rows:
        assert -1.0 <= r["identity"] <= 1.0 and r["text"] in (0.0, 0.5, 1.0)


def test_multiref_table(tiny):
    bench, vocab, model = tiny
    rows, notes = multiref_compare({"base": model, "tuned": model}, bench, [1, 2], ToyEmbedder(), 0, vocab, steps=1)
    assert [(r.model, r.ref_count) for r in rows] == [("base", 1), ("base", 2), ("tuned", 1), ("tuned", 2)]
    usable = sum(len(b.refs) >= 2 for b in bench)
    assert all(r.n == usable for r in rows) and len(notes) == len(bench) - usable
    text = format_comparison(rows)
    assert "tuned.r2.identity=" in text
