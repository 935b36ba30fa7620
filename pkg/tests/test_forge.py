import numpy as np
import pytest
import torch

from polyptych.evaluate import ToyEmbedder
from polyptych.forge import (
    CurationLog,
    Item,
    ShardError,
    WorldConfig,
    WorldConfigError,
    blank_background_detect,
    curate,
    diptych_samples,
    generate_items,
    item_samples,
    read_embeddings,
    read_shard,
    render_scene,
    shape_support,
    synthesize_multiref,
    world_vocab,
    write_embeddings,
    write_shard,
)
from polyptych.model import DiT, ModelConfig


class StubEmbedder:
    """Unit vectors looked up by image key; raises for keys marked broken."""

    name = "stub"

    def __init__(self, table, broken=()):
        self.table = table
        self.broken = set(broken)

    def embed(self, image, key=None):
        if key in self.broken:
            raise RuntimeError("provider timeout")
        v = np.asarray(self.table[key], dtype=np.float64)
        return v / np.linalg.norm(v)


def unit(deg):
    a = np.deg2rad(deg)
    return np.array([np.cos(a), np.sin(a)])


def make_item(item_id, n=3, blank=(), target=None):
    imgs, sils = [], []
    for k in range(n):
        img = np.full((8, 8, 3), 0.4)
        sil = np.zeros((8, 8), dtype=bool)
        if k not in blank:
            sil[2:6, 2:6] = True
            img[sil] = [1.0, 0.0, 0.0]
        imgs.append(img)
        sils.append(sil)
    scenes = [{"bg": "gray", "place": "field", "cy": 4.0, "cx": 4.0, "ry": 2.0, "rx": 2.0}] * n
    ident = {"shape": "square", "color": "red", "textured": False, "rigid": True, "radius": 0.25}
    return Item(item_id, imgs, sils, ["red square on gray field"] * n, ident, scenes,
                n - 1 if target is None else target)


def table_for(item_id, angles):
    return {f"{item_id}/{k}": unit(a) for k, a in enumerate(angles)}


@pytest.fixture(scope="module")
def world():
    return WorldConfig()


def test_generation_is_deterministic(world):
    a = generate_items(world, 6, seed=11)
    b = generate_items(world, 6, seed=11)
    for x, y in zip(a, b):
        assert x.captions == y.captions and x.target == y.target
        assert all(np.array_equal(i, j) for i, j in zip(x.images, y.images))
    c = generate_items(world, 6, seed=12)
    assert any(x.captions != y.captions for x, y in zip(a, c))


def test_silhouettes_are_exact_and_identity_constant(world):
    for item in generate_items(world, 20, seed=3):
        assert 2 <= len(item.images) <= 4 and item.target == len(item.images) - 1
        subject = item.captions[0].split(" on ")[0]
        for img, sil, cap, sc in zip(item.images, item.silhouettes, item.captions, item.scenes):
            h, w = img.shape[:2]
            want = shape_support(item.identity["shape"], h, w, sc["cy"], sc["cx"], sc["ry"], sc["rx"])
            assert np.array_equal(sil, want)
            bg = world.background_rgb(sc["bg"], sc["place"])
            assert np.all(img[~sil] == bg)
            assert (np.abs(img[sil] - bg).max(axis=-1) > 0).all()
            assert cap.split(" on ")[0] == subject


def test_world_config_errors():
    with pytest.raises(WorldConfigError):
        WorldConfig(sizes=((15, 16),))
    with pytest.raises(WorldConfigError):
        WorldConfig(scenes=(1, 3))
    with pytest.raises(WorldConfigError):
        WorldConfig(object_colors=("magenta",))


def test_zero_items_is_valid(world, tmp_path):
    assert generate_items(world, 0) == []
    manifest = write_shard(tmp_path / "s", [])
    assert manifest["items"] == 0 and read_shard(tmp_path / "s") == []


def test_curation_worked_examples():
    # cosines 0.9 everywhere: kept; one pair at 0.15: rejected under threshold 0.2
    good = make_item("good")
    bad = make_item("bad")
    table = {**table_for("good", [0, 25.84, 12]), **table_for("bad", [0, 81.37, 10])}
    kept, log = curate([good, bad], StubEmbedder(table), threshold=0.2)
    assert [i.id for i in kept] == ["good"]
    assert log.rejected["bad"].startswith("rule1")


def test_curation_blank_rules():
    all_blank = make_item("allblank", blank=(0, 1, 2))
    blank_target = make_item("blanktgt", n=3, blank=(2,))
    table = {**table_for("allblank", [0, 0, 0]), **table_for("blanktgt", [0, 5, 10])}
    kept, log = curate([all_blank, blank_target], StubEmbedder(table))
    assert log.rejected["allblank"] == "rule2:all-blank"
    assert [i.id for i in kept] == ["blanktgt"] and kept[0].target == 1
    assert log.redesignated["blanktgt"] == (2, 1)


def test_threshold_is_strict_at_tie():
    item = make_item("tie", n=2)
    exact = {"tie/0": np.array([1.0, 0.0]), "tie/1": np.array([0.25, np.sqrt(1 - 0.25**2)])}
    kept, _ = curate([item], StubEmbedder(exact), threshold=0.25)
    assert len(kept) == 1
    kept, _ = curate([item], StubEmbedder(exact), threshold=0.2500001)
    assert kept == []


def test_curation_monotone_and_idempotent(world):
    items = generate_items(world, 40, seed=5)
    emb = ToyEmbedder()
    sets = [{i.id for i in curate(items, emb, th)[0]} for th in (0.1, 0.3, 0.5, 0.7, 0.9)]
    for loose, tight in zip(sets, sets[1:]):
        assert tight <= loose
    once, _ = curate(items, emb, 0.5)
    twice, log = curate(once, emb, 0.5)
    assert [i.id for i in twice] == [i.id for i in once] and not log.redesignated


def test_provider_failure_quarantines_item():
    a, b = make_item("a"), make_item("b")
    table = {**table_for("a", [0, 1, 2]), **table_for("b", [0, 1, 2])}
    kept, log = curate([a, b], StubEmbedder(table, broken={"a/1"}))
    assert [i.id for i in kept] == ["b"] and "timeout" in log.quarantined["a"]
    assert any(line.startswith("quarantined a") for line in log.lines())
    assert isinstance(log, CurationLog)


def test_blank_detector():
    flat = np.full((8, 8, 3), 0.3)
    assert blank_background_detect(flat)
    sil = np.zeros((8, 8), dtype=bool)
    sil[3, 3] = True  # 1/64 covers more than half a percent
    assert not blank_background_detect(flat, sil)
    noisy = flat.copy()
    noisy[0, 0] = 1.0
    assert not blank_background_detect(noisy)


def test_shard_round_trip(world, tmp_path):
    items = generate_items(world, 5, seed=9)
    m1 = write_shard(tmp_path / "a", items)
    back = read_shard(tmp_path / "a")
    for x, y in zip(items, back):
        assert x.id == y.id and x.captions == y.captions and x.identity == y.identity and x.target == y.target
        assert all(np.array_equal(i, j) for i, j in zip(x.images, y.images))
        assert all(np.array_equal(i, j) for i, j in zip(x.silhouettes, y.silhouettes))
    m2 = write_shard(tmp_path / "b", back)
    assert m1["hash"] == m2["hash"]
    with pytest.raises(ShardError):
        read_shard(tmp_path / "missing")


def test_embedding_table_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    table = {f"item{i}/0": v / np.linalg.norm(v) for i, v in enumerate(rng.standard_normal((4, 5)))}
    write_embeddings(tmp_path / "e.bin", table)
    back = read_embeddings(tmp_path / "e.bin")
    assert set(back) == set(table) and all(np.array_equal(back[k], table[k]) for k in table)
    with pytest.raises(ShardError):
        write_embeddings(tmp_path / "x.bin", {"a": np.ones(3)})


def test_samples_from_items(world):
    items = generate_items(world, 4, seed=2)
    pairs = diptych_samples(items)
    assert len(pairs) == sum(len(i.refs) for i in items)
    for item in items:
        got = item_samples(item, (1, 2, 3))
        assert [len(s.refs) for s in got] == [k for k in (1, 2, 3) if k <= len(item.refs)]
        for s in got:
            assert (s.user_mask >= s.silhouette).all()


def test_render_blank_scene(world):
    img, sil = render_scene(world, (16, 16), None, {"bg": "gray", "place": "room"})
    assert not sil.any() and blank_background_detect(img, sil)


def test_multiref_synthesis(world):
    torch.manual_seed(0)
    items = generate_items(world, 4, seed=1)
    vocab = world_vocab(world)
    model = DiT(ModelConfig(dim=32, heads=2, double_blocks=1, single_blocks=1, vocab_size=len(vocab)))
    # a zero-initialised head maps noise straight through; lower the bar so shapes survive
    run = lambda: synthesize_multiref(model, items, world, vocab, 3, ToyEmbedder(), threshold=-1.0, steps=2,
                                      per_item=2)
    samples, notes = run()
    again, _ = run()
    assert len(samples) + sum(n.startswith(("discard", "skip")) for n in notes) == 8
    for s, t in zip(samples, again):
        assert 2 <= len(s.refs) <= 3 and np.array_equal(s.target, t.target)
        assert (s.user_mask >= s.silhouette).all()
