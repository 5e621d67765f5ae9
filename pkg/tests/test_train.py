import math
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lencap import dataset, model as M, train as T, world
from lencap.dataset import DatasetShard, Triplet
from lencap.vocab import Vocab

from conftest import make_scene

TINY = M.ModelConfig(image_size=64, patch=16, d_model=16, enc_layers=1, dec_layers=1, heads=2)


def test_lr_schedule_endpoints():
    cfg = T.TrainConfig(steps=1000, lr=3e-4, warmup=200)
    assert T.lr_at(0, cfg) == 0.0
    assert T.lr_at(200, cfg) == 3e-4
    assert T.lr_at(1000, cfg) == 0.0
    assert math.isclose(T.lr_at(600, cfg), 1.5e-4)


@given(st.integers(1, 500), st.integers(0, 499), st.floats(1e-6, 1.0))
def test_lr_schedule_properties(steps_after, warmup, peak):
    cfg = T.TrainConfig(steps=warmup + steps_after, warmup=warmup, lr=peak)
    values = [T.lr_at(s, cfg) for s in range(cfg.steps + 1)]
    assert min(values) >= 0 and max(values) <= peak * (1 + 1e-12)
    if warmup:
        assert abs(T.lr_at(warmup, cfg) - T.lr_at(warmup - 1, cfg)) <= peak / warmup + 1e-12
    assert all(b <= a + 1e-15 for a, b in zip(values[warmup:], values[warmup + 1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(steps=100, warmup=100)
    with pytest.raises(ValueError):
        T.TrainConfig(batch=0)


def many_box_shard(vocab):
    # ten objects in one scene, twelve (box, caption) groups over ten boxes
    objs = [("circle", "red", "small", 0.1 + 0.09 * i, 0.5) for i in range(10)]
    scene = make_scene(*objs, seed=5)
    trips = []
    for i, o in enumerate(scene.objects):
        for words in ([o.shape], [o.color, o.shape])[: 2 if i < 2 else 1]:
            trips.append(Triplet(5, o.box.as_tuple(), len(words),
                                 tuple(vocab.encode_caption(words, 12))))
    return DatasetShard([scene], trips)


def test_sampler_caps_boxes_per_scene(vocab):
    shard = many_box_shard(vocab)
    sampler = T.BatchSampler(shard, max_boxes=8)
    rng = np.random.default_rng(0)
    for _ in range(20):
        picks, batch = sampler.sample(rng, 8)
        assert len({t.box for _, t in picks}) == 8
    picks, _ = sampler.sample(rng, 24)
    for start in range(0, 24, 8):
        assert len({t.box for _, t in picks[start:start + 8]}) <= 8


def test_sampler_is_deterministic(vocab):
    shard = dataset.build_dataset(world.generate_scenes(2, 20), vocab)
    a = T.sample_batch(shard, np.random.default_rng(3), 16)
    b = T.sample_batch(shard, np.random.default_rng(3), 16)
    for f in ("images", "image_index", "boxes", "tokens"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_caption_choice_frequency(vocab):
    scene = make_scene(("circle", "red", "small", 0.5, 0.5))
    box = scene.objects[0].box.as_tuple()
    caps = [["circle"], ["red", "circle"]]
    shard = DatasetShard([scene], [Triplet(scene.seed, box, len(c),
                                           tuple(vocab.encode_caption(c, 12))) for c in caps])
    sampler = T.BatchSampler(shard)
    rng = np.random.default_rng(11)
    counts = Counter()
    for _ in range(100):
        picks, _ = sampler.sample(rng, 100)
        counts.update(t.length for _, t in picks)
    assert abs(counts[1] / 10_000 - 0.5) <= 0.05


def test_batch_rows_point_at_their_scene(vocab):
    shard = dataset.build_dataset(world.generate_scenes(2, 10), vocab)
    sampler = T.BatchSampler(shard)
    picks, batch = sampler.sample(np.random.default_rng(0), 32)
    scenes = shard.scene_map()
    for row, (seed, trip) in enumerate(picks):
        assert np.array_equal(batch.images[batch.image_index[row]], world.render(scenes[seed]))
        assert tuple(batch.tokens[row]) == trip.tokens


def test_empty_shard_rejected():
    with pytest.raises(ValueError):
        T.BatchSampler(DatasetShard())


@pytest.fixture(scope="module")
def small_shard():
    return dataset.build_dataset(world.generate_scenes(4, 12))


def test_training_is_deterministic_and_starts_near_log_v(tmp_path, small_shard):
    cfg = T.TrainConfig(steps=6, warmup=2, batch=8, log_every=0)
    a = T.train(TINY, cfg, small_shard, tmp_path / "a.fxcp", tmp_path / "a.csv")
    b = T.train(TINY, cfg, small_shard, tmp_path / "b.fxcp", tmp_path / "b.csv")
    assert (tmp_path / "a.fxcp").read_bytes() == (tmp_path / "b.fxcp").read_bytes()
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert abs(a.curve[0][1] - math.log(TINY.vocab_size)) < 0.2
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "step,loss,lr"
    assert len(b.curve) == 6


def test_non_finite_loss_aborts_with_step(small_shard, monkeypatch):
    real = M.loss_and_grads
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        loss, grads = real(*args, **kw)
        return (float("nan") if calls["n"] == 3 else loss), grads

    monkeypatch.setattr(M, "loss_and_grads", flaky)
    with pytest.raises(T.TrainingError, match="step 2"):
        T.train(TINY, T.TrainConfig(steps=5, warmup=1, batch=4, log_every=0), small_shard)


def test_checkpoint_round_trip(tmp_path):
    params = M.init_params(TINY, 9)
    path = tmp_path / "m.fxcp"
    T.save_checkpoint(params, TINY, path)
    back, cfg = T.load_checkpoint(path, expected=TINY)
    assert cfg == TINY
    assert set(back) == set(params)
    assert all(np.array_equal(back[k], params[k]) and back[k].dtype == np.float32 for k in params)


def test_checkpoint_header_errors(tmp_path):
    path = tmp_path / "m.fxcp"
    T.save_checkpoint(M.init_params(TINY, 0), TINY, path)
    data = bytearray(path.read_bytes())
    bad_version = data[:4] + struct.pack("<H", 99) + data[6:]
    (tmp_path / "v.fxcp").write_bytes(bytes(bad_version))
    with pytest.raises(T.CheckpointError, match="version"):
        T.load_checkpoint(tmp_path / "v.fxcp")
    (tmp_path / "m2.fxcp").write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(T.CheckpointError, match="magic"):
        T.load_checkpoint(tmp_path / "m2.fxcp")
    (tmp_path / "t.fxcp").write_bytes(bytes(data[:-7]))
    with pytest.raises((T.CheckpointError, ValueError)):
        T.load_checkpoint(tmp_path / "t.fxcp")


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "m.fxcp"
    T.save_checkpoint(M.init_params(TINY, 0), TINY, path)
    with pytest.raises(ValueError, match="shape|names"):
        T.load_checkpoint(path, expected=M.ModelConfig(image_size=64, patch=16, d_model=32,
                                                       enc_layers=1, dec_layers=1, heads=2))
