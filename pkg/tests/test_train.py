import math

import numpy as np
import pytest
import torch

from latentvision import classifier as clf
from latentvision import train as T
from latentvision.codec import compress
from latentvision.data import LatentRecord, LatentStore, texture_set
from latentvision.entropy import partial_decode
from latentvision.errors import ConfigError

from _support import tiny_classifier, tiny_codec


def _reduced_store(codec, n_per_class=4, seed=0, classes=2):
    imgs, labels = texture_set(classes, n_per_class, seed=seed)
    records = []
    for img, lab in zip(imgs, labels):
        _, _, data = compress(img, codec.config, codec)
        code = partial_decode(data, codec)
        records.append(LatentRecord(code.y_hat.astype(np.int16), code.sigma_hat, int(lab), "", len(data), 4096))
    return LatentStore(codec.config.quality_index, [f"c{i}" for i in range(classes)], records)


# configuration ----------------------------------------------------------

def test_default_learning_rates():
    assert T.TrainConfig("frozen", 1).learning_rate == 1e-3
    assert T.TrainConfig("joint", 1).learning_rate == 1e-4
    assert T.TrainConfig("codec", 8).rd_weight == pytest.approx(0.1800 * 255**2)


@pytest.mark.parametrize("kw", [
    {"mode": "pixels"}, {"quality_index": 3}, {"epochs": 0}, {"batch_size": 0},
    {"learning_rate": -1.0}, {"mode": "codec", "rd_weight": 0.0},
    {"joint_loss_weights": (1.0, -1.0, 0.0)}, {"grad_clip": 0.0}, {"interp": "cubic"},
])
def test_invalid_configs(kw):
    base = {"mode": "frozen", "quality_index": 1}
    with pytest.raises(ConfigError):
        T.TrainConfig(**{**base, **kw})


def test_config_hash_stable():
    a = T.TrainConfig("frozen", 4, seed=3)
    assert a.config_hash() == T.TrainConfig("frozen", 4, seed=3).config_hash()
    assert a.config_hash() != T.TrainConfig("frozen", 4, seed=4).config_hash()


# losses -------------------------------------------------------------------

def test_loss_combined_weights():
    task = torch.tensor(1.7)
    assert torch.equal(T.loss_combined(task, 2.5, 0.3), task)
    assert float(T.loss_combined(task, 2.5, 0.3, (0, 1, 0))) == 2.5
    assert float(T.loss_combined(task, 2.5, 0.3, (2, 1, 10))) == pytest.approx(3.4 + 2.5 + 3.0)
    with pytest.raises(ConfigError):
        T.loss_combined(task, 1.0, 1.0, (1, -1, 0))


def test_loss_combined_gradient_is_linear():
    w = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64, requires_grad=True)
    parts = [lambda v: (v ** 2).sum(), lambda v: v.sin().sum(), lambda v: (v ** 3).sum()]
    weights = (1.0, 0.5, 2.0)
    total = T.loss_combined(parts[0](w), parts[1](w), parts[2](w), weights)
    (g,) = torch.autograd.grad(total, w)
    expected = sum(c * torch.autograd.grad(f(w), w)[0] for c, f in zip(weights, parts))
    torch.testing.assert_close(g, expected)
    eps = 1e-6
    for i in range(3):
        d = torch.zeros(3, dtype=torch.float64)
        d[i] = eps
        with torch.no_grad():
            fd = (T.loss_combined(*(f(w + d) for f in parts), weights)
                  - T.loss_combined(*(f(w - d) for f in parts), weights)) / (2 * eps)
        assert float(fd) == pytest.approx(float(g[i]), rel=1e-6)


# frozen ---------------------------------------------------------------------

def test_frozen_contract_and_outputs(tmp_path):
    codec = tiny_codec(m=8, n=8).eval()
    store = _reduced_store(codec)
    cfg = T.TrainConfig("frozen", 1, epochs=2, batch_size=4, seed=0)
    before = codec.encoder_state_bytes()
    model, metrics = T.train_frozen(cfg, store, store, codec, tmp_path, tiny_classifier(num_classes=2))
    assert codec.encoder_state_bytes() == before
    assert metrics.encoder_hash_before == metrics.encoder_hash_after
    assert len(metrics.epochs) == 2
    for e in metrics.epochs:
        assert 0 <= e.val_top1 <= 100 and 0 <= e.val_top5 <= 100
    assert (tmp_path / "best.pt").exists() and (tmp_path / "last.pt").exists()
    best, extra = clf.load_classifier(tmp_path / "best.pt")
    assert extra["epoch"] == metrics.best_epoch.epoch


def test_frozen_channel_mismatch():
    codec = tiny_codec(m=8, n=8).eval()
    store = _reduced_store(codec)
    other = _reduced_store(tiny_codec(m=4, n=8).eval())
    cfg = T.TrainConfig("frozen", 1, epochs=1, batch_size=4)
    with pytest.raises(ConfigError):
        T.train_frozen(cfg, store, other)
    with pytest.raises(ConfigError):
        T.train_frozen(T.TrainConfig("frozen", 4, epochs=1), store, store)


def test_frozen_reproducible():
    codec = tiny_codec(m=8, n=8).eval()
    store = _reduced_store(codec)
    cfg = T.TrainConfig("frozen", 1, epochs=2, batch_size=3, seed=7)
    runs = [T.train_frozen(cfg, store, store, codec, None, tiny_classifier(num_classes=2, seed=1))[1]
            for _ in range(2)]
    assert [vars(e) for e in runs[0].epochs] == [vars(e) for e in runs[1].epochs]


# joint ------------------------------------------------------------------------

def test_joint_one_step_changes_encoder_only():
    codec = tiny_codec(m=8, n=8).eval()
    imgs, labels = texture_set(2, 2, seed=0)
    cfg = T.TrainConfig("joint", 1, epochs=1, batch_size=4, learning_rate=1e-3)
    new_codec, _, metrics = T.train_joint(cfg, imgs, labels, imgs, labels, codec,
                                          tiny_classifier(num_classes=2), max_steps=1)
    assert metrics.encoder_hash_before != metrics.encoder_hash_after
    old, new = codec.state_dict(), new_codec.state_dict()
    changed = {k.split(".")[0] for k in old if not torch.equal(old[k], new[k])}
    assert "g_a" in changed
    assert not changed & {"g_s", "prior"}
    # the caller's codec is untouched
    assert codec.encoder_hash() == metrics.encoder_hash_before


def test_joint_with_rate_and_distortion_terms():
    codec = tiny_codec(m=8, n=8).eval()
    imgs, labels = texture_set(2, 2, seed=0)
    cfg = T.TrainConfig("joint", 1, epochs=1, batch_size=4, joint_loss_weights=(1.0, 0.1, 1.0))
    _, _, metrics = T.train_joint(cfg, imgs, labels, imgs, labels, codec,
                                  tiny_classifier(num_classes=2), max_steps=1)
    assert math.isfinite(metrics.epochs[0].train_loss)
    assert metrics.epochs[0].mean_bpp > 0


def test_evaluate_is_deterministic_and_perfect_on_memorized_split():
    rng = np.random.default_rng(0)
    records = [LatentRecord(np.full((8, 4, 4), 6 * c - 3, np.int16) + rng.integers(-1, 2, (8, 4, 4)).astype(np.int16),
                            np.full((8, 4, 4), 1.0 + c, np.float32), c, "", 10, 4096)
               for c in (0, 0, 1, 1)]
    store = LatentStore(1, ["a", "b"], records)
    cfg = T.TrainConfig("frozen", 1, epochs=30, batch_size=4, seed=0)
    model, _ = T.train_frozen(cfg, store, store, None, None, tiny_classifier(num_classes=2))
    a = T.evaluate(model, store)
    assert a == T.evaluate(model, store)
    assert a["top1"] == 100.0
    assert set(a["per_class_accuracy"]) == {0, 1}


def test_evaluate_empty_split():
    model = tiny_classifier(num_classes=2)
    with pytest.raises(ValueError):
        T.evaluate(model, LatentStore(1, ["a", "b"], []))


# codec pretraining ----------------------------------------------------------------

def test_codec_family_rate_ordering():
    imgs, _ = texture_set(4, 8, seed=0)
    val, _ = texture_set(4, 2, seed=1)
    bpp = {1: [], 8: []}
    first_last = []
    for seed in range(3):
        cfg = T.TrainConfig("codec", 1, epochs=6, batch_size=8, learning_rate=1e-3, seed=seed, grad_clip=1.0)
        fam = T.pretrain_codec_family(cfg, imgs, val, qualities=(1, 8), reduced=(16, 16))
        for q, (_, m) in fam.items():
            bpp[q].append(m.epochs[-1].mean_bpp)
            first_last.append(m.epochs[-1].train_loss <= m.epochs[0].train_loss)
    assert np.median(bpp[8]) > np.median(bpp[1])
    assert sum(first_last) >= len(first_last) // 2 + 1


def test_pretrain_rejects_wrong_mode():
    with pytest.raises(ConfigError):
        T.pretrain_codec(T.TrainConfig("frozen", 1), np.zeros((1, 3, 64, 64), np.float32))


def test_run_outputs_are_byte_stable(tmp_path):
    m = T.RunMetrics("abc", 0, [T.EpochMetrics(1, 0.5, 0.6, 50.0, 100.0, 0.25)], wall_time=1.23)
    cfg = T.TrainConfig("frozen", 1)
    T.write_run_outputs(m, cfg, tmp_path / "a")
    m.wall_time = 9.87
    T.write_run_outputs(m, cfg, tmp_path / "b")
    for name in ("metrics.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(T.CSV_COLUMNS)
