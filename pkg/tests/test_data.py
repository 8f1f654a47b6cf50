import numpy as np
import pytest
import torch
from PIL import Image

from latentvision import data as D
from latentvision.codec import QualityConfig, build_codec
from latentvision.errors import DatasetError, ShapeError

MINC_CLASSES = [
    "brick", "carpet", "ceramic", "fabric", "foliage", "food", "glass", "hair", "leather",
    "metal", "mirror", "other", "painted", "paper", "plastic", "polishedstone", "skin",
    "sky", "stone", "tile", "wallpaper", "water", "wood",
]


@pytest.fixture
def toy_root(tmp_path):
    D.write_texture_dataset(tmp_path, num_classes=4, per_class=10, seed=0)
    return tmp_path


def test_toy_split_counts(toy_root):
    index = D.ingest(toy_root, seed=0)
    assert index.classes == ["class_00", "class_01", "class_02", "class_03"]
    for split, n in (("train", 8), ("val", 1), ("test", 1)):
        assert index.per_class_counts(split) == {c: n for c in index.classes}
    # the splits partition the index
    paths = [e.path for e in index.entries]
    assert len(paths) == len(set(paths)) == 40
    assert paths == sorted(paths)


def test_ingest_is_seeded(toy_root):
    a = D.ingest(toy_root, seed=1).entries
    assert a == D.ingest(toy_root, seed=1).entries
    assert a != D.ingest(toy_root, seed=2).entries


def test_manifest_split_is_honoured(tmp_path):
    manifest = D.write_texture_dataset(tmp_path, num_classes=3, per_class=5, seed=0, splits=(3, 1, 1))
    index = D.ingest(tmp_path, manifest)
    assert [len(index.split(s)) for s in D.SPLITS] == [9, 3, 3]
    assert index.split("val")[0].path == "class_00/img_0003.png"


def test_minc_split_files(tmp_path):
    labels = tmp_path / "labels"
    labels.mkdir()
    for fname, (lo, hi) in (("train1", (0, 2125)), ("validate1", (2125, 2250)), ("test1", (2250, 2500))):
        lines = [f"images/{c}/{c}_{i:06d}.jpg" for c in MINC_CLASSES for i in range(lo, hi)]
        (labels / f"{fname}.txt").write_text("\n".join(lines) + "\n")
    index = D.ingest(tmp_path, D.minc_manifest(tmp_path, 1), check_images=False)
    assert index.num_classes == 23
    for split, n in (("train", 2125), ("val", 125), ("test", 250)):
        counts = index.per_class_counts(split)
        assert set(counts.values()) == {n}


def test_minc_missing_split_file(tmp_path):
    with pytest.raises(DatasetError, match="missing MINC split file"):
        D.minc_manifest(tmp_path, 1)


def test_seven_scene_layout(tmp_path):
    for c in range(7):
        d = tmp_path / f"scene_{c}"
        d.mkdir()
        for i in range(400):
            (d / f"{i:03d}.jpg").touch()
    index = D.ingest(tmp_path, check_images=False)
    assert index.num_classes == 7
    assert set(index.per_class_counts().values()) == {400}


def test_empty_class_named(tmp_path):
    D.write_texture_dataset(tmp_path, num_classes=2, per_class=3)
    (tmp_path / "zz_empty").mkdir()
    with pytest.raises(DatasetError, match="zz_empty"):
        D.ingest(tmp_path)


def test_unreadable_image_skipped(toy_root, caplog):
    (toy_root / "class_01" / "img_0002.png").write_bytes(b"not an image")
    index = D.ingest(toy_root, fractions=(0.7, 0.2, 0.1))
    assert index.skipped == ["class_01/img_0002.png"]
    assert len(index.entries) == 39
    assert "unreadable" in caplog.text


def test_bad_manifest_line(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("a.png\tcat\ttraining\n")
    with pytest.raises(DatasetError):
        D.read_manifest(p)


def test_pad_to_multiple_reflects():
    img = np.random.default_rng(0).random((3, 50, 70)).astype(np.float32)
    out = D.pad_to_multiple(img)
    assert out.shape == (3, 64, 128)
    np.testing.assert_array_equal(out[:, :50, :70], img)
    np.testing.assert_array_equal(out[:, 50, :70], img[:, 48, :])


def test_precompute_store(tmp_path):
    D.write_texture_dataset(tmp_path, num_classes=2, per_class=5, seed=0)
    index = D.ingest(tmp_path)
    codec = build_codec(QualityConfig.for_quality(4), 0).eval()
    store = D.precompute_latents(index, "train", codec)
    assert len(store) == len(index.split("train")) == 8
    assert store.latent_channels == 192
    assert store.records[0].y_hat.dtype == np.int16
    assert store.records[0].sigma_hat.dtype == np.float32
    assert store.to_bytes() == D.precompute_latents(index, "train", codec).to_bytes()
    assert store.mean_bpp() > 0


def _random_store(n=10, shape=(4, 4, 4), seed=0):
    rng = np.random.default_rng(seed)
    recs = [D.LatentRecord(rng.integers(-30, 30, shape).astype(np.int16),
                           rng.uniform(0.11, 5, shape).astype(np.float32), i % 3, f"img{i}.png", 100 + i, 4096)
            for i in range(n)]
    return D.LatentStore(8, ["a", "b", "c"], recs)


def test_store_roundtrip(tmp_path):
    store = _random_store()
    path = store.write(tmp_path / "s.lvst")
    assert path.read_bytes()[:4] == b"LVST"
    back = D.LatentStore.read(path)
    assert back.quality_index == 8 and back.classes == ["a", "b", "c"]
    for a, b in zip(store.records, back.records):
        assert a.y_hat.tobytes() == b.y_hat.tobytes()
        assert a.sigma_hat.tobytes() == b.sigma_hat.tobytes()
        assert (a.class_id, a.source, a.stream_bytes, a.pixels) == (b.class_id, b.source, b.stream_bytes, b.pixels)


def test_store_corruption():
    data = _random_store().to_bytes()
    with pytest.raises(DatasetError):
        D.LatentStore.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(DatasetError):
        D.LatentStore.from_bytes(data[:-3])
    with pytest.raises(DatasetError):
        D.LatentStore.from_bytes(data + b"\x00")


@pytest.mark.parametrize("train", [True, False])
@pytest.mark.parametrize("hw", [(4, 4), (7, 9), (40, 40)])
def test_augment_output_size(train, hw):
    y = torch.zeros(5, *hw)
    a, b = D.augment(y, y + 1, np.random.default_rng(0), train)
    assert a.shape == b.shape == (5, 28, 28)


def test_augment_colocation():
    rng = np.random.default_rng(0)
    for trial in range(200):
        y = np.zeros((2, 32, 32), np.float32)
        s = np.ones((2, 32, 32), np.float32)
        i, j = rng.integers(2, 30, size=2)
        y[0, i, j] = 9.0
        s[0, i, j] = 7.0
        a, b = D.augment(y, s, np.random.default_rng(trial), True, interp="nearest")
        ya = set(zip(*np.nonzero(a.numpy()[0] == 9.0)))
        sb = set(zip(*np.nonzero(b.numpy()[0] == 7.0)))
        assert ya == sb


def test_augment_eval_is_center_crop():
    y = torch.arange(32 * 32, dtype=torch.float32).view(1, 32, 32)
    a, _ = D.augment(y, y, None, False)
    torch.testing.assert_close(a, y[:, 2:30, 2:30])


def test_augment_seeded():
    y = torch.randn(3, 16, 16)
    a = D.augment(y, y.abs(), np.random.default_rng(5), True)
    b = D.augment(y, y.abs(), np.random.default_rng(5), True)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_flip_rate():
    y = torch.arange(32, dtype=torch.float32).repeat(32, 1)[None]
    rng = np.random.default_rng(0)
    flips = 0
    n = 10_000
    for _ in range(n):
        a, _ = D.augment(y, y, rng, True)
        flips += bool(a[0, 0, 0] > a[0, 0, -1])
    assert abs(flips / n - 0.5) <= 0.02


def test_batch_sizes_and_labels():
    store = _random_store(10)
    sizes = [len(lab) for _, _, lab in D.batches(store, 4, seed=0)]
    assert sizes == [4, 4, 2]
    for y, s, lab in D.batches(store, 4, seed=0, train=False):
        assert y.shape[1:] == (4, 28, 28) and s.shape == y.shape
        assert lab.min() >= 0 and lab.max() < store.num_classes


def test_batch_order_per_epoch():
    store = _random_store(10)

    def order(epoch):
        return torch.cat([lab for _, _, lab in D.batches(store, 3, seed=0, epoch=epoch)]).tolist(), \
            [y.sum().item() for y, _, _ in D.batches(store, 3, seed=0, epoch=epoch)]

    assert order(0) == order(0)
    assert order(0) != order(1)


def test_batches_empty_store():
    with pytest.raises(DatasetError):
        list(D.batches(D.LatentStore(1, ["a"], []), 4))
    with pytest.raises(ValueError):
        list(D.batches(_random_store(), 0))


def test_augment_shape_mismatch():
    with pytest.raises(ShapeError):
        D.augment(torch.zeros(2, 8, 8), torch.zeros(2, 8, 9), None, False)


def test_texture_classes_differ():
    imgs, labels = D.texture_set(4, 3, seed=0)
    assert imgs.shape == (12, 3, 64, 64) and imgs.dtype == np.float32
    assert labels.tolist() == [0] * 3 + [1] * 3 + [2] * 3 + [3] * 3
    assert 0 <= imgs.min() and imgs.max() <= 1
    png = D.texture_set(1, 1, seed=0)[0][0]
    assert Image.fromarray((png.transpose(1, 2, 0) * 255).astype(np.uint8)).size == (64, 64)
