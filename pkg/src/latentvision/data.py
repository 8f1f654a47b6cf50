"""Dataset indexing, latent precomputation, latent-space augmentation, batching."""

from __future__ import annotations

import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DatasetError, ShapeError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm"}
RESIZE = 32
CROP = 28

STORE_MAGIC = b"LVST"
STORE_VERSION = 1


@dataclass(frozen=True)
class Entry:
    path: str
    class_id: int
    split: str


@dataclass
class DatasetIndex:
    root: Path
    classes: list[str]
    entries: list[Entry]
    skipped: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def per_class_counts(self, split: str | None = None) -> dict[str, int]:
        counts = Counter(e.class_id for e in self.entries if split is None or e.split == split)
        return {c: counts.get(i, 0) for i, c in enumerate(self.classes)}


def read_manifest(path) -> list[tuple[str, str, str]]:
    """Parse ``relative_path<TAB>class<TAB>split`` lines; blank lines and ``#`` comments are ignored."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in SPLITS:
            raise DatasetError(f"{path}:{lineno}: expected 'path<TAB>class<TAB>split'")
        rows.append((parts[0], parts[1], parts[2]))
    return rows


def write_manifest(rows, path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{p}\t{c}\t{s}\n" for p, c, s in rows), encoding="utf-8")
    return path


def minc_manifest(root, split_id: int = 1) -> list[tuple[str, str, str]]:
    """Manifest rows from MINC-2500 ``labels/{train,validate,test}<k>.txt`` files."""
    root = Path(root)
    rows = []
    for fname, split in (("train", "train"), ("validate", "val"), ("test", "test")):
        f = root / "labels" / f"{fname}{split_id}.txt"
        if not f.exists():
            raise DatasetError(f"missing MINC split file {f}")
        for line in f.read_text().split():
            rel = line.strip()
            rows.append((rel, Path(rel).parent.name, split))
    return rows


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def ingest(root, manifest=None, seed: int = 0, fractions=(0.8, 0.1, 0.1),
           check_images: bool = True) -> DatasetIndex:
    """Index a dataset from a manifest file or a directory-per-class layout.

    Without a manifest each class is split independently with a seeded
    shuffle; ``fractions`` gives the train/val/test proportions.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    if manifest is not None:
        rows = read_manifest(manifest) if not isinstance(manifest, list) else manifest
        classes = sorted({c for _, c, _ in rows})
        by_class = {c: i for i, c in enumerate(classes)}
        raw = sorted((p, by_class[c], s) for p, c, s in rows)
    else:
        class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
        if not class_dirs:
            raise DatasetError(f"no class directories under {root}")
        classes = [d.name for d in class_dirs]
        raw = []
        rng = np.random.default_rng(seed)
        for cid, d in enumerate(class_dirs):
            files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise DatasetError(f"class directory '{d.name}' is empty")
            perm = rng.permutation(len(files))
            n_train, n_val = _split_counts(len(files), fractions)
            for rank, i in enumerate(perm):
                split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
                raw.append((files[i].relative_to(root).as_posix(), cid, split))
        raw.sort()

    entries, skipped = [], []
    for rel, cid, split in raw:
        if check_images and not _readable(root / rel):
            log.warning("skipping unreadable image %s", rel)
            skipped.append(rel)
            continue
        entries.append(Entry(rel, cid, split))
    index = DatasetIndex(root, classes, entries, skipped)
    for split in SPLITS:
        counts = index.per_class_counts(split)
        if any(counts.values()):
            empty = [c for c, n in counts.items() if n == 0]
            if empty:
                raise DatasetError(f"split '{split}' has no images for classes {empty}")
    return index


def _split_counts(n: int, fractions) -> tuple[int, int]:
    total = sum(fractions)
    n_train = int(round(n * fractions[0] / total))
    n_val = int(round(n * fractions[1] / total))
    return min(n_train, n), min(n_val, n - min(n_train, n))


def load_image(path) -> np.ndarray:
    """RGB image as float32 ``[3, H, W]`` in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def pad_to_multiple(image: np.ndarray, multiple: int = 64) -> np.ndarray:
    h, w = image.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")


# latent store ------------------------------------------------------------

@dataclass
class LatentRecord:
    y_hat: np.ndarray        # int16 [M, h, w]
    sigma_hat: np.ndarray    # float32 [M, h, w]
    class_id: int
    source: str
    stream_bytes: int = 0
    pixels: int = 0

    @property
    def bpp(self) -> float:
        return 8 * self.stream_bytes / self.pixels if self.pixels else float("nan")


@dataclass
class LatentStore:
    quality_index: int
    classes: list[str]
    records: list[LatentRecord]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def latent_channels(self) -> int:
        return int(self.records[0].y_hat.shape[0]) if self.records else 0

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def mean_bpp(self) -> float:
        return float(np.mean([r.bpp for r in self.records])) if self.records else float("nan")

    def to_bytes(self) -> bytes:
        meta = json.dumps({"classes": self.classes}, sort_keys=True).encode()
        out = [STORE_MAGIC, struct.pack("<BBI", STORE_VERSION, self.quality_index, len(self.records)),
               struct.pack("<I", len(meta)), meta]
        for r in self.records:
            out.append(struct.pack("<HHH", *r.y_hat.shape))
        for r in self.records:
            src = r.source.encode()
            out.append(struct.pack("<HIIH", r.class_id, r.stream_bytes, r.pixels, len(src)))
            out.append(src)
            out.append(np.ascontiguousarray(r.y_hat, dtype="<i2").tobytes())
            out.append(np.ascontiguousarray(r.sigma_hat, dtype="<f4").tobytes())
        return b"".join(out)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "LatentStore":
        if data[:4] != STORE_MAGIC:
            raise DatasetError("not a latent store")
        try:
            version, quality, count = struct.unpack_from("<BBI", data, 4)
            if version != STORE_VERSION:
                raise DatasetError(f"unsupported latent store version {version}")
            pos = 10
            (mlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            meta = json.loads(data[pos:pos + mlen])
            pos += mlen
            shapes = [struct.unpack_from("<HHH", data, pos + 6 * i) for i in range(count)]
            pos += 6 * count
            records = []
            for shape in shapes:
                cid, nbytes, pixels, slen = struct.unpack_from("<HIIH", data, pos)
                pos += 12
                src = data[pos:pos + slen].decode()
                pos += slen
                n = int(np.prod(shape))
                y = np.frombuffer(data, dtype="<i2", count=n, offset=pos).reshape(shape).copy()
                pos += 2 * n
                s = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
                pos += 4 * n
                records.append(LatentRecord(y, s, cid, src, nbytes, pixels))
        except (struct.error, ValueError) as exc:
            raise DatasetError(f"truncated or corrupt latent store: {exc}") from exc
        if pos != len(data):
            raise DatasetError("latent store has trailing bytes")
        return cls(quality, meta["classes"], records)

    @classmethod
    def read(cls, path) -> "LatentStore":
        return cls.from_bytes(Path(path).read_bytes())


def precompute_latents(index: DatasetIndex, split: str, codec, q=None) -> LatentStore:
    """Compress every image of ``split`` and keep its partially decoded latents."""
    from .codec import compress
    from .entropy import partial_decode

    q = codec.config if q is None else q
    records = []
    for e in index.split(split):
        try:
            image = load_image(index.root / e.path)
        except Exception as exc:
            log.warning("skipping unreadable image %s: %s", e.path, exc)
            index.skipped.append(e.path)
            continue
        image = pad_to_multiple(image)
        _, _, data = compress(image, q, codec)
        code = partial_decode(data, codec)
        if np.abs(code.y_hat).max(initial=0) > np.iinfo(np.int16).max:
            raise DatasetError(f"{e.path}: latent symbol exceeds int16 range")
        records.append(LatentRecord(
            code.y_hat.astype(np.int16), code.sigma_hat.astype(np.float32), e.class_id, e.path,
            len(data), image.shape[1] * image.shape[2],
        ))
    return LatentStore(q.quality_index, list(index.classes), records)


# augmentation and batching ----------------------------------------------

def _resize(t: torch.Tensor, interp: str) -> torch.Tensor:
    kwargs = {"align_corners": False} if interp == "bilinear" else {}
    return F.interpolate(t.unsqueeze(0), size=(RESIZE, RESIZE), mode=interp, **kwargs)[0]


def _as_float(t) -> torch.Tensor:
    t = torch.as_tensor(t)
    return t if t.is_floating_point() else t.float()


def augment(y_hat, sigma_hat, rng: np.random.Generator | None, train: bool,
            interp: str = "bilinear") -> tuple[torch.Tensor, torch.Tensor]:
    """Resize to 32x32, then crop 28x28 (random in training, centred otherwise).

    Both tensors get the identical crop and the identical horizontal-flip
    decision.  Works on autograd tensors.
    """
    y, s = _as_float(y_hat), _as_float(sigma_hat)
    if y.shape != s.shape or y.dim() != 3:
        raise ShapeError(f"y_hat {tuple(y.shape)} and sigma_hat {tuple(s.shape)} must share a [C, H, W] shape")
    y, s = _resize(y, interp), _resize(s, interp)
    if train:
        i, j = (int(v) for v in rng.integers(0, RESIZE - CROP + 1, size=2))
        flip = bool(rng.random() < 0.5)
    else:
        i = j = (RESIZE - CROP) // 2
        flip = False
    y, s = y[:, i:i + CROP, j:j + CROP], s[:, i:i + CROP, j:j + CROP]
    if flip:
        y, s = y.flip(-1), s.flip(-1)
    return y, s


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def batches(store: LatentStore, batch_size: int, seed: int = 0, train: bool = True,
            epoch: int = 0, interp: str = "bilinear") -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(store) == 0:
        raise DatasetError("latent store is empty")
    rng = epoch_rng(seed, epoch)
    order = rng.permutation(len(store)) if train else np.arange(len(store))
    for start in range(0, len(order), batch_size):
        ys, ss, labels = [], [], []
        for i in order[start:start + batch_size]:
            r = store.records[i]
            y, s = augment(r.y_hat.astype(np.float32), r.sigma_hat, rng, train, interp)
            ys.append(y)
            ss.append(s)
            labels.append(r.class_id)
        yield torch.stack(ys), torch.stack(ss), torch.tensor(labels, dtype=torch.long)


# synthetic texture fixture ----------------------------------------------

def make_texture(class_id: int, rng: np.random.Generator, size: int = 64,
                 num_classes: int = 4) -> np.ndarray:
    """One ``[3, size, size]`` texture whose class is the grating orientation.

    A fine oriented grating (period 3-8 px, so the finest examples only
    survive at high rates) is laid over a smooth random colour field with
    additive noise.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.pi * class_id / num_classes + rng.uniform(-0.12, 0.12)
    period = rng.uniform(3.0, 8.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    amp = rng.uniform(0.12, 0.3)
    base = np.empty((3, size, size))
    for c in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        base[c] = 0.5 + 0.2 * np.sin(2 * np.pi * (fy * yy + fx * xx) / size + rng.uniform(0, 2 * np.pi))
    tint = rng.uniform(0.4, 1.0, size=3)[:, None, None]
    img = base + amp * tint * wave[None] + rng.normal(0, 0.04, size=(3, size, size))
    return np.clip(img, 0, 1).astype(np.float32)


def texture_set(num_classes: int, per_class: int, seed: int, size: int = 64):
    """Stacked textures ``[n, 3, size, size]`` and labels, class-major order."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(num_classes):
        for _ in range(per_class):
            images.append(make_texture(c, rng, size, num_classes))
            labels.append(c)
    return np.stack(images), np.array(labels, dtype=np.int64)


def write_texture_dataset(root, num_classes: int = 4, per_class: int = 10, size: int = 64,
                          seed: int = 0, splits: tuple[int, int, int] | None = None) -> Path | None:
    """Write PNG textures in a directory-per-class layout.

    With ``splits=(n_train, n_val, n_test)`` a ``manifest.tsv`` assigning the
    first images of each class to train, then val, then test is written and
    its path returned.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(num_classes):
        d = root / f"class_{c:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = make_texture(c, rng, size, num_classes)
            rel = f"{d.name}/img_{i:04d}.png"
            Image.fromarray((img.transpose(1, 2, 0) * 255).round().astype(np.uint8)).save(root / rel)
            if splits is not None:
                split = "train" if i < splits[0] else "val" if i < splits[0] + splits[1] else "test"
                rows.append((rel, d.name, split))
    if splits is None:
        return None
    return write_manifest(rows, root / "manifest.tsv")
