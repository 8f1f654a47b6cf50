"""Training loops: codec pretraining, frozen-encoder classifier, joint fine-tuning."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import classifier as clf
from .codec import HyperpriorCodec, QualityConfig, build_codec, save_codec
from .data import LatentStore, augment, batches, epoch_rng
from .errors import ConfigError, TrainingDiverged

log = logging.getLogger(__name__)

MODES = ("codec", "frozen", "joint")
DEFAULT_LR = {"codec": 1e-4, "frozen": 1e-3, "joint": 1e-4}
CSV_COLUMNS = ("epoch", "train_loss", "val_loss", "val_top1", "val_top5", "mean_bpp")


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    quality_index: int
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float | None = None
    seed: int = 0
    rd_weight: float | None = None
    joint_loss_weights: tuple[float, float, float] = (1.0, 0.0, 0.0)
    width_divisor: int = 1
    log_sigma: bool = False
    interp: str = "bilinear"
    grad_clip: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        QualityConfig.for_quality(self.quality_index)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", DEFAULT_LR[self.mode])
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.mode == "codec":
            if self.rd_weight is None:
                object.__setattr__(self, "rd_weight", QualityConfig.for_quality(self.quality_index).rd_weight)
            if not self.rd_weight > 0:
                raise ConfigError("rd_weight must be positive in codec mode")
        w = tuple(float(v) for v in self.joint_loss_weights)
        if len(w) != 3 or min(w) < 0:
            raise ConfigError("joint_loss_weights must be three nonnegative numbers")
        object.__setattr__(self, "joint_loss_weights", w)
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")
        if self.interp not in ("bilinear", "nearest"):
            raise ConfigError("interp must be 'bilinear' or 'nearest'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["joint_loss_weights"] = list(self.joint_loss_weights)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float = float("nan")
    val_top1: float = float("nan")
    val_top5: float = float("nan")
    mean_bpp: float = float("nan")


@dataclass
class RunMetrics:
    config_hash: str
    seed: int
    epochs: list[EpochMetrics] = field(default_factory=list)
    wall_time: float = 0.0
    encoder_hash_before: str | None = None
    encoder_hash_after: str | None = None

    @property
    def best_epoch(self) -> EpochMetrics | None:
        scored = [e for e in self.epochs if not math.isnan(e.val_top1)]
        return max(scored, key=lambda e: (e.val_top1, -e.epoch)) if scored else None

    @property
    def best_top1(self) -> float:
        best = self.best_epoch
        return best.val_top1 if best else float("nan")

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for e in self.epochs:
                w.writerow([e.epoch] + [_fmt(getattr(e, c)) for c in CSV_COLUMNS[1:]])
        return path

    def summary(self, config: TrainConfig) -> dict:
        best = self.best_epoch
        return {
            "mode": config.mode,
            "quality_index": config.quality_index,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": config.to_dict(),
            "epochs": len(self.epochs),
            "best_epoch": best.epoch if best else None,
            "best_top1": best.val_top1 if best else None,
            "best_top5": best.val_top5 if best else None,
            "mean_bpp": self.epochs[-1].mean_bpp if self.epochs and not math.isnan(self.epochs[-1].mean_bpp) else None,
            "encoder_hash_before": self.encoder_hash_before,
            "encoder_hash_after": self.encoder_hash_after,
        }


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def loss_combined(task_loss, rate_bpp, distortion_mse, weights=(1.0, 0.0, 0.0)):
    """Weighted sum ``w_task*task + w_rate*rate + w_dist*distortion``."""
    w_task, w_rate, w_dist = weights
    if min(weights) < 0:
        raise ConfigError("loss weights must be nonnegative")
    total = w_task * task_loss
    if w_rate:
        total = total + w_rate * rate_bpp
    if w_dist:
        total = total + w_dist * distortion_mse
    return total


def _check_finite(loss: torch.Tensor, what: str, epoch: int, step: int):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{what} loss became {loss.item()} at epoch {epoch}, step {step}")


def _step(opt, loss, params, clip):
    opt.zero_grad()
    loss.backward()
    if clip:
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()


def _image_batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    order = epoch_rng(seed, epoch).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# codec ------------------------------------------------------------------

def pretrain_codec(config: TrainConfig, images, val_images=None, codec: HyperpriorCodec | None = None,
                   reduced: tuple[int, int] | None = None, weights_id: str = "default"):
    """Train a codec on ``images`` ([n, 3, H, W] in [0, 1]) minimizing rd_weight*MSE + bpp.

    ``reduced=(M, N)`` builds a narrow codec instead of the standard widths.
    """
    if config.mode != "codec":
        raise ConfigError("pretrain_codec needs mode='codec'")
    if reduced:
        q = QualityConfig.reduced_width(config.quality_index, *reduced, weights_id, config.rd_weight)
    else:
        q = QualityConfig.for_quality(config.quality_index, weights_id, config.rd_weight)
    if codec is None:
        codec = build_codec(q, config.seed)
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    val = None if val_images is None else torch.as_tensor(np.asarray(val_images), dtype=torch.float32)
    opt = torch.optim.Adam(codec.parameters(), lr=config.learning_rate)
    noise = torch.Generator().manual_seed(config.seed)
    metrics = RunMetrics(config.config_hash(), config.seed)
    last_good = copy.deepcopy(codec.state_dict())
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        codec.train()
        losses = []
        for step, idx in enumerate(_image_batches(len(images), config.batch_size, config.seed, epoch)):
            x = images[idx]
            out = codec(x, "noise", noise)
            loss = config.rd_weight * F.mse_loss(out["x_hat"], x) + out["bpp"]
            try:
                _check_finite(loss, "codec", epoch, step)
            except TrainingDiverged:
                codec.load_state_dict(last_good)
                codec.refresh_tables()
                raise
            _step(opt, loss, list(codec.parameters()), config.grad_clip)
            losses.append(loss.item())
        last_good = copy.deepcopy(codec.state_dict())
        rec = EpochMetrics(epoch, float(np.mean(losses)))
        if val is not None:
            rec.val_loss, rec.mean_bpp = codec_validation(codec, val, config.rd_weight)
        metrics.epochs.append(rec)
        log.info("codec q%d epoch %d loss %.4f val_bpp %.4f", config.quality_index, epoch,
                 rec.train_loss, rec.mean_bpp)
    metrics.wall_time = time.perf_counter() - start
    codec.refresh_tables()
    codec.eval()
    return codec, metrics


@torch.no_grad()
def codec_validation(codec: HyperpriorCodec, images: torch.Tensor, rd_weight: float,
                     batch_size: int = 32) -> tuple[float, float]:
    """(rate-distortion loss, estimated bpp) with hard rounding."""
    codec.eval()
    mse_sum, bits, pixels = 0.0, 0.0, 0
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        out = codec(x, "round")
        mse_sum += F.mse_loss(out["x_hat"].clamp(0, 1), x, reduction="sum").item()
        bits += out["bits"].item()
        pixels += x.shape[0] * x.shape[-2] * x.shape[-1]
    bpp = bits / pixels
    return rd_weight * mse_sum / images.numel() + bpp, bpp


def pretrain_codec_family(config: TrainConfig, images, val_images=None, qualities=(1, 4, 8), **kw):
    """One codec per quality index, each with its own standard rd_weight."""
    out = {}
    for qi in qualities:
        cfg = TrainConfig(**{**config.to_dict(), "quality_index": qi, "rd_weight": None,
                             "joint_loss_weights": config.joint_loss_weights})
        out[qi] = pretrain_codec(cfg, images, val_images, **kw)
    return out


# classifier -----------------------------------------------------------

def classifier_config(config: TrainConfig, num_classes: int, latent_channels: int) -> clf.ClassifierConfig:
    return clf.ClassifierConfig(num_classes, latent_channels, width_divisor=config.width_divisor,
                                log_sigma=config.log_sigma)


@torch.no_grad()
def evaluate(model: clf.CResNet, data, codec: HyperpriorCodec | None = None,
             batch_size: int = 64, interp: str = "bilinear") -> dict:
    """Top-1/top-5, mean bpp, loss and per-class accuracy over a whole split.

    ``data`` is a :class:`LatentStore`, or an ``(images, labels)`` pair that is
    run through ``codec`` (hard rounding, estimated bpp).
    """
    model.eval()
    logits, labels = [], []
    if isinstance(data, LatentStore):
        if len(data) == 0:
            raise ValueError("cannot evaluate an empty split")
        if data.latent_channels != model.config.latent_channels:
            raise ConfigError(
                f"store has {data.latent_channels} latent channels, model expects "
                f"{model.config.latent_channels}"
            )
        for y, s, lab in batches(data, batch_size, train=False, interp=interp):
            logits.append(model(y, s))
            labels.append(lab)
        mean_bpp = data.mean_bpp()
    else:
        images, labs = data
        images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        labs = torch.as_tensor(np.asarray(labs), dtype=torch.long)
        if len(images) == 0:
            raise ValueError("cannot evaluate an empty split")
        codec.eval()
        bits = 0.0
        for start in range(0, len(images), batch_size):
            x = images[start:start + batch_size]
            out = codec(x, "round")
            bits += out["bits"].item()
            y, s = _augment_batch(out["y_hat"], out["sigma"], None, False, interp)
            logits.append(model(y, s))
            labels.append(labs[start:start + batch_size])
        mean_bpp = bits / (images.shape[0] * images.shape[-2] * images.shape[-1])
    logits = torch.cat(logits)
    labels = torch.cat(labels)
    k5 = min(5, logits.shape[1])
    per_class = {}
    for c in range(logits.shape[1]):
        mask = labels == c
        if mask.any():
            per_class[c] = clf.top_k_accuracy(logits[mask], labels[mask], 1)
    return {
        "top1": clf.top_k_accuracy(logits, labels, 1),
        "top5": clf.top_k_accuracy(logits, labels, k5),
        "loss": F.cross_entropy(logits, labels).item(),
        "mean_bpp": float(mean_bpp),
        "per_class_accuracy": per_class,
    }


def _augment_batch(y, s, rng, train, interp):
    pairs = [augment(y[i], s[i], rng, train, interp) for i in range(y.shape[0])]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


class _Checkpointer:
    def __init__(self, out_dir):
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def save(self, name, model, extra):
        if self.out_dir:
            clf.save_classifier(model, self.out_dir / name, extra)


def train_frozen(config: TrainConfig, store_train: LatentStore, store_val: LatentStore,
                 codec: HyperpriorCodec | None = None, out_dir=None, model: clf.CResNet | None = None):
    """Train the classifier on precomputed latents; the codec is never touched."""
    if config.mode != "frozen":
        raise ConfigError("train_frozen needs mode='frozen'")
    m = store_train.latent_channels
    if store_val.latent_channels != m:
        raise ConfigError(f"train store has {m} channels, val store {store_val.latent_channels}")
    if store_train.quality_index != config.quality_index:
        raise ConfigError(
            f"store quality {store_train.quality_index} != config quality {config.quality_index}"
        )
    if codec is not None and codec.config.latent_channels != m:
        raise ConfigError(f"codec has {codec.config.latent_channels} channels, store has {m}")
    before = codec.encoder_hash() if codec is not None else None
    torch.manual_seed(config.seed)
    if model is None:
        model = clf.build(classifier_config(config, store_train.num_classes, m))
    elif model.config.latent_channels != m:
        raise ConfigError("classifier latent_channels does not match store")
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    metrics = RunMetrics(config.config_hash(), config.seed, encoder_hash_before=before)
    ckpt = _Checkpointer(out_dir)
    best_state, best_top1 = copy.deepcopy(model.state_dict()), -1.0
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        model.train()
        losses = []
        for step, (y, s, lab) in enumerate(
            batches(store_train, config.batch_size, config.seed, True, epoch, config.interp)
        ):
            loss = F.cross_entropy(model(y, s), lab)
            try:
                _check_finite(loss, "classifier", epoch, step)
            except TrainingDiverged:
                model.load_state_dict(best_state)
                raise
            _step(opt, loss, list(model.parameters()), config.grad_clip)
            losses.append(loss.item())
        ev = evaluate(model, store_val, interp=config.interp)
        rec = EpochMetrics(epoch, float(np.mean(losses)), ev["loss"], ev["top1"], ev["top5"], ev["mean_bpp"])
        metrics.epochs.append(rec)
        log.info("frozen q%d epoch %d loss %.4f val top1 %.2f", config.quality_index, epoch,
                 rec.train_loss, rec.val_top1)
        ckpt.save("last.pt", model, {"epoch": epoch, "quality_index": config.quality_index})
        if rec.val_top1 > best_top1:
            best_top1 = rec.val_top1
            best_state = copy.deepcopy(model.state_dict())
            ckpt.save("best.pt", model, {"epoch": epoch, "quality_index": config.quality_index})
    metrics.wall_time = time.perf_counter() - start
    model.load_state_dict(best_state)
    model.eval()
    if codec is not None:
        metrics.encoder_hash_after = codec.encoder_hash()
        if metrics.encoder_hash_after != before:
            raise RuntimeError("encoder weights changed during frozen training")
    return model, metrics


def joint_parameters(codec: HyperpriorCodec):
    """Parameters that move in joint mode: analysis and both hyper transforms."""
    return [p for mod in (codec.g_a, codec.h_a, codec.h_s) for p in mod.parameters()]


def train_joint(config: TrainConfig, images, labels, val_images, val_labels,
                codec: HyperpriorCodec, model: clf.CResNet | None = None,
                num_classes: int | None = None, out_dir=None, max_steps: int | None = None):
    """Fine-tune analysis/hyper transforms together with the classifier.

    Latents are recomputed from images every step with straight-through
    rounding.  The synthesis transform and the factorized prior stay fixed.
    Returns ``(codec, model, metrics)``; inputs are not modified.
    """
    if config.mode != "joint":
        raise ConfigError("train_joint needs mode='joint'")
    if codec.config.quality_index != config.quality_index:
        raise ConfigError("codec quality does not match config")
    codec = copy.deepcopy(codec)
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    m = codec.config.latent_channels
    torch.manual_seed(config.seed)
    if model is None:
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        model = clf.build(classifier_config(config, num_classes, m))
    else:
        model = copy.deepcopy(model)
        if model.config.latent_channels != m:
            raise ConfigError("classifier latent_channels does not match codec")
    for p in codec.parameters():
        p.requires_grad_(False)
    enc_params = joint_parameters(codec)
    for p in enc_params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(enc_params + list(model.parameters()), lr=config.learning_rate)
    w_task, w_rate, w_dist = config.joint_loss_weights
    metrics = RunMetrics(config.config_hash(), config.seed, encoder_hash_before=codec.encoder_hash())
    ckpt = _Checkpointer(out_dir)
    best = (copy.deepcopy(codec.state_dict()), copy.deepcopy(model.state_dict()))
    best_top1 = -1.0
    last_good = best
    start = time.perf_counter()
    steps = 0
    for epoch in range(1, config.epochs + 1):
        codec.train()
        model.train()
        rng = epoch_rng(config.seed, epoch)
        losses = []
        for step, idx in enumerate(_image_batches(len(images), config.batch_size, config.seed, epoch)):
            x = images[idx]
            if w_rate or w_dist:
                out = codec(x, "ste")
                y_hat, sigma = out["y_hat"], out["sigma"]
                rate, dist = out["bpp"], F.mse_loss(out["x_hat"], x)
            else:
                y_hat, sigma = codec.latents(x, "ste")
                rate = dist = 0.0
            y, s = _augment_batch(y_hat, sigma, rng, True, config.interp)
            task = F.cross_entropy(model(y, s), labels[idx])
            loss = loss_combined(task, rate, dist, config.joint_loss_weights)
            if not torch.isfinite(loss):
                codec.load_state_dict(last_good[0])
                model.load_state_dict(last_good[1])
                raise TrainingDiverged(f"joint loss became {loss.item()} at epoch {epoch}, step {step}")
            _step(opt, loss, enc_params + list(model.parameters()), config.grad_clip)
            losses.append(loss.item())
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        last_good = (copy.deepcopy(codec.state_dict()), copy.deepcopy(model.state_dict()))
        ev = evaluate(model, (val_images, val_labels), codec, interp=config.interp)
        rec = EpochMetrics(epoch, float(np.mean(losses)), ev["loss"], ev["top1"], ev["top5"], ev["mean_bpp"])
        metrics.epochs.append(rec)
        log.info("joint q%d epoch %d loss %.4f val top1 %.2f", config.quality_index, epoch,
                 rec.train_loss, rec.val_top1)
        ckpt.save("last.pt", model, {"epoch": epoch, "quality_index": config.quality_index})
        if rec.val_top1 > best_top1:
            best_top1 = rec.val_top1
            best = last_good
            ckpt.save("best.pt", model, {"epoch": epoch, "quality_index": config.quality_index})
            if ckpt.out_dir:
                save_codec(codec, ckpt.out_dir / "codec_best.pt")
        if max_steps is not None and steps >= max_steps:
            break
    metrics.wall_time = time.perf_counter() - start
    codec.load_state_dict(best[0])
    model.load_state_dict(best[1])
    for p in codec.parameters():
        p.requires_grad_(True)
    codec.eval()
    model.eval()
    metrics.encoder_hash_after = codec.encoder_hash()
    return codec, model, metrics


def write_run_outputs(metrics: RunMetrics, config: TrainConfig, out_dir) -> dict:
    """metrics.csv + summary.json (no timestamps, so reruns are byte-identical)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(out_dir / "metrics.csv")
    summary = metrics.summary(config)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
