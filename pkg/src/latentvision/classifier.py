"""cResNet-39: a bottleneck ResNet that classifies (y_hat, sigma_hat) latents.

There is no pixel stem.  y_hat and sigma_hat each go through their own
bottleneck block; the two 128-channel outputs are concatenated and fed to a
ResNet-50-style trunk (conv_3x .. conv_5x), then average-pooled into a linear
head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError

INPUT_SIZE = 28
CHECKPOINT_FORMAT = "latentvision-classifier"

# (mid width, out width, blocks, first stride) for conv_3x, conv_4x, conv_5x
DEFAULT_TRUNK = ((128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2))


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int
    latent_channels: int
    stem_width: int = 32
    stem_out: int = 128
    trunk: tuple = DEFAULT_TRUNK
    width_divisor: int = 1
    log_sigma: bool = False
    reduced: bool = False  # narrow test models; skips the latent-width check

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.latent_channels < 1:
            raise ConfigError("latent_channels must be positive")
        if not self.reduced and self.latent_channels not in (192, 320):
            raise ConfigError(f"latent_channels must be 192 or 320, got {self.latent_channels}")
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        object.__setattr__(self, "trunk", tuple(tuple(int(v) for v in s) for s in self.trunk))

    def scaled(self, width: int) -> int:
        return max(1, width // self.width_divisor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk"] = [list(s) for s in self.trunk]
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Bottleneck(nn.Module):
    def __init__(self, cin: int, mid: int, cout: int, stride: int = 1):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, cout, 1, bias=False), nn.BatchNorm2d(cout),
        )
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.shortcut = nn.Identity()
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.branch(x) + self.shortcut(x))


class CResNet(nn.Module):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        s = config.scaled
        m = config.latent_channels
        self.stem_y = Bottleneck(m, s(config.stem_width), s(config.stem_out))
        self.stem_sigma = Bottleneck(m, s(config.stem_width), s(config.stem_out))
        cin = 2 * s(config.stem_out)
        stages = []
        for mid, out, blocks, stride in config.trunk:
            layers = []
            for i in range(blocks):
                layers.append(Bottleneck(cin, s(mid), s(out), stride if i == 0 else 1))
                cin = s(out)
            stages.append(nn.Sequential(*layers))
        self.trunk = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, config.num_classes)
        self._init_weights()

    def _init_weights(self):
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(mod, nn.BatchNorm2d):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)
        for mod in self.modules():
            if isinstance(mod, Bottleneck):
                nn.init.zeros_(mod.branch[-1].weight)

    @property
    def stem_channels(self) -> int:
        return 2 * self.config.scaled(self.config.stem_out)

    def stems(self, y: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        if self.config.log_sigma:
            sigma = torch.log(sigma)
        return torch.cat([self.stem_y(y), self.stem_sigma(sigma)], dim=1)

    def forward(self, y: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        m = self.config.latent_channels
        for name, t in (("y_hat", y), ("sigma_hat", sigma)):
            if t.dim() != 4 or t.shape[1] != m:
                raise ShapeError(f"{name} must be [B, {m}, 28, 28], got {tuple(t.shape)}")
            if t.shape[-2:] != (INPUT_SIZE, INPUT_SIZE):
                raise ShapeError(f"{name} spatial dims must be 28x28, got {tuple(t.shape[-2:])}")
        x = self.trunk(self.stems(y, sigma))
        return self.fc(torch.flatten(self.pool(x), 1))


def build(config: ClassifierConfig, seed: int | None = None) -> CResNet:
    if seed is not None:
        torch.manual_seed(seed)
    return CResNet(config)


def forward(model: CResNet, y_batch: torch.Tensor, sigma_batch: torch.Tensor) -> torch.Tensor:
    return model(y_batch, sigma_batch)


def import_weights(model: CResNet, state_dict: dict | None = None) -> list[str]:
    """Copy matching tensors from an external state dict; returns the keys loaded.

    No pretrained weights ship with the package, so calling this without a
    state dict is a no-op.
    """
    if not state_dict:
        return []
    own = model.state_dict()
    loaded = [k for k, v in state_dict.items() if k in own and own[k].shape == v.shape]
    own.update({k: state_dict[k] for k in loaded})
    model.load_state_dict(own)
    return loaded


def top_k_accuracy(logits, labels, k: int) -> float:
    """Percentage of rows whose label ranks within the k largest logits.

    Ties are resolved in favour of the lower class index.
    """
    logits = torch.as_tensor(logits).detach()
    labels = torch.as_tensor(labels).long().detach()
    if k > logits.shape[1]:
        raise ValueError(f"k={k} exceeds {logits.shape[1]} classes")
    if len(labels) == 0:
        return 0.0
    true = logits.gather(1, labels[:, None])
    idx = torch.arange(logits.shape[1])[None, :]
    ahead = (logits > true) | ((logits == true) & (idx < labels[:, None]))
    rank = ahead.sum(1)
    return float((rank < k).double().mean() * 100)


def save_classifier(model: CResNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(),
         "config_hash": model.config.config_hash(), "state_dict": model.state_dict(),
         "extra": extra or {}},
        path,
    )
    return path


def load_classifier(path) -> tuple[CResNet, dict]:
    blob = torch.load(Path(path), weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a classifier checkpoint")
    config = ClassifierConfig(**blob["config"])
    if config.config_hash() != blob["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")
    model = CResNet(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})


def softmax(logits) -> np.ndarray:
    return torch.softmax(torch.as_tensor(logits, dtype=torch.float64), dim=1).numpy()
