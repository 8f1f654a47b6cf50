"""Scale-hyperprior image codec with a latent-only decode path.

Layout follows the usual hyperprior recipe: a four-stage strided analysis
transform with GDN, a mirrored synthesis transform, and a three-stage hyper
branch whose output parameterizes per-element Gaussian scales for the main
latent.  The hyper-latent itself is coded with a learned factorized density.
"""

from __future__ import annotations

import hashlib
import io
import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import entropy
from .entropy import PmfTable, SCALE_MIN
from .errors import ConfigError, ShapeError

PROB_MIN = 2.0 ** -16
QUALITY_LATENT_CHANNELS = {1: 192, 4: 192, 8: 320}
QUALITY_HYPER_CHANNELS = {1: 128, 4: 128, 8: 192}
# MSE lambdas of the reference hyperprior models, rescaled from 8-bit to [0, 1] pixels
QUALITY_RD_WEIGHT = {1: 0.0018 * 255**2, 4: 0.0130 * 255**2, 8: 0.1800 * 255**2}

CHECKPOINT_FORMAT = "latentvision-codec"


@dataclass(frozen=True)
class QualityConfig:
    quality_index: int
    latent_channels: int
    hyper_channels: int
    rd_weight: float
    weights_id: str = "default"
    reduced: bool = False

    def __post_init__(self):
        if self.quality_index not in QUALITY_LATENT_CHANNELS:
            raise ConfigError(f"quality_index must be one of {sorted(QUALITY_LATENT_CHANNELS)}")
        expected = QUALITY_LATENT_CHANNELS[self.quality_index]
        if not self.reduced and self.latent_channels != expected:
            raise ConfigError(
                f"quality {self.quality_index} requires {expected} latent channels, "
                f"got {self.latent_channels}"
            )
        if self.latent_channels <= 0 or self.hyper_channels <= 0:
            raise ConfigError("channel widths must be positive")
        if not self.rd_weight > 0 or not math.isfinite(self.rd_weight):
            raise ConfigError("rd_weight must be positive and finite")

    @classmethod
    def for_quality(cls, quality_index: int, weights_id: str = "default", rd_weight: float | None = None):
        if quality_index not in QUALITY_LATENT_CHANNELS:
            raise ConfigError(f"quality_index must be one of {sorted(QUALITY_LATENT_CHANNELS)}")
        return cls(
            quality_index,
            QUALITY_LATENT_CHANNELS[quality_index],
            QUALITY_HYPER_CHANNELS[quality_index],
            QUALITY_RD_WEIGHT[quality_index] if rd_weight is None else rd_weight,
            weights_id,
        )

    @classmethod
    def reduced_width(cls, quality_index: int, latent_channels: int, hyper_channels: int,
                      weights_id: str = "reduced", rd_weight: float | None = None):
        """Narrow codec for tests and gradient checks; skips the channel-map invariant."""
        return cls(
            quality_index,
            latent_channels,
            hyper_channels,
            QUALITY_RD_WEIGHT[quality_index] if rd_weight is None else rd_weight,
            weights_id,
            reduced=True,
        )


@dataclass
class LatentCode:
    y_hat: np.ndarray
    sigma_hat: np.ndarray
    quality_index: int

    def __post_init__(self):
        if self.y_hat.shape != self.sigma_hat.shape:
            raise ShapeError(f"y_hat {self.y_hat.shape} and sigma_hat {self.sigma_hat.shape} differ")
        if self.sigma_hat.size and self.sigma_hat.min() < np.float32(SCALE_MIN):
            raise ShapeError("sigma_hat below the scale floor")

    def __eq__(self, other):
        if not isinstance(other, LatentCode):
            return NotImplemented
        return (
            self.quality_index == other.quality_index
            and self.y_hat.shape == other.y_hat.shape
            and np.array_equal(self.y_hat, other.y_hat)
            and self.sigma_hat.dtype == other.sigma_hat.dtype
            and self.sigma_hat.tobytes() == other.sigma_hat.tobytes()
        )


@dataclass
class HyperLatent:
    z_hat: np.ndarray


def round_half_away(t: torch.Tensor) -> torch.Tensor:
    return torch.sign(t) * torch.floor(t.abs() + 0.5)


def quantize(t: torch.Tensor, mode: str = "round", rng: torch.Generator | None = None) -> torch.Tensor:
    """Quantize ``t``.

    ``round`` rounds half away from zero, ``noise`` adds U(-0.5, 0.5) noise
    drawn from ``rng``, and ``ste`` rounds in the forward pass while passing
    gradients straight through.
    """
    if mode == "round":
        return round_half_away(t)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs an rng")
        u = torch.rand(t.shape, generator=rng, dtype=t.dtype, device=t.device) - 0.5
        return t + u
    if mode == "ste":
        return t + (round_half_away(t) - t).detach()
    raise ValueError(f"unknown quantization mode {mode!r}")


class _LowerBound(torch.autograd.Function):
    # gradient passes where the input is above the bound or being pushed upward

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp(x, min=bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through.to(grad.dtype), None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


class GDN(nn.Module):
    """Generalized divisive normalization (inverse=True multiplies instead)."""

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        self.beta = nn.Parameter(torch.ones(channels))
        self.gamma = nn.Parameter(math.sqrt(0.1) * torch.eye(channels))

    def forward(self, x):
        beta = self.beta**2 + 1e-6
        gamma = (self.gamma**2)[:, :, None, None]
        norm = torch.sqrt(F.conv2d(x * x, gamma, beta))
        return x * norm if self.inverse else x / norm


def _conv(cin, cout, k=5, stride=2):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _deconv(cin, cout, k=5, stride=2):
    return nn.ConvTranspose2d(cin, cout, k, stride=stride, padding=k // 2, output_padding=stride - 1)


class FactorizedPrior(nn.Module):
    """Per-channel learned cumulative density for the hyper-latent."""

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        dims = (1, *filters, 1)
        scale = init_scale ** (1 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def cumulative_logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: [C, 1, L]
        for i, matrix in enumerate(self.matrices):
            x = torch.matmul(F.softplus(matrix), x) + self.biases[i]
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i]) * torch.tanh(x)
        return x

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        """Probability mass of the unit bin centred on each element of ``z`` ([B, C, h, w])."""
        b, c, h, w = z.shape
        flat = z.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.cumulative_logits(flat - 0.5)
        upper = self.cumulative_logits(flat + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return p.reshape(c, b, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def tabulate(self, radius: int = 512, tail: float = 1e-9, margin: int = 4) -> list[PmfTable]:
        prior = _double_copy(self)
        k = torch.arange(-radius, radius + 1, dtype=torch.float64)
        c = self.matrices[0].shape[0]
        grid = k.expand(c, 1, -1)
        cdf_hi = torch.sigmoid(prior.cumulative_logits(grid + 0.5))[:, 0]
        cdf_lo = torch.sigmoid(prior.cumulative_logits(grid - 0.5))[:, 0]
        probs = prior.likelihood(k.expand(1, c, 1, -1).contiguous())[0, :, 0]
        tables = []
        for ch in range(c):
            above = torch.nonzero(cdf_hi[ch] > tail).flatten()
            below = torch.nonzero(1 - cdf_lo[ch] > tail).flatten()
            lo = int(above[0]) if len(above) else 0
            hi = int(below[-1]) if len(below) else 2 * radius
            lo = max(0, min(lo, radius - 2) - margin)
            hi = min(2 * radius, max(hi, radius + 2) + margin)
            tables.append(PmfTable.from_probabilities(lo - radius, probs[ch, lo:hi + 1].numpy()))
        return tables


def _double_copy(module: nn.Module) -> nn.Module:
    buf = io.BytesIO()
    torch.save(module, buf)
    buf.seek(0)
    return torch.load(buf, weights_only=False).double()


def gaussian_likelihood(y: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """P(y) = Phi((y+0.5)/sigma) - Phi((y-0.5)/sigma), evaluated on |y| for stability."""
    a = torch.abs(y)
    return torch.special.ndtr((0.5 - a) / sigma) - torch.special.ndtr((-0.5 - a) / sigma)


def bits_from_likelihood(p: torch.Tensor) -> torch.Tensor:
    return -torch.log2(lower_bound(p, PROB_MIN)).sum()


class HyperpriorCodec(nn.Module):
    def __init__(self, config: QualityConfig):
        super().__init__()
        self.config = config
        m, n = config.latent_channels, config.hyper_channels
        self.g_a = nn.Sequential(
            _conv(3, n), GDN(n), _conv(n, n), GDN(n), _conv(n, n), GDN(n), _conv(n, m)
        )
        self.g_s = nn.Sequential(
            _deconv(m, n), GDN(n, inverse=True), _deconv(n, n), GDN(n, inverse=True),
            _deconv(n, n), GDN(n, inverse=True), _deconv(n, 3),
        )
        self.h_a = nn.Sequential(
            _conv(m, n, 3, 1), nn.ReLU(), _conv(n, n), nn.ReLU(), _conv(n, n)
        )
        self.h_s = nn.Sequential(
            _deconv(n, n), nn.ReLU(), _deconv(n, n), nn.ReLU(), _conv(n, m, 3, 1)
        )
        nn.init.constant_(self.h_s[-1].bias, 1.0)
        self.prior = FactorizedPrior(n)
        self._tables = None
        self._lock = threading.Lock()
        self.synthesis_calls = 0

    def __getstate__(self):
        # the lock cannot be pickled and the table cache is cheap to rebuild
        state = self.__dict__.copy()
        state.pop("_lock", None)
        state["_tables"] = None
        return state

    def __setstate__(self, state):
        super().__setstate__(state)
        self._lock = threading.Lock()

    # transforms -------------------------------------------------------

    def _check_image(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected [B, 3, H, W] or [3, H, W] image, got {tuple(x.shape)}")
        if x.shape[-2] % 64 or x.shape[-1] % 64:
            raise ShapeError(f"image dims {tuple(x.shape[-2:])} not divisible by 64; pad first")
        return x

    def _check_latent(self, y: torch.Tensor, channels: int) -> torch.Tensor:
        if y.dim() == 3:
            y = y.unsqueeze(0)
        if y.shape[1] != channels:
            raise ConfigError(f"expected {channels} channels, got {y.shape[1]}")
        return y

    def analysis_transform(self, image: torch.Tensor) -> torch.Tensor:
        return self.g_a(self._check_image(image))

    def synthesis_transform(self, y_hat: torch.Tensor) -> torch.Tensor:
        self.synthesis_calls += 1
        y_hat = self._check_latent(y_hat, self.config.latent_channels)
        return self.g_s(y_hat.to(self._dtype())).clamp(0, 1)

    def hyper_analysis(self, y: torch.Tensor) -> torch.Tensor:
        y = self._check_latent(y, self.config.latent_channels)
        if y.shape[-2] % 4 or y.shape[-1] % 4:
            raise ShapeError(f"latent dims {tuple(y.shape[-2:])} not divisible by 4")
        return self.h_a(torch.abs(y))

    def hyper_synthesis(self, z_hat: torch.Tensor) -> torch.Tensor:
        z_hat = self._check_latent(z_hat, self.config.hyper_channels)
        return lower_bound(self.h_s(z_hat.to(self._dtype())), SCALE_MIN)

    def _dtype(self):
        return self.h_s[-1].weight.dtype

    def forward(self, x: torch.Tensor, mode: str = "noise", rng: torch.Generator | None = None):
        """Training-path forward pass.

        Returns a dict with ``y_hat``, ``sigma``, ``z_hat``, ``x_hat``
        (unclamped reconstruction), ``bits`` (summed over the batch) and
        ``bpp``.
        """
        x = self._check_image(x)
        y = self.g_a(x)
        z = self.hyper_analysis(y)
        z_hat = quantize(z, mode, rng)
        sigma = self.hyper_synthesis(z_hat)
        y_hat = quantize(y, mode, rng)
        x_hat = self.g_s(y_hat)
        bits = bits_from_likelihood(gaussian_likelihood(y_hat, sigma)) + bits_from_likelihood(
            self.prior.likelihood(z_hat)
        )
        pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
        return {"y_hat": y_hat, "sigma": sigma, "z_hat": z_hat, "x_hat": x_hat,
                "bits": bits, "bpp": bits / pixels}

    def latents(self, x: torch.Tensor, mode: str = "round") -> tuple[torch.Tensor, torch.Tensor]:
        """(y_hat, sigma_hat) for a batch, without synthesis; ``ste`` keeps gradients."""
        x = self._check_image(x)
        y = self.g_a(x)
        z_hat = quantize(self.hyper_analysis(y), mode)
        return quantize(y, mode), self.hyper_synthesis(z_hat)

    # entropy model tables ---------------------------------------------

    def prior_tables(self) -> list[PmfTable]:
        with self._lock:
            if self._tables is None:
                self._tables = self.prior.tabulate()
            return self._tables

    def refresh_tables(self) -> None:
        with self._lock:
            self._tables = None

    @torch.no_grad()
    def scales_from_hyper(self, z_hat: np.ndarray) -> np.ndarray:
        """Deterministic sigma_hat (float32, [M, h, w]) for an integer hyper-latent."""
        z = torch.from_numpy(np.asarray(z_hat, dtype=np.float32)).unsqueeze(0)
        sigma = self.hyper_synthesis(z)[0].float()
        return sigma.numpy().copy()

    # persistence ------------------------------------------------------

    def encoder_state_bytes(self) -> bytes:
        """Serialized analysis, hyper and prior parameters."""
        h = io.BytesIO()
        for name, t in sorted(self.state_dict().items()):
            if name.startswith(("g_a.", "h_a.", "h_s.", "prior.")):
                h.write(name.encode())
                h.write(t.detach().cpu().contiguous().numpy().tobytes())
        return h.getvalue()

    def encoder_hash(self) -> str:
        return hashlib.sha256(self.encoder_state_bytes()).hexdigest()


def analysis_transform(image: torch.Tensor, codec: HyperpriorCodec) -> torch.Tensor:
    return codec.analysis_transform(image)


def synthesis_transform(y_hat: torch.Tensor, codec: HyperpriorCodec) -> torch.Tensor:
    return codec.synthesis_transform(y_hat)


def hyper_analysis(y: torch.Tensor, codec: HyperpriorCodec) -> torch.Tensor:
    return codec.hyper_analysis(y)


def hyper_synthesis(z_hat: torch.Tensor, codec: HyperpriorCodec) -> torch.Tensor:
    return codec.hyper_synthesis(z_hat)


def rate_estimate(y_hat, sigma_hat, z_hat, codec: HyperpriorCodec) -> float:
    """Expected code length in bits of (y_hat | sigma_hat) plus z_hat under the prior."""
    y = torch.as_tensor(np.asarray(y_hat), dtype=torch.float64)
    s = torch.as_tensor(np.asarray(sigma_hat), dtype=torch.float64)
    z = torch.as_tensor(np.asarray(z_hat), dtype=torch.float64)
    if y.shape != s.shape:
        raise ShapeError("y_hat and sigma_hat shapes differ")
    if z.dim() == 3:
        z = z.unsqueeze(0)
    with torch.no_grad():
        prior = _double_copy(codec.prior)
        y_bits = bits_from_likelihood(gaussian_likelihood(y, s))
        z_bits = bits_from_likelihood(prior.likelihood(z))
    return float(y_bits + z_bits)


def _as_image(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if x.dim() != 3 or x.shape[0] != 3:
        raise ShapeError(f"expected a [3, H, W] image, got {tuple(x.shape)}")
    if not torch.isfinite(x).all() or x.min() < 0 or x.max() > 1:
        raise ShapeError("image values must be finite and within [0, 1]")
    return x.float()


@torch.no_grad()
def compress(image, q: QualityConfig, codec: HyperpriorCodec):
    """Encode one ``[3, H, W]`` image; returns (LatentCode, HyperLatent, bitstream bytes)."""
    if codec.config.quality_index != q.quality_index or codec.config.latent_channels != q.latent_channels:
        raise ConfigError(f"codec was built for {codec.config}, not {q}")
    x = _as_image(image)
    x = codec._check_image(x).to(codec._dtype())
    y = codec.g_a(x)
    z_hat = round_half_away(codec.hyper_analysis(y))[0]
    z_int = z_hat.to(torch.int64).numpy()
    sigma = codec.scales_from_hyper(z_int)
    y_int = round_half_away(y)[0].to(torch.int64).numpy()
    z_bytes = entropy.encode_factorized(z_int, codec)
    y_bytes = entropy.encode_gaussian(y_int, sigma.astype(np.float64))
    data = entropy.serialize(q.quality_index, x.shape[-2], x.shape[-1], z_bytes, y_bytes)
    return LatentCode(y_int, sigma, q.quality_index), HyperLatent(z_int), data


def build_codec(q: QualityConfig, seed: int = 0) -> HyperpriorCodec:
    torch.manual_seed(seed)
    return HyperpriorCodec(q)


def save_codec(codec: HyperpriorCodec, path) -> Path:
    """Write a codec checkpoint; a directory target gets ``<weights_id>-q<quality>.pt``."""
    path = Path(path)
    if path.is_dir() or path.suffix == "":
        path.mkdir(parents=True, exist_ok=True)
        path = path / checkpoint_name(codec.config)
    torch.save(
        {"format": CHECKPOINT_FORMAT, "version": 1, "config": asdict(codec.config),
         "state_dict": codec.state_dict()},
        path,
    )
    return path


def checkpoint_name(q: QualityConfig) -> str:
    return f"{q.weights_id}-q{q.quality_index}.pt"


def find_codec_checkpoint(path, quality_index: int) -> Path:
    path = Path(path)
    if path.is_dir():
        hits = sorted(path.glob(f"*-q{quality_index}.pt"))
        if not hits:
            raise FileNotFoundError(f"no codec weights for quality {quality_index} in {path}")
        return hits[0]
    if not path.exists():
        raise FileNotFoundError(f"codec weights {path} not found")
    return path


def load_codec(path, quality_index: int | None = None) -> HyperpriorCodec:
    if quality_index is not None:
        path = find_codec_checkpoint(path, quality_index)
    blob = torch.load(Path(path), weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a codec checkpoint")
    q = QualityConfig(**blob["config"])
    if quality_index is not None and q.quality_index != quality_index:
        raise ConfigError(f"{path} holds quality {q.quality_index}, expected {quality_index}")
    codec = HyperpriorCodec(q)
    codec.load_state_dict(blob["state_dict"])
    codec.eval()
    return codec
