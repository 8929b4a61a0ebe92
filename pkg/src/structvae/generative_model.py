"""Encoder, mean decoder and covariance decoder built from resnet-style blocks.

A block is ``conv(stride 1) -> resize -> conv -> conv -> relu``, added to a
resized (and, if the width changes, 1x1-projected) copy of its input.  The
resize is bilinear x2 (up), a stride-2 conv (down) or a stride-1 conv (same).

Decoder: dense -> same block -> 4 up blocks -> same block -> 1x1 head.  The
encoder mirrors it with down blocks and ends in a dense layer of width 2n
producing ``(mu, log_var)``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ArtifactError, ConfigurationError, ShapeError, StageError
from .structured_gaussian import CholFactor, SparsityPattern, build_factor, sample_residual

__all__ = [
    "ArchConfig",
    "EncoderOutput",
    "ModelParams",
    "ResBlock",
    "Encoder",
    "Decoder",
    "init_model",
    "new_cov_decoder",
    "encode",
    "sample_latent",
    "decode_mean",
    "decode_raw_cov",
    "decode_chol",
    "sample_image",
    "save_params",
    "load_params",
]

CHECKPOINT_FORMAT = "structvae-checkpoint"
CHECKPOINT_VERSION = 1
LOG_VAR_CLAMP = 10.0


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    latent_dim: int = 16
    dense_channels: int = 16
    res_channels: int = 32
    up_channels: tuple[int, ...] = (64, 32, 16, 8)
    neighborhood_radius: int = 1
    diag_bound: float = 3.0
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "up_channels", tuple(int(c) for c in self.up_channels))
        if self.image_size % (2 ** len(self.up_channels)):
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by 2**{len(self.up_channels)} up-sampling blocks"
            )
        if self.diag_bound <= 0 or not 0 <= self.dropout < 1:
            raise ConfigurationError("diag_bound must be > 0 and dropout in [0, 1)")

    @classmethod
    def desk(cls, **overrides) -> "ArchConfig":
        """32x32, latent 16, full-size widths divided by 8 (dense width kept at 16)."""
        return replace(cls(), **overrides)

    @classmethod
    def full(cls, **overrides) -> "ArchConfig":
        base = cls(image_size=128, latent_dim=100, dense_channels=16, res_channels=256, up_channels=(512, 256, 128, 64))
        return replace(base, **overrides)

    @property
    def start_size(self) -> int:
        return self.image_size // 2 ** len(self.up_channels)

    @property
    def pattern(self) -> SparsityPattern:
        return SparsityPattern.causal(self.image_size, self.image_size, self.neighborhood_radius)

    @property
    def cov_channels(self) -> int:
        return self.pattern.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["up_channels"] = list(self.up_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{**d, "up_channels": tuple(d["up_channels"])})


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, resize: str = "same", dropout: float = 0.0):
        super().__init__()
        if resize not in ("same", "up", "down"):
            raise ConfigurationError(f"unknown resize mode {resize!r}")
        self.mode = resize
        self.conv_in = nn.Conv2d(cin, cout, 3, padding=1)
        if resize == "up":
            self.resize = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        elif resize == "down":
            self.resize = nn.Conv2d(cout, cout, 3, stride=2, padding=1)
        else:
            self.resize = nn.Conv2d(cout, cout, 3, padding=1)
        self.conv_a = nn.Conv2d(cout, cout, 3, padding=1)
        self.conv_b = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = F.relu(self.conv_b(self.conv_a(self.resize(self.conv_in(x)))))
        h = self.drop(h)
        s = x
        if self.mode == "up":
            s = F.interpolate(s, scale_factor=2, mode="bilinear", align_corners=False)
        elif self.mode == "down":
            s = F.avg_pool2d(s, 2)
        return h + self.skip(s)


class Decoder(nn.Module):
    def __init__(self, arch: ArchConfig, out_channels: int, output: str = "linear"):
        super().__init__()
        self.arch = arch
        self.output = output
        s0 = arch.start_size
        self.dense = nn.Linear(arch.latent_dim, arch.dense_channels * s0 * s0)
        widths = [arch.res_channels, *arch.up_channels]
        blocks = [ResBlock(arch.dense_channels, arch.res_channels, "same", arch.dropout)]
        blocks += [ResBlock(a, b, "up", arch.dropout) for a, b in zip(widths[:-1], widths[1:])]
        blocks.append(ResBlock(widths[-1], widths[-1], "same", arch.dropout))
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(widths[-1], out_channels, 1)
        if output == "zero_init":
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, z):
        s0 = self.arch.start_size
        h = self.dense(z).view(z.shape[0], self.arch.dense_channels, s0, s0)
        out = self.head(self.blocks(h))
        return torch.sigmoid(out) if self.output == "sigmoid" else out


class Encoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        widths = [*reversed(arch.up_channels), arch.res_channels]
        blocks = [ResBlock(1, widths[0], "same", arch.dropout)]
        blocks += [ResBlock(a, b, "down", arch.dropout) for a, b in zip(widths[:-1], widths[1:])]
        blocks.append(ResBlock(arch.res_channels, arch.dense_channels, "same", arch.dropout))
        self.blocks = nn.Sequential(*blocks)
        s0 = arch.start_size
        self.dense = nn.Linear(arch.dense_channels * s0 * s0, 2 * arch.latent_dim)

    def forward(self, x):
        h = self.blocks(x).flatten(1)
        mu, log_var = self.dense(h).chunk(2, dim=-1)
        return mu, torch.clamp(log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)


@dataclass
class EncoderOutput:
    mu: torch.Tensor
    log_var: torch.Tensor

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(self.log_var)


@dataclass
class ModelParams:
    """All network weights plus the architecture and training stage.

    ``stage`` is ``"untrained"``, ``"mean_trained"`` or ``"covariance_trained"``;
    ``cov_mode`` (``"covar"`` or ``"diagonal"``) says whether the covariance
    decoder's off-diagonal Cholesky channels are used.  ``rho`` is the isotropic
    variance of the stage-1 model.
    """

    arch: ArchConfig
    encoder: Encoder
    mean_decoder: Decoder
    cov_decoder: Decoder | None = None
    stage: str = "untrained"
    cov_mode: str | None = None
    rho: float = 0.01
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.cov_decoder is not None) != (self.stage == "covariance_trained"):
            raise StageError("covariance decoder must be present exactly when stage is covariance_trained")

    def modules(self):
        mods = {"encoder": self.encoder, "mean_decoder": self.mean_decoder}
        if self.cov_decoder is not None:
            mods["cov_decoder"] = self.cov_decoder
        return mods

    def eval(self) -> "ModelParams":
        for m in self.modules().values():
            m.eval()
        return self

    def to(self, dtype: torch.dtype) -> "ModelParams":
        """Return a copy with all weights cast to ``dtype``."""
        out = copy.deepcopy(self)
        for m in out.modules().values():
            m.to(dtype)
        return out

    @property
    def dtype(self) -> torch.dtype:
        return self.mean_decoder.dense.weight.dtype

    @property
    def pattern(self) -> SparsityPattern:
        return self.arch.pattern


def init_model(arch: ArchConfig, seed: int = 0, rho: float = 0.01) -> ModelParams:
    """Freshly initialised encoder and mean decoder (stage ``untrained``)."""
    torch.manual_seed(seed)
    enc = Encoder(arch)
    dec = Decoder(arch, 1, output="sigmoid")
    return ModelParams(arch, enc, dec, rho=rho).eval()


def new_cov_decoder(arch: ArchConfig, seed: int = 0) -> Decoder:
    """Covariance decoder whose zero head makes the initial factor the identity."""
    torch.manual_seed(seed)
    return Decoder(arch, arch.cov_channels, output="zero_init")


def _image_batch(params: ModelParams, x) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x, dtype=params.dtype)
    n = params.arch.image_size
    if tuple(x.shape[-2:]) != (n, n) or x.ndim not in (2, 3):
        raise ShapeError(f"expected ({n}, {n}) or (B, {n}, {n}) image, got {tuple(x.shape)}")
    single = x.ndim == 2
    return (x[None] if single else x), single


def _latent_batch(params: ModelParams, z) -> tuple[torch.Tensor, bool]:
    z = torch.as_tensor(z, dtype=params.dtype)
    if z.shape[-1] != params.arch.latent_dim or z.ndim not in (1, 2):
        raise ShapeError(f"expected latent of length {params.arch.latent_dim}, got shape {tuple(z.shape)}")
    single = z.ndim == 1
    return (z[None] if single else z), single


def encode(params: ModelParams, x) -> EncoderOutput:
    xb, single = _image_batch(params, x)
    mu, log_var = params.encoder(xb[:, None])
    if single:
        mu, log_var = mu[0], log_var[0]
    return EncoderOutput(mu, log_var)


def sample_latent(enc: EncoderOutput, u) -> torch.Tensor:
    """Reparameterised draw ``mu + exp(log_var / 2) * u``."""
    u = torch.as_tensor(u, dtype=enc.mu.dtype)
    if u.shape != enc.mu.shape:
        raise ShapeError(f"noise shape {tuple(u.shape)} does not match latent {tuple(enc.mu.shape)}")
    return enc.mu + torch.exp(0.5 * enc.log_var) * u


def decode_mean(params: ModelParams, z) -> torch.Tensor:
    zb, single = _latent_batch(params, z)
    out = params.mean_decoder(zb)[:, 0]
    return out[0] if single else out


def _require_cov(params: ModelParams):
    if params.stage != "covariance_trained" or params.cov_decoder is None:
        raise StageError("covariance not trained: this model only has a mean decoder")


def decode_raw_cov(params: ModelParams, z) -> torch.Tensor:
    """Raw covariance-decoder channels, shape (..., H, W, C)."""
    _require_cov(params)
    zb, single = _latent_batch(params, z)
    raw = params.cov_decoder(zb).permute(0, 2, 3, 1)
    return raw[0] if single else raw


def decode_chol(params: ModelParams, z) -> CholFactor:
    factor = build_factor(decode_raw_cov(params, z), params.pattern, params.arch.diag_bound)
    return factor.diagonal_only() if params.cov_mode == "diagonal" else factor


def sample_image(params: ModelParams, z, u, mode: str = "covar") -> torch.Tensor:
    """Draw ``G(z) + residual`` with the residual model chosen by ``mode``.

    identity: ``sqrt(rho) * u``; diagonal / covar: ``(L^T)^-1 u`` with the factor
    restricted to its diagonal in diagonal mode.
    """
    mean = decode_mean(params, z)
    u = torch.as_tensor(u, dtype=mean.dtype)
    if u.shape != mean.shape:
        raise ShapeError(f"noise shape {tuple(u.shape)} does not match image {tuple(mean.shape)}")
    if mode == "identity":
        return mean + params.rho**0.5 * u
    if mode not in ("diagonal", "covar"):
        raise ConfigurationError(f"unknown sampling mode {mode!r}")
    _require_cov(params)
    if mode == "covar" and params.cov_mode != "covar":
        raise StageError("covar sampling needs a model trained with off-diagonal Cholesky channels")
    with torch.no_grad():
        factor = decode_chol(params, z)
        if mode == "diagonal":
            factor = factor.diagonal_only()
        return mean.detach() + sample_residual(factor, u)


def save_params(params: ModelParams, path) -> Path:
    """Write a self-describing ``.npz`` checkpoint: JSON header plus named weights."""
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": params.arch.to_dict(),
        "stage": params.stage,
        "cov_mode": params.cov_mode,
        "rho": params.rho,
        "dtype": str(params.dtype).removeprefix("torch."),
        "history": params.history,
    }
    arrays = {"__header__": np.array(json.dumps(header))}
    for prefix, module in params.modules().items():
        for name, t in module.state_dict().items():
            arrays[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_params(path, arch: ArchConfig | None = None) -> ModelParams:
    """Read a checkpoint; ``arch``, when given, must match the stored one exactly."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            arrays = {k: data[k] for k in data.files if k != "__header__"}
    except (OSError, ValueError, KeyError) as exc:
        raise ArtifactError(f"corrupt checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ArtifactError(f"{path} is not a structvae checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ArtifactError(f"checkpoint version {header.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    stored = ArchConfig.from_dict(header["arch"])
    if arch is not None and arch != stored:
        raise ConfigurationError(f"checkpoint architecture {stored} differs from requested {arch}")
    dtype = getattr(torch, header.get("dtype", "float32"))
    enc, dec = Encoder(stored).to(dtype), Decoder(stored, 1, output="sigmoid").to(dtype)
    cov = Decoder(stored, stored.cov_channels, output="zero_init").to(dtype) if "cov_decoder.head.weight" in arrays else None
    try:
        for prefix, module in (("encoder", enc), ("mean_decoder", dec), ("cov_decoder", cov)):
            if module is None:
                continue
            state = {k[len(prefix) + 1 :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + ".")}
            module.load_state_dict(state)
    except RuntimeError as exc:
        raise ArtifactError(f"corrupt checkpoint {path}: {exc}") from exc
    return ModelParams(
        stored, enc, dec, cov, header["stage"], header.get("cov_mode"), header.get("rho", 0.01), header.get("history", {})
    ).eval()
