"""Datasets, VAE losses, two-stage training and the PnP denoiser.

Stage 1 trains the encoder and mean decoder with the isotropic model
``Sigma = rho * I``.  Stage 2 freezes both and fits the covariance decoder with
the structured (or diagonal-only) negative log-likelihood.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ArtifactError, ConfigurationError, DivergenceError, NumericError, StageError
from .generative_model import (
    ArchConfig,
    EncoderOutput,
    ModelParams,
    decode_chol,
    decode_mean,
    decode_raw_cov,
    encode,
    init_model,
    new_cov_decoder,
    sample_latent,
)
from .structured_gaussian import build_factor, nll

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "DenoiserConfig",
    "Dataset",
    "DenoiserParams",
    "DnCNN",
    "kl_term",
    "stage1_loss",
    "stage2_loss",
    "saturation_penalty",
    "identity_nll",
    "heldout_nll",
    "train",
    "train_stage1",
    "train_stage2",
    "train_denoiser",
    "make_phantom_dataset",
    "add_anomaly",
    "add_jitter",
    "ingest_magnitude_volumes",
    "save_denoiser",
    "load_denoiser",
]

ABLATION_MODES = ("identity", "diagonal", "covar")


@dataclass
class TrainConfig:
    rho: float = 0.01
    epochs_stage1: int = 150
    epochs_stage2: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    background_jitter: float = 1e-3
    seed: int = 0
    ablation_mode: str = "covar"
    saturation_weight: float = 1.0
    saturation_threshold: float = 3.0

    def __post_init__(self):
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigurationError(f"ablation_mode must be one of {ABLATION_MODES}")
        for name in ("rho", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigurationError("batch_size must be >= 1 and epoch counts >= 0")
        if self.background_jitter < 0:
            raise ConfigurationError("background_jitter must be >= 0")


@dataclass
class DenoiserConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    depth: int = 7
    width: int = 32


@dataclass
class Dataset:
    images: np.ndarray
    split: str = "train"
    provenance: str = "synthetic_phantom"
    volume_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 3:
            raise ConfigurationError(f"images must be (N, H, W), got {self.images.shape}")

    def __len__(self):
        return len(self.images)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.images, dtype=dtype)

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.images, dtype=np.float64).tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------- datasets


def _ellipse(ys, xs, cy, cx, a, b, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _ramp(ys, xs, rng, amplitude):
    direction = rng.uniform(0, 2 * np.pi)
    return amplitude * (np.cos(direction) * xs + np.sin(direction) * ys)


def _phantom(h, w, rng) -> np.ndarray:
    ys, xs = np.mgrid[:h, :w].astype(np.float64)
    ys, xs = ys / h - 0.5, xs / w - 0.5
    img = np.zeros((h, w))
    body_cy, body_cx = rng.uniform(-0.06, 0.06, 2)
    a, b = rng.uniform(0.28, 0.4, 2)
    angle = rng.uniform(0, np.pi)
    body = _ellipse(ys, xs, body_cy, body_cx, a, b, angle)
    img[body] = rng.uniform(0.4, 0.7) + _ramp(ys, xs, rng, 0.4)[body]
    for _ in range(rng.integers(1, 5)):
        r = np.sqrt(rng.uniform(0, 0.35))
        t = rng.uniform(0, 2 * np.pi)
        cy, cx = body_cy + r * b * np.sin(t), body_cx + r * a * np.cos(t)
        inner = _ellipse(ys, xs, cy, cx, *rng.uniform(0.04, 0.16, 2), rng.uniform(0, np.pi)) & body
        img[inner] = rng.uniform(0.05, 1.0) + _ramp(ys, xs, rng, 0.3)[inner]
    img[~body] = 0.0
    img = np.clip(img, 0.0, None)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def make_phantom_dataset(count: int, h: int = 32, w: int = 32, seed: int = 0, split: str = "train") -> Dataset:
    """Piecewise-smooth ellipse phantoms on a black background, each rescaled to [0, 1].

    Image ``i`` depends only on ``(seed, i)``; use different seeds for train and test.
    """
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    images = np.stack([_phantom(h, w, np.random.default_rng([seed, i])) for i in range(count)])
    return Dataset(images.astype(np.float32), split, "synthetic_phantom", [f"phantom-{seed}-{i}" for i in range(count)])


def add_anomaly(image: np.ndarray, seed: int = 0, radius: float = 0.08, intensity: float = 0.9) -> np.ndarray:
    """Insert a small bright disc (a structure the phantom generator never draws)."""
    h, w = image.shape
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[:h, :w]
    body = np.argwhere(image > 0.05)
    cy, cx = body[rng.integers(len(body))] if len(body) else (h // 2, w // 2)
    disc = (ys - cy) ** 2 + (xs - cx) ** 2 <= (radius * h) ** 2
    out = image.copy()
    out[disc] = intensity
    return out


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    from PIL import Image

    pil = Image.fromarray(np.asarray(img, dtype=np.float32), mode="F")
    return np.asarray(pil.resize((size, size), Image.Resampling.LANCZOS), dtype=np.float64)


def _rescale(img: np.ndarray, where: str) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if not hi > lo:
        raise NumericError(f"constant slice in {where}: cannot rescale to [0, 1]")
    return (img - lo) / (hi - lo)


def _read_volume(path: Path, key: str) -> np.ndarray:
    if path.suffix == ".npy":
        vol = np.load(path, allow_pickle=False)
    elif path.suffix in (".h5", ".hdf5"):
        import h5py

        with h5py.File(path, "r") as fh:
            if key not in fh:
                raise ArtifactError(f"{path} has no dataset {key!r}")
            vol = fh[key][()]
    else:
        raise ArtifactError(f"unsupported volume file {path}")
    vol = np.abs(np.asarray(vol, dtype=np.float64))
    if vol.ndim == 2:
        vol = vol[None]
    if vol.ndim != 3 or vol.shape[0] == 0:
        raise ArtifactError(f"{path}: expected a (slices, H, W) volume, got shape {vol.shape}")
    return vol


def _is_test_volume(volume_id: str, test_fraction: float, seed: int) -> bool:
    digest = hashlib.sha256(f"{seed}:{volume_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64 < test_fraction


def ingest_magnitude_volumes(
    path,
    target_size: int = 128,
    slices_per_volume: int = 5,
    test_fraction: float = 0.2,
    key: str = "reconstruction_esc",
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Turn a directory of magnitude volumes into (train, test) datasets.

    Each ``*.npy`` or ``*.h5`` file under ``path`` is one volume of shape
    (slices, H, W); HDF5 files are read from dataset ``key``.  The
    ``slices_per_volume`` slices around the centre are resized with a Lanczos
    (anti-aliasing) filter and linearly rescaled to [0, 1].  Whole volumes are
    assigned to the test split by a seeded hash of the file stem.
    """
    root = Path(path)
    if not root.is_dir():
        raise ArtifactError(f"volume directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix in (".npy", ".h5", ".hdf5"))
    if not files:
        raise ArtifactError(f"no .npy/.h5 volumes in {root}")
    splits = {"train": ([], []), "test": ([], [])}
    for f in files:
        vol = _read_volume(f, key)
        mid, half = vol.shape[0] // 2, slices_per_volume // 2
        lo = max(0, mid - half)
        chosen = range(lo, min(vol.shape[0], lo + slices_per_volume))
        split = "test" if _is_test_volume(f.stem, test_fraction, seed) else "train"
        for s in chosen:
            img = _rescale(_resize(_rescale(vol[s], f"{f.name}[{s}]"), target_size), f"{f.name}[{s}]")
            splits[split][0].append(img.astype(np.float32))
            splits[split][1].append(f.stem)
    out = []
    for split in ("train", "test"):
        imgs, ids = splits[split]
        arr = np.stack(imgs) if imgs else np.zeros((0, target_size, target_size), np.float32)
        out.append(Dataset(arr, split, "external_magnitude", ids))
    return out[0], out[1]


# ---------------------------------------------------------------- losses


def kl_term(enc: EncoderOutput) -> torch.Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over latent dimensions."""
    return 0.5 * torch.sum(enc.mu**2 + torch.exp(enc.log_var) - 1.0 - enc.log_var, dim=-1)


def identity_nll(x, mean, rho: float) -> torch.Tensor:
    """nll under Sigma = rho * I with the same convention as the structured model."""
    r = x - mean
    d = r.shape[-1] * r.shape[-2]
    return d * math.log(rho) + 0.5 / rho * torch.sum(r * r, dim=(-2, -1))


def stage1_loss(params: ModelParams, x, u, rho: float) -> torch.Tensor:
    """Batch mean of ``||x - G(z)||^2 / (2 rho) + KL`` with one reparameterised z per image.

    The ``d log rho`` term is constant during stage 1 and is dropped.
    """
    x = torch.as_tensor(x, dtype=params.dtype)
    enc = encode(params, x)
    z = sample_latent(enc, u)
    r = x - decode_mean(params, z)
    return torch.mean(0.5 / rho * torch.sum(r * r, dim=(-2, -1)) + kl_term(enc))


def _stage2_terms(params: ModelParams, x, u, mode):
    x = torch.as_tensor(x, dtype=params.dtype)
    with torch.no_grad():
        enc = encode(params, x)
        z = sample_latent(enc, u)
        mean = decode_mean(params, z)
        kl = kl_term(enc)
    raw = decode_raw_cov(params, z)
    factor = build_factor(raw, params.pattern, params.arch.diag_bound)
    if mode == "diagonal":
        factor = factor.diagonal_only()
    return torch.mean(nll(x, mean, factor) + kl), raw


def stage2_loss(params: ModelParams, x, u, mode: str | None = None) -> torch.Tensor:
    """Batch mean of ``nll(x, G(z), L(z)) + KL`` with encoder and mean decoder frozen."""
    if params.stage != "covariance_trained":
        raise StageError("stage 2 loss needs a covariance decoder (run stage 1 first)")
    return _stage2_terms(params, x, u, mode or params.cov_mode)[0]


def saturation_penalty(raw: torch.Tensor, center: int, threshold: float) -> torch.Tensor:
    """Mean squared excess of the raw diagonal channel beyond +-threshold.

    Past ``|raw| ~ 3`` the tanh is flat, so a diagonal that drifts there can never
    come back.  The penalty is zero inside the responsive band.
    """
    excess = torch.relu(raw[..., center].abs() - threshold)
    return torch.mean(torch.sum(excess**2, dim=(-2, -1)))


@torch.no_grad()
def heldout_nll(params: ModelParams, images, mode: str) -> torch.Tensor:
    """Per-image nll at z = encoder mean, for ``mode`` in identity/diagonal/covar."""
    x = torch.as_tensor(images, dtype=params.dtype)
    z = encode(params, x).mu
    mean = decode_mean(params, z)
    if mode == "identity":
        return identity_nll(x, mean, params.rho)
    factor = decode_chol(params, z)
    if mode == "diagonal":
        factor = factor.diagonal_only()
    return nll(x, mean, factor)


# ---------------------------------------------------------------- training loops


def add_jitter(x: torch.Tensor, amplitude: float, generator=None) -> torch.Tensor:
    """Add U(0, amplitude) noise to every pixel, so black background no longer has zero variance."""
    if amplitude <= 0:
        return x
    return x + amplitude * torch.rand(x.shape, generator=generator, dtype=x.dtype)


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _check_finite(loss, stage, epoch, history):
    if not torch.isfinite(loss):
        raise DivergenceError(f"{stage} loss became {loss.item()} in epoch {epoch}", history)


def train_stage1(dataset: Dataset, cfg: TrainConfig, arch: ArchConfig | None = None) -> ModelParams:
    """Fit encoder + mean decoder; returns a ``mean_trained`` model."""
    if len(dataset) == 0:
        raise ConfigurationError("empty training set")
    arch = arch or ArchConfig.desk(image_size=dataset.images.shape[-1])
    params = init_model(arch, seed=cfg.seed, rho=cfg.rho)
    data = dataset.tensor(params.dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    modules = [params.encoder, params.mean_decoder]
    opt = torch.optim.Adam([p for m in modules for p in m.parameters()], lr=cfg.learning_rate)
    history = []
    for m in modules:
        m.train()
    try:
        for epoch in range(cfg.epochs_stage1):
            total, count = 0.0, 0
            for idx in _batches(len(data), cfg.batch_size, gen):
                u = torch.randn(len(idx), arch.latent_dim, generator=gen, dtype=params.dtype)
                loss = stage1_loss(params, data[idx], u, cfg.rho)
                _check_finite(loss, "stage-1", epoch, history)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            history.append(total / count)
            log.info("stage1 epoch %d loss %.4f", epoch, history[-1])
    finally:
        params.eval()
    params.stage = "mean_trained"
    params.history = {"stage1": history}
    return params


def train_stage2(params: ModelParams, dataset: Dataset, cfg: TrainConfig, mode: str | None = None) -> ModelParams:
    """Fit a covariance decoder on top of a frozen stage-1 model.

    Returns a new ``covariance_trained`` model; the input model is untouched and
    the returned encoder / mean decoder weights are bit-identical copies.
    """
    mode = mode or cfg.ablation_mode
    if mode not in ("diagonal", "covar"):
        raise ConfigurationError(f"stage 2 needs mode diagonal or covar, got {mode!r}")
    if params.stage not in ("mean_trained", "covariance_trained"):
        raise StageError("stage 2 requires a mean_trained model")
    arch = params.arch
    out = ModelParams(
        arch,
        copy.deepcopy(params.encoder),
        copy.deepcopy(params.mean_decoder),
        new_cov_decoder(arch, seed=cfg.seed + 1),
        "covariance_trained",
        mode,
        params.rho,
        {"stage1": list(params.history.get("stage1", []))},
    ).eval()
    for p in [*out.encoder.parameters(), *out.mean_decoder.parameters()]:
        p.requires_grad_(False)
    data = dataset.tensor(out.dtype)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    torch.manual_seed(cfg.seed + 1)
    opt = torch.optim.Adam(out.cov_decoder.parameters(), lr=cfg.learning_rate)
    history = []
    out.cov_decoder.train()
    try:
        for epoch in range(cfg.epochs_stage2):
            total, count = 0.0, 0
            for idx in _batches(len(data), cfg.batch_size, gen):
                x = data[idx]
                x = add_jitter(x, cfg.background_jitter, gen)
                u = torch.randn(len(idx), arch.latent_dim, generator=gen, dtype=out.dtype)
                loss, raw = _stage2_terms(out, x, u, mode)
                _check_finite(loss, "stage-2", epoch, history)
                opt.zero_grad()
                penalty = saturation_penalty(raw, out.pattern.center, cfg.saturation_threshold)
                (loss + cfg.saturation_weight * penalty).backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            history.append(total / count)
            log.info("stage2[%s] epoch %d loss %.4f", mode, epoch, history[-1])
    finally:
        out.eval()
        for p in [*out.encoder.parameters(), *out.mean_decoder.parameters()]:
            p.requires_grad_(True)
    out.history["stage2"] = history
    return out


def train(dataset: Dataset, cfg: TrainConfig, arch: ArchConfig | None = None) -> ModelParams:
    """Two-stage training; stage 2 is skipped for ``ablation_mode='identity'``."""
    params = train_stage1(dataset, cfg, arch)
    if cfg.ablation_mode == "identity":
        return params
    return train_stage2(params, dataset, cfg)


# ---------------------------------------------------------------- denoiser


class DnCNN(nn.Module):
    """Residual CNN denoiser; the zero-initialised last layer starts it at the identity."""

    def __init__(self, depth: int = 7, width: int = 32):
        super().__init__()
        layers = [nn.Conv2d(1, width, 3, padding=1), nn.ReLU()]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.ReLU()]
        last = nn.Conv2d(width, 1, 3, padding=1)
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        layers.append(last)
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return x - self.net(x)


@dataclass
class DenoiserParams:
    net: DnCNN
    noise_level: float
    config: DenoiserConfig = field(default_factory=DenoiserConfig)
    history: list = field(default_factory=list)

    def __call__(self, x) -> torch.Tensor:
        x = torch.as_tensor(x)
        single = x.ndim == 2
        xb = (x[None] if single else x)[:, None].to(self.net.net[0].weight.dtype)
        with torch.no_grad():
            out = self.net(xb)[:, 0].to(x.dtype)
        return out[0] if single else out


def train_denoiser(dataset: Dataset, noise_level: float, cfg: DenoiserConfig | None = None) -> DenoiserParams:
    """Fit a DnCNN on (clean, clean + N(0, noise_level^2)) pairs with MSE loss."""
    cfg = cfg or DenoiserConfig()
    if len(dataset) == 0:
        raise ConfigurationError("empty training set")
    torch.manual_seed(cfg.seed)
    net = DnCNN(cfg.depth, cfg.width)
    data = dataset.tensor()[:, None]
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    history = []
    net.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(len(data), cfg.batch_size, gen):
            clean = data[idx]
            noisy = clean + noise_level * torch.randn(clean.shape, generator=gen)
            loss = torch.mean((net(noisy) - clean) ** 2)
            _check_finite(loss, "denoiser", epoch, history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(data))
        log.info("denoiser epoch %d mse %.6f", epoch, history[-1])
    net.eval()
    return DenoiserParams(net, float(noise_level), cfg, history)


def save_denoiser(den: DenoiserParams, path) -> Path:
    import json

    path = Path(path)
    header = {"format": "structvae-denoiser", "version": 1, "noise_level": den.noise_level,
              "depth": den.config.depth, "width": den.config.width}
    arrays = {"__header__": np.array(json.dumps(header))}
    arrays.update({k: v.detach().cpu().numpy() for k, v in den.net.state_dict().items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_denoiser(path) -> DenoiserParams:
    import json

    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"denoiser checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__header__"}
    except (OSError, ValueError, KeyError) as exc:
        raise ArtifactError(f"corrupt denoiser checkpoint {path}: {exc}") from exc
    if header.get("format") != "structvae-denoiser" or header.get("version") != 1:
        raise ArtifactError(f"{path} is not a version-1 denoiser checkpoint")
    cfg = DenoiserConfig(depth=header["depth"], width=header["width"])
    net = DnCNN(cfg.depth, cfg.width)
    net.load_state_dict(state)
    net.eval()
    return DenoiserParams(net, header["noise_level"], cfg)
