"""Single-coil MRI acquisition model: masked, centred, orthonormal 2-D DFT.

``forward`` maps a real image to the complex k-space values at the kept
frequencies (row-major order over the mask).  ``adjoint`` is the adjoint with
respect to the real inner product ``<a, b> = Re(sum conj(a) * b)``, which is why
it returns the real part of the zero-filled inverse transform.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, ShapeError

__all__ = [
    "SamplingMask",
    "Measurement",
    "make_radial_mask",
    "make_cartesian_mask",
    "make_full_mask",
    "forward",
    "adjoint",
    "acquire",
    "solve_quadratic",
]


@dataclass(frozen=True)
class SamplingMask:
    kind: str
    keep: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        if keep.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {keep.shape}")
        if not keep.any():
            raise ConfigurationError("mask keeps no frequencies")
        object.__setattr__(self, "_keep_t", torch.from_numpy(keep.copy()))
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @property
    def shape(self) -> tuple[int, int]:
        return self.keep.shape

    @property
    def count(self) -> int:
        return int(self.keep.sum())

    @property
    def fraction(self) -> float:
        return self.count / self.keep.size

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.keep, other.keep)

    def __hash__(self):
        return hash((self.kind, self.keep.tobytes()))


@dataclass
class Measurement:
    """Noisy k-space samples; ``values`` has shape (..., mask.count)."""

    values: torch.Tensor
    mask: SamplingMask
    noise_std: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.values.shape[-1] != self.mask.count:
            raise ShapeError(f"{self.values.shape[-1]} values for a mask keeping {self.mask.count}")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")

    def __getitem__(self, idx) -> "Measurement":
        return Measurement(self.values[idx], self.mask, self.noise_std, self.seed)

    @property
    def batch_shape(self) -> torch.Size:
        return self.values.shape[:-1]


def make_radial_mask(h: int, w: int, spokes: int) -> SamplingMask:
    """Rasterise ``spokes`` lines through the k-space centre at angles k*pi/spokes.

    Each line is sampled every half pixel and rounded to the nearest grid point
    (a DDA line), so angle 0 gives the centre row exactly.
    """
    if spokes < 1:
        raise ConfigurationError(f"need at least one spoke, got {spokes}")
    cy, cx = h // 2, w // 2
    radius = int(np.ceil(np.hypot(h, w) / 2)) + 1
    t = np.arange(-2 * radius, 2 * radius + 1) / 2.0
    keep = np.zeros((h, w), dtype=bool)
    for k in range(spokes):
        theta = np.pi * k / spokes
        ys = cy + np.rint(t * np.sin(theta)).astype(int)
        xs = cx + np.rint(t * np.cos(theta)).astype(int)
        inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        keep[ys[inside], xs[inside]] = True
    return SamplingMask("radial", keep, {"spokes": int(spokes)})


def make_cartesian_mask(h: int, w: int, center_rows: int, row_prob: float, seed=None) -> SamplingMask:
    """Keep the middle ``center_rows`` rows plus each other row with probability ``row_prob``."""
    if not 0 <= center_rows <= h:
        raise ConfigurationError(f"center_rows={center_rows} must lie in [0, {h}]")
    if not 0.0 <= row_prob <= 1.0:
        raise ConfigurationError(f"row_prob={row_prob} is not a probability")
    rng = np.random.default_rng(seed)
    rows = rng.random(h) < row_prob
    start = h // 2 - center_rows // 2
    rows[start : start + center_rows] = True
    keep = np.repeat(rows[:, None], w, axis=1)
    return SamplingMask(
        "cartesian_random", keep, {"center_rows": int(center_rows), "row_prob": float(row_prob), "seed": seed}
    )


def make_full_mask(h: int, w: int) -> SamplingMask:
    return SamplingMask("full", np.ones((h, w), dtype=bool))


def _check_image(x: torch.Tensor, mask: SamplingMask):
    if tuple(x.shape[-2:]) != mask.shape:
        raise ShapeError(f"image shape {tuple(x.shape[-2:])} does not match mask {mask.shape}")


def _keep(mask: SamplingMask, device=None) -> torch.Tensor:
    return mask._keep_t if device is None else mask._keep_t.to(device)


def _kspace(x: torch.Tensor) -> torch.Tensor:
    return torch.fft.fftshift(torch.fft.fft2(x, norm="ortho"), dim=(-2, -1))


def _image(k: torch.Tensor) -> torch.Tensor:
    return torch.fft.ifft2(torch.fft.ifftshift(k, dim=(-2, -1)), norm="ortho")


def forward(x, mask: SamplingMask) -> torch.Tensor:
    """Apply ``A``: centred unitary DFT restricted to the kept frequencies."""
    x = torch.as_tensor(x)
    _check_image(x, mask)
    return _kspace(x)[..., _keep(mask, x.device)]


def _zero_fill(y: torch.Tensor, mask: SamplingMask) -> torch.Tensor:
    if y.shape[-1] != mask.count:
        raise ShapeError(f"{y.shape[-1]} values for a mask keeping {mask.count}")
    full = torch.zeros(*y.shape[:-1], *mask.shape, dtype=y.dtype, device=y.device)
    full[..., _keep(mask, y.device)] = y
    return full


def adjoint(y, mask: SamplingMask) -> torch.Tensor:
    """Apply ``A^T``: zero-fill, inverse unitary DFT, real part."""
    if isinstance(y, Measurement):
        y = y.values
    y = torch.as_tensor(y)
    if not torch.is_complex(y):
        y = y.to(torch.complex128)
    return _image(_zero_fill(y, mask)).real


def acquire(x, mask: SamplingMask, noise_std: float = 0.0, seed=None) -> Measurement:
    """Simulate ``y = A x + noise`` with complex noise of total std ``noise_std``.

    Real and imaginary parts each get std ``noise_std / sqrt(2)``.  The noise
    draw depends only on ``seed`` and the output shape, never on ``x``.
    """
    if noise_std < 0:
        raise ConfigurationError("noise_std must be >= 0")
    x = torch.as_tensor(x)
    clean = forward(x, mask)
    if noise_std == 0:
        return Measurement(clean, mask, 0.0, seed)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((2, *clean.shape))
    noise = torch.as_tensor(noise_std / np.sqrt(2) * (eps[0] + 1j * eps[1]), dtype=clean.dtype, device=clean.device)
    return Measurement(clean + noise, mask, float(noise_std), seed)


def _mirror(a: np.ndarray) -> np.ndarray:
    # a[(-i) % H, (-j) % W] on a centred grid
    u = np.fft.ifftshift(a)
    u = np.roll(np.flip(u, (0, 1)), 1, axis=(0, 1))
    return np.fft.fftshift(u)


def solve_quadratic(y: Measurement, b, sigma: float, eta: float) -> torch.Tensor:
    """argmin_x (1/2 sigma^2) ||A x - y||^2 + (1/2 eta) ||x - b||^2 over real images.

    Over real images the normal operator ``A^T A`` is diagonal in k-space with
    weight ``(m(k) + m(-k)) / 2``, so the solve is a per-frequency division.
    For masks symmetric under ``k -> -k`` this is the plain mask indicator.
    """
    if sigma <= 0 or eta <= 0:
        raise ConfigurationError("sigma and eta must be positive")
    b = torch.as_tensor(b)
    mask = y.mask
    _check_image(b, mask)
    m_sym = 0.5 * (mask.keep.astype(np.float64) + _mirror(mask.keep.astype(np.float64)))
    weight = torch.as_tensor(m_sym / sigma**2 + 1.0 / eta, device=b.device)
    rhs = _kspace(adjoint(y.values, mask).to(b.dtype)) / sigma**2 + _kspace(b) / eta
    return _image(rhs / weight).real
