"""Gaussian image model N(mean, (L L^T)^-1) with a sparse Cholesky precision factor.

The factor ``L`` is lower triangular under row-major (raster) pixel order.  Row
``i`` of ``L`` has non-zeros only at pixels ``i + offset`` for the offsets of a
causal neighbourhood, so the factor is stored as one weight channel per offset:
``weights[..., y, x, c] == L[i, j]`` with ``i = (y, x)`` and ``j = (y, x) + offsets[c]``.

Everything except the two triangular solves is written with torch ops so that
gradients flow to the network producing the weights.  Leading batch dimensions
are supported throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError, ShapeError

__all__ = [
    "SparsityPattern",
    "CholFactor",
    "causal_neighborhood",
    "build_factor",
    "identity_factor",
    "scaled_identity_factor",
    "apply_L",
    "apply_Lt",
    "log_det_sigma",
    "nll",
    "sample_residual",
    "solve_L",
    "solve_Lt",
    "covariance_row",
    "dense_factor",
]


def causal_neighborhood(radius: int = 1) -> tuple[tuple[int, int], ...]:
    """Offsets of the causal half of a (2r+1)x(2r+1) window, centre last.

    ``radius=1`` gives the 5-offset 3x3 neighbourhood, ``radius=2`` the
    13-offset 5x5 one.
    """
    if radius < 0:
        raise ConfigurationError(f"radius must be >= 0, got {radius}")
    offsets = [(dy, dx) for dy in range(-radius, 0) for dx in range(-radius, radius + 1)]
    offsets += [(0, dx) for dx in range(-radius, 0)]
    offsets.append((0, 0))
    return tuple(offsets)


@dataclass(frozen=True)
class SparsityPattern:
    height: int
    width: int
    neighborhood: tuple[tuple[int, int], ...] = causal_neighborhood(1)

    def __post_init__(self):
        nb = tuple(tuple(int(v) for v in off) for off in self.neighborhood)
        object.__setattr__(self, "neighborhood", nb)
        if len(set(nb)) != len(nb):
            raise ConfigurationError("duplicate offsets in neighbourhood")
        if (0, 0) not in nb:
            raise ConfigurationError("neighbourhood must contain the centre offset (0, 0)")
        for dy, dx in nb:
            if dy > 0 or (dy == 0 and dx > 0):
                raise ConfigurationError(f"offset {(dy, dx)} is not causal in raster order")
        if self.height < 1 or self.width < 1:
            raise ConfigurationError("image dimensions must be positive")

    @classmethod
    def causal(cls, height: int, width: int, radius: int = 1) -> "SparsityPattern":
        return cls(height, width, causal_neighborhood(radius))

    @property
    def channels(self) -> int:
        return len(self.neighborhood)

    @property
    def center(self) -> int:
        return self.neighborhood.index((0, 0))

    @property
    def size(self) -> int:
        return self.height * self.width

    @cached_property
    def valid(self) -> np.ndarray:
        """Boolean (H, W, C): does offset ``c`` stay inside the image at pixel (y, x)."""
        ys, xs = np.mgrid[: self.height, : self.width]
        out = np.empty((self.height, self.width, self.channels), dtype=bool)
        for c, (dy, dx) in enumerate(self.neighborhood):
            out[..., c] = (ys + dy >= 0) & (ys + dy < self.height) & (xs + dx >= 0) & (xs + dx < self.width)
        return out


@dataclass
class CholFactor:
    """Sparse lower-triangular factor of the precision matrix."""

    pattern: SparsityPattern
    weights: torch.Tensor
    diag_bound: float = 3.0

    @property
    def diag(self) -> torch.Tensor:
        return self.weights[..., self.pattern.center]

    @property
    def batch_shape(self) -> torch.Size:
        return self.weights.shape[:-3]

    def diagonal_only(self) -> "CholFactor":
        keep = torch.zeros(self.pattern.channels, dtype=self.weights.dtype, device=self.weights.device)
        keep[self.pattern.center] = 1
        return CholFactor(self.pattern, self.weights * keep, self.diag_bound)

    def detach(self) -> "CholFactor":
        return CholFactor(self.pattern, self.weights.detach(), self.diag_bound)

    def __getitem__(self, idx) -> "CholFactor":
        if not self.batch_shape:
            raise IndexError("factor has no batch dimension")
        return CholFactor(self.pattern, self.weights[idx], self.diag_bound)


def _as_tensor(a, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    t = torch.as_tensor(np.asarray(a))
    if like is not None:
        t = t.to(dtype=like.dtype, device=like.device)
    return t


def build_factor(raw, pattern: SparsityPattern, diag_bound: float = 3.0) -> CholFactor:
    """Map raw network channels (..., H, W, C) to a valid factor.

    Off-diagonal channels are used as-is (entries pointing outside the image are
    zeroed); the centre channel becomes ``exp(diag_bound * tanh(raw))`` so every
    diagonal lies in ``[exp(-diag_bound), exp(diag_bound)]``.
    """
    raw = _as_tensor(raw)
    if not torch.is_floating_point(raw):
        raw = raw.to(torch.get_default_dtype())
    if diag_bound <= 0:
        raise ConfigurationError(f"diag_bound must be positive, got {diag_bound}")
    if raw.ndim < 3 or raw.shape[-1] != pattern.channels:
        raise ConfigurationError(
            f"expected {pattern.channels} channels for the neighbourhood, got shape {tuple(raw.shape)}"
        )
    if tuple(raw.shape[-3:-1]) != (pattern.height, pattern.width):
        raise ShapeError(f"raw channels {tuple(raw.shape)} do not match pattern {pattern.height}x{pattern.width}")
    if not torch.isfinite(raw).all():
        raise NumericError("non-finite raw channel values")
    c = pattern.center
    diag = torch.exp(diag_bound * torch.tanh(raw[..., c : c + 1]))
    weights = torch.cat([raw[..., :c], diag, raw[..., c + 1 :]], dim=-1)
    valid = torch.as_tensor(pattern.valid, device=raw.device)
    weights = torch.where(valid, weights, torch.zeros((), dtype=weights.dtype, device=weights.device))
    return CholFactor(pattern, weights, float(diag_bound))


def scaled_identity_factor(pattern: SparsityPattern, rho: float, batch_shape=(), dtype=None) -> CholFactor:
    """Factor of the isotropic model Sigma = rho * I (diagonal 1/sqrt(rho))."""
    dtype = dtype or torch.get_default_dtype()
    w = torch.zeros(*batch_shape, pattern.height, pattern.width, pattern.channels, dtype=dtype)
    w[..., pattern.center] = rho ** -0.5
    return CholFactor(pattern, w, diag_bound=max(abs(0.5 * np.log(rho)), 1e-12))


def identity_factor(pattern: SparsityPattern, batch_shape=(), dtype=None) -> CholFactor:
    return scaled_identity_factor(pattern, 1.0, batch_shape, dtype)


def _shift(v: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    # out[..., y, x] = v[..., y + dy, x + dx], zero outside
    if dy == 0 and dx == 0:
        return v
    if abs(dy) >= v.shape[-2] or abs(dx) >= v.shape[-1]:
        return torch.zeros_like(v)
    return F.pad(v, (-dx, dx, -dy, dy))


def _check_image(factor: CholFactor, v: torch.Tensor):
    p = factor.pattern
    if tuple(v.shape[-2:]) != (p.height, p.width):
        raise ShapeError(f"array of shape {tuple(v.shape)} does not match factor {p.height}x{p.width}")


def apply_L(factor: CholFactor, v) -> torch.Tensor:
    """Return ``L @ vec(v)`` reshaped to image shape."""
    v = _as_tensor(v, factor.weights)
    _check_image(factor, v)
    out = 0
    for c, (dy, dx) in enumerate(factor.pattern.neighborhood):
        out = out + factor.weights[..., c] * _shift(v, dy, dx)
    return out


def apply_Lt(factor: CholFactor, u) -> torch.Tensor:
    """Return ``L^T @ vec(u)`` reshaped to image shape."""
    u = _as_tensor(u, factor.weights)
    _check_image(factor, u)
    out = 0
    for c, (dy, dx) in enumerate(factor.pattern.neighborhood):
        out = out + _shift(factor.weights[..., c] * u, -dy, -dx)
    return out


def log_det_sigma(factor: CholFactor) -> torch.Tensor:
    """log|Sigma| = -2 * sum_i log L_ii, one value per batch element."""
    diag = factor.diag
    if not bool((diag > 0).all()):
        raise NumericError("factor has a non-positive diagonal entry")
    return -2.0 * torch.log(diag).sum(dim=(-2, -1))


def nll(x, mean, factor: CholFactor) -> torch.Tensor:
    """Negative log-likelihood ``log|Sigma| + 0.5 * r^T L L^T r`` with ``r = x - mean``.

    The quadratic form is evaluated as ``0.5 * ||L^T r||^2`` so that it matches
    ``Sigma^-1 = L L^T``.  The ``d/2 log(2 pi)`` constant is omitted.
    """
    x = _as_tensor(x, factor.weights)
    mean = _as_tensor(mean, factor.weights)
    if x.shape[-2:] != mean.shape[-2:]:
        raise ShapeError(f"x {tuple(x.shape)} and mean {tuple(mean.shape)} differ")
    r = apply_Lt(factor, x - mean)
    return log_det_sigma(factor) + 0.5 * (r * r).sum(dim=(-2, -1))


def _numpy_weights(factor: CholFactor) -> np.ndarray:
    w = factor.weights.detach().cpu().numpy().astype(np.float64, copy=False)
    if not (w[..., factor.pattern.center] != 0).all():
        raise NumericError("zero diagonal in triangular solve")
    return w


def _rshift(row: np.ndarray, k: int) -> np.ndarray:
    # out[..., x] = row[..., x + k], zero outside
    out = np.zeros_like(row)
    w = row.shape[-1]
    if k >= 0:
        out[..., : w - k] = row[..., k:]
    else:
        out[..., -k:] = row[..., : w + k]
    return out


def solve_L(factor: CholFactor, b) -> torch.Tensor:
    """Forward substitution: solve ``L w = vec(b)``."""
    b_t = _as_tensor(b, factor.weights)
    _check_image(factor, b_t)
    p = factor.pattern
    w = _numpy_weights(factor)
    rhs = np.broadcast_to(b_t.detach().cpu().numpy().astype(np.float64), np.broadcast_shapes(b_t.shape, w.shape[:-1]))
    sol = np.zeros(rhs.shape)
    up = [(c, dy, dx) for c, (dy, dx) in enumerate(p.neighborhood) if dy < 0]
    left = [(c, dx) for c, (dy, dx) in enumerate(p.neighborhood) if dy == 0 and dx < 0]
    ctr = p.center
    for y in range(p.height):
        acc = rhs[..., y, :].copy()
        for c, dy, dx in up:
            if y + dy >= 0:
                acc -= w[..., y, :, c] * _rshift(sol[..., y + dy, :], dx)
        for x in range(p.width):
            val = acc[..., x]
            for c, dx in left:
                if x + dx >= 0:
                    val = val - w[..., y, x, c] * sol[..., y, x + dx]
            sol[..., y, x] = val / w[..., y, x, ctr]
    return torch.as_tensor(sol, dtype=factor.weights.dtype, device=factor.weights.device)


def solve_Lt(factor: CholFactor, u) -> torch.Tensor:
    """Back substitution: solve ``L^T r = vec(u)`` in reverse raster order."""
    u_t = _as_tensor(u, factor.weights)
    _check_image(factor, u_t)
    p = factor.pattern
    w = _numpy_weights(factor)
    rhs = np.broadcast_to(u_t.detach().cpu().numpy().astype(np.float64), np.broadcast_shapes(u_t.shape, w.shape[:-1]))
    sol = np.zeros(rhs.shape)
    below = [(c, dy, dx) for c, (dy, dx) in enumerate(p.neighborhood) if dy < 0]
    right = [(c, dx) for c, (dy, dx) in enumerate(p.neighborhood) if dy == 0 and dx < 0]
    ctr = p.center
    for y in range(p.height - 1, -1, -1):
        acc = rhs[..., y, :].copy()
        for c, dy, dx in below:
            yi = y - dy
            if yi < p.height:
                # pixel i = (yi, x - dx) contributes L[i, j] * r[i] to row j = (y, x)
                acc -= _rshift(w[..., yi, :, c] * sol[..., yi, :], -dx)
        for x in range(p.width - 1, -1, -1):
            val = acc[..., x]
            for c, dx in right:
                xi = x - dx
                if xi < p.width:
                    val = val - w[..., y, xi, c] * sol[..., y, xi]
            sol[..., y, x] = val / w[..., y, x, ctr]
    return torch.as_tensor(sol, dtype=factor.weights.dtype, device=factor.weights.device)


def sample_residual(factor: CholFactor, u) -> torch.Tensor:
    """Map standard-normal ``u`` to a residual with covariance ``(L L^T)^-1``."""
    return solve_Lt(factor, u)


def covariance_row(factor: CholFactor, pixel) -> torch.Tensor:
    """Row ``pixel`` of Sigma as an image, via one forward and one back solve.

    ``pixel`` is a raster index or a ``(row, col)`` pair.  Only unbatched factors.
    """
    p = factor.pattern
    if factor.batch_shape:
        raise ShapeError("covariance_row expects an unbatched factor")
    if isinstance(pixel, (tuple, list)):
        row, col = (int(v) for v in pixel)
        if not (0 <= row < p.height and 0 <= col < p.width):
            raise IndexError(f"pixel {pixel} outside {p.height}x{p.width} image")
        index = row * p.width + col
    else:
        index = int(pixel)
    if not 0 <= index < p.size:
        raise IndexError(f"pixel index {index} out of range [0, {p.size})")
    e = torch.zeros(p.height, p.width, dtype=factor.weights.dtype)
    e.view(-1)[index] = 1
    return solve_Lt(factor, solve_L(factor, e))


def dense_factor(factor: CholFactor) -> np.ndarray:
    """Dense (d, d) matrix of an unbatched factor, for verification on small images."""
    if factor.batch_shape:
        raise ShapeError("dense_factor expects an unbatched factor")
    p = factor.pattern
    w = factor.weights.detach().cpu().numpy().astype(np.float64)
    L = np.zeros((p.size, p.size))
    for y in range(p.height):
        for x in range(p.width):
            for c, (dy, dx) in enumerate(p.neighborhood):
                if p.valid[y, x, c]:
                    L[y * p.width + x, (y + dy) * p.width + (x + dx)] = w[y, x, c]
    return L
