"""Reconstruction solvers: generative-prior MAP and the comparison baselines.

All solvers accept batched measurements (``y.values`` of shape (B, m)) and treat
images independently.  Operator-only solvers give the same numbers batched or
looped; network-based ones agree up to float32 rounding in the convolutions.
Objective traces have shape (T,) for a single image and (T, B) for a batch;
an element that has converged simply repeats its last value.

Descent solvers run their objectives in float64.  Network outputs are cast up
from the model dtype so every block of an alternating scheme sees the same
function.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .errors import ConfigurationError, DivergenceError, ShapeError, StageError
from .forward_model import Measurement, adjoint, forward, solve_quadratic
from .generative_model import ModelParams, decode_chol, decode_mean, encode
from .structured_gaussian import CholFactor, nll

__all__ = [
    "PnPConfig",
    "ReconConfig",
    "ReconResult",
    "DescentResult",
    "METHODS",
    "GAMMA_FLOOR",
    "data_term",
    "gen_objective",
    "backtracking_descent",
    "reconstruct",
    "reconstruct_gen_map",
    "reconstruct_range",
    "reconstruct_narnhofer",
    "reconstruct_least_squares",
    "reconstruct_tv",
    "reconstruct_pnp_admm",
    "tv_norm",
    "psnr",
    "assert_monotone",
]

METHODS = ("gen_map", "range", "narnhofer", "least_squares", "tv", "pnp_admm")
GAMMA_FLOOR = 1e-4
PSNR_CAP = 100.0
F64 = torch.float64


@dataclass
class PnPConfig:
    sigma: float = 0.05
    eta: float = 0.05
    iters: int = 50


@dataclass
class ReconConfig:
    """Solver settings.  ``lam`` is the regulariser weight (``lambda`` in config files)."""

    method: str = "gen_map"
    lam: float = 1.0
    mu: float = 1.0
    ablation_mode: str = "covar"
    max_outer_iters: int = 50
    tol: float = 1e-6
    tv_weight: float = 0.01
    pnp: PnPConfig = field(default_factory=PnPConfig)
    ls_iters: int = 20
    inner_z_iters: int = 10
    inner_x_iters: int = 10
    range_iters: int = 1000
    tv_iters: int = 500
    narnhofer_outer: int = 20
    narnhofer_theta_steps: int = 5
    narnhofer_lr: float = 1e-4
    warm_start_steps: bool = True

    def __post_init__(self):
        if isinstance(self.pnp, dict):
            self.pnp = PnPConfig(**self.pnp)
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.ablation_mode not in ("identity", "diagonal", "covar"):
            raise ConfigurationError(f"unknown ablation_mode {self.ablation_mode!r}")
        for name in ("lam", "mu", "tv_weight", "narnhofer_lr"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.tol <= 0:
            raise ConfigurationError("tol must be positive")
        if self.pnp.sigma <= 0 or self.pnp.eta <= 0:
            raise ConfigurationError("pnp sigma and eta must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "ReconConfig":
        return replace(self, **kw)


@dataclass
class ReconResult:
    image: torch.Tensor
    latent: torch.Tensor | None
    objective_trace: np.ndarray
    iterations_used: int
    config: ReconConfig
    stalled: bool = False

    def metadata(self) -> dict:
        return {
            "method": self.config.method,
            "config": self.config.to_dict(),
            "objective_trace": np.asarray(self.objective_trace).tolist(),
            "iterations_used": int(self.iterations_used),
            "stalled": bool(self.stalled),
            "latent": None if self.latent is None else self.latent.detach().cpu().tolist(),
        }


@dataclass
class DescentResult:
    x: torch.Tensor
    value: torch.Tensor
    trace: torch.Tensor
    iterations: int
    stalled: torch.Tensor
    converged: torch.Tensor
    step: torch.Tensor


# ---------------------------------------------------------------- objectives


def _gamma(y: Measurement) -> float:
    return max(float(y.noise_std), GAMMA_FLOOR)


def data_term(x, y: Measurement) -> torch.Tensor:
    """(1 / 2 gamma^2) ||A x - y||^2, per image.  gamma is floored at ``GAMMA_FLOOR``."""
    x = torch.as_tensor(x)
    if tuple(x.shape[-2:]) != y.mask.shape:
        raise ShapeError(f"image {tuple(x.shape[-2:])} does not match mask {y.mask.shape}")
    r = forward(x, y.mask) - y.values
    return 0.5 / _gamma(y) ** 2 * torch.sum(r.real**2 + r.imag**2, dim=-1)


def _identity_nll(x, mean, rho):
    r = x - mean
    d = r.shape[-1] * r.shape[-2]
    return d * math.log(rho) + 0.5 / rho * torch.sum(r * r, dim=(-2, -1))


def _check_mode(params: ModelParams, mode: str):
    if mode == "identity":
        if params.stage == "untrained":
            raise StageError("model is untrained")
        return
    if params.stage != "covariance_trained":
        raise StageError(f"ablation mode {mode!r} needs a covariance-trained model, got stage {params.stage!r}")
    if mode == "covar" and params.cov_mode == "diagonal":
        raise StageError("covar mode requested but the checkpoint was trained as a diagonal ablation")


def _decode(params: ModelParams, z: torch.Tensor, mode: str):
    zin = z.to(params.dtype)
    mean = decode_mean(params, zin).to(F64)
    if mode == "identity":
        return mean, None
    f = decode_chol(params, zin)
    if mode == "diagonal":
        f = f.diagonal_only()
    return mean, CholFactor(f.pattern, f.weights.to(F64), f.diag_bound)


def _prior(x, z, mean, factor, params, cfg):
    reg = _identity_nll(x, mean, params.rho) if factor is None else nll(x, mean, factor)
    return cfg.lam * (reg + 0.5 * cfg.mu * torch.sum(z * z, dim=-1))


def gen_objective(x, z, y: Measurement, params: ModelParams, cfg: ReconConfig) -> torch.Tensor:
    """data_term(x, y) + lam * (nll(x, G(z), Sigma(z)) + mu/2 ||z||^2), per image."""
    _check_mode(params, cfg.ablation_mode)
    x = torch.as_tensor(x, dtype=F64)
    z = torch.as_tensor(z, dtype=F64)
    d = data_term(x, y)
    if cfg.lam == 0:
        return d
    mean, factor = _decode(params, z, cfg.ablation_mode)
    return d + _prior(x, z, mean, factor, params, cfg)


# ---------------------------------------------------------------- line search


def _value_and_grad(f, x):
    with torch.enable_grad():
        xr = x.detach().requires_grad_(True)
        v = f(xr)
        (g,) = torch.autograd.grad(v.sum(), xr)
    return v.detach(), g.detach()


def backtracking_descent(
    f: Callable[[torch.Tensor], torch.Tensor],
    x0,
    max_iters: int = 100,
    tol: float = 1e-6,
    *,
    batch_ndim: int = 0,
    init_step: float = 1.0,
    c: float = 1e-4,
    shrink: float = 0.5,
    max_shrinks: int = 50,
    warm_start: bool = False,
    step0=None,
) -> DescentResult:
    """Gradient descent with an Armijo backtracking line search.

    Parameters
    ----------
    f : callable
        Objective.  Returns a tensor of shape ``x0.shape[:batch_ndim]``; it must
        be separable over those leading batch dimensions.
    x0 : tensor
        Starting point.
    max_iters, tol : int, float
        Stop after ``max_iters`` accepted steps or once an element's relative
        decrease ``(f_old - f_new) / |f_old|`` drops below ``tol``.
    init_step, c, shrink, max_shrinks : float
        Armijo parameters.  A trial step ``t`` is accepted when
        ``f(x - t g) <= f(x) - c t ||g||^2``; otherwise ``t *= shrink``.  After
        ``max_shrinks`` failed shrinks the element is frozen and flagged stalled.
    warm_start : bool
        Start each search at ``min(init_step, 2 * t_prev)`` instead of
        ``init_step``.  Same acceptance rule, far fewer function evaluations on
        badly scaled problems.
    step0 : tensor, optional
        Initial ``t_prev`` per element when warm starting (e.g. carried over
        from a previous block).

    Returns
    -------
    DescentResult
        ``trace`` has shape (iterations + 1, *batch) and is nonincreasing.
    """
    x = torch.as_tensor(x0).detach().clone()
    bshape = x.shape[:batch_ndim]
    event_dims = tuple(range(batch_ndim, x.ndim))
    view = bshape + (1,) * (x.ndim - batch_ndim)
    fx, g = _value_and_grad(f, x)
    if fx.shape != bshape:
        raise ShapeError(f"objective returned shape {tuple(fx.shape)}, expected {tuple(bshape)}")
    if not torch.isfinite(fx).all():
        raise DivergenceError("objective is not finite at the starting point", [fx.tolist()])
    t_prev = torch.full(bshape, float(init_step), dtype=F64) if step0 is None else torch.as_tensor(step0, dtype=F64).clone()
    active = torch.ones(bshape, dtype=torch.bool)
    stalled = torch.zeros(bshape, dtype=torch.bool)
    converged = torch.zeros(bshape, dtype=torch.bool)
    trace = [fx.clone()]
    iters = 0
    for _ in range(max_iters):
        gsq = torch.sum(g.to(F64) ** 2, dim=event_dims) if event_dims else g.to(F64) ** 2
        converged |= active & (gsq == 0)
        active &= gsq > 0
        if not active.any():
            break
        t = torch.clamp(2 * t_prev, max=init_step) if warm_start else torch.full(bshape, float(init_step), dtype=F64)
        pending = active.clone()
        x_new, f_new = x.clone(), fx.clone()
        for _ in range(max_shrinks + 1):
            cand = x - (t.reshape(view) * g).to(x.dtype)
            with torch.no_grad():
                fc = f(cand).detach()
            ok = pending & torch.isfinite(fc) & (fc.to(F64) <= fx.to(F64) - c * t * gsq)
            x_new = torch.where(ok.reshape(view), cand, x_new)
            f_new = torch.where(ok, fc, f_new)
            pending &= ~ok
            if not pending.any():
                break
            t = torch.where(pending, t * shrink, t)
        stalled |= pending
        moved = active & ~pending
        t_prev = torch.where(moved, t, t_prev)
        rel = (fx - f_new).to(F64) / torch.clamp(fx.abs().to(F64), min=1e-300)
        converged |= moved & (rel < tol)
        active = moved & ~(rel < tol)
        x, fx = x_new, f_new
        trace.append(fx.clone())
        iters += 1
        if not active.any():
            break
        g_new = _value_and_grad(f, x)[1]
        g = torch.where(active.reshape(view), g_new, torch.zeros_like(g_new))
    return DescentResult(x, fx, torch.stack(trace), iters, stalled, converged, t_prev)


def assert_monotone(trace, rtol: float = 1e-9, what: str = "objective"):
    """Raise if a trace (T, ...) ever increases beyond ``rtol`` relative slack."""
    tr = np.asarray(trace, dtype=np.float64)
    if len(tr) < 2:
        return
    slack = rtol * np.maximum(np.abs(tr[:-1]), 1.0)
    bad = np.argwhere(tr[1:] > tr[:-1] + slack)
    if len(bad):
        i = tuple(bad[0])
        raise AssertionError(f"{what} trace increased at step {i[0] + 1}: {tr[i[0]][i[1:]]} -> {tr[i[0] + 1][i[1:]]}")


# ---------------------------------------------------------------- helpers


def _unbatch(y: Measurement):
    if not torch.isfinite(torch.view_as_real(y.values) if y.values.is_complex() else y.values).all():
        raise DivergenceError("measurement contains non-finite values", [])
    if y.values.ndim == 1:
        return y[None], True
    if y.values.ndim != 2:
        raise ShapeError("measurement values must be (m,) or (B, m)")
    return y, False


def _finish(image, latent, trace, iters, cfg, stalled, single):
    trace = torch.as_tensor(trace).detach().cpu().numpy()
    if single:
        image = image[0]
        latent = None if latent is None else latent[0]
        trace = trace[:, 0]
    if not torch.isfinite(image).all():
        raise DivergenceError("reconstruction is not finite", trace.tolist())
    return ReconResult(image.detach(), None if latent is None else latent.detach(), trace, int(iters), cfg, bool(stalled))


def _check_trace(trace):
    if not np.isfinite(np.asarray(trace)).all():
        raise DivergenceError("objective became NaN", np.asarray(trace).tolist())


# ---------------------------------------------------------------- solvers


def reconstruct_gen_map(y: Measurement, params: ModelParams, cfg: ReconConfig) -> ReconResult:
    """Joint MAP over (x, z) by alternating backtracking descent: z block, then x block."""
    _check_mode(params, cfg.ablation_mode)
    y, single = _unbatch(y)
    x = adjoint(y.values, y.mask).to(F64)
    with torch.no_grad():
        z = encode(params, x.to(params.dtype)).mu.to(F64)
    B = x.shape[0]
    dt = data_term
    if cfg.lam == 0:
        fx = lambda xx: dt(xx, y)  # noqa: E731
        res = backtracking_descent(fx, x, cfg.max_outer_iters * cfg.inner_x_iters, cfg.tol, batch_ndim=1,
                                   warm_start=cfg.warm_start_steps)
        return _finish(res.x, z, res.trace, res.iterations, cfg, res.stalled.any(), single)

    with torch.no_grad():
        mean, factor = _decode(params, z, cfg.ablation_mode)
        current = dt(x, y) + _prior(x, z, mean, factor, params, cfg)
    trace = [current]
    tz = tx = None
    stalled = torch.zeros(B, dtype=torch.bool)
    done = torch.zeros(B, dtype=torch.bool)
    outer = 0
    for outer in range(1, cfg.max_outer_iters + 1):
        start = trace[-1]
        xc = x

        def fz(zz):
            m, f = _decode(params, zz, cfg.ablation_mode)
            return dt(xc, y) + _prior(xc, zz, m, f, params, cfg)

        rz = backtracking_descent(fz, z, cfg.inner_z_iters, cfg.tol * 1e-3, batch_ndim=1,
                                  warm_start=cfg.warm_start_steps, step0=tz)
        z, tz = torch.where(done[:, None], z, rz.x), rz.step
        with torch.no_grad():
            mean, factor = _decode(params, z, cfg.ablation_mode)
        zc = z

        def fx(xx):
            return dt(xx, y) + _prior(xx, zc, mean, factor, params, cfg)

        for v in rz.trace[1:]:
            trace.append(torch.where(done, trace[-1], v))
        rx = backtracking_descent(fx, x, cfg.inner_x_iters, cfg.tol * 1e-3, batch_ndim=1,
                                  warm_start=cfg.warm_start_steps, step0=tx)
        x, tx = torch.where(done[:, None, None], x, rx.x), rx.step
        for v in rx.trace[1:]:
            trace.append(torch.where(done, trace[-1], v))
        stalled |= rz.stalled | rx.stalled
        _check_trace(torch.stack(trace))
        end = trace[-1]
        rel = (start - end) / torch.clamp(start.abs(), min=1e-300)
        done |= rel < cfg.tol
        if done.all():
            break
    return _finish(x, z, torch.stack(trace), outer, cfg, stalled.any(), single)


def _range_objective(params, y, mu, decoder=None):
    dec = decoder or params.mean_decoder

    def f(zz):
        g = dec(zz.to(params.dtype))[:, 0].to(F64)
        r = forward(g, y.mask) - y.values
        return 0.5 * torch.sum(r.real**2 + r.imag**2, dim=-1) + mu * torch.sum(zz * zz, dim=-1)

    return f


def reconstruct_range(y: Measurement, params: ModelParams, cfg: ReconConfig, z0=None) -> ReconResult:
    """Search the generator range: min_z 1/2 ||A G(z) - y||^2 + mu ||z||^2, return G(z*)."""
    if params.stage == "untrained":
        raise StageError("model is untrained")
    y, single = _unbatch(y)
    if z0 is None:
        with torch.no_grad():
            z0 = encode(params, adjoint(y.values, y.mask).to(params.dtype)).mu
    z0 = torch.as_tensor(z0, dtype=F64).reshape(y.values.shape[0], -1)
    f = _range_objective(params, y, cfg.mu)
    res = backtracking_descent(f, z0, cfg.range_iters, cfg.tol, batch_ndim=1, warm_start=cfg.warm_start_steps)
    _check_trace(res.trace)
    with torch.no_grad():
        image = decode_mean(params, res.x.to(params.dtype)).to(F64)
    return _finish(image, res.x, res.trace, res.iterations, cfg, res.stalled.any(), single)


def _adapt_one(params: ModelParams, y: Measurement, z: torch.Tensor, cfg: ReconConfig):
    """Phase-2 alternation for a single image on a private decoder copy."""
    dec = copy.deepcopy(params.mean_decoder).eval()
    for p in dec.parameters():
        p.requires_grad_(True)
    f = _range_objective(params, y, 0.0, dec)
    opt = torch.optim.Adam(dec.parameters(), lr=cfg.narnhofer_lr)
    lr = cfg.narnhofer_lr
    with torch.no_grad():
        current = f(z)
    trace = []
    tz = None
    stalled = False
    for _ in range(cfg.narnhofer_outer):
        rz = backtracking_descent(f, z, cfg.inner_z_iters, cfg.tol * 1e-3, batch_ndim=1,
                                  warm_start=cfg.warm_start_steps, step0=tz)
        z, tz, stalled = rz.x, rz.step, stalled or bool(rz.stalled.any())
        trace.extend(rz.trace[1:])
        current = rz.value
        for _ in range(cfg.narnhofer_theta_steps):
            backup = copy.deepcopy(dec.state_dict())
            opt.zero_grad()
            loss = f(z).sum()
            loss.backward()
            opt.step()
            with torch.no_grad():
                new = f(z)
            if torch.isfinite(new).all() and (new <= current).all():
                current = new
                trace.append(new)
            else:
                dec.load_state_dict(backup)
                lr *= 0.5
                for group in opt.param_groups:
                    group["lr"] = lr
        if lr < 1e-12:
            break
    with torch.no_grad():
        image = dec(z.to(params.dtype))[:, 0].to(F64)
    return image, z, trace, stalled


def reconstruct_narnhofer(y: Measurement, params: ModelParams, cfg: ReconConfig) -> ReconResult:
    """Range search (mu = 0) to initialise z, then alternate z steps with decoder-weight steps.

    Decoder weights are adapted on a per-image copy and discarded afterwards.
    """
    y, single = _unbatch(y)
    phase1 = reconstruct_range(y, params, cfg.with_(mu=0.0))
    if cfg.narnhofer_outer == 0:
        return _finish(phase1.image, phase1.latent, phase1.objective_trace, phase1.iterations_used, cfg,
                       phase1.stalled, single)
    images, latents, traces, stalled = [], [], [], False
    for b in range(y.values.shape[0]):
        img, z, tr, st = _adapt_one(params, y[b : b + 1], phase1.latent[b : b + 1], cfg)
        images.append(img)
        latents.append(z)
        traces.append(torch.cat([torch.as_tensor(phase1.objective_trace[:, b]), torch.cat(tr)]) if tr else
                      torch.as_tensor(phase1.objective_trace[:, b]))
        stalled |= st
    T = max(len(t) for t in traces)
    trace = torch.stack([torch.cat([t, t[-1:].expand(T - len(t))]) for t in traces], dim=1)
    _check_trace(trace)
    return _finish(torch.cat(images), torch.cat(latents), trace,
                   phase1.iterations_used + cfg.narnhofer_outer, cfg, stalled or phase1.stalled, single)


def reconstruct_least_squares(y: Measurement, cfg: ReconConfig) -> ReconResult:
    """Backtracking descent on the data term from the adjoint, stopped after ``ls_iters`` steps."""
    y, single = _unbatch(y)
    x0 = adjoint(y.values, y.mask).to(F64)
    res = backtracking_descent(lambda xx: data_term(xx, y), x0, cfg.ls_iters, cfg.tol, batch_ndim=1,
                               warm_start=cfg.warm_start_steps)
    return _finish(res.x, None, res.trace, res.iterations, cfg, res.stalled.any(), single)


def _grad2d(x):
    gx = torch.zeros(2, *x.shape, dtype=x.dtype)
    gx[0, ..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    gx[1, ..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    return gx


def _div2d(p):
    # negative adjoint of _grad2d
    d = torch.zeros(p.shape[1:], dtype=p.dtype)
    py, px = p[0], p[1]
    d[..., :-1, :] += py[..., :-1, :]
    d[..., 1:, :] -= py[..., :-1, :]
    d[..., :, :-1] += px[..., :, :-1]
    d[..., :, 1:] -= px[..., :, :-1]
    return d


def tv_norm(x) -> torch.Tensor:
    """Isotropic total variation with forward differences and Neumann boundary, per image."""
    g = _grad2d(torch.as_tensor(x))
    return torch.sum(torch.sqrt(g[0] ** 2 + g[1] ** 2), dim=(-2, -1))


def reconstruct_tv(y: Measurement, cfg: ReconConfig) -> ReconResult:
    """min_x 1/2 ||A x - y||^2 + alpha TV(x) by primal-dual hybrid gradient.

    Steps are ``sigma = tau = 1/3``: ``||A|| <= 1`` and ``||grad||^2 <= 8`` give
    ``||K||^2 <= 9``, so ``sigma * tau * ||K||^2 <= 1``.
    """
    y, single = _unbatch(y)
    alpha = float(cfg.tv_weight)
    values = y.values.to(torch.complex128)
    x = adjoint(values, y.mask).to(F64)
    xbar = x.clone()
    p = torch.zeros_like(values)
    q = torch.zeros(2, *x.shape, dtype=F64)
    sigma = tau = 1.0 / 3.0

    def primal(xx):
        r = forward(xx, y.mask) - values
        return 0.5 * torch.sum(r.real**2 + r.imag**2, dim=-1) + alpha * tv_norm(xx)

    trace = [primal(x)]
    for _ in range(cfg.tv_iters):
        p = (p + sigma * (forward(xbar, y.mask) - values)) / (1.0 + sigma)
        q = q + sigma * _grad2d(xbar)
        if alpha > 0:
            q = q / torch.clamp(torch.sqrt(q[0] ** 2 + q[1] ** 2) / alpha, min=1.0)
        else:
            q = torch.zeros_like(q)
        x_new = x - tau * (adjoint(p, y.mask) - _div2d(q))
        xbar = 2 * x_new - x
        x = x_new
        trace.append(primal(x))
    return _finish(x, None, torch.stack(trace), cfg.tv_iters, cfg, False, single)


def reconstruct_pnp_admm(y: Measurement, denoiser, cfg: ReconConfig, truth=None) -> ReconResult:
    """Plug-and-play ADMM with a learned denoiser in place of the image-space prox.

    Scaled-form iteration from ``x0 = A^T y``, ``u0 = v0 = 0``::

        x_k = argmin (1/2 sigma^2)||A x - y||^2 + (1/2 eta)||x - (u_{k-1} - v_{k-1})||^2
        u_k = D(x_k + v_{k-1})
        v_k = v_{k-1} + x_k - u_k

    Returns ``u`` after ``cfg.pnp.iters`` iterations.  The trace records
    ``||x_k - u_k||`` (the primal residual), or ``||x_k - truth||`` when ``truth``
    is given.
    """
    y, single = _unbatch(y)
    pc = cfg.pnp
    x = adjoint(y.values, y.mask).to(F64)
    u = torch.zeros_like(x)
    v = torch.zeros_like(x)
    trace = []
    for _ in range(pc.iters):
        x = solve_quadratic(y, u - v, pc.sigma, pc.eta)
        u = torch.as_tensor(denoiser(x + v)).to(F64)
        v = v + x - u
        ref = u if truth is None else torch.as_tensor(truth, dtype=F64)
        trace.append(torch.sqrt(torch.sum((x - ref) ** 2, dim=(-2, -1))))
    out = u if pc.iters > 0 else x
    tr = torch.stack(trace) if trace else torch.zeros(0, x.shape[0], dtype=F64)
    return _finish(out, None, tr, pc.iters, cfg, False, single)


def reconstruct(y: Measurement, cfg: ReconConfig, params: ModelParams | None = None, denoiser=None) -> ReconResult:
    """Dispatch on ``cfg.method``."""
    if cfg.method in ("gen_map", "range", "narnhofer") and params is None:
        raise ConfigurationError(f"method {cfg.method!r} needs a model checkpoint")
    if cfg.method == "pnp_admm" and denoiser is None:
        raise ConfigurationError("pnp_admm needs a denoiser")
    if cfg.method == "gen_map":
        return reconstruct_gen_map(y, params, cfg)
    if cfg.method == "range":
        return reconstruct_range(y, params, cfg)
    if cfg.method == "narnhofer":
        return reconstruct_narnhofer(y, params, cfg)
    if cfg.method == "least_squares":
        return reconstruct_least_squares(y, cfg)
    if cfg.method == "tv":
        return reconstruct_tv(y, cfg)
    return reconstruct_pnp_admm(y, denoiser, cfg)


def psnr(x, ref) -> torch.Tensor | float:
    """10 log10(1 / MSE) over the last two axes, capped at 100 dB."""
    x, ref = torch.as_tensor(x, dtype=F64), torch.as_tensor(ref, dtype=F64)
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(ref.shape)}")
    mse = torch.mean((x - ref) ** 2, dim=(-2, -1))
    out = torch.where(mse > 0, -10.0 * torch.log10(torch.clamp(mse, min=1e-300)), torch.full_like(mse, PSNR_CAP))
    out = torch.clamp(out, max=PSNR_CAP)
    return float(out) if out.ndim == 0 else out
