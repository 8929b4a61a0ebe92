"""Central finite-difference directional-derivative oracle shared by the gradient tests."""
import torch


def directional_errors(f, x, directions=10, h=1e-6, seed=0):
    """Relative errors |fd - <grad, v>| / max(|fd|, |<grad, v>|, 1e-12) along random unit v.

    ``f`` maps a float64 tensor to a scalar tensor.
    """
    x = x.detach().to(torch.float64)
    xr = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(xr), xr)
    gen = torch.Generator().manual_seed(seed)
    errs = []
    with torch.no_grad():
        for _ in range(directions):
            v = torch.randn(x.shape, generator=gen, dtype=torch.float64)
            v /= torch.linalg.norm(v)
            fd = (f(x + h * v) - f(x - h * v)) / (2 * h)
            an = torch.sum(g * v)
            errs.append(float(abs(fd - an) / max(abs(float(fd)), abs(float(an)), 1e-12)))
    return errs


def param_directional_errors(loss_fn, params, directions=10, h=1e-6, seed=0):
    """Same check with respect to a list of module parameters, perturbed jointly."""
    params = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(loss_fn(), params)
    gen = torch.Generator().manual_seed(seed)
    errs = []
    with torch.no_grad():
        for _ in range(directions):
            vs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
            norm = torch.sqrt(sum(torch.sum(v * v) for v in vs))
            vs = [v / norm for v in vs]
            for p, v in zip(params, vs):
                p.add_(h * v)
            fp = loss_fn()
            for p, v in zip(params, vs):
                p.sub_(2 * h * v)
            fm = loss_fn()
            for p, v in zip(params, vs):
                p.add_(h * v)
            fd = (fp - fm) / (2 * h)
            an = sum(torch.sum(g * v) for g, v in zip(grads, vs))
            errs.append(float(abs(fd - an) / max(abs(float(fd)), abs(float(an)), 1e-12)))
    return errs
