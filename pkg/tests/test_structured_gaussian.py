import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from structvae.errors import ConfigurationError, NumericError, ShapeError
from structvae import structured_gaussian as sg


def scatter_dense(weights, neighborhood):
    """Brute-force oracle: place every in-image weight at L[i, j]."""
    h, w, _ = weights.shape
    L = np.zeros((h * w, h * w))
    for y in range(h):
        for x in range(w):
            for c, (dy, dx) in enumerate(neighborhood):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w:
                    L[y * w + x, yy * w + xx] = weights[y, x, c]
    return L


def random_factor(h, w, seed, radius=1, off_scale=0.3, bound=3.0):
    pattern = sg.SparsityPattern.causal(h, w, radius)
    rng = np.random.default_rng(seed)
    raw = off_scale * rng.standard_normal((h, w, pattern.channels))
    raw[..., pattern.center] = rng.standard_normal((h, w))
    return sg.build_factor(torch.tensor(raw), pattern, bound)


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_neighborhood_channel_counts():
    assert sg.causal_neighborhood(1) == ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0))
    assert len(sg.causal_neighborhood(2)) == 13
    with pytest.raises(ConfigurationError):
        sg.SparsityPattern(4, 4, ((0, 1), (0, 0)))


def test_pattern_offsets_point_backwards_in_raster_order():
    p = sg.SparsityPattern.causal(6, 5, 2)
    for y in range(p.height):
        for x in range(p.width):
            i = y * p.width + x
            for c, (dy, dx) in enumerate(p.neighborhood):
                if p.valid[y, x, c]:
                    j = (y + dy) * p.width + (x + dx)
                    assert (j == i) if (dy, dx) == (0, 0) else (j < i)


def test_zero_raw_gives_unit_diagonal():
    p = sg.SparsityPattern.causal(4, 4)
    for s in (0.5, 1.0, 3.0, 7.0):
        f = sg.build_factor(torch.zeros(4, 4, 5, dtype=torch.float64), p, s)
        assert torch.equal(f.diag, torch.ones(4, 4, dtype=torch.float64))


def test_saturated_diagonal_hits_bound():
    p = sg.SparsityPattern.causal(4, 4)
    raw = torch.zeros(4, 4, 5, dtype=torch.float64)
    raw[..., p.center] = 100.0
    f = sg.build_factor(raw, p, 3.0)
    assert torch.all(f.diag <= math.exp(3.0))
    assert torch.allclose(f.diag, torch.full((4, 4), 20.0855, dtype=torch.float64), atol=1e-3)


def test_build_factor_errors():
    p = sg.SparsityPattern.causal(4, 4)
    with pytest.raises(ConfigurationError):
        sg.build_factor(torch.zeros(4, 4, 4), p)
    with pytest.raises(ConfigurationError):
        sg.build_factor(torch.zeros(4, 4, 5), p, diag_bound=0.0)
    bad = torch.zeros(4, 4, 5)
    bad[1, 2, 0] = float("nan")
    with pytest.raises(NumericError):
        sg.build_factor(bad, p)


def test_dense_matches_scatter_oracle():
    p = sg.SparsityPattern.causal(4, 4)
    raw = np.random.default_rng(0).standard_normal((4, 4, 5))
    f = sg.build_factor(torch.tensor(raw), p, 3.0)
    expected = raw.copy()
    expected[..., p.center] = np.exp(3.0 * np.tanh(raw[..., p.center]))
    L = scatter_dense(expected, p.neighborhood)
    assert np.allclose(np.triu(L, 1), 0)
    assert np.allclose(sg.dense_factor(f), L, rtol=1e-14, atol=0)


def test_apply_L_identity_and_zero():
    p = sg.SparsityPattern.causal(4, 4)
    f = sg.identity_factor(p, dtype=torch.float64)
    v = torch.randn(4, 4, dtype=torch.float64)
    assert torch.equal(sg.apply_L(f, v), v)
    g = random_factor(4, 4, 0)
    assert torch.equal(sg.apply_L(g, torch.zeros(4, 4, dtype=torch.float64)), torch.zeros(4, 4, dtype=torch.float64))


def test_apply_L_and_Lt_match_dense():
    f = random_factor(4, 4, 0)
    L = sg.dense_factor(f)
    v = np.ones((4, 4))
    assert rel(sg.apply_L(f, torch.tensor(v)).reshape(-1), L @ v.reshape(-1)) < 1e-12
    u = np.random.default_rng(1).standard_normal((4, 4))
    assert rel(sg.apply_Lt(f, torch.tensor(u)).reshape(-1), L.T @ u.reshape(-1)) < 1e-12


def test_shape_mismatch_raises():
    f = random_factor(4, 4, 0)
    with pytest.raises(ShapeError):
        sg.apply_L(f, torch.zeros(4, 5, dtype=torch.float64))
    with pytest.raises(ShapeError):
        sg.sample_residual(f, torch.zeros(3, 4, dtype=torch.float64))


def test_log_det_closed_forms():
    p = sg.SparsityPattern.causal(4, 4)
    assert float(sg.log_det_sigma(sg.identity_factor(p, dtype=torch.float64))) == 0.0
    p2 = sg.SparsityPattern.causal(2, 2)
    w = torch.zeros(2, 2, 5, dtype=torch.float64)
    w[..., p2.center] = 2.0
    f = sg.CholFactor(p2, w)
    assert float(sg.log_det_sigma(f)) == pytest.approx(-8 * math.log(2), abs=1e-12)
    assert float(sg.log_det_sigma(f)) == pytest.approx(-5.5452, abs=1e-4)


def test_log_det_matches_dense_inverse():
    f = random_factor(4, 4, 0)
    L = sg.dense_factor(f)
    sigma = np.linalg.inv(L @ L.T)
    sign, logdet = np.linalg.slogdet(sigma)
    assert sign > 0
    assert abs(float(sg.log_det_sigma(f)) - logdet) < 1e-8 * max(1.0, abs(logdet))


def test_log_det_rejects_nonpositive_diagonal():
    p = sg.SparsityPattern.causal(2, 2)
    w = torch.zeros(2, 2, 5, dtype=torch.float64)
    w[..., p.center] = 1.0
    w[0, 1, p.center] = -1.0
    with pytest.raises(NumericError):
        sg.log_det_sigma(sg.CholFactor(p, w))


def test_nll_trivial_cases():
    p = sg.SparsityPattern.causal(4, 4)
    ident = sg.identity_factor(p, dtype=torch.float64)
    mean = torch.zeros(4, 4, dtype=torch.float64)
    x = mean.clone()
    x[0, 0], x[2, 3] = 1.0, 2.0
    assert float(sg.nll(x, mean, ident)) == pytest.approx(2.5)
    f = random_factor(4, 4, 3)
    m = torch.rand(4, 4, dtype=torch.float64)
    assert float(sg.nll(m, m, f)) == float(-2 * torch.log(f.diag).sum())


def test_nll_matches_dense_quadratic_form():
    f = random_factor(5, 4, 7)
    L = sg.dense_factor(f)
    rng = np.random.default_rng(2)
    x, m = rng.random((5, 4)), rng.random((5, 4))
    r = (x - m).reshape(-1)
    expected = -2 * np.log(np.diag(L)).sum() + 0.5 * r @ (L @ L.T) @ r
    assert abs(float(sg.nll(torch.tensor(x), torch.tensor(m), f)) - expected) < 1e-8 * abs(expected)


def test_sample_residual_trivial():
    p = sg.SparsityPattern.causal(4, 4)
    u = torch.randn(4, 4, dtype=torch.float64)
    assert torch.allclose(sg.sample_residual(sg.identity_factor(p, dtype=torch.float64), u), u)
    w = torch.zeros(4, 4, 5, dtype=torch.float64)
    w[..., p.center] = 2.0
    assert torch.allclose(sg.sample_residual(sg.CholFactor(p, w), u), u / 2)


def test_triangular_solves_match_dense():
    f = random_factor(6, 5, 11, radius=2)
    L = sg.dense_factor(f)
    b = np.random.default_rng(0).standard_normal((6, 5))
    assert rel(sg.solve_L(f, torch.tensor(b)).reshape(-1), np.linalg.solve(L, b.reshape(-1))) < 1e-10
    assert rel(sg.solve_Lt(f, torch.tensor(b)).reshape(-1), np.linalg.solve(L.T, b.reshape(-1))) < 1e-10


def test_sample_residual_monte_carlo_covariance():
    f = random_factor(8, 8, 0)
    L = sg.dense_factor(f)
    sigma = np.linalg.inv(L @ L.T)
    u = np.random.default_rng(0).standard_normal((100_000, 8, 8))
    r = sg.sample_residual(f, torch.tensor(u)).numpy().reshape(100_000, -1)
    emp = r.T @ r / r.shape[0]
    assert rel(emp, sigma) < 0.05


def test_covariance_row_trivial_and_dense():
    p = sg.SparsityPattern.causal(4, 4)
    row = sg.covariance_row(sg.identity_factor(p, dtype=torch.float64), 5)
    e5 = torch.zeros(16, dtype=torch.float64)
    e5[5] = 1
    assert torch.equal(row.reshape(-1), e5)
    w = torch.zeros(4, 4, 5, dtype=torch.float64)
    w[..., p.center] = 2.0
    row0 = sg.covariance_row(sg.CholFactor(p, w), 0).reshape(-1)
    assert row0[0] == 0.25 and row0[1:].abs().sum() == 0

    f = random_factor(4, 4, 0)
    L = sg.dense_factor(f)
    sigma = np.linalg.inv(L @ L.T)
    for i in range(16):
        assert rel(sg.covariance_row(f, i).reshape(-1), sigma[i]) < 1e-8
    assert rel(sg.covariance_row(f, (2, 1)).reshape(-1), sigma[9]) < 1e-8
    with pytest.raises(IndexError):
        sg.covariance_row(f, 16)


def test_covariance_row_symmetry_and_positivity():
    f = random_factor(5, 5, 4, radius=2)
    rows = np.stack([sg.covariance_row(f, i).reshape(-1).numpy() for i in range(25)])
    assert np.allclose(rows, rows.T, rtol=1e-8, atol=1e-12 * np.abs(rows).max())
    assert np.linalg.eigvalsh(0.5 * (rows + rows.T)).min() > 0
    assert np.isfinite(float(sg.log_det_sigma(f)))


def test_diagonal_only_drops_off_diagonals():
    f = random_factor(4, 4, 0).diagonal_only()
    L = sg.dense_factor(f)
    assert np.array_equal(L, np.diag(np.diag(L)))


def test_batched_ops_match_unbatched():
    p = sg.SparsityPattern.causal(4, 5)
    raw = torch.randn(3, 4, 5, 5, dtype=torch.float64)
    f = sg.build_factor(raw, p)
    x = torch.randn(3, 4, 5, dtype=torch.float64)
    m = torch.randn(3, 4, 5, dtype=torch.float64)
    batched = sg.nll(x, m, f)
    samples = sg.sample_residual(f, x)
    for b in range(3):
        assert torch.allclose(batched[b], sg.nll(x[b], m[b], f[b]))
        assert torch.allclose(samples[b], sg.sample_residual(f[b], x[b]))


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    radius=st.sampled_from([1, 2]),
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
)
def test_apply_L_linearity(seed, h, w, radius, a, b):
    f = random_factor(h, w, seed, radius=radius)
    rng = np.random.default_rng(seed)
    v, u = torch.tensor(rng.standard_normal((h, w))), torch.tensor(rng.standard_normal((h, w)))
    lhs = sg.apply_L(f, a * v + b * u)
    rhs = a * sg.apply_L(f, v) + b * sg.apply_L(f, u)
    assert torch.allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), h=st.integers(1, 8), w=st.integers(1, 8), bound=st.floats(0.1, 5.0))
def test_factor_invariants_hold(seed, h, w, bound):
    rng = np.random.default_rng(seed)
    p = sg.SparsityPattern.causal(h, w)
    f = sg.build_factor(torch.tensor(5 * rng.standard_normal((h, w, 5))), p, bound)
    d = f.diag
    assert torch.all(d >= math.exp(-bound) * (1 - 1e-12)) and torch.all(d <= math.exp(bound) * (1 + 1e-12))
    L = sg.dense_factor(f)
    assert np.allclose(np.triu(L, 1), 0)
