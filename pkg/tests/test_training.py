import math

import numpy as np
import pytest
import torch
from fd import param_directional_errors
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from structvae import generative_model as gm
from structvae import training as tr
from structvae.errors import ArtifactError, ConfigurationError, DivergenceError, NumericError, StageError
from structvae.reconstruction import psnr

TINY = gm.ArchConfig(image_size=16, latent_dim=3, dense_channels=2, res_channels=4, up_channels=(4, 4, 2, 2))


def cov_model(arch=TINY, mode="covar", scale=0.0, seed=0):
    base = gm.init_model(arch, seed=seed)
    cov = gm.new_cov_decoder(arch, seed=seed + 1)
    if scale:
        g = torch.Generator().manual_seed(seed + 2)
        with torch.no_grad():
            cov.head.weight.copy_(scale * torch.randn(cov.head.weight.shape, generator=g))
    return gm.ModelParams(arch, base.encoder, base.mean_decoder, cov, "covariance_trained", mode, base.rho).eval()


def zero_encoder(p):
    with torch.no_grad():
        p.encoder.dense.weight.zero_()
        p.encoder.dense.bias.zero_()
    return p


# ---------------------------------------------------------------- KL


def test_kl_closed_forms():
    assert tr.kl_term(gm.EncoderOutput(torch.zeros(4), torch.zeros(4))) == 0
    assert abs(tr.kl_term(gm.EncoderOutput(torch.ones(1), torch.zeros(1))) - 0.5) < 1e-12


def quadrature_kl(mu, var):
    q = lambda z: math.exp(-((z - mu) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)  # noqa: E731
    integrand = lambda z: q(z) * (math.log(q(z)) + 0.5 * z * z + 0.5 * math.log(2 * math.pi)) if q(z) > 0 else 0.0  # noqa: E731
    sd = math.sqrt(var)
    return integrate.quad(integrand, mu - 40 * sd, mu + 40 * sd, epsabs=1e-12, epsrel=1e-12, limit=400)[0]


@pytest.mark.parametrize("seed", range(5))
def test_kl_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    mu, lv = rng.normal(0, 1.5), rng.uniform(-3, 2)
    enc = gm.EncoderOutput(torch.tensor([mu], dtype=torch.float64), torch.tensor([lv], dtype=torch.float64))
    assert abs(float(tr.kl_term(enc)) - quadrature_kl(mu, math.exp(lv))) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-8, 8), min_size=6, max_size=6))
def test_kl_nonnegative(mu, lv):
    m = torch.tensor(mu, dtype=torch.float64)
    enc = gm.EncoderOutput(m, torch.tensor(lv[: len(mu)], dtype=torch.float64))
    assert tr.kl_term(enc) >= -1e-12


# ---------------------------------------------------------------- losses


def test_stage1_loss_perfect_autoencoding_and_rho_scaling():
    p = zero_encoder(gm.init_model(TINY))
    x = gm.decode_mean(p, torch.zeros(3)).detach()
    assert tr.stage1_loss(p, x, torch.zeros(3), 0.01).item() == pytest.approx(0.0, abs=1e-9)
    x2 = x + 0.1
    a, b = tr.stage1_loss(p, x2, torch.zeros(3), 0.01), tr.stage1_loss(p, x2, torch.zeros(3), 0.02)
    assert a.item() == pytest.approx(2 * b.item(), rel=1e-6)


def test_stage2_with_identity_factor_equals_stage1_with_unit_rho():
    p = cov_model()
    x = torch.rand(4, 16, 16)
    u = torch.randn(4, 3)
    assert torch.allclose(tr.stage2_loss(p, x, u), tr.stage1_loss(p, x, u, 1.0), rtol=1e-6)


def test_stage2_requires_covariance_stage():
    with pytest.raises(StageError):
        tr.stage2_loss(gm.init_model(TINY), torch.rand(16, 16), torch.zeros(3))


def test_stage2_diagonal_mode_ignores_off_diagonals():
    p = cov_model(mode="diagonal", scale=0.3)
    loss = tr.stage2_loss(p, torch.rand(2, 16, 16), torch.randn(2, 3))
    (g,) = torch.autograd.grad(loss, p.cov_decoder.head.weight)
    center = p.pattern.center
    assert torch.count_nonzero(g[[c for c in range(p.pattern.channels) if c != center]]) == 0
    assert torch.count_nonzero(g[center]) > 0


def test_stage2_does_not_touch_frozen_networks():
    p = cov_model(scale=0.3)
    loss = tr.stage2_loss(p, torch.rand(2, 16, 16), torch.randn(2, 3))
    loss.backward()
    assert all(q.grad is None for q in [*p.encoder.parameters(), *p.mean_decoder.parameters()])


def test_stage1_gradient_matches_finite_differences():
    p = gm.init_model(TINY, seed=2).to(torch.float64)
    x = torch.rand(2, 16, 16, dtype=torch.float64)
    u = torch.randn(2, 3, dtype=torch.float64)
    params = [*p.encoder.parameters(), *p.mean_decoder.parameters()]
    errs = param_directional_errors(lambda: tr.stage1_loss(p, x, u, 0.01), params, 10)
    assert max(errs) < 1e-3


def test_stage2_gradient_matches_finite_differences():
    p = cov_model(scale=0.3).to(torch.float64)
    x = torch.rand(2, 16, 16, dtype=torch.float64)
    u = torch.randn(2, 3, dtype=torch.float64)
    errs = param_directional_errors(lambda: tr.stage2_loss(p, x, u), list(p.cov_decoder.parameters()), 10)
    assert max(errs) < 1e-3


def test_saturation_penalty_is_zero_inside_band():
    raw = torch.zeros(2, 4, 4, 5)
    raw[..., 4] = 2.9
    assert tr.saturation_penalty(raw, 4, 3.0) == 0
    raw[0, 0, 0, 4] = 5.0
    assert tr.saturation_penalty(raw, 4, 3.0).item() == pytest.approx(4.0 / 2)


def test_jitter_range():
    x = torch.rand(100, 16, 16)
    j = tr.add_jitter(x, 1e-3, torch.Generator().manual_seed(0))
    assert ((j - x) >= 0).all() and ((j - x) <= 1e-3).all()
    assert torch.equal(tr.add_jitter(x, 0.0), x)


# ---------------------------------------------------------------- datasets


def test_phantoms_properties():
    d = tr.make_phantom_dataset(32, 32, 32, seed=0)
    assert d.images.shape == (32, 32, 32) and d.provenance == "synthetic_phantom"
    assert d.images.min() >= 0 and d.images.max() <= 1
    assert np.array_equal(d.images, tr.make_phantom_dataset(32, 32, 32, seed=0).images)
    assert not np.array_equal(d.images, tr.make_phantom_dataset(32, 32, 32, seed=1).images)
    tv = np.abs(np.diff(d.images, axis=1)).sum((1, 2)) + np.abs(np.diff(d.images, axis=2)).sum((1, 2))
    assert tv.mean() > 0
    assert (d.images < 0.02).mean() > 0.3
    with pytest.raises(ConfigurationError):
        tr.make_phantom_dataset(0)


def write_volumes(root, n=6, shape=(9, 40, 40), constant_slice=None):
    rng = np.random.default_rng(0)
    for i in range(n):
        vol = rng.random(shape) * (i + 1)
        if constant_slice is not None and i == 0:
            vol[constant_slice] = 3.0
        np.save(root / f"vol{i:02d}.npy", vol)


def test_ingest_rescales_and_splits_by_volume(tmp_path):
    write_volumes(tmp_path, n=10)
    train, test = tr.ingest_magnitude_volumes(tmp_path, target_size=16, slices_per_volume=3, test_fraction=0.3)
    assert train.images.shape[1:] == (16, 16)
    for d in (train, test):
        if len(d):
            assert np.allclose(d.images.min((1, 2)), 0) and np.allclose(d.images.max((1, 2)), 1)
    assert len(train) + len(test) == 30
    assert not set(train.volume_ids) & set(test.volume_ids)
    assert len(test) > 0 and len(train) > 0


def test_ingest_rejects_constant_slice(tmp_path):
    write_volumes(tmp_path, n=2, constant_slice=4)
    with pytest.raises(NumericError, match="constant"):
        tr.ingest_magnitude_volumes(tmp_path, target_size=16, slices_per_volume=1)


def test_ingest_missing_or_empty(tmp_path):
    with pytest.raises(ArtifactError):
        tr.ingest_magnitude_volumes(tmp_path / "nope", 16)
    with pytest.raises(ArtifactError):
        tr.ingest_magnitude_volumes(tmp_path, 16)


def test_ingest_hdf5(tmp_path):
    h5py = pytest.importorskip("h5py")
    with h5py.File(tmp_path / "knee.h5", "w") as fh:
        fh["reconstruction_esc"] = np.random.default_rng(1).random((7, 40, 40)).astype(np.float32)
    train, test = tr.ingest_magnitude_volumes(tmp_path, 16, slices_per_volume=3, test_fraction=0.0)
    assert len(train) == 3 and len(test) == 0


# ---------------------------------------------------------------- training


SMOKE = dict(batch_size=16, learning_rate=1e-3, seed=0)


@pytest.fixture(scope="module")
def phantoms():
    return tr.make_phantom_dataset(64, 16, 16, seed=0)


def test_identity_mode_stops_after_stage1(phantoms):
    p = tr.train(phantoms, tr.TrainConfig(epochs_stage1=2, ablation_mode="identity", **SMOKE), TINY)
    assert p.stage == "mean_trained" and p.cov_decoder is None
    h = p.history["stage1"]
    assert len(h) == 2 and h[-1] < h[0]


def test_two_stage_freezes_and_reproduces(phantoms):
    cfg = tr.TrainConfig(epochs_stage1=2, epochs_stage2=2, **SMOKE)
    stage1 = tr.train_stage1(phantoms, cfg, TINY)
    before = {k: v.clone() for k, v in stage1.mean_decoder.state_dict().items()}
    enc_before = {k: v.clone() for k, v in stage1.encoder.state_dict().items()}
    full = tr.train_stage2(stage1, phantoms, cfg)
    assert full.stage == "covariance_trained" and full.cov_mode == "covar"
    for k, v in full.mean_decoder.state_dict().items():
        assert torch.equal(v, before[k])
    for k, v in full.encoder.state_dict().items():
        assert torch.equal(v, enc_before[k])
    assert len(full.history["stage2"]) == 2
    again = tr.train(phantoms, cfg, TINY)
    assert np.allclose(again.history["stage1"], full.history["stage1"], rtol=1e-6)
    assert np.allclose(again.history["stage2"], full.history["stage2"], rtol=1e-6)


def test_stage2_needs_stage1(phantoms):
    with pytest.raises(StageError):
        tr.train_stage2(gm.init_model(TINY), phantoms, tr.TrainConfig())
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(ablation_mode="full")


def test_divergence_is_reported():
    bad = tr.Dataset(np.full((8, 16, 16), np.nan, dtype=np.float32))
    with pytest.raises(DivergenceError):
        tr.train_stage1(bad, tr.TrainConfig(epochs_stage1=1, **SMOKE), TINY)


def test_heldout_nll_identity_formula():
    p = zero_encoder(gm.init_model(TINY))
    x = gm.decode_mean(p, torch.zeros(3)).detach()
    assert tr.heldout_nll(p, x[None], "identity").item() == pytest.approx(256 * math.log(0.01), rel=1e-6)


# ---------------------------------------------------------------- denoiser


def test_denoiser_zero_noise_is_near_identity(phantoms):
    den = tr.train_denoiser(phantoms, 0.0, tr.DenoiserConfig(epochs=2, batch_size=16))
    val = tr.make_phantom_dataset(8, 16, 16, seed=5).tensor()
    out = den(val)
    assert out.shape == val.shape and den(val[0]).shape == (16, 16)
    assert psnr(out, val).min() > 40


def test_denoiser_gain_and_checkpoint(tmp_path):
    data = tr.make_phantom_dataset(256, 32, 32, seed=0)
    den = tr.train_denoiser(data, 0.05, tr.DenoiserConfig(epochs=8, batch_size=32))
    val = tr.make_phantom_dataset(16, 32, 32, seed=7).tensor()
    noisy = val + 0.05 * torch.randn(val.shape, generator=torch.Generator().manual_seed(0))
    assert psnr(den(noisy), val).mean() > psnr(noisy, val).mean() + 2
    again = tr.load_denoiser(tr.save_denoiser(den, tmp_path / "d.npz"))
    assert torch.equal(again(noisy), den(noisy)) and again.noise_level == 0.05
    with pytest.raises(ArtifactError):
        tr.load_denoiser(tmp_path / "none.npz")
