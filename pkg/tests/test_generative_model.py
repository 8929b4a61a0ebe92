import numpy as np
import pytest
import torch
from fd import directional_errors

from structvae import generative_model as gm
from structvae.errors import ArtifactError, ConfigurationError, ShapeError, StageError
from structvae.structured_gaussian import dense_factor

TINY = gm.ArchConfig(image_size=8, latent_dim=3, dense_channels=2, res_channels=4, up_channels=(4, 2))


def covariance_model(arch=TINY, seed=0, mode="covar", scale=0.3):
    """A covariance-trained model whose factor is far from the identity."""
    base = gm.init_model(arch, seed=seed)
    cov = gm.new_cov_decoder(arch, seed=seed + 1)
    g = torch.Generator().manual_seed(seed + 2)
    with torch.no_grad():
        cov.head.weight.copy_(scale * torch.randn(cov.head.weight.shape, generator=g))
        cov.head.bias.copy_(scale * torch.randn(cov.head.bias.shape, generator=g))
    return gm.ModelParams(arch, base.encoder, base.mean_decoder, cov, "covariance_trained", mode, base.rho).eval()


def test_desk_shapes():
    arch = gm.ArchConfig.desk()
    p = covariance_model(arch)
    x = torch.rand(2, 32, 32)
    enc = gm.encode(p, x)
    assert enc.mu.shape == (2, 16) and enc.log_var.shape == (2, 16)
    assert gm.decode_mean(p, enc.mu).shape == (2, 32, 32)
    assert gm.decode_raw_cov(p, enc.mu[0]).shape == (32, 32, 5)
    assert gm.decode_chol(p, enc.mu[0]).weights.shape == (32, 32, 5)
    big = gm.ArchConfig.desk(neighborhood_radius=2)
    assert big.cov_channels == 13


def test_mean_in_unit_interval_and_finite_at_init():
    p = gm.init_model(TINY, seed=3)
    z = torch.randn(16, 3) * 5
    g = gm.decode_mean(p, z)
    assert torch.isfinite(g).all() and (g >= 0).all() and (g <= 1).all()
    enc = gm.encode(p, torch.rand(4, 8, 8))
    assert torch.isfinite(enc.mu).all() and (enc.log_var.abs() <= 10).all()


def test_cov_decoder_starts_at_identity():
    base = gm.init_model(TINY)
    p = gm.ModelParams(TINY, base.encoder, base.mean_decoder, gm.new_cov_decoder(TINY), "covariance_trained", "covar")
    f = gm.decode_chol(p, torch.randn(3))
    assert torch.all(f.diag == 1.0)
    assert torch.count_nonzero(f.weights[..., :4]) == 0


def test_init_is_deterministic_per_seed():
    a, b, c = gm.init_model(TINY, seed=5), gm.init_model(TINY, seed=5), gm.init_model(TINY, seed=6)
    z = torch.randn(2, 3)
    assert torch.equal(gm.decode_mean(a, z), gm.decode_mean(b, z))
    assert not torch.equal(gm.decode_mean(a, z), gm.decode_mean(c, z))


def test_eval_mode_inference_is_deterministic():
    p = covariance_model()
    x = torch.rand(8, 8)
    assert torch.equal(gm.encode(p, x).mu, gm.encode(p, x).mu)


def test_diagonal_bounds_for_random_latents():
    p = covariance_model(scale=50.0)
    f = gm.decode_chol(p, torch.randn(32, 3) * 10)
    s = TINY.diag_bound
    assert (f.diag >= np.exp(-s) - 1e-6).all() and (f.diag <= np.exp(s) + 1e-6).all()


def test_shape_errors():
    p = gm.init_model(TINY)
    with pytest.raises(ShapeError):
        gm.encode(p, torch.zeros(9, 9))
    with pytest.raises(ShapeError):
        gm.decode_mean(p, torch.zeros(4))
    with pytest.raises(ConfigurationError):
        gm.ArchConfig(image_size=20)


def test_sample_latent():
    enc = gm.EncoderOutput(torch.tensor([1.0, -2.0]), torch.tensor([0.0, float(np.log(4.0))]))
    assert torch.equal(gm.sample_latent(enc, torch.zeros(2)), enc.mu)
    u = torch.randn(200_000, 2, generator=torch.Generator().manual_seed(0))
    draws = gm.sample_latent(gm.EncoderOutput(enc.mu.expand(len(u), 2), enc.log_var.expand(len(u), 2)), u)
    assert torch.allclose(draws.mean(0), enc.mu, atol=0.02)
    assert torch.allclose(draws.std(0), torch.tensor([1.0, 2.0]), rtol=0.02)


def test_stage_gates():
    p = gm.init_model(TINY)
    with pytest.raises(StageError, match="covariance not trained"):
        gm.decode_chol(p, torch.zeros(3))
    with pytest.raises(StageError):
        gm.ModelParams(TINY, p.encoder, p.mean_decoder, None, "covariance_trained")
    diag = covariance_model(mode="diagonal")
    with pytest.raises(StageError):
        gm.sample_image(diag, torch.zeros(3), torch.zeros(8, 8), "covar")


def test_diagonal_mode_drops_off_diagonals():
    f = gm.decode_chol(covariance_model(mode="diagonal"), torch.randn(3))
    assert torch.count_nonzero(f.weights[..., :4]) == 0


def test_sample_image_modes():
    p = covariance_model()
    z = torch.randn(3, generator=torch.Generator().manual_seed(1))
    mean = gm.decode_mean(p, z).detach()
    assert torch.equal(gm.sample_image(p, z, torch.zeros(8, 8), "covar"), mean)
    u = torch.randn(8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    resid = (gm.sample_image(p.to(torch.float64), z.double(), u, "covar") - mean.double()).numpy().ravel()
    L = dense_factor(gm.decode_chol(p.to(torch.float64), z.double()))
    assert np.allclose(L.T @ resid, u.numpy().ravel(), atol=1e-9)
    g = torch.Generator().manual_seed(3)
    draws = torch.stack([gm.sample_image(p, z, torch.randn(8, 8, generator=g), "identity") for _ in range(2000)])
    assert abs((draws - mean).std().item() - 0.1) < 0.003


def test_encoder_gradient_matches_finite_differences():
    p = gm.init_model(TINY, seed=1).to(torch.float64)
    w = torch.randn(3, dtype=torch.float64)
    errs = directional_errors(lambda x: torch.sum(w * gm.encode(p, x).mu), torch.rand(8, 8), 10)
    assert max(errs) < 1e-3


def test_decoder_gradients_match_finite_differences():
    p = covariance_model().to(torch.float64)
    z0 = torch.randn(3, dtype=torch.float64)
    wm = torch.rand(8, 8, dtype=torch.float64)

    assert max(directional_errors(lambda z: torch.sum(wm * gm.decode_mean(p, z)), z0)) < 1e-3
    assert max(directional_errors(lambda z: torch.sum(gm.decode_chol(p, z).weights ** 2), z0)) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    p = covariance_model()
    p.history = {"stage1": [3.0, 2.0]}
    path = gm.save_params(p, tmp_path / "m.npz")
    q = gm.load_params(path, arch=TINY)
    z = torch.randn(2, 3)
    assert q.stage == "covariance_trained" and q.cov_mode == "covar" and q.history == p.history
    assert torch.equal(gm.decode_mean(p, z), gm.decode_mean(q, z))
    assert torch.equal(gm.decode_raw_cov(p, z), gm.decode_raw_cov(q, z))
    m = gm.load_params(gm.save_params(gm.init_model(TINY), tmp_path / "mean.npz"))
    assert m.cov_decoder is None and m.stage == "untrained"


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ArtifactError, match="not found"):
        gm.load_params(tmp_path / "missing.npz")
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ArtifactError):
        gm.load_params(bad)
    path = gm.save_params(gm.init_model(TINY), tmp_path / "m.npz")
    with pytest.raises(ConfigurationError):
        gm.load_params(path, arch=gm.ArchConfig.desk())
