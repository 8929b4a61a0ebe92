"""Session fixtures: one desk-scale training run shared by the slow and acceptance tests."""
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
import torch

from structvae.generative_model import load_params
from structvae.harness import cli
from structvae.harness.config import packaged_config
from structvae.harness.tensor_io import read_tensor
from structvae.training import Dataset, load_denoiser, make_phantom_dataset

ACCEPTANCE = {}  # criterion number -> (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n:2d}: {title}" + (f"  [{detail}]" if detail else ""))


@dataclass
class Trained:
    models_dir: Path
    train: Dataset
    test: Dataset
    identity: object
    diagonal: object
    covar: object
    denoiser: object
    seconds: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def trained(tmp_path_factory) -> Trained:
    """256 training phantoms, stage 1 then diagonal and covar stage 2, plus the PnP denoiser.

    Everything runs through the CLI with the packaged desk config.
    """
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("desk")
    data = root / "data"
    assert cli.main(["make-data", "--count", "256", "--seed", "0", "--out", str(data)]) == 0
    cfg = str(packaged_config("train_desk"))
    models = root / "models"
    t0 = time.time()
    assert cli.main(["train", "--data", str(data / "train.cvrt"), "--config", cfg, "--mode", "all",
                     "--run-dir", str(models)]) == 0
    t1 = time.time()
    assert cli.main(["train", "--data", str(data / "train.cvrt"), "--config", cfg, "--mode", "denoiser",
                     "--run-dir", str(models)]) == 0
    t2 = time.time()
    train = Dataset(read_tensor(data / "train.cvrt"))
    return Trained(
        models, train, make_phantom_dataset(20, seed=1, split="test"),
        load_params(models / "identity.npz"), load_params(models / "diagonal.npz"),
        load_params(models / "covar.npz"), load_denoiser(models / "denoiser.npz"),
        {"vae": t1 - t0, "denoiser": t2 - t1},
    )


@pytest.fixture(scope="session")
def test_images(trained):
    return torch.as_tensor(trained.test.images, dtype=torch.float64)


def median_improves(history, k=5):
    h = np.asarray(history, dtype=float)
    return float(np.median(h[-k:])) < float(np.median(h[:k]))
