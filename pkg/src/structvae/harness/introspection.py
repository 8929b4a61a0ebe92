"""Covariance rows of the learned prior around chosen pixels."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ShapeError, StageError
from ..generative_model import ModelParams, decode_chol, encode
from ..structured_gaussian import covariance_row
from .artifacts import write_csv
from .plots import signed_image
from .tensor_io import write_tensor


@dataclass
class IntrospectionResult:
    rows: np.ndarray  # (P, H, W)
    pixels: list
    files: list = field(default_factory=list)


def covariance_rows(params: ModelParams, image, pixels) -> np.ndarray:
    """Rows of Sigma(mu_enc(image)) for each (row, col) in ``pixels``, shape (P, H, W)."""
    if params.stage != "covariance_trained" or params.cov_mode == "identity":
        raise StageError("introspection needs a covariance-trained checkpoint; identity-mode models have no learned covariance")
    x = torch.as_tensor(np.asarray(image), dtype=params.dtype)
    if x.shape != (params.arch.image_size,) * 2:
        raise ShapeError(f"image shape {tuple(x.shape)} does not match model size {params.arch.image_size}")
    p64 = params.to(torch.float64).eval()
    with torch.no_grad():
        z = encode(p64, x.double()).mu
        factor = decode_chol(p64, z)
        if params.cov_mode == "diagonal":
            factor = factor.diagonal_only()
        return np.stack([covariance_row(factor, tuple(px)).numpy() for px in pixels])


def run_introspection(params: ModelParams, image, pixels, out_dir) -> IntrospectionResult:
    """Write one exact-size signed PNG per pixel, with a tensor and a CSV twin of the values.

    The colour scale is symmetric about zero and normalised per image (red
    positive, blue negative); the chosen pixel is painted black.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = [tuple(int(v) for v in px) for px in pixels]
    rows = covariance_rows(params, image, pixels)
    files = []
    for (r, c), row in zip(pixels, rows):
        stem = out_dir / f"covrow_r{r}_c{c}"
        files.append(signed_image(stem.with_suffix(".png"), row, mark=(r, c)))
        files.append(write_tensor(stem.with_suffix(".cvrt"), row))
        files.append(write_csv(stem.with_suffix(".csv"), [f"c{j}" for j in range(row.shape[1])], row.tolist()))
    files.append(write_tensor(out_dir / "image.cvrt", np.asarray(image, dtype=np.float64)))
    return IntrospectionResult(rows, pixels, files)
