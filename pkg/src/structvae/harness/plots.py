"""PNG rendering.  Every figure is written next to the table or tensor it was drawn from."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .artifacts import write_csv  # noqa: E402


def line_plot(path, series: dict, xlabel: str, title: str = "") -> tuple[Path, Path]:
    """Mean lines with +-1 std shading; ``series`` maps label -> list of (x, mean, std)."""
    path = Path(path)
    rows = [{"label": k, xlabel: x, "mean_psnr": m, "std_psnr": s} for k, pts in series.items() for x, m, s in pts]
    twin = write_csv(path.with_suffix(".csv"), ["label", xlabel, "mean_psnr", "std_psnr"], rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in series.items():
        x, m, s = (np.array(v, dtype=float) for v in zip(*pts))
        ax.plot(x, m, marker="o", label=label)
        ax.fill_between(x, m - s, m + s, alpha=0.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("PSNR [dB]")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path, twin


def signed_image(path, values: np.ndarray, mark: tuple[int, int] | None = None) -> Path:
    """Exact-size RdBu_r rendering, symmetric about zero; ``mark`` is painted black."""
    v = np.asarray(values, dtype=np.float64)
    a = float(np.max(np.abs(v))) or 1.0
    rgba = plt.get_cmap("RdBu_r")((v / a + 1.0) / 2.0)
    if mark is not None:
        rgba[mark[0], mark[1], :3] = 0.0
    plt.imsave(path, rgba)
    return Path(path)


def gray_grid(path, images: np.ndarray, ncols: int | None = None) -> Path:
    """Tile (N, H, W) images in [0, 1] into one grayscale PNG at native resolution."""
    imgs = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    n, h, w = imgs.shape
    ncols = ncols or n
    nrows = -(-n // ncols)
    canvas = np.ones((nrows * (h + 1) - 1, ncols * (w + 1) - 1))
    for i, im in enumerate(imgs):
        r, c = divmod(i, ncols)
        canvas[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = im
    plt.imsave(path, canvas, cmap="gray", vmin=0.0, vmax=1.0)
    return Path(path)
