"""PSNR sweeps with grid-searched regularisation parameters.

For every (method, sweep point) each grid combination reconstructs the whole
test set and the combination with the best mean test PSNR is reported.  This is
oracle parameter selection: it is optimistic, and equally so for every method.
"""
from __future__ import annotations

import hashlib
import logging
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ArtifactError
from ..forward_model import acquire, make_cartesian_mask, make_full_mask, make_radial_mask
from ..generative_model import load_params
from ..reconstruction import assert_monotone, psnr, reconstruct
from ..training import load_denoiser, make_phantom_dataset
from .artifacts import file_sha256, fmt, make_run_dir, write_csv, write_manifest
from .config import ExperimentSpec
from .plots import line_plot
from .tensor_io import read_tensor

log = logging.getLogger(__name__)

DESCENT_METHODS = ("gen_map", "range", "narnhofer", "least_squares")
MODEL_METHODS = ("gen_map", "range", "narnhofer")
SELECTION_NOTE = "oracle grid search maximising mean test PSNR (optimistic for every method alike)"

SUMMARY_COLUMNS = ["label", "method", "ablation_mode", "mask", "spokes", "row_prob", "noise",
                   "params", "mean_psnr", "std_psnr", "n_images"]
GRID_COLUMNS = ["label", "mask", "spokes", "row_prob", "noise", "params", "mean_psnr", "std_psnr",
                "iterations", "stalled", "selected"]
IMAGE_COLUMNS = ["label", "mask", "spokes", "row_prob", "noise", "params", "image", "psnr", "selected"]


@dataclass
class SweepReport:
    run_dir: Path
    summary: list[dict]
    grid: list[dict]
    failures: list[dict]
    files: dict = field(default_factory=dict)
    monotone_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures


def load_test_images(spec: ExperimentSpec) -> np.ndarray:
    if spec.dataset == "phantom":
        ds = make_phantom_dataset(spec.test_image_count, spec.image_size, spec.image_size, spec.dataset_seed, "test")
        return ds.images.astype(np.float64)
    images = read_tensor(spec.resolve(spec.dataset))
    if images.ndim != 3 or len(images) < spec.test_image_count:
        raise ArtifactError(f"{spec.dataset}: need (N >= {spec.test_image_count}, H, W), got {images.shape}")
    return images[: spec.test_image_count].astype(np.float64)


def make_mask(spec: ExperimentSpec, axis_value, shape):
    h, w = shape
    if spec.mask == "radial":
        return make_radial_mask(h, w, int(axis_value))
    if spec.mask == "cartesian":
        return make_cartesian_mask(h, w, spec.center_rows, float(axis_value), seed=spec.mask_seed)
    return make_full_mask(h, w)


def measurement_seed(spec: ExperimentSpec, axis_value, noise) -> int:
    """Depends only on the point itself, so adding points never changes existing draws."""
    key = f"{spec.noise_seed}|{spec.mask}|{axis_value}|{noise!r}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def _params_text(chosen: dict) -> str:
    return ";".join(f"{k}={fmt(v)}" for k, v in chosen.items())


def _point_cols(spec, point):
    axis, noise = point
    return {"mask": spec.mask, "spokes": axis if spec.mask == "radial" else None,
            "row_prob": axis if spec.mask == "cartesian" else None, "noise": noise}


def frozen(params):
    """Eval mode with weights detached from autograd; solvers only take input gradients."""
    for module in params.modules().values():
        module.requires_grad_(False)
    return params.eval()


class _Artifacts:
    """Thread-safe lazy loader for checkpoints and the denoiser."""

    def __init__(self, spec):
        self.spec, self.lock, self.cache = spec, threading.Lock(), {}

    def model(self, ref):
        return self._get(("model", ref), lambda p: frozen(load_params(p)))

    def denoiser(self):
        return self._get(("denoiser", self.spec.denoiser), load_denoiser)

    def _get(self, key, loader):
        with self.lock:
            if key not in self.cache:
                self.cache[key] = loader(self.spec.resolve(key[1]))
            return self.cache[key]


def check_artifacts(spec: ExperimentSpec) -> dict:
    """Hash every referenced file; raise ArtifactError naming the first missing one."""
    refs = {}
    for m in spec.methods:
        if m.base.method in MODEL_METHODS:
            if m.checkpoint is None:
                raise ArtifactError(f"method {m.label} ({m.base.method}) has no checkpoint")
            refs[m.checkpoint] = spec.resolve(m.checkpoint)
        if m.base.method == "pnp_admm":
            if spec.denoiser is None:
                raise ArtifactError(f"method {m.label} needs a denoiser")
            refs[spec.denoiser] = spec.resolve(spec.denoiser)
    if spec.dataset != "phantom":
        refs[spec.dataset] = spec.resolve(spec.dataset)
    for ref, path in refs.items():
        if not path.exists():
            raise ArtifactError(f"missing artifact {ref!r}: {path} does not exist")
    return {ref: file_sha256(p) for ref, p in sorted(refs.items())}


def _run_job(spec, arts, method, point, y, truth, chosen, cfg):
    params = arts.model(method.checkpoint) if cfg.method in MODEL_METHODS else None
    den = arts.denoiser() if cfg.method == "pnp_admm" else None
    res = reconstruct(y, cfg, params, den)
    checked = False
    if cfg.method in DESCENT_METHODS:
        assert_monotone(res.objective_trace, what=f"{method.label} {cfg.method}")
        checked = True
    scores = psnr(res.image, truth).detach().cpu().numpy().astype(np.float64)
    return scores, res.iterations_used, res.stalled, checked


def run_sweep(spec: ExperimentSpec, out_root=None, run_dir=None, plots: bool = True) -> SweepReport:
    """Run every method at every sweep point and write the report files.

    Writes ``summary.csv`` (one row per method and point), ``grid.csv`` (one row
    per grid combination), ``per_image.csv``, one PNG line plot per curve family
    with a same-named CSV twin, and ``manifest.json``.  Without ``run_dir`` a
    fresh directory named by timestamp and config hash is made under ``out_root``.
    Failed combinations, including monotonicity violations of the descent
    solvers, are recorded in the manifest and the sweep continues.
    """
    hashes = check_artifacts(spec)
    chash = spec.config_hash()
    run_dir = Path(run_dir) if run_dir is not None else make_run_dir(out_root or "runs", chash)
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    truth = torch.as_tensor(load_test_images(spec))
    measurements = {}
    for point in spec.sweep_points():
        mask = make_mask(spec, point[0], tuple(truth.shape[-2:]))
        measurements[point] = acquire(truth, mask, point[1], seed=measurement_seed(spec, *point))

    arts = _Artifacts(spec)
    jobs = [(mi, method, point, gi, chosen, cfg)
            for mi, method in enumerate(spec.methods)
            for point in spec.sweep_points()
            for gi, (chosen, cfg) in enumerate(method.points())]

    def work(job):
        mi, method, point, gi, chosen, cfg = job
        try:
            return job, _run_job(spec, arts, method, point, measurements[point], truth, chosen, cfg), None
        except Exception as exc:  # partial-failure policy: record and continue
            log.warning("sweep job %s %s %s failed: %s", method.label, point, chosen, exc)
            kind = "monotonicity" if isinstance(exc, AssertionError) else type(exc).__name__
            return job, None, {"kind": kind, "message": str(exc), "traceback": traceback.format_exc(limit=3)}

    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            outcomes = list(pool.map(work, jobs))
    else:
        outcomes = [work(j) for j in jobs]
    outcomes.sort(key=lambda o: (o[0][0], spec.sweep_points().index(o[0][2]), o[0][3]))

    grid_rows, image_rows, summary, failures, checked = [], [], [], [], 0
    best: dict = {}
    for (mi, method, point, gi, chosen, cfg), out, err in outcomes:
        base = {"label": method.label, **_point_cols(spec, point), "params": _params_text(chosen)}
        if err is not None:
            failures.append({**base, **err})
            continue
        scores, iters, stalled, was_checked = out
        checked += was_checked
        row = {**base, "mean_psnr": float(scores.mean()), "std_psnr": float(scores.std()),
               "iterations": iters, "stalled": int(stalled), "scores": scores, "key": (mi, point)}
        grid_rows.append(row)
        if row["key"] not in best or row["mean_psnr"] > best[row["key"]]["mean_psnr"]:
            best[row["key"]] = row

    for row in grid_rows:
        row["selected"] = int(best[row["key"]] is row)
        for i, s in enumerate(row["scores"]):
            image_rows.append({**row, "image": i, "psnr": float(s)})
    for (mi, point), row in sorted(best.items(), key=lambda kv: (kv[0][0], spec.sweep_points().index(kv[0][1]))):
        m = spec.methods[mi]
        summary.append({**row, "method": m.base.method, "n_images": len(row["scores"]),
                        "ablation_mode": m.base.ablation_mode if m.base.method in MODEL_METHODS else None})

    files = {
        "summary": write_csv(run_dir / "summary.csv", SUMMARY_COLUMNS, summary),
        "grid": write_csv(run_dir / "grid.csv", GRID_COLUMNS, grid_rows),
        "per_image": write_csv(run_dir / "per_image.csv", IMAGE_COLUMNS, image_rows),
    }
    if plots and summary:
        files.update(_plots(spec, summary, run_dir))
    write_manifest(
        run_dir,
        kind="sweep",
        name=spec.name,
        config_hash=chash,
        spec=spec.to_dict(),
        seeds={"noise_seed": spec.noise_seed, "mask_seed": spec.mask_seed, "dataset_seed": spec.dataset_seed,
               "measurement_seeds": {f"{a}|{n}": measurement_seed(spec, a, n) for a, n in spec.sweep_points()}},
        artifacts=hashes,
        parameter_selection=SELECTION_NOTE,
        monotonicity_checked=checked,
        failures=failures,
        files={k: Path(v).name for k, v in files.items()},
        seconds=round(time.time() - t0, 1),
    )
    return SweepReport(run_dir, summary, grid_rows, failures, files, checked)


def _plots(spec, summary, run_dir) -> dict:
    axis = spec.axis_name
    over_axis = axis is not None and len(spec.axis_values()) > 1
    files = {}
    if over_axis:
        for noise in spec.noise:
            series = {}
            for r in summary:
                if r["noise"] == noise:
                    series.setdefault(r["label"], []).append((r[axis], r["mean_psnr"], r["std_psnr"]))
            png, _ = line_plot(run_dir / f"psnr_vs_{axis}_noise{noise:g}.png", series, axis, f"noise {noise:g}")
            files[png.stem] = png
    else:
        for a in spec.axis_values():
            series = {}
            for r in summary:
                if axis is None or r[axis] == a:
                    series.setdefault(r["label"], []).append((r["noise"], r["mean_psnr"], r["std_psnr"]))
            stem = "psnr_vs_noise" + ("" if axis is None else f"_{axis}{a:g}")
            png, _ = line_plot(run_dir / f"{stem}.png", series, "noise")
            files[png.stem] = png
    return files
