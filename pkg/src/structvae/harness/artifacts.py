"""Run directories, manifests, CSV tables, and measurement / result files."""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import subprocess
import time
from pathlib import Path

import numpy as np
import torch

from ..errors import ArtifactError
from ..forward_model import Measurement, SamplingMask
from ..reconstruction import ReconResult
from .tensor_io import read_tensor, write_tensor

MEASUREMENT_FORMAT = "structvae-measurement"


def make_run_dir(root, config_hash: str, when: float | None = None) -> Path:
    """``root/<YYYYmmdd-HHMMSS>-<hash10>``; a numeric suffix avoids collisions."""
    stamp = time.strftime("%Y%m%d-%H%M%S", time.localtime(when))
    base = Path(root) / f"{stamp}-{config_hash[:10]}"
    path, n = base, 1
    while path.exists():
        path, n = Path(f"{base}-{n}"), n + 1
    path.mkdir(parents=True)
    return path


def git_revision(cwd=None) -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=cwd, capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir, **entries) -> Path:
    manifest = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "git_revision": git_revision(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        **entries,
    }
    path = Path(run_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def fmt(v) -> str:
    """Canonical CSV cell: floats via repr, so identical runs give identical bytes."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(r.get(h)) for h in header] if isinstance(r, dict) else [fmt(v) for v in r])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- measurements


def save_measurement(y: Measurement, stem, truth=None) -> Path:
    """Write ``stem.cvrt`` (c64 values), ``stem.mask.cvrt`` (bool) and the JSON sidecar ``stem.json``."""
    stem = Path(stem)
    values = write_tensor(stem.with_suffix(".cvrt"), y.values.detach().cpu().numpy().astype(np.complex64))
    mask = write_tensor(stem.with_suffix(".mask.cvrt"), y.mask.keep)
    side = {
        "format": MEASUREMENT_FORMAT,
        "version": 1,
        "values": values.name,
        "mask": mask.name,
        "mask_kind": y.mask.kind,
        "mask_params": y.mask.params,
        "noise_std": y.noise_std,
        "seed": y.seed,
    }
    if truth is not None:
        side["truth"] = write_tensor(stem.with_suffix(".truth.cvrt"), np.asarray(truth, dtype=np.float32)).name
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(side, indent=2, default=str) + "\n")
    return path


def load_measurement(path) -> tuple[Measurement, np.ndarray | None]:
    """Read a measurement sidecar; returns the measurement and the stored truth, if any."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    if not path.exists():
        raise ArtifactError(f"measurement file not found: {path}")
    try:
        side = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt measurement sidecar {path}: {exc}") from exc
    if side.get("format") != MEASUREMENT_FORMAT:
        raise ArtifactError(f"{path} is not a measurement sidecar")
    keep = read_tensor(path.parent / side["mask"])
    mask = SamplingMask(side["mask_kind"], keep, side.get("mask_params") or {})
    values = torch.from_numpy(read_tensor(path.parent / side["values"]))
    truth = read_tensor(path.parent / side["truth"]) if side.get("truth") else None
    return Measurement(values, mask, float(side["noise_std"]), side.get("seed")), truth


def save_result(result: ReconResult, out_dir, extra: dict | None = None) -> tuple[Path, Path]:
    """Image tensor file plus JSON metadata (trace and config)."""
    out_dir = Path(out_dir)
    image = write_tensor(out_dir / "image.cvrt", result.image.detach().cpu().numpy().astype(np.float64))
    meta = result.metadata()
    meta.update(extra or {})
    js = out_dir / "result.json"
    js.write_text(json.dumps(meta, indent=2, default=str) + "\n")
    return image, js
