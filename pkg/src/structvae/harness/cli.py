"""``structvae`` command line.

Exit codes:

====  =========================================================
0     success
1     unexpected internal error
2     usage error (unknown subcommand or flag, bad argument)
3     missing or corrupt artifact (checkpoint, data, config file)
4     invalid configuration or input shape
5     numeric failure (divergence, non-finite values)
6     stage mismatch (e.g. covariance requested from a mean-only model)
7     sweep finished but some grid points failed (see manifest.json)
====  =========================================================
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from ..errors import ArtifactError, ConfigurationError, NumericError, ShapeError, StageError
from ..forward_model import acquire, make_cartesian_mask, make_full_mask, make_radial_mask
from ..generative_model import decode_mean, load_params, sample_image, save_params
from ..reconstruction import psnr, reconstruct
from ..training import (Dataset, ingest_magnitude_volumes, load_denoiser, make_phantom_dataset,
                        save_denoiser, train_denoiser, train_stage1, train_stage2)
from . import config as C
from .artifacts import (file_sha256, load_measurement, make_run_dir, save_measurement, save_result, write_csv,
                        write_manifest)
from .introspection import run_introspection
from .plots import gray_grid
from .sweep import run_sweep
from .tensor_io import read_tensor, write_tensor

log = logging.getLogger("structvae")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_ARTIFACT, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STAGE, EXIT_PARTIAL = range(8)


def fixture_path() -> Path:
    """Four 32x32 test phantoms shipped with the package."""
    return Path(str(resources.files("structvae") / "fixtures" / "phantoms32.cvrt"))


def _config(args, default_section):
    cp = C.read_config(C.resolve_config_path(args.config)) if args.config else C.read_config()
    return C.apply_overrides(cp, args.set, default_section)


def _out_dir(args, tag: str, payload: dict) -> Path:
    if args.run_dir:
        p = Path(args.run_dir)
        p.mkdir(parents=True, exist_ok=True)
        return p
    blob = json.dumps({"tag": tag, **payload}, sort_keys=True, default=str)
    return make_run_dir(args.out, hashlib.sha256(blob.encode()).hexdigest())


def _load_images(path: str, index: int | None = None) -> np.ndarray:
    arr = read_tensor(fixture_path() if path == "fixture" else path)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"{path}: expected (N, H, W) or (H, W) images, got {arr.shape}")
    return arr if index is None else arr[index]


# ---------------------------------------------------------------- subcommands


def cmd_make_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ingest:
        train, test = ingest_magnitude_volumes(args.ingest, args.size, args.slices, args.test_fraction,
                                               key=args.key, seed=args.seed)
        sets = {"train": train, "test": test}
    else:
        sets = {args.split: make_phantom_dataset(args.count, args.size, args.size, args.seed, args.split)}
    for name, ds in sets.items():
        write_tensor(out / f"{name}.cvrt", ds.images.astype(np.float32))
        side = {"split": ds.split, "provenance": ds.provenance, "count": len(ds), "fingerprint": ds.fingerprint(),
                "volume_ids": ds.volume_ids, "seed": args.seed, "shape": list(ds.images.shape)}
        (out / f"{name}.json").write_text(json.dumps(side, indent=2) + "\n")
        print(f"wrote {out / (name + '.cvrt')} ({len(ds)} images)")
    return EXIT_OK


def cmd_train(args) -> int:
    cp = _config(args, "train")
    cfg, arch = C.train_settings(cp)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    mode = args.mode or cfg.ablation_mode
    ds = Dataset(read_tensor(args.data), "train", provenance=str(args.data))
    if ds.images.shape[1:] != (arch.image_size,) * 2 and mode != "denoiser":
        raise ShapeError(f"data images {ds.images.shape[1:]} do not match arch image_size {arch.image_size}")
    run = _out_dir(args, "train", {"cfg": cfg, "arch": arch, "mode": mode, "data": file_sha256(args.data)})
    losses, written = [], {}
    t0 = time.time()
    if mode == "denoiser":
        dcfg, level = C.denoiser_settings(cp)
        if args.seed is not None:
            dcfg = replace(dcfg, seed=args.seed)
        den = train_denoiser(ds, level, dcfg)
        written["denoiser"] = save_denoiser(den, run / "denoiser.npz")
        losses += [("denoiser", i, v) for i, v in enumerate(den.history)]
    else:
        if args.init:
            base = load_params(args.init)
            if base.stage == "untrained":
                raise StageError(f"{args.init} holds an untrained model")
        else:
            base = train_stage1(ds, cfg, arch)
            written["identity"] = save_params(base, run / "identity.npz")
        losses += [("stage1", i, v) for i, v in enumerate(base.history.get("stage1", []))]
        for m in (("diagonal", "covar") if mode == "all" else (() if mode == "identity" else (mode,))):
            p = train_stage2(base, ds, cfg, m)
            written[m] = save_params(p, run / f"{m}.npz")
            losses += [(f"stage2_{m}", i, v) for i, v in enumerate(p.history["stage2"])]
    write_csv(run / "loss.csv", ["phase", "epoch", "loss"], losses)
    if losses:
        series = {}
        for phase, i, v in losses:
            series.setdefault(phase, []).append((i, v, 0.0))
        _loss_plot(run / "loss.png", series)
    write_manifest(run, kind="train", mode=mode, config=asdict(cfg), arch=arch.to_dict(),
                   seeds={"train": cfg.seed}, data={"path": str(args.data), "fingerprint": ds.fingerprint()},
                   checkpoints={k: {"file": v.name, "sha256": file_sha256(v)} for k, v in written.items()},
                   seconds=round(time.time() - t0, 1))
    print(f"run directory: {run}")
    for k, v in written.items():
        print(f"  {k}: {v}")
    return EXIT_OK


def _loss_plot(path, series):
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in series.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _make_mask(args, shape):
    h, w = shape
    if args.mask == "radial":
        return make_radial_mask(h, w, args.spokes)
    if args.mask == "cartesian":
        return make_cartesian_mask(h, w, args.center_rows, args.row_prob, seed=args.seed)
    return make_full_mask(h, w)


def cmd_reconstruct(args) -> int:
    cp = _config(args, "recon")
    cfg = C.recon_settings(cp)
    if args.method:
        cfg = cfg.with_(method=args.method)
    params = load_params(args.checkpoint) if args.checkpoint else None
    den = load_denoiser(args.denoiser) if args.denoiser else None
    if args.measurement:
        y, truth = load_measurement(args.measurement)
    else:
        truth = _load_images(args.image, args.index).astype(np.float64)
        y = acquire(torch.as_tensor(truth), _make_mask(args, truth.shape), args.noise,
                    seed=0 if args.seed is None else args.seed)
    run = _out_dir(args, "reconstruct", {"cfg": cfg.to_dict(), "seed": args.seed, "noise": args.noise})
    res = reconstruct(y, cfg, params, den)
    extra = {"measurement": {"mask_kind": y.mask.kind, "mask_params": y.mask.params, "noise_std": y.noise_std,
                             "seed": y.seed, "count": y.mask.count}}
    if truth is not None:
        extra["psnr"] = np.asarray(psnr(res.image, truth)).tolist()
    if not args.measurement:
        save_measurement(y, run / "measurement", truth=truth)
    image, meta = save_result(res, run, extra)
    img = res.image.detach().numpy()
    gray_grid(run / "image.png", img if img.ndim == 3 else img[None])
    write_manifest(run, kind="reconstruct", config=cfg.to_dict(), seeds={"noise": y.seed},
                   checkpoint=args.checkpoint, denoiser=args.denoiser)
    print(f"{cfg.method}: {image}" + (f"  PSNR {extra['psnr']}" if "psnr" in extra else ""))
    return EXIT_OK


def cmd_sweep(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"experiment:noise_seed={args.seed}")
    if args.workers:
        overrides.append(f"experiment:workers={args.workers}")
    if args.models_dir:
        overrides.append(f"experiment:models_dir={args.models_dir}")
    spec = C.ExperimentSpec.from_file(args.spec, overrides)
    report = run_sweep(spec, out_root=args.out, run_dir=args.run_dir)
    for r in report.summary:
        axis = r["spokes"] if r["spokes"] is not None else r["row_prob"]
        print(f"{r['label']:>16} axis={axis} noise={r['noise']:g} {r['mean_psnr']:.3f} +- {r['std_psnr']:.3f} dB"
              f"  [{r['params']}]")
    print(f"run directory: {report.run_dir}")
    if report.failures:
        print(f"{len(report.failures)} grid point(s) failed; see manifest.json", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _parse_pixel(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pixel must be ROW,COL, got {text!r}")
    return r, c


def cmd_introspect(args) -> int:
    params = load_params(args.checkpoint)
    image = _load_images(args.image, args.index)
    pixels = args.pixel or [(image.shape[0] // 2, image.shape[1] // 2)]
    run = _out_dir(args, "introspect", {"ckpt": file_sha256(args.checkpoint), "pixels": pixels})
    res = run_introspection(params, image, pixels, run)
    write_manifest(run, kind="introspect", checkpoint=args.checkpoint, pixels=pixels,
                   files=[f.name for f in res.files])
    for px, row in zip(res.pixels, res.rows):
        own = row[px]
        print(f"pixel {px}: variance {own:.4g}, row max {row.max():.4g}, min {row.min():.4g}")
    print(f"run directory: {run}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params = load_params(args.checkpoint).eval()
    mode = args.mode or (params.cov_mode if params.stage == "covariance_trained" else "identity")
    seed = 0 if args.seed is None else args.seed
    g = torch.Generator().manual_seed(seed)
    n, d, s = args.count, params.arch.latent_dim, params.arch.image_size
    z = torch.randn(n, d, generator=g, dtype=params.dtype)
    u = torch.randn(n, s, s, generator=g, dtype=params.dtype)
    with torch.no_grad():
        mean = decode_mean(params, z)
        draws = torch.stack([sample_image(params, z[i], u[i], mode) for i in range(n)])
    resid = (draws - mean).numpy()
    run = _out_dir(args, "sample", {"ckpt": file_sha256(args.checkpoint), "seed": seed, "n": n, "mode": mode})
    write_tensor(run / "means.cvrt", mean.numpy())
    write_tensor(run / "residuals.cvrt", resid)
    write_tensor(run / "samples.cvrt", draws.numpy())
    scale = max(float(np.abs(resid).max()), 1e-12)
    panel = np.concatenate([mean.numpy(), 0.5 + 0.5 * resid / scale, draws.numpy()])
    gray_grid(run / "samples.png", panel, ncols=n)
    write_manifest(run, kind="sample", checkpoint=args.checkpoint, mode=mode, seeds={"sample": seed},
                   layout="rows: mean, residual (scaled to +-1 around 0.5), mean + residual",
                   residual_scale=scale)
    print(f"run directory: {run}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file, or a packaged config name such as train_desk")
    common.add_argument("--set", action="append", metavar="[SECTION:]KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="random seed for this command")
    common.add_argument("--out", default="runs", help="root under which the run directory is created")
    common.add_argument("--run-dir", help="write into exactly this directory instead")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="structvae", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog="exit codes: 0 ok, 1 internal, 2 usage, 3 artifact, 4 config, "
                                        "5 numeric, 6 stage, 7 partial sweep failure")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("make-data", parents=[common], help="generate phantoms or ingest magnitude volumes")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--split", default="train")
    p.add_argument("--ingest", metavar="DIR", help="directory of .npy/.h5 magnitude volumes")
    p.add_argument("--slices", type=int, default=5, help="central slices kept per volume")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--key", default="reconstruction_esc", help="HDF5 dataset name")
    p.set_defaults(func=cmd_make_data, seed=0)

    p = sub.add_parser("train", parents=[common], help="two-stage VAE training, ablation modes, or the denoiser")
    p.add_argument("--data", required=True, help="training images tensor file (N, H, W)")
    p.add_argument("--mode", choices=["identity", "diagonal", "covar", "all", "denoiser"])
    p.add_argument("--init", help="reuse this stage-1 checkpoint instead of training stage 1")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct one measurement with any method")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--measurement", help="measurement sidecar (.json) written by this tool")
    src.add_argument("--image", help="simulate from this image tensor file, or 'fixture'")
    src.add_argument("--fixture", dest="image", action="store_const", const="fixture",
                     help="simulate from the packaged phantom fixture")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--method", choices=list(C.METHODS))
    p.add_argument("--checkpoint")
    p.add_argument("--denoiser")
    p.add_argument("--mask", choices=list(C.MASKS), default="radial")
    p.add_argument("--spokes", type=int, default=25)
    p.add_argument("--row-prob", type=float, default=0.25)
    p.add_argument("--center-rows", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sweep", parents=[common], help="run an experiment spec (file or packaged name)")
    p.add_argument("spec", help="experiment spec file, or a packaged name such as 'ablation'")
    p.add_argument("--models-dir", help="base directory for relative checkpoint paths")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("introspect", parents=[common], help="render covariance rows of the learned prior")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", default="fixture", help="image tensor file or 'fixture'")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--pixel", type=_parse_pixel, action="append", help="ROW,COL (repeatable)")
    p.set_defaults(func=cmd_introspect)

    p = sub.add_parser("sample", parents=[common], help="draw mean, residual and full samples from a model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--mode", choices=["identity", "diagonal", "covar"])
    p.set_defaults(func=cmd_sample)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (ConfigurationError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageError as exc:
        print(f"stage mismatch: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
