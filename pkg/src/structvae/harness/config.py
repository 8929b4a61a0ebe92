"""Key-value configuration files.

Files are INI-style (``configparser``): ``[section]`` headers and ``key = value``
lines, ``#`` comments.  Values are parsed as bool (true/false), int, float,
comma-separated lists, or left as strings.  Any field of the relevant dataclass
may be set; unknown keys are an error.

Sections read by the CLI:

``[train]``
    ``TrainConfig`` fields.
``[arch]``
    ``preset = desk | full`` plus any ``ArchConfig`` field.
``[denoiser]``
    ``noise_level`` plus any ``DenoiserConfig`` field.
``[recon]``
    ``ReconConfig`` fields; ``lambda`` is accepted for ``lam`` and ``pnp.sigma``,
    ``pnp.eta``, ``pnp.iters`` reach the nested PnP settings.
``[experiment]`` and one ``[method <label>]`` section per compared method
    see :class:`ExperimentSpec`.
"""
from __future__ import annotations

import configparser
import hashlib
import itertools
import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from ..errors import ArtifactError, ConfigurationError
from ..generative_model import ArchConfig
from ..reconstruction import METHODS, ReconConfig
from ..training import DenoiserConfig, TrainConfig

MASKS = ("radial", "cartesian", "full")
ALIASES = {"lambda": "lam"}


# ---------------------------------------------------------------- parsing


def parse_scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def parse_list(text: str) -> list:
    return [parse_scalar(p) for p in str(text).split(",") if p.strip()]


def _coerce(value: str, default, where: str):
    try:
        if isinstance(default, bool):
            v = parse_scalar(value)
            if not isinstance(v, bool):
                raise ValueError(value)
            return v
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in parse_list(value))
        if isinstance(default, str):
            return value.strip()
    except ValueError as exc:
        raise ConfigurationError(f"{where}: cannot parse {value!r} like {default!r}") from exc
    return parse_scalar(value)


def build(cls, items: dict, where: str, base=None):
    """Instantiate dataclass ``cls`` from string ``items``, coercing by field defaults."""
    base = base if base is not None else cls()
    known = {f.name for f in fields(cls)}
    kw, nested = {}, {}
    for key, raw in items.items():
        key = ALIASES.get(key, key)
        head, _, rest = key.partition(".")
        if rest and head in known:
            nested.setdefault(head, {})[rest] = raw
            continue
        if key not in known:
            raise ConfigurationError(f"{where}: unknown key {key!r} for {cls.__name__}")
        kw[key] = _coerce(raw, getattr(base, key), f"{where}.{key}")
    for head, sub in nested.items():
        inner = getattr(base, head)
        kw[head] = build(type(inner), sub, f"{where}.{head}", inner)
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"{where}: {exc}") from exc


def read_config(path=None, text: str | None = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ArtifactError(f"config file not found: {path}")
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    if text is not None:
        cp.read_string(text)
    return cp


def apply_overrides(cp: configparser.ConfigParser, items, default_section: str):
    """Apply ``key=value`` or ``section:key=value`` overrides in order."""
    for item in items or ():
        lhs, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"override {item!r} is not key=value")
        section, _, key = lhs.rpartition(":")
        section = section.strip() or default_section
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key.strip(), value.strip())
    return cp


def section(cp, name: str) -> dict:
    return dict(cp.items(name)) if cp.has_section(name) else {}


def packaged_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``"ablation"``."""
    stem = name.removesuffix(".cfg")
    ref = resources.files("structvae") / "configs" / f"{stem}.cfg"
    if not ref.is_file():
        raise ArtifactError(f"no packaged config named {name!r}")
    return Path(str(ref))


def resolve_config_path(name) -> Path:
    """An existing file path, else a packaged config of that name."""
    p = Path(name)
    return p if p.exists() else packaged_config(str(name))


# ---------------------------------------------------------------- section readers


def train_settings(cp) -> tuple[TrainConfig, ArchConfig]:
    arch_items = section(cp, "arch")
    preset = arch_items.pop("preset", "desk")
    if preset not in ("desk", "full"):
        raise ConfigurationError(f"arch.preset must be desk or full, got {preset!r}")
    arch = build(ArchConfig, arch_items, "arch", getattr(ArchConfig, preset)())
    return build(TrainConfig, section(cp, "train"), "train"), arch


def denoiser_settings(cp) -> tuple[DenoiserConfig, float]:
    items = section(cp, "denoiser")
    noise = float(items.pop("noise_level", 0.05))
    if noise <= 0:
        raise ConfigurationError("denoiser.noise_level must be positive")
    return build(DenoiserConfig, items, "denoiser"), noise


def recon_settings(cp, name: str = "recon") -> ReconConfig:
    return build(ReconConfig, section(cp, name), name)


# ---------------------------------------------------------------- experiments


@dataclass
class MethodSpec:
    """One compared method: fixed solver settings plus a grid to search."""

    label: str
    base: ReconConfig
    grid: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def points(self) -> list[tuple[dict, ReconConfig]]:
        """Every grid combination, in file order, with its full solver config."""
        keys = list(self.grid)
        out = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            chosen = dict(zip(keys, combo))
            cfg = build(ReconConfig, {k: str(v) for k, v in chosen.items()}, f"method {self.label}", self.base)
            out.append((chosen, cfg))
        return out

    def to_dict(self) -> dict:
        return {"label": self.label, "config": self.base.to_dict(), "grid": self.grid, "checkpoint": self.checkpoint}


@dataclass
class ExperimentSpec:
    """A PSNR sweep: test set, measurement axes, and the methods to compare.

    ``[experiment]`` keys: ``name``; ``dataset`` (``phantom`` or a tensor file of
    shape (N, H, W)); ``dataset_seed``; ``image_size``; ``test_images``; ``mask``
    (radial, cartesian or full); ``spokes``, ``row_prob`` and ``noise`` lists;
    ``center_rows``; ``noise_seed``; ``mask_seed``; ``models_dir`` (base for
    relative checkpoint paths, default the spec file's directory); default
    ``checkpoint``; ``denoiser``; ``workers``.

    ``[method <label>]`` keys: any ``ReconConfig`` field as a fixed value,
    ``grid.<field> = v1, v2, ...`` for searched values, and ``checkpoint``.
    """

    name: str
    methods: list[MethodSpec]
    dataset: str = "phantom"
    dataset_seed: int = 1
    image_size: int = 32
    test_image_count: int = 20
    mask: str = "radial"
    spokes: list = field(default_factory=lambda: [5, 15, 25])
    noise: list = field(default_factory=lambda: [0.05])
    row_prob: list = field(default_factory=list)
    center_rows: int = 4
    noise_seed: int = 0
    mask_seed: int = 0
    denoiser: str | None = None
    models_dir: str = "."
    workers: int = 1

    def __post_init__(self):
        if self.mask not in MASKS:
            raise ConfigurationError(f"mask must be one of {MASKS}, got {self.mask!r}")
        if not self.noise:
            raise ConfigurationError("noise axis is empty")
        if self.mask == "radial" and not self.spokes:
            raise ConfigurationError("radial sweep needs a nonempty spokes list")
        if self.mask == "cartesian" and not self.row_prob:
            raise ConfigurationError("cartesian sweep needs a nonempty row_prob list")
        if not self.methods:
            raise ConfigurationError("experiment lists no methods")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"duplicate method labels in {labels}")
        for m in self.methods:
            if m.base.method not in METHODS:
                raise ConfigurationError(f"method {m.label}: unknown method {m.base.method!r}")
            m.points()  # validates every grid value eagerly
        if self.test_image_count < 1 or self.workers < 1:
            raise ConfigurationError("test_images and workers must be >= 1")

    @property
    def axis_name(self) -> str | None:
        return {"radial": "spokes", "cartesian": "row_prob", "full": None}[self.mask]

    def axis_values(self) -> list:
        return {"radial": self.spokes, "cartesian": self.row_prob, "full": [None]}[self.mask]

    def sweep_points(self) -> list[tuple]:
        return [(a, n) for a in self.axis_values() for n in self.noise]

    def resolve(self, ref: str | None) -> Path | None:
        if ref is None:
            return None
        p = Path(ref)
        return p if p.is_absolute() else Path(self.models_dir) / p

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("methods", "workers")}
        d["methods"] = [m.to_dict() for m in self.methods]
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser, base_dir: Path | None = None) -> "ExperimentSpec":
        if not cp.has_section("experiment"):
            raise ConfigurationError("experiment spec has no [experiment] section")
        ex = section(cp, "experiment")
        default_ckpt = ex.pop("checkpoint", None)
        kw = {}
        ints = ("dataset_seed", "image_size", "center_rows", "noise_seed", "mask_seed", "workers")
        try:
            for key, raw in ex.items():
                if key in ints:
                    kw[key] = int(raw)
                elif key == "test_images":
                    kw["test_image_count"] = int(raw)
                elif key == "spokes":
                    kw[key] = [int(v) for v in parse_list(raw)]
                elif key in ("noise", "row_prob"):
                    kw[key] = [float(v) for v in parse_list(raw)]
                elif key in ("name", "dataset", "mask", "denoiser", "models_dir"):
                    kw[key] = raw.strip()
                else:
                    raise ConfigurationError(f"experiment: unknown key {key!r}")
        except ValueError as exc:
            raise ConfigurationError(f"experiment: {exc}") from exc
        kw.setdefault("name", "experiment")
        kw.setdefault("models_dir", str(base_dir) if base_dir is not None else ".")
        methods = []
        for sec in cp.sections():
            if not sec.startswith("method"):
                continue
            label = sec[len("method"):].strip()
            if not label:
                raise ConfigurationError(f"section [{sec}] needs a label, e.g. [method covar]")
            items = section(cp, sec)
            ckpt = items.pop("checkpoint", default_ckpt)
            grid = {}
            for key in [k for k in items if k.startswith("grid.")]:
                values = parse_list(items.pop(key))
                if not values:
                    raise ConfigurationError(f"[{sec}] {key} is empty")
                grid[ALIASES.get(key[5:], key[5:])] = values
            base = build(ReconConfig, items, f"method {label}")
            methods.append(MethodSpec(label, base, grid, ckpt))
        return cls(methods=methods, **kw)

    @classmethod
    def from_file(cls, path, overrides=()) -> "ExperimentSpec":
        path = resolve_config_path(path)
        cp = apply_overrides(read_config(path), overrides, "experiment")
        base = path.parent if not path.is_relative_to(Path(str(resources.files("structvae")))) else Path.cwd()
        return cls.from_parser(cp, base)
