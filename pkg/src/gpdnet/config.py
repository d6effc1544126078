"""Run configuration: presets, INI files, command-line overrides and echo.

A run configuration is a flat set of keys grouped into sections::

    [run]    preset, seed
    [net]    network hyperparameters
    [train]  training hyperparameters
    [data]   dataset generation
    [paths]  dataset, checkpoint and output locations
    [eval]   evaluation, ablation and receptive-field options

Keys are unique across sections, so ``--key value`` flags need no section.
Resolution order: preset defaults, then the config file, then flags, then
the ``GPD_SEED`` environment variable.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .network import GpdNetConfig
from .training import TrainingConfig

SEED_ENV = "GPD_SEED"


@dataclass(frozen=True)
class RunConfig:
    # run
    preset: str = "desk"
    seed: int = 0
    # net
    widths: tuple = (8, 16, 24)
    blocks: int = 2
    layers_per_block: int = 3
    rank: int = 4
    circulant_rows: int = 2
    delta: float = 10.0
    k: int = 8
    search_size: int = 24
    slope: float = 0.2
    # train
    sigma: float = 0.02
    batch_size: int = 4
    patch_size: int = 256
    iterations: int = 8000
    lr: float = 1e-3
    loss: str = "mse"
    lam: float = 1.0
    checkpoint_interval: int = 0
    graph_mode: str = "dynamic"
    fresh_noise: bool = True
    lr_drop_at: int = 6000
    lr_drop: float = 0.1
    # data
    shapes: tuple = ("sphere", "torus", "cube")
    mesh_dir: str = ""
    n_points: int = 8192
    noise: str = "gaussian"
    noise_sigma: float = 0.02
    sigma_bias: float = 0.0
    sigma_ray: float = 0.0
    scan_origin: tuple = (0.0, 0.0, 2.0)
    clouds_per_shape: int = 1
    # paths
    dataset: str = "dataset"
    test_dataset: str = ""
    checkpoint: str = ""
    resume: str = ""
    input: str = ""
    clean: str = ""
    output: str = "out"
    output_file: str = ""
    # eval
    k_n: int = 16
    block: int = 0
    ks: tuple = ()
    graph_modes: tuple = ("dynamic", "fixed")
    jobs: int = 1
    dump_graph: bool = False

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.noise not in ("gaussian", "structured"):
            raise ConfigError(f"unknown noise model {self.noise!r}")
        if self.n_points < 1 or self.clouds_per_shape < 1:
            raise ConfigError("n_points and clouds_per_shape must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        for mode in self.graph_modes:
            if mode not in ("dynamic", "fixed"):
                raise ConfigError(f"unknown graph mode {mode!r}")

    def net_config(self, **overrides) -> GpdNetConfig:
        keys = ("widths", "blocks", "layers_per_block", "rank", "circulant_rows", "delta", "k",
                "search_size", "slope")
        values = {key: getattr(self, key) for key in keys}
        values.update(overrides)
        return GpdNetConfig(**values)

    def train_config(self, **overrides) -> TrainingConfig:
        keys = ("sigma", "batch_size", "patch_size", "iterations", "lr", "loss", "lam", "seed",
                "checkpoint_interval", "graph_mode", "fresh_noise", "lr_drop_at", "lr_drop")
        values = {key: getattr(self, key) for key in keys}
        values.update(overrides)
        return TrainingConfig(**values)


SECTIONS = {
    "run": ("preset", "seed"),
    "net": ("widths", "blocks", "layers_per_block", "rank", "circulant_rows", "delta", "k",
            "search_size", "slope"),
    "train": ("sigma", "batch_size", "patch_size", "iterations", "lr", "loss", "lam",
              "checkpoint_interval", "graph_mode", "fresh_noise", "lr_drop_at", "lr_drop"),
    "data": ("shapes", "mesh_dir", "n_points", "noise", "noise_sigma", "sigma_bias", "sigma_ray",
             "scan_origin", "clouds_per_shape"),
    "paths": ("dataset", "test_dataset", "checkpoint", "resume", "input", "clean", "output",
              "output_file"),
    "eval": ("k_n", "block", "ks", "graph_modes", "jobs", "dump_graph"),
}

PRESETS = {
    "desk": {},
    "paper": {"widths": (33, 66, 99), "rank": 11, "circulant_rows": 3, "k": 16,
              "search_size": 32, "batch_size": 16, "patch_size": 1024, "lr": 1e-4,
              "iterations": 700000, "lr_drop_at": 0, "fresh_noise": False,
              "n_points": 30720},
}

_FIELDS = {f.name: f for f in fields(RunConfig)}
_KEY_SECTION = {key: sec for sec, keys in SECTIONS.items() for key in keys}
assert set(_KEY_SECTION) == set(_FIELDS)


# ---------------------------------------------------------------- values

def parse_value(key: str, text: str):
    """Convert a textual value to the type of ``key``'s default."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown configuration key {key!r}")
    default = _FIELDS[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if key in ("widths", "ks"):
                return tuple(int(t) for t in items)
            if key == "scan_origin":
                if len(items) != 3:
                    raise ValueError(text)
                return tuple(float(t) for t in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for {key}") from None
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------- files

def read_config_file(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, text in parser.items(section):
            if _KEY_SECTION.get(key) != section:
                raise ConfigError(f"{path}: key {key!r} does not belong in [{section}]")
            out[key] = parse_value(key, text)
    return out


def dumps_config(cfg: RunConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {format_value(getattr(cfg, key))}" for key in keys)
        lines.append("")
    return "\n".join(lines)


def write_config(path, cfg: RunConfig) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_config(cfg))


# ---------------------------------------------------------------- resolution

def resolve(config_file=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Preset defaults < config file < overrides < ``GPD_SEED``.

    ``overrides`` maps keys to already-typed values or to strings.
    """
    env = os.environ if env is None else env
    values = read_config_file(config_file) if config_file else {}
    for key, value in (overrides or {}).items():
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    preset = values.get("preset", RunConfig.preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = dict(PRESETS[preset])
    merged.update(values)
    if env.get(SEED_ENV):
        merged["seed"] = parse_value("seed", env[SEED_ENV])
    return replace(RunConfig(), **merged)
