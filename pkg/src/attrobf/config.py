"""Plain-text ``key = value`` run configuration for the sweep pipeline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .evaluate import DEFAULT_GRID
from .exceptions import ConfigError


@dataclass
class RunConfig:
    out_dir: str = "run"
    # data; an empty data_dir means "generate synthetic data into out_dir"
    data_dir: str = ""
    test_data_dir: str = ""
    n_train: int = 5000
    n_test: int = 1000
    data_seed: int = 7
    split_seed: int = 11
    noise_sigma: float = 0.05
    image_format: str = "png"
    # training
    epochs: int = 6
    batch_size: int = 32
    lr: float = 0.005
    momentum: float = 0.9
    train_alpha1: float = 1.0
    train_alpha2: float = 1.0
    surrogate_seed: int = 1
    clean_a_seed: int = 2
    clean_b_seed: int = 3
    clean_variants: str = "A,B"
    # empty model paths mean "train and save into out_dir/models"
    surrogate_model: str = ""
    clean_a_model: str = ""
    clean_b_model: str = ""
    # attack
    grid: str = DEFAULT_GRID
    alpha1: float = 1.0
    alpha2: float = 1.0
    steps: int = 40
    step_size: float | None = None
    # outputs
    save_perturbed: bool = True
    grid_count: int = 8
    threads: int = 0

    def to_text(self):
        lines = [f"{k} = {'' if v is None else v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    def variants(self):
        out = [v.strip().upper() for v in self.clean_variants.split(",") if v.strip()]
        for v in out:
            if v not in ("A", "B"):
                raise ConfigError(f"unknown clean variant {v!r}")
        if not out:
            raise ConfigError("clean_variants is empty")
        return out


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key, raw):
    ftype = str(_FIELDS[key].type)
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype.startswith("float |"):
            return None if raw in ("", "auto", "none", "None") else float(raw)
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} ({ftype})") from None
    return raw


def parse_config_text(text, base=None):
    """Parse ``key = value`` lines onto ``base`` (default: a fresh RunConfig)."""
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _convert(key, value))
    return cfg


def load_config(path, overrides=None):
    """Read a config file and apply ``overrides`` (a dict of raw string values)."""
    cfg = RunConfig()
    if path:
        with open(path) as f:
            cfg = parse_config_text(f.read(), cfg)
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        setattr(cfg, key, _convert(key, str(value)))
    return cfg


def config_keys():
    return list(_FIELDS)
