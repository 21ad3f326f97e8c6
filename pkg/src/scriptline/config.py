"""Pipeline configuration: defaults, key=value files, CLI overrides.

Precedence is CLI override > config file > built-in default. Unknown
keys are rejected outright so typos cannot silently fall back to a
default. The defaults are the best settings from the ablations this
toolkit reproduces (height 55, patch 5 / stride 2, window 4 / shift 3,
10 states, codebook of 500 words), except target_mixtures, whose
published best of 64 is impractical on a desk-scale corpus and defaults
to 4.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class PipelineConfig:
    # corpus generation
    corpus_dir: str = "corpus"
    n_lines: int = 300
    min_len: int = 3
    max_len: int = 8
    jitter: int = 1
    salt_pepper: float = 0.001
    scale_min: float = 0.95
    scale_max: float = 1.05
    spacing_min: int = 2
    spacing_max: int = 5
    space_rate: float = 0.15
    margin: int = 2
    # corpus inputs
    train_manifest: str = ""
    test_manifest: str = ""
    charset: str = ""
    # preprocessing and features
    height: int = 55
    patch: int = 5
    stride: int = 2
    spatial_bins: int = 4
    orientation_bins: int = 8
    window: int = 4
    shift: int = 3
    quantize: str = "soft"  # soft | hard
    codebook: str = "sae"  # sae | kmeans
    normalize_hist: bool = True
    dump_descriptors: bool = False
    # codebook training
    hidden_size: int = 500
    l2_weight: float = 0.1
    sparsity_weight: float = 1.0
    sparsity_target: float = 0.95
    sae_epochs: int = 20
    learning_rate: float = 0.5
    batch_size: int = 256
    momentum: float = 0.9
    sae_max_samples: int = 100000
    # sequence models
    n_states: int = 10
    target_mixtures: int = 4
    bw_epochs: int = 4
    var_floor_scale: float = 1e-4
    insertion_penalty: float = 0.0
    # outputs
    sae_model: str = "sae_model.bin"
    features_dir: str = "features"
    hmm_model: str = "hmm_model.bin"
    dump_text: bool = False
    hypotheses: str = "hypotheses.tsv"
    report_txt: str = "report.txt"
    report_json: str = "report.json"
    ablate_csv: str = "ablate.csv"
    sweep: str = ""
    # execution
    seed: int = 0
    jobs: int = 1


_FIELDS = {f.name: f.type for f in fields(PipelineConfig)}
_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key]
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (bool, "bool"):
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[word]
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def parse_config_file(path) -> dict:
    """key = value lines; blank lines and full-line # comments allowed."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            setattr(cfg, key, _coerce(key, raw) if isinstance(raw, str) else raw)
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    def positive(name):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")

    for name in ("n_lines", "height", "patch", "stride", "spatial_bins", "orientation_bins",
                 "window", "shift", "hidden_size", "sae_epochs", "batch_size", "n_states",
                 "target_mixtures", "bw_epochs", "jobs", "min_len", "max_len",
                 "sae_max_samples", "margin"):
        positive(name)
    if cfg.min_len > cfg.max_len:
        raise ConfigError("min_len must not exceed max_len")
    if cfg.scale_min > cfg.scale_max or cfg.scale_min <= 0:
        raise ConfigError("scale range must be positive and ordered")
    if cfg.spacing_min > cfg.spacing_max:
        raise ConfigError("spacing range must be ordered")
    if not 0.0 <= cfg.salt_pepper < 1.0:
        raise ConfigError("salt_pepper must lie in [0, 1)")
    if not 0.0 <= cfg.space_rate <= 1.0:
        raise ConfigError("space_rate must lie in [0, 1]")
    if cfg.jitter < 0:
        raise ConfigError("jitter must be >= 0")
    if not 0.0 < cfg.sparsity_target < 1.0:
        raise ConfigError("sparsity_target must lie in (0, 1)")
    if cfg.l2_weight < 0 or cfg.sparsity_weight < 0:
        raise ConfigError("regularization weights must be >= 0")
    if cfg.learning_rate <= 0:
        raise ConfigError("learning_rate must be > 0")
    if not 0.0 <= cfg.momentum < 1.0:
        raise ConfigError("momentum must lie in [0, 1)")
    if cfg.quantize not in ("soft", "hard"):
        raise ConfigError("quantize must be 'soft' or 'hard'")
    if cfg.codebook not in ("sae", "kmeans"):
        raise ConfigError("codebook must be 'sae' or 'kmeans'")
    if cfg.var_floor_scale <= 0:
        raise ConfigError("var_floor_scale must be > 0")
    n = cfg.target_mixtures
    while n % 2 == 0:
        n //= 2
    if n != 1:
        raise ConfigError("target_mixtures must be a power of two (mixtures double per split)")


def parse_sweep(sweep: str) -> list:
    """'patch=3,stride=1; patch=5,stride=2' -> list of override dicts."""
    settings = []
    for chunk in sweep.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        overrides = {}
        for pair in chunk.split(","):
            if "=" not in pair:
                raise ConfigError(f"sweep entry {pair!r} is not key=value")
            key, _, value = pair.partition("=")
            overrides[key.strip()] = value.strip()
        settings.append(overrides)
    if not settings:
        raise ConfigError("sweep grid is empty")
    return settings
