"""
config.py

Flat key-value configuration of the whole pipeline.

A config file holds one `key = value` pair per line; `#` starts a comment.
Every key can also be overridden on the command line as `--key value`.
The effective configuration is echoed as config.txt into each output directory.
"""

import os
from dataclasses import asdict, dataclass, fields

from errors import ConfigError
from ista import ALPHA_POLICIES

CONFIG_FILENAME = "config.txt"
INIT_MODES = ("snmf", "random")


@dataclass
class PipelineConfig:
    # STFT
    frame_size: int = 512
    hop: int = 128
    # Dictionary and network
    n_speech: int = 32
    n_noise: int = 32
    K: int = 5
    lambda1: float = 0.1
    alpha: str = "heuristic"
    h0_const: float = 1e-3
    init: str = "snmf"
    init_seed: int = 0
    snmf_iters: int = 200
    epsilon_mu: float = 1e-12
    epsilon_log: float = 1e-8
    epsilon_mask: float = 1e-12
    # Adam
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    # Training loop
    batch_size: int = 32
    max_seq_frames: int = 500
    patience_epochs: int = 50
    max_epochs: int = 200
    val_fraction: float = 0.2
    train_fraction: float = 1.0
    # Seeds and corpus
    shuffle_seed: int = 0
    nmf_seed: int = 0
    corpus_seed: int = 7
    n_utts: int = 12
    duration_s: float = 2.0
    n_jobs: int = 1

    def validate(self):
        """Check every module precondition; raise ConfigError on the first violation."""
        checks = [
            (self.frame_size > 0 and self.frame_size % 2 == 0, "frame_size must be a positive even number"),
            (self.hop > 0 and self.frame_size % self.hop == 0, "hop must divide frame_size"),
            (self.n_speech >= 1, "n_speech must be at least 1"),
            (self.n_noise >= 0, "n_noise must be nonnegative"),
            (self.K >= 1, "K must be at least 1"),
            (self.lambda1 >= 0, "lambda1 must be nonnegative"),
            (self.h0_const > 0, "h0_const must be positive"),
            (self.init in INIT_MODES, f"init must be one of {list(INIT_MODES)}"),
            (self.snmf_iters >= 0, "snmf_iters must be nonnegative"),
            (self.epsilon_mu > 0 and self.epsilon_log > 0 and self.epsilon_mask > 0,
             "epsilon values must be positive"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1 and beta2 must be in [0, 1)"),
            (self.eps_adam > 0, "eps_adam must be positive"),
            (self.batch_size >= 1 and self.max_seq_frames >= 1 and self.patience_epochs >= 1,
             "batch_size, max_seq_frames and patience_epochs must be positive"),
            (self.max_epochs >= 0, "max_epochs must be nonnegative"),
            (0 < self.val_fraction < 1, "val_fraction must be in (0, 1)"),
            (0 < self.train_fraction <= 1, "train_fraction must be in (0, 1]"),
            (self.n_utts >= 1, "n_utts must be at least 1"),
            (self.duration_s > 0, "duration_s must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.alpha not in ALPHA_POLICIES:
            try:
                value = float(self.alpha)
            except ValueError:
                raise ConfigError(
                    f"alpha must be a positive number or one of {sorted(ALPHA_POLICIES)}, got {self.alpha!r}"
                ) from None
            if not value > 0:
                raise ConfigError("alpha must be positive")
        return self


FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}
_CASTS = {"int": int, "float": float, "str": str, int: int, float: float, str: str}


def _cast(key, raw):
    cast = _CASTS[FIELD_TYPES[key]]
    try:
        if cast is int:
            as_float = float(raw)
            if not as_float.is_integer():
                raise ValueError
            return int(as_float)
        return cast(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def apply_overrides(cfg, overrides):
    """Return a validated copy of cfg with the given key -> value overrides."""
    values = asdict(cfg)
    for key, raw in overrides.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _cast(key, raw)
    return PipelineConfig(**values).validate()


def parse_config_text(text, source="<config>"):
    overrides = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        overrides[key] = value
    return overrides


def load_config(path=None, overrides=None):
    """
    Defaults, then the file at `path` (if any), then `overrides`.
    """
    cfg = PipelineConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        cfg = apply_overrides(cfg, parse_config_text(text, path))
    return apply_overrides(cfg, overrides or {})


def format_config(cfg):
    return "".join(f"{key} = {value}\n" for key, value in asdict(cfg).items())


def save_config(cfg, out_dir):
    """Echo the effective configuration into out_dir/config.txt."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, CONFIG_FILENAME)
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
    return path


def add_config_arguments(parser):
    """One --key flag per config field; the help text shows the default."""
    group = parser.add_argument_group("pipeline configuration")
    group.add_argument("--config", default=None, help="flat key = value config file")
    defaults = PipelineConfig()
    for key in FIELD_TYPES:
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None, metavar="VALUE",
                           help=f"(default: {getattr(defaults, key)})")


def config_from_args(args):
    overrides = {key: getattr(args, f"cfg_{key}") for key in FIELD_TYPES
                 if getattr(args, f"cfg_{key}", None) is not None}
    return load_config(args.config, overrides)
