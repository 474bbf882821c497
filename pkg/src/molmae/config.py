"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment. Unknown keys and ill-typed values are
errors. Keys and types are listed in :data:`KEYS` (and by ``molmae --help``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .model import ConfigError, ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    d: int = 100
    n_encoder: int = 6
    n_decoder: int = 2
    heads: int = 2
    gnn_depth: int = 3
    mask_ratio: float = 0.6
    attn_hidden: int = 128
    attn_out: int = 4
    pred_hidden: int = 100
    use_descriptors: bool = False
    dropout: float = 0.0
    # optimisation
    seed: int = 0
    batch_size: int = 32
    steps: int = 1000
    epochs: int = 30
    warmup: int = 4000
    lr_factor: float = 1.0
    grad_clip: float = 5.0
    checkpoint_every: int = 0
    log_every: int = 50
    # runtime
    precision: int = 32
    deterministic: bool = False
    strict: bool = False

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        for name in ("batch_size", "steps", "epochs", "warmup"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr_factor <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr_factor and grad_clip must be positive")
        self.model(n_tasks=1)  # validates the model fields

    def model(self, n_tasks: int = 1) -> ModelConfig:
        return ModelConfig.from_dict({**asdict(self), "n_tasks": n_tasks})

    def train(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, batch_size=self.batch_size, steps=self.steps,
                           epochs=self.epochs, warmup=self.warmup, lr_factor=self.lr_factor,
                           grad_clip=self.grad_clip, checkpoint_every=self.checkpoint_every,
                           log_every=self.log_every)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig(**{**asdict(self), **changes})


KEYS = {f.name: f.type for f in fields(RunConfig)}
_TYPES = {"int": int, "float": float, "bool": bool}


def _coerce(key: str, raw: str):
    kind = _TYPES[KEYS[key]]
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is int:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {KEYS[key]}, got {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    try:
        return (base or RunConfig()).replace(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    def fmt(v):
        return str(v).lower() if isinstance(v, bool) else str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in asdict(cfg).items())


def describe_keys() -> str:
    default = RunConfig()
    return "\n".join(f"  {k:<17}{t:<6} default {getattr(default, k)}" for k, t in KEYS.items())
