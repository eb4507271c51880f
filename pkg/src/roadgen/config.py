"""Run configuration: a flat dotted-key text format and its typed container.

The on-disk form is line-oriented `section.key = value` pairs, written in a
fixed order so a config snapshot round-trips byte-for-byte.  The same text
block is embedded in checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigError

LOSS_VARIANTS = ("ce", "ce+ct", "ce+dg", "ce+ct+dg")
STATS_REFRESH_MODES = ("per_round", "per_test_batch")

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class TrainConfig:
    """Every knob a run needs; defaults are the reference training recipe."""

    epochs: int = 20
    batch_size: int = 32
    inner_lr: float = 1e-4
    meta_lr: float = 0.001
    gamma: float = 0.7
    lam: float = 1.0
    tau: float = 0.05
    seed: int = 0
    loss_variant: str = "ce+ct+dg"
    inner_batches: int = 0          # 0 = one interleaved pass per round
    stats_refresh: str = "per_round"
    checkpoint_best: bool = False
    hidden: tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    resize: int = 64
    literal_denominator: bool = False
    epsilon: float = 1e-3
    max_pairs_per_class: int = 256
    literal_metric: bool = False
    weighted: bool = False

    # -- text form --------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for key, attr, kind in _KEYS:
            lines.append(f"{key} = {_format(getattr(self, attr), kind)}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str) -> "TrainConfig":
        values = {}
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in _BY_KEY:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            if key in seen:
                raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
            seen.add(key)
            attr, kind = _BY_KEY[key]
            values[attr] = _parse_value(key, val, kind)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.parse(p.read_text(encoding="utf-8"))

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        """Apply dotted-key → raw-string overrides (CLI flags beat the file)."""
        patch = {}
        for key, val in overrides.items():
            if key not in _BY_KEY:
                raise ConfigError(f"unknown config key {key!r}")
            attr, kind = _BY_KEY[key]
            patch[attr] = _parse_value(key, val, kind)
        cfg = replace(self, **patch)
        cfg.validate()
        return cfg

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.epochs >= 1, "train.epochs must be >= 1")
        need(self.batch_size >= 1, "train.batch_size must be >= 1")
        need(self.inner_lr > 0, "train.inner_lr must be > 0")
        # meta_lr/gamma/lambda may be 0: that switches the respective update
        # off, which the ablation and the ERM-collapse check rely on
        need(self.meta_lr >= 0, "train.meta_lr must be >= 0")
        need(0.0 <= self.gamma <= 1.0, "train.gamma must be in [0, 1]")
        need(self.lam >= 0, "train.lambda must be >= 0")
        need(self.tau > 0, "train.tau must be > 0")
        need(self.loss_variant in LOSS_VARIANTS,
             f"train.loss_variant must be one of {LOSS_VARIANTS}")
        need(self.inner_batches >= 0, "train.inner_batches must be >= 0")
        need(self.stats_refresh in STATS_REFRESH_MODES,
             f"train.stats_refresh must be one of {STATS_REFRESH_MODES}")
        need(len(self.hidden) >= 1 and all(h >= 1 for h in self.hidden),
             "model.hidden must list positive layer widths")
        need(self.embed_dim >= 1, "model.embed_dim must be >= 1")
        need(self.resize >= 1, "data.resize must be >= 1")
        need(self.epsilon > 0, "dg.epsilon must be > 0")
        need(self.max_pairs_per_class >= 1, "dg.max_pairs_per_class must be >= 1")

    # -- derived switches -------------------------------------------------

    @property
    def contrastive_on(self) -> bool:
        return "ct" in self.loss_variant.split("+")

    @property
    def dg_on(self) -> bool:
        return "dg" in self.loss_variant.split("+")


# dotted key, attribute, value kind — fixed order defines the file layout
_KEYS: tuple[tuple[str, str, str], ...] = (
    ("train.epochs", "epochs", "int"),
    ("train.batch_size", "batch_size", "int"),
    ("train.inner_lr", "inner_lr", "float"),
    ("train.meta_lr", "meta_lr", "float"),
    ("train.gamma", "gamma", "float"),
    ("train.lambda", "lam", "float"),
    ("train.tau", "tau", "float"),
    ("train.seed", "seed", "int"),
    ("train.loss_variant", "loss_variant", "str"),
    ("train.inner_batches", "inner_batches", "int"),
    ("train.stats_refresh", "stats_refresh", "str"),
    ("train.checkpoint_best", "checkpoint_best", "bool"),
    ("model.hidden", "hidden", "ints"),
    ("model.embed_dim", "embed_dim", "int"),
    ("data.resize", "resize", "int"),
    ("contrastive.literal_denominator", "literal_denominator", "bool"),
    ("dg.epsilon", "epsilon", "float"),
    ("dg.max_pairs_per_class", "max_pairs_per_class", "int"),
    ("dg.literal_metric", "literal_metric", "bool"),
    ("metrics.weighted", "weighted", "bool"),
)

_BY_KEY = {key: (attr, kind) for key, attr, kind in _KEYS}


def _format(value, kind: str) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def _parse_value(key: str, raw: str, kind: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}")
