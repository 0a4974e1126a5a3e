"""Run configuration and its flat ``section.key=value`` text form.

Example::

    # comments start with '#'
    train.regime = cds
    train.lr = 0.05
    arch.widths = 16,32,64,128
    data.name = cifar10

Unknown keys and unparsable values raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

from .data import AugPolicy, DataConfig
from .errors import ConfigError
from .losses import LossWeights
from .network import SCHEMES, ArchSpec

REGIMES = ("baseline", "dsn", "dks", "cds", "cds-semi", "kd-feature", "kd-cds")
SCHEDULES = ("step", "cosine")
CONTRAST_KINDS = ("simclr", "supcon")


@dataclass
class TrainSection:
    regime: str = "baseline"
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    milestones: list[int] = field(default_factory=lambda: [30, 60])
    gamma: float = 0.1
    seed: int = 0
    contrast_kind: str = "simclr"


@dataclass
class HeadConfig:
    scheme: str = "uniform"
    count: typing.Optional[int] = None
    embed_dim: int = 128
    hidden_dim: int = 256


@dataclass
class AugConfig:
    crop_pad: int = 4
    flip_p: float = 0.5
    jitter_strength: float = 0.4
    jitter_p: float = 0.8
    gray_p: float = 0.2


@dataclass
class SemiConfig:
    fraction: typing.Optional[float] = None
    unlabeled_batch_size: typing.Optional[int] = None


@dataclass
class KDConfig:
    teacher_checkpoint: typing.Optional[str] = None
    teacher_bn: str = "eval"


@dataclass
class RunConfig:
    name: typing.Optional[str] = None
    out_dir: str = "runs"


@dataclass
class EvalConfig:
    bins: int = 15
    batch_size: int = 256


@dataclass
class TrainConfig:
    train: TrainSection = field(default_factory=TrainSection)
    arch: ArchSpec = field(default_factory=ArchSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    heads: HeadConfig = field(default_factory=HeadConfig)
    data: DataConfig = field(default_factory=DataConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    semi: SemiConfig = field(default_factory=SemiConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    run: RunConfig = field(default_factory=RunConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def regime(self) -> str:
        return self.train.regime

    @property
    def run_name(self) -> str:
        return self.run.name or f"{self.train.regime}-s{self.train.seed}"

    def head_count(self) -> int:
        return self.arch.K - 1 if self.heads.count is None else self.heads.count

    def contrast_policy(self) -> AugPolicy:
        mean, std = self.data.norm_constants()
        a = self.aug
        return AugPolicy(a.crop_pad, a.flip_p, a.jitter_strength, a.jitter_p, a.gray_p, tuple(mean), tuple(std))

    def single_policy(self) -> AugPolicy:
        mean, std = self.data.norm_constants()
        return AugPolicy(self.aug.crop_pad, self.aug.flip_p, 0.0, 0.0, 0.0, tuple(mean), tuple(std))

    def eval_policy(self) -> AugPolicy:
        mean, std = self.data.norm_constants()
        return AugPolicy.empty(tuple(mean), tuple(std))

    def validate(self) -> None:
        t = self.train
        if t.regime not in REGIMES:
            raise ConfigError(f"unknown regime {t.regime!r}; expected one of {REGIMES}")
        if t.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {t.schedule!r}")
        if t.contrast_kind not in CONTRAST_KINDS:
            raise ConfigError(f"unknown contrast kind {t.contrast_kind!r}")
        if t.epochs < 0 or t.batch_size < 1 or t.lr < 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr >= 0")
        if self.heads.scheme not in SCHEMES:
            raise ConfigError(f"unknown head scheme {self.heads.scheme!r}")
        if self.kd.teacher_bn not in ("eval", "batch"):
            raise ConfigError("kd.teacher_bn must be 'eval' or 'batch'")
        self.arch.validate()
        self.loss.validate()
        if self.arch.num_classes != self.data.num_classes and self.data.name == "synthetic":
            raise ConfigError("arch.num_classes must equal data.num_classes for synthetic data")
        if t.regime == "cds-semi" and self.semi.fraction is None:
            raise ConfigError("regime cds-semi requires semi.fraction")
        if t.regime.startswith("kd-") and not self.kd.teacher_checkpoint:
            raise ConfigError(f"regime {t.regime} requires kd.teacher_checkpoint")
        try:
            self.contrast_policy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# text form
# ---------------------------------------------------------------------------


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_value(text: str, hint, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _parse_value(text, inner, key)
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin in (list, tuple):
            elem = args[0] if args else str
            items = [s for s in text.split(",") if s.strip()]
            vals = [_parse_value(s, elem, key) for s in items]
            return vals if origin is list else tuple(vals)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    if hint is tuple or hint is list:
        return tuple(float(s) for s in text.split(",") if s.strip())
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def set_key(cfg: TrainConfig, key: str, value: str) -> None:
    if "." not in key:
        raise ConfigError(f"config key {key!r} must look like section.name")
    section, name = key.split(".", 1)
    if section not in {f.name for f in dataclasses.fields(TrainConfig)}:
        raise ConfigError(f"unknown config section {section!r}")
    obj = getattr(cfg, section)
    hints = _hints(type(obj))
    if name not in hints:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, name, _parse_value(value, hints[name], key))


def parse_config_text(text: str, overrides: typing.Sequence[str] = ()) -> TrainConfig:
    cfg = TrainConfig()
    lines = list(text.splitlines()) + list(overrides)
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value)
    cfg.validate()
    return cfg


def load_config(path: str, overrides: typing.Sequence[str] = ()) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, overrides)


def dump_config(cfg: TrainConfig) -> str:
    """Every key, one per line, in a fixed order; parses back to an equal config."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        obj = getattr(cfg, f.name)
        for sub in dataclasses.fields(obj):
            lines.append(f"{f.name}.{sub.name} = {_format_value(getattr(obj, sub.name))}")
    return "\n".join(lines) + "\n"
