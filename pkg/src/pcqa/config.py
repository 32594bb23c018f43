"""Plain-text ``key = value`` pipeline configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .features import ALL_FEATURES, FeatureKind
from .regress import NetworkDims, TrainConfig


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _features(text: str) -> tuple:
    kinds = tuple(FeatureKind.parse(t) for t in text.replace(",", " ").split())
    # canonical order regardless of how the user listed them
    return tuple(k for k in ALL_FEATURES if k in kinds)


def _opt_float(text: str):
    return None if text.lower() in ("", "none") else float(text)


def _opt_str(text: str):
    return None if text.lower() in ("", "none") else text


@dataclass
class PipelineConfig:
    scales: tuple = (2.0, 4.0, 8.0)
    neighbors: int = 30
    curvature_k: int = 30
    ref_voxel: float = 16.0
    ref_max_count: int = 4096
    features: tuple = ALL_FEATURES
    epochs: int = 80
    batch_size: int = 32
    lr0: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-2
    lambda1: float = 1.0
    lambda2: float = 0.5
    margin: float = 0.05
    hidden: int = 64
    head: int = 128
    reduction: int = 4
    split_ratio: float = 0.6
    split_rounds: int = 5
    mos_lo: float | None = None
    mos_hi: float | None = None
    cache_dir: str | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict, repr=False)

    _PARSERS = {
        "scales": _floats, "features": _features,
        "mos_lo": _opt_float, "mos_hi": _opt_float, "cache_dir": _opt_str,
    }

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError("scales must be positive voxel sizes")
        if not self.features:
            raise ConfigError("at least one feature must be enabled")
        if self.neighbors < 4:
            raise ConfigError("neighbors must be >= 4")
        if self.hidden * len(self.features) % self.reduction:
            raise ConfigError("hidden * n_features must be divisible by reduction")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls) if f.name != "extra"]

    @classmethod
    def from_text(cls, text: str, **overrides) -> "PipelineConfig":
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types or key == "extra":
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = cls._convert(key, val, types[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)

    @classmethod
    def _convert(cls, key, val, typ):
        try:
            if key in cls._PARSERS:
                return cls._PARSERS[key](val)
            if typ == "int":
                return int(val)
            if typ == "float":
                return float(val)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {val!r}") from None
        return val

    def as_dict(self) -> dict:
        out = {}
        for key in self.keys():
            v = getattr(self, key)
            if key == "features":
                v = [k.value for k in v]
            elif key == "scales":
                v = list(v)
            out[key] = v
        return out

    def to_text(self) -> str:
        lines = []
        for key, v in self.as_dict().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{key} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    @property
    def train(self) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr0, lr_min=self.lr_min,
                weight_decay=self.weight_decay, lambda1=self.lambda1, lambda2=self.lambda2,
                margin=self.margin, seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def dims(self) -> NetworkDims:
        return NetworkDims(
            n_scales=len(self.scales), n_features=len(self.features), k=self.neighbors + 4,
            hidden=self.hidden, head=self.head, reduction=self.reduction,
        )
