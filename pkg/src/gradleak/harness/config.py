"""Experiment configuration and its flat ``key = value`` text format.

Example::

    master_seed = 3
    data.sample_count = 20
    attack.kinds = l2, cos
    attack.l2.steps = 500
    proxy.max_iters = 500

Blank lines and ``#`` comments are ignored.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..attack import AttackConfig
from ..errors import ConfigError, GradLeakError
from ..gradmatch import GradLossKind
from ..lavp import ProxyParams
from ..smallnet import NetSpec


@dataclass(frozen=True)
class ModelConfig:
    layer_sizes: tuple = (64, 32, 4)
    activation: str = "tanh"
    epochs: int = 5
    lr: float = 0.05
    batch_size: int = 1
    train_count: int = 200
    weights: str | None = None

    def net_spec(self) -> NetSpec:
        return NetSpec(self.layer_sizes, self.activation)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    sample_count: int = 20
    height: int = 8
    width: int = 8
    sigma: float = 1.5
    noise: float = 0.1
    ring: float = 0.25
    idx_images: str | None = None
    idx_labels: str | None = None
    idx_train_images: str | None = None
    idx_train_labels: str | None = None
    idx_crop: int | None = None


def _default_attacks():
    return {
        GradLossKind.L2: AttackConfig(kind=GradLossKind.L2),
        GradLossKind.COSINE: AttackConfig(kind=GradLossKind.COSINE),
    }


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    output_dir: str = "out"
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    kinds: tuple = (GradLossKind.L2, GradLossKind.COSINE)
    attack: dict = field(default_factory=_default_attacks)
    proxy: ProxyParams = field(default_factory=ProxyParams)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.data.sample_count < 2:
            raise ConfigError("data.sample_count must be >= 2")
        if self.data.source not in ("synthetic", "idx"):
            raise ConfigError("data.source must be 'synthetic' or 'idx'")
        if self.data.source == "idx" and not (self.data.idx_images and self.data.idx_labels):
            raise ConfigError("idx source needs data.idx_images and data.idx_labels")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")
        if not self.kinds:
            raise ConfigError("attack.kinds must name at least one loss kind")
        if self.data.height * self.data.width != self.model.layer_sizes[0]:
            raise ConfigError("image size must equal the model input size")
        if self.model.epochs < 0 or self.model.train_count < 1:
            raise ConfigError("model.epochs must be >= 0 and model.train_count >= 1")
        try:
            self.model.net_spec()
        except GradLeakError as exc:
            raise ConfigError(f"model: {exc}") from exc
        for kind in self.kinds:
            if kind not in self.attack:
                raise ConfigError(f"no attack settings for kind {kind.value}")

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


def _convert(value: str, target_type, key):
    text = value.strip()
    try:
        if target_type in ("int", int):
            return int(text)
        if target_type in ("float", float):
            return float(text)
        if target_type in ("str", str):
            return text
        if target_type in ("str | None", "int | None"):
            if text.lower() in ("", "none"):
                return None
            return int(text) if target_type.startswith("int") else text
        if target_type in ("tuple",):
            return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}: {exc}") from None
    raise ConfigError(f"{key}: unsupported field type {target_type}")


def _field_types(cls):
    return {f.name: f.type for f in fields(cls)}


def _attack_field_types():
    types = _field_types(AttackConfig)
    types.pop("kind")
    types.pop("seed")
    return types


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    top = {"master_seed": base.master_seed, "output_dir": base.output_dir,
           "workers": base.workers}
    model = dataclasses.asdict(base.model)
    data = dataclasses.asdict(base.data)
    proxy = dataclasses.asdict(base.proxy)
    attack = {k: dataclasses.asdict(v) for k, v in base.attack.items()}
    kinds = base.kinds
    sections = {
        "model": (model, _field_types(ModelConfig)),
        "data": (data, _field_types(DataConfig)),
        "proxy": (proxy, _field_types(ProxyParams)),
    }
    top_types = {"master_seed": "int", "output_dir": "str", "workers": "int"}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        parts = key.split(".")
        if len(parts) == 1 and key in top_types:
            top[key] = _convert(value, top_types[key], key)
        elif len(parts) == 2 and parts[0] in sections:
            target, types = sections[parts[0]]
            if parts[1] not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            target[parts[1]] = _convert(value, types[parts[1]], key)
        elif key == "attack.kinds":
            try:
                kinds = tuple(GradLossKind.parse(p) for p in value.split(",") if p.strip())
            except GradLeakError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        elif len(parts) == 3 and parts[0] == "attack":
            try:
                kind = GradLossKind.parse(parts[1])
            except GradLeakError:
                raise ConfigError(f"line {lineno}: unknown key {key!r}") from None
            types = _attack_field_types()
            if parts[2] not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            attack.setdefault(kind, {"kind": kind})[parts[2]] = _convert(
                value, types[parts[2]], key
            )
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")

    try:
        return ExperimentConfig(
            master_seed=top["master_seed"],
            output_dir=top["output_dir"],
            workers=top["workers"],
            model=ModelConfig(**model),
            data=DataConfig(**data),
            kinds=kinds,
            attack={k: AttackConfig(**v) for k, v in attack.items()},
            proxy=ProxyParams(**proxy),
        )
    except ConfigError:
        raise
    except GradLeakError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def _fmt(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, GradLossKind):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(dump_config(c)) == c``."""
    lines = [f"master_seed = {cfg.master_seed}", f"output_dir = {cfg.output_dir}",
             f"workers = {cfg.workers}"]
    for section, obj in (("model", cfg.model), ("data", cfg.data), ("proxy", cfg.proxy)):
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    lines.append("attack.kinds = " + ",".join(k.value for k in cfg.kinds))
    for kind in sorted(cfg.attack, key=lambda k: k.value):
        for name in _attack_field_types():
            lines.append(f"attack.{kind.value}.{name} = {_fmt(getattr(cfg.attack[kind], name))}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, seed=None, out=None) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        changes["master_seed"] = int(seed)
    if out is not None:
        changes["output_dir"] = str(out)
    return replace(cfg, **changes) if changes else cfg
