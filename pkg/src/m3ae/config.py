"""Run configuration: TOML sections with reference-scale defaults and dotted overrides.

Every section is a dataclass. Unknown sections or keys are rejected with their
location, values are type-checked against the field annotations, and the
resolved configuration (defaults + file + overrides) is what gets echoed into
each run directory.
"""
import json
import sys
import types
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from m3ae.errors import ConfigError
from m3ae.model import ModelConfig
from m3ae.ood import OodConfig
from m3ae.synthetic import SyntheticShapesSpec
from m3ae.train import FinetuneConfig, PretrainConfig, ProbeConfig


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs"


@dataclass
class DataSection:
    manifest: str = ""
    eval_manifest: str = ""  # labeled data for probe / finetune; defaults to ``manifest``
    ood_manifest: str = ""  # out-of-distribution set for ``ood``
    r_img: float = 0.75
    r_txt: float = 0.75
    paired_fraction: typing.Optional[float] = None  # None keeps the manifest's captions
    augment: bool = True
    crop_scale: tuple = (0.5, 1.0)


@dataclass
class ModelSection:
    preset: str = "tiny"
    image_size: typing.Optional[int] = None
    patch_size: typing.Optional[int] = None
    max_text_len: typing.Optional[int] = None
    enc_dim: typing.Optional[int] = None
    enc_depth: typing.Optional[int] = None
    enc_heads: typing.Optional[int] = None
    dec_dim: typing.Optional[int] = None
    dec_depth: typing.Optional[int] = None
    dec_heads: typing.Optional[int] = None

    def build(self, vocab_size):
        extra = {k: v for k, v in asdict(self).items() if k != "preset" and v is not None}
        return ModelConfig.from_preset(self.preset, vocab_size=vocab_size, **extra)


@dataclass
class PretrainSection:
    epochs: float = 50
    batch_size: int = 4096
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: float = 5
    final_lr: float = 0.0
    w_img: float = 1.0
    w_txt: float = 0.5
    norm_pix: bool = False
    checkpoint_every: int = 0
    log_wall_time: bool = False
    stop_at: typing.Optional[int] = None  # stop early at this step (checkpoint stays resumable)


@dataclass
class ExportSection:
    checkpoint: str = ""
    n: int = 8
    r_img: float = 0.75
    r_txt: float = 0.75
    fill: int = 128
    index: int = 0
    tokens: typing.Optional[list] = None
    patches: typing.Optional[list] = None
    layer: int = -1
    label_key: str = "label"


@dataclass
class SweepSection:
    ratios: list = field(default_factory=lambda: [0.15, 0.25, 0.5, 0.75, 0.9])


@dataclass
class GradCheckSection:
    tol_ops: float = 1e-4
    tol_model: float = 1e-3
    n_samples: int = 30


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "probe": ProbeConfig,
    "finetune": FinetuneConfig,
    "ood": OodConfig,
    "export": ExportSection,
    "sweep": SweepSection,
    "synthetic": SyntheticShapesSpec,
    "grad_check": GradCheckSection,
}


class RunConfig:
    """One dataclass instance per section, reachable as attributes."""

    def __init__(self, sections=None):
        sections = sections or {}
        for name, cls in SECTIONS.items():
            setattr(self, name, sections.get(name) or cls())

    def to_dict(self):
        return {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def pretrain_config(self):
        p, d = self.pretrain, self.data
        values = {k: v for k, v in asdict(p).items() if k != "stop_at"}
        return PretrainConfig(**values, r_img=d.r_img, r_txt=d.r_txt, augment=d.augment,
                              crop_scale=tuple(d.crop_scale), paired_fraction=d.paired_fraction,
                              seed=self.run.seed)


def _plain(x):
    if isinstance(x, tuple):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    return x


def _coerce(value, annotation, where):
    """Check ``value`` against a field annotation; returns the converted value."""
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where)
    if annotation is bool:
        if isinstance(value, bool):
            return value
    elif annotation is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif annotation is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif annotation is str:
        if isinstance(value, str):
            return value
    elif annotation in (tuple, list) or origin in (tuple, list):
        if isinstance(value, (list, tuple)):
            return tuple(value) if (annotation is tuple or origin is tuple) else list(value)
    else:
        return value
    raise ConfigError(f"{where}: expected {getattr(annotation, '__name__', annotation)}, "
                      f"got {value!r}")


def _apply(values, section_name, updates, source):
    cls = SECTIONS[section_name]
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key, value in updates.items():
        where = f"{source}: {section_name}.{key}"
        if key not in known:
            raise ConfigError(f"{where}: unknown key (known: {', '.join(sorted(known))})")
        values[key] = _coerce(value, hints[key], where)


def parse_override(text):
    """``"section.key=value"`` -> ``(section, key, value)``; value parsed as a TOML literal."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {path!r} must be section.key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()  # bare strings need no quoting on the command line
    return parts[0], parts[1], value


def load_config(path=None, overrides=()):
    """Resolve defaults, then the TOML file at ``path``, then each override in order."""
    raw = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    values = {name: {} for name in SECTIONS}
    for name, body in raw.items():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}] (known: {', '.join(SECTIONS)})")
        if not isinstance(body, dict):
            raise ConfigError(f"{source}: [{name}] must be a table")
        _apply(values[name], name, body, source)
    for text in overrides:
        section, key, value = parse_override(text)
        if section not in SECTIONS:
            raise ConfigError(f"--override {text}: unknown section {section!r}")
        _apply(values[section], section, {key: value}, f"--override {text}")
    return RunConfig({name: SECTIONS[name](**v) for name, v in values.items()})
