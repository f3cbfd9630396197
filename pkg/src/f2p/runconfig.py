"""Plain-text ``key = value`` run configuration with strict key checking.

Keys are either top-level (``seed``, ``out``, ...) or ``section.field`` where
the section is one of the stage configs.  Unknown keys are errors.  Each
section's ``seed`` follows the global seed unless set explicitly.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataset import DEFAULT_PATTERN, MASK_PATTERN
from .embedding import EmbedConfig
from .enhancer import EnhancerConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .pipeline import FineTuneConfig, PreprocessConfig


@dataclass
class SynthSettings:
    n_ids: int = 20
    impressions: int = 4
    sessions: int = 2
    size: int = 72
    seed: int = 0


def desk_fusion() -> FusionConfig:
    return FusionConfig(image_size=64, encoder_channels=(16, 32, 64), epochs=12, lr=1e-3, batch_size=8,
                        split=(0.85, 0.15, 0.0))


def desk_enhancer() -> EnhancerConfig:
    return EnhancerConfig(image_size=64, channels=(16, 32, 64), epochs=12, lr=1e-3, batch_size=8,
                          split=(0.85, 0.15, 0.0))


def desk_embed() -> EmbedConfig:
    return EmbedConfig(input_size=64, dim=128, epochs=30, lr=1e-3, width=16)


SECTIONS = ("synth", "pre", "fusion", "enhancer", "embed", "finetune")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "work"
    spatial_transform: bool = False
    dim: int = 128
    data_root: str = ""                  # empty: <out>/data
    pattern: str = DEFAULT_PATTERN
    mask_pattern: str = MASK_PATTERN
    train_sessions: tuple = (1,)
    distill_after: int = 15
    fusion_ckpt: str = ""                # empty: <out>/models/<stage>.ckpt
    enhancer_ckpt: str = ""
    embedder_ckpt: str = ""
    synth: SynthSettings = field(default_factory=SynthSettings)
    pre: PreprocessConfig = field(default_factory=PreprocessConfig)
    fusion: FusionConfig = field(default_factory=desk_fusion)
    enhancer: EnhancerConfig = field(default_factory=desk_enhancer)
    embed: EmbedConfig = field(default_factory=desk_embed)
    finetune: FineTuneConfig = field(default_factory=lambda: FineTuneConfig(lr=1e-5))

    @property
    def work(self) -> Path:
        return Path(self.out)

    @property
    def root(self) -> Path:
        return Path(self.data_root) if self.data_root else self.work / "data"

    def checkpoint(self, stage: str) -> Path:
        given = getattr(self, f"{stage}_ckpt")
        return Path(given) if given else self.work / "models" / f"{stage}.ckpt"


def _field_types(obj) -> dict:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints.get(f.name, type(getattr(obj, f.name))) for f in fields(obj)}


def _parse_value(raw: str, current, hint, key: str):
    raw = raw.strip()
    text = str(hint)
    if "float" in text and "str" in text:
        # a union such as ``float | str`` (a threshold or "auto")
        try:
            return float(raw)
        except ValueError:
            return raw
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.strip("()[]").split(",") if p.strip()]
            kind = type(current[0]) if current else float
            return tuple(kind(p) for p in parts)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if current is None or isinstance(current, str):
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported type for {key}")


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def apply(cfg: RunConfig, pairs, explicit: set | None = None) -> RunConfig:
    """Apply ``(key, value)`` overrides in order; returns a new config."""
    top = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    sections = {s: dataclasses.asdict(top[s]) for s in SECTIONS}
    for s in SECTIONS:
        for k, v in sections[s].items():
            if isinstance(v, list):
                sections[s][k] = tuple(v)
    top_hints = typing.get_type_hints(RunConfig)
    explicit = set() if explicit is None else explicit
    for key, raw in pairs:
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section {sec!r} in key {key!r}")
            obj = top[sec]
            hints = _field_types(obj)
            if name not in sections[sec]:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = _parse_value(raw, sections[sec][name], hints.get(name), key)
        else:
            if key not in top or key in SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _parse_value(raw, top[key], top_hints.get(key), key)
        explicit.add(key)
    for s in SECTIONS:
        if "seed" in sections[s] and f"{s}.seed" not in explicit:
            sections[s]["seed"] = top["seed"]
    if "embed.dim" not in explicit:
        sections["embed"]["dim"] = top["dim"]
    elif "dim" not in explicit:
        top["dim"] = sections["embed"]["dim"]
    try:
        built = {s: type(top[s])(**sections[s]) for s in SECTIONS}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    top.update(built)
    out = RunConfig(**top)
    if out.dim not in (128, 256):
        raise ConfigError("dim must be 128 or 256")
    return out


def load(path=None, overrides=()) -> RunConfig:
    pairs = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        pairs = parse_pairs(p.read_text(), str(p))
    return apply(RunConfig(), list(pairs) + list(overrides))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump(cfg: RunConfig) -> str:
    """Every key, sorted within sections; round-trips through :func:`load`."""
    lines = []
    for f in fields(cfg):
        if f.name in SECTIONS:
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for s in SECTIONS:
        obj = getattr(cfg, s)
        lines.append("")
        for f in fields(obj):
            lines.append(f"{s}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.txt"
    path.write_text(dump(cfg))
    return path
