"""Run configuration: flat ``key = value`` text with section headers.

The canonical dump is stable (fixed section and key order, ``repr`` floats),
so ``parse(dump(cfg)) == cfg`` and the SHA-256 of the dump identifies a run.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field

from .experiments import TrainConfig
from .models import Dims

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSection:
    seed: int = 0
    n_samples: int = 64
    d_x: int = 4
    d_y: int = 2
    d_h: int = 4
    L: int = 2
    phi: str = "tanh"


@dataclass(frozen=True)
class TrainingSection:
    seed: int = 0
    eta: float = 1e-2
    N: int = 50
    risk_threshold: float = 1e-3
    init: str = "perturb"
    init_scale: float = 0.15
    estimate_every: int = 1


@dataclass(frozen=True)
class CriticSection:
    widths: tuple = (16, 16)
    n_critic: int = 5
    clip: float = 0.01
    eta: float = 100.0
    init: str = "xavier"


@dataclass(frozen=True)
class ProbeSection:
    epsilons: tuple = (0.1, 0.05, 0.01)
    critic_steps: int = 500
    max_certificates: int = 20


@dataclass(frozen=True)
class OutputSection:
    directory: str = "runs/default"
    formats: tuple = ("dat", "svg")


@dataclass(frozen=True)
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    critic: CriticSection = field(default_factory=CriticSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    output: OutputSection = field(default_factory=OutputSection)

    def dims(self) -> Dims:
        t = self.task
        return Dims(t.d_x, t.d_y, t.d_h, t.L, critic_widths=self.critic.widths, phi=t.phi)

    def train_config(self) -> TrainConfig:
        tr, cr = self.training, self.critic
        return TrainConfig(
            eta=tr.eta, N=tr.N, n_critic=cr.n_critic, clip=cr.clip, critic_eta=cr.eta,
            init=tr.init, init_scale=tr.init_scale, critic_init=cr.init,
            estimate_every=tr.estimate_every, risk_threshold=tr.risk_threshold,
        )

    def replace(self, section: str, **changes) -> "RunConfig":
        sec = dataclasses.replace(getattr(self, section), **changes)
        cfg = dataclasses.replace(self, **{section: sec})
        validate(cfg)
        return cfg


SECTIONS = ("task", "training", "critic", "probe", "output")


def _fields(section_cls):
    return {f.name: f for f in dataclasses.fields(section_cls)}


def _convert(section: str, key: str, default, raw: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def validate(cfg: RunConfig) -> None:
    t, tr, cr, pr = cfg.task, cfg.training, cfg.critic, cfg.probe
    for name in ("n_samples", "d_x", "d_y", "d_h", "L"):
        if getattr(t, name) < 1:
            raise ConfigError(f"[task] {name} must be positive")
    if t.seed < 0 or tr.seed < 0:
        raise ConfigError("seeds must be non-negative")
    if t.phi not in ("tanh", "mlp"):
        raise ConfigError("[task] phi must be tanh or mlp")
    if tr.eta < 0 or tr.N < 0 or tr.estimate_every < 0:
        raise ConfigError("[training] eta, N and estimate_every must be non-negative")
    if not tr.risk_threshold > 0:
        raise ConfigError("[training] risk_threshold must be positive")
    if tr.init not in ("perturb", "xavier", "teacher"):
        raise ConfigError("[training] init must be perturb, xavier or teacher")
    if not cr.widths or any(w < 1 for w in cr.widths):
        raise ConfigError("[critic] widths must be positive")
    if cr.n_critic < 0 or not cr.clip > 0 or cr.eta < 0:
        raise ConfigError("[critic] n_critic >= 0, clip > 0, eta >= 0 required")
    if cr.init not in ("xavier", "zero"):
        raise ConfigError("[critic] init must be xavier or zero")
    if not pr.epsilons or any(not e > 0 for e in pr.epsilons):
        raise ConfigError("[probe] epsilons must be positive")
    if pr.critic_steps < 0 or pr.max_certificates < 1:
        raise ConfigError("[probe] critic_steps >= 0 and max_certificates >= 1 required")
    bad = set(cfg.output.formats) - {"dat", "svg"}
    if bad:
        raise ConfigError(f"[output] unknown formats {sorted(bad)}")


def parse(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse config text; ``overrides`` maps ``"section.key"`` to raw strings."""
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    raw = {s: dict(parser.items(s)) if parser.has_section(s) else {} for s in SECTIONS}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section in override {dotted!r}")
        raw[section][key] = value
    sections = {}
    for s in SECTIONS:
        cls = type(getattr(RunConfig(), s))
        fields = _fields(cls)
        values = {}
        for key, val in raw[s].items():
            if key not in fields:
                raise ConfigError(f"unknown key [{s}] {key}")
            values[key] = _convert(s, key, fields[key].default, val)
        sections[s] = cls(**values)
    cfg = RunConfig(**sections)
    validate(cfg)
    return cfg


def dump(cfg: RunConfig, include_output: bool = True) -> str:
    """Canonical text; without the output section it defines the experiment alone."""
    lines = []
    for s in SECTIONS if include_output else SECTIONS[:-1]:
        sec = getattr(cfg, s)
        lines.append(f"[{s}]")
        for f in dataclasses.fields(sec):
            lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the experiment-defining sections; where outputs go does not count."""
    return hashlib.sha256(dump(cfg, include_output=False).encode()).hexdigest()


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def flag_specs():
    """(flag, dotted key, default) for every config field."""
    out = []
    for s in SECTIONS:
        for f in dataclasses.fields(type(getattr(RunConfig(), s))):
            out.append((f"--{s}-{f.name.replace('_', '-')}", f"{s}.{f.name}", f.default))
    return out
