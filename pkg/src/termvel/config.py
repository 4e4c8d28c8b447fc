"""Run configuration: a typed INI document with one section per component.

Unknown sections or keys are rejected with the offending line number, and
:func:`dumps` emits a canonical form (fixed section and key order) so that
``loads(dumps(cfg)) == cfg``.
"""
from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field

from .errors import ConfigError
from .network import ModelConfig
from .objective import ObjectiveConfig
from .schedules import CfgSamplerConfig, TimeSamplerConfig


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("need lr >= 0, eps > 0, weight_decay >= 0")
        return self


@dataclass
class EmaConfig:
    target: float = 0.99
    eval: float = 0.9999

    def validate(self):
        if not (0 <= self.target <= 1 and 0 <= self.eval <= 1):
            raise ValueError("EMA rates must lie in [0, 1]")
        return self


@dataclass
class TaskConfig:
    kind: str = "toy"  # "toy" or "gaussian"
    name: str = "8-gaussians"
    conditional: bool = False
    mu0: tuple = (1.0, -1.0)
    sigma0: float = 0.5
    eval_count: int = 1024

    def validate(self):
        from .oracles import TOY_DATASETS
        if self.kind not in ("toy", "gaussian"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "toy" and self.name not in TOY_DATASETS:
            raise ValueError(f"unknown toy dataset {self.name!r}")
        if self.kind == "gaussian" and self.conditional:
            raise ValueError("the Gaussian task is unconditional")
        if not self.sigma0 > 0 or self.eval_count < 1:
            raise ValueError("need sigma0 > 0 and eval_count >= 1")
        return self


@dataclass
class RunSection:
    steps: int = 20000
    batch: int = 256
    seed: int = 0
    checkpoint_every: int = 5000
    log_every: int = 1

    def validate(self):
        if self.steps < 0 or self.batch < 1 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("need steps >= 0, batch >= 1, checkpoint_every >= 1, log_every >= 1")
        return self


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    sampler: TimeSamplerConfig = field(default_factory=TimeSamplerConfig)
    cfg: CfgSamplerConfig = field(default_factory=CfgSamplerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    def validate(self):
        for f in dataclasses.fields(self):
            try:
                getattr(self, f.name).validate()
            except ValueError as e:
                raise ConfigError(f"[{f.name}] {e}") from None
        if self.task.kind == "toy":
            from .oracles import toy_label_count
            want = toy_label_count(self.task.name) if self.task.conditional else 0
        else:
            want = 0
        if self.model.label_count != want:
            raise ConfigError(f"[model] label_count must be {want} for this task")
        if self.model.input_dim != self.task_dim():
            raise ConfigError(f"[model] input_dim must be {self.task_dim()} for this task")
        return self

    def task_dim(self):
        return 2 if self.task.kind == "toy" else len(self.task.mu0)


SECTIONS = [f.name for f in dataclasses.fields(RunConfig)]


def _parse_value(raw: str, default, key):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    return raw


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


_KEY_RE = re.compile(r"^\s*([^=:\s][^=:]*?)\s*[=:]")
_SEC_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_index(text):
    """``(section, key) -> line number`` and ``section -> line number``."""
    keys, secs, sec = {}, {}, None
    for no, line in enumerate(text.splitlines(), 1):
        if line.lstrip().startswith(("#", ";")):
            continue
        m = _SEC_RE.match(line)
        if m:
            sec = m.group(1).strip()
            secs.setdefault(sec, no)
            continue
        m = _KEY_RE.match(line)
        if m and sec is not None:
            keys.setdefault((sec, m.group(1).strip().lower()), no)
    return keys, secs


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.option!r} in [{e.section}]", e.lineno) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno) from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any section", e.lineno) from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ConfigError("malformed line", lineno) from None
    keys, secs = _line_index(text)
    cfg = RunConfig()
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", secs.get(sec))
        target = getattr(cfg, sec)
        known = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in parser.items(sec):
            line = keys.get((sec, key))
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", line)
            try:
                setattr(target, key, _parse_value(raw, getattr(target, key), key))
            except ValueError as e:
                raise ConfigError(f"[{sec}] {key}: {e}", line) from None
    return cfg.validate()


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(cfg: RunConfig) -> str:
    out = []
    for sec in SECTIONS:
        out.append(f"[{sec}]")
        for f in dataclasses.fields(getattr(cfg, sec)):
            out.append(f"{f.name} = {_format_value(getattr(getattr(cfg, sec), f.name))}")
        out.append("")
    return "\n".join(out)
