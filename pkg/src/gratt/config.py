"""Experiment configuration in a flat, commented ``section.key = value`` text form.

Sections mirror the dataclasses they fill: ``decoder.*`` (:class:`DecoderConfig`),
``train.*`` (:class:`TrainConfig`), ``scenario.*`` (:class:`ScenarioSpec`) and
``eval.*`` (:class:`EvalConfig`).  Top-level keys are ``seed``, ``tag``,
``output_dir`` and ``jobs``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from gratt.decoder import DecoderConfig
from gratt.propagation import DEFAULT_MIX, TrainConfig
from gratt.synthworld import ScenarioSpec

OUTPUT_ENV = "GRATT_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Bad key or value; maps to exit status 2."""


@dataclass
class EvalConfig:
    seeds: int = 24
    first_seed: int = 10_000
    scenarios: tuple[str, ...] = DEFAULT_MIX
    threshold: float = 0.1
    checkpoint: str = ""

    def __post_init__(self):
        self.scenarios = tuple(self.scenarios)
        if self.seeds < 1 or not self.scenarios:
            raise ValueError("need at least one evaluation seed and scenario")
        if not self.threshold > 0:
            raise ValueError("match threshold must be positive")


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


@dataclass
class ExperimentConfig:
    seed: int = 0
    tag: str = "run"
    output_dir: str = field(default_factory=default_output_dir)
    jobs: int = 1
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.tag

    def to_items(self) -> list[tuple[str, str]]:
        """Resolved config as (dotted key, text value) pairs in a fixed order."""
        items = [(k, format_value(getattr(self, k))) for k in _TOP]
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                items.append((f"{sec}.{f.name}", format_value(getattr(obj, f.name))))
        return items

    def to_dict(self) -> dict[str, str]:
        return dict(self.to_items())

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_items())


_TOP = ("seed", "tag", "output_dir", "jobs")
_SECTIONS = ("decoder", "train", "scenario", "eval")


def format_value(v) -> str:
    if isinstance(v, Enum):
        return str(v.value)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, template, key: str):
    try:
        if isinstance(template, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(template, Enum):
            return type(template)(text)
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, tuple):
            return tuple(s.strip() for s in text.split(",") if s.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_lines(lines) -> list[tuple[str, str]]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw.strip()!r}")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def build(pairs) -> ExperimentConfig:
    """Apply (key, text) pairs to the defaults; unknown keys are rejected by name."""
    base = ExperimentConfig()
    top = {k: getattr(base, k) for k in _TOP}
    sections = {s: dataclasses.asdict(getattr(base, s)) for s in _SECTIONS}
    for key, text in pairs:
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections or name not in sections[sec]:
                raise ConfigError(f"unknown config key: {key}")
            template = getattr(getattr(base, sec), name)
            sections[sec][name] = _parse_value(text, template, key)
        elif key in top:
            top[key] = _parse_value(text, top[key], key)
        else:
            raise ConfigError(f"unknown config key: {key}")
    try:
        return ExperimentConfig(
            **top,
            decoder=DecoderConfig(**sections["decoder"]),
            train=TrainConfig(**sections["train"]),
            scenario=ScenarioSpec(**sections["scenario"]),
            eval=EvalConfig(**sections["eval"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path: Path | str | None = None, overrides=()) -> ExperimentConfig:
    pairs = []
    if path is not None:
        pairs += parse_lines(Path(path).read_text(encoding="utf-8").splitlines())
    pairs += parse_lines(overrides)
    return build(pairs)


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy with dotted-key changes, e.g. ``replace(cfg, **{"decoder.gating_enabled": "false"})``."""
    pairs = list(cfg.to_items())
    pairs += [(k, format_value(v)) for k, v in changes.items()]
    return build(pairs)
