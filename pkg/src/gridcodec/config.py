"""Run configuration files: flat INI with [train] and [run] sections.

Every TrainConfig field can be set under [train]; run-level settings (scene,
output paths, sweep lambdas) live under [run].  Unknown keys or sections are
rejected so typos fail loudly.  The schema is documented in docs/config.md.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .field import FIELD_KINDS
from .model import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, missing file)."""


DEFAULT_LAMBDAS = (0.0, 0.7e-3, 2e-3, 4e-3, 8e-3)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    field_kind: str = "shell"
    field_seed: int = 0
    lambdas: tuple = DEFAULT_LAMBDAS

    def __post_init__(self):
        if self.field_kind not in FIELD_KINDS:
            raise ConfigError(
                f"unknown field kind {self.field_kind!r}; pick from {FIELD_KINDS}"
            )


def _parse_value(name: str, text: str, kind):
    text = text.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if kind == int | None:
            return None if text in ("", "none") else int(text)
        if kind is tuple or str(kind).startswith("tuple"):
            if not text:
                return ()
            return tuple(
                float(t) if "." in t or "e" in t.lower() else int(t)
                for t in text.replace(",", " ").split()
            )
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {text!r}") from exc
    raise ConfigError(f"cannot parse config key {name!r}")


def load_config(path: str) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    allowed_sections = {"train", "run"}
    extra = set(parser.sections()) - allowed_sections
    if extra:
        raise ConfigError(f"unknown config section(s): {sorted(extra)}")

    train_fields = {f.name: f for f in fields(TrainConfig)}
    train_kwargs = {}
    if parser.has_section("train"):
        for key, value in parser.items("train"):
            if key not in train_fields:
                raise ConfigError(f"unknown [train] key: {key!r}")
            f = train_fields[key]
            kind = TrainConfig.__annotations__[key]
            if key == "ld":
                train_kwargs[key] = (None if value.strip() in ("", "none", "0")
                                     else int(value))
            elif key == "hidden":
                train_kwargs[key] = tuple(
                    int(t) for t in value.replace(",", " ").split()
                )
            elif isinstance(f.default, bool):
                train_kwargs[key] = parser.getboolean("train", key)
            elif isinstance(f.default, int):
                train_kwargs[key] = _parse_value(key, value, int)
            elif isinstance(f.default, float):
                train_kwargs[key] = _parse_value(key, value, float)
            else:
                train_kwargs[key] = _parse_value(key, value, str)
    try:
        train = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    run_kwargs = {}
    run_fields = {"field_kind": str, "field_seed": int, "lambdas": tuple}
    if parser.has_section("run"):
        for key, value in parser.items("run"):
            if key not in run_fields:
                raise ConfigError(f"unknown [run] key: {key!r}")
            if key == "lambdas":
                run_kwargs[key] = tuple(
                    float(t) for t in value.replace(",", " ").split()
                )
            else:
                run_kwargs[key] = _parse_value(key, value, run_fields[key])
    return RunConfig(train=train, **run_kwargs)


def dump_config(cfg: RunConfig) -> str:
    """Resolved config as INI text; embedded in every run's outputs."""
    lines = ["[train]"]
    for f in fields(TrainConfig):
        v = getattr(cfg.train, f.name)
        if f.name == "ld":
            v = "" if v is None else v
        elif f.name == "hidden":
            v = " ".join(str(h) for h in v)
        lines.append(f"{f.name} = {v}")
    lines += [
        "",
        "[run]",
        f"field_kind = {cfg.field_kind}",
        f"field_seed = {cfg.field_seed}",
        "lambdas = " + " ".join(repr(l) for l in cfg.lambdas),
        "",
    ]
    return "\n".join(lines)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply CLI flag overrides; None values are skipped."""
    train_names = {f.name for f in fields(TrainConfig)}
    train_kwargs, run_kwargs = {}, {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in train_names:
            train_kwargs[key] = value
        elif key in ("field_kind", "field_seed", "lambdas"):
            run_kwargs[key] = value
        else:
            raise ConfigError(f"unknown override {key!r}")
    try:
        train = dataclasses.replace(cfg.train, **train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return dataclasses.replace(cfg, train=train, **run_kwargs)
