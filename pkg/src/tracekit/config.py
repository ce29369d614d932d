"""Run configuration: a typed INI file whose sections mirror the pipeline stages.

Every key has a type and a default; unknown sections or keys are errors.
Seed ranges are written ``A..B`` and include both ends.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .gateway import GatewayConfig
from .grpo import TrainerConfig


class ConfigError(ValueError):
    pass


def parse_seed_range(text: str) -> list[int]:
    """``"A..B"`` (inclusive), a single integer, or a comma-separated list."""
    text = text.strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            seeds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed range {text!r}") from exc
    if ".." not in text:
        if not seeds:
            raise ConfigError(f"empty seed list {text!r}")
        return seeds
    if hi < lo:
        raise ConfigError(f"empty seed range {text!r}")
    return list(range(lo, hi + 1))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none", "default") else float(text)


def _opt_str(text: str) -> Optional[str]:
    return text.strip() or None


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {t!r}")
        return t
    return parse


def _seeds(text: str) -> str:
    parse_seed_range(text)
    return text.strip()


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "global_seed": (int, 0),
        "workers": (int, 1),
        "out_dir": (str, "runs/default"),
    },
    "gateway": {
        "mode": (_choice("mock", "http"), "mock"),
        "endpoint": (str, "http://localhost:8000/v1"),
        "model": (str, "default"),
        "timeout": (float, 120.0),
        "max_retries": (int, 2),
        "max_in_flight": (int, 8),
        "audit_log": (_opt_str, None),
    },
    "rollout": {
        "env": (str, "device_suite"),
        "policy": (_choice("device", "bandit", "gateway"), "device"),
        "seeds": (_seeds, "0..199"),
        "temperature": (float, 1.0),
        "max_steps": (int, 50),
    },
    "analysis": {
        "runs": (int, 10),
        "delta": (float, 0.20),
        "rho": (float, 0.10),
        "min_fraction": (float, 0.8),
        "discoverer": (_choice("scripted", "llm"), "scripted"),
        "labeler": (_choice("rules", "llm"), "rules"),
        "dictionary": (str, "device"),
    },
    "trainer": {
        "learning_rate": (_opt_float, None),
        "max_iterations": (int, 40),
        "clip_epsilon": (float, 0.2),
        "std_epsilon": (float, 1e-6),
        "groups_per_iter": (int, 16),
        "group_size": (int, 8),
        "rollout_temperature": (float, 1.0),
        "rank": (int, 4),
        "optimizer": (_choice("sgd", "adamw"), "sgd"),
        "weight_decay": (float, 0.0),
        "updates_per_wave": (int, 4),
        "seed": (int, 0),
    },
    "routing": {
        "router": (_choice("gateway", "builtin"), "gateway"),
        "exemplar_seeds": (_seeds, "0..99"),
        "eval_env": (_opt_str, None),
        "eval_seeds": (_seeds, "100000..100099"),
        "eval_temperature": (float, 0.0),
    },
    "paths": {
        "dataset": (_opt_str, None),
        "capabilities": (_opt_str, None),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    source: Optional[Path] = None
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def global_seed(self) -> int:
        return self.values["run"]["global_seed"]

    @property
    def workers(self) -> int:
        return self.values["run"]["workers"]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.values["run"]["out_dir"])

    def gateway_config(self) -> GatewayConfig:
        g = self.values["gateway"]
        audit = str(self.resolve(g["audit_log"])) if g["audit_log"] else None
        return GatewayConfig(endpoint=g["endpoint"], model=g["model"], timeout=g["timeout"],
                             max_retries=g["max_retries"], max_in_flight=g["max_in_flight"],
                             audit_path=audit)

    def trainer_config(self) -> TrainerConfig:
        t = dict(self.values["trainer"])
        t.pop("seed")
        return TrainerConfig(max_steps=self.values["rollout"]["max_steps"], workers=self.workers, **t)

    def seeds(self, section: str, key: str) -> list[int]:
        return parse_seed_range(self.values[section][key])

    def to_ini(self) -> str:
        """Canonical text of the full resolved configuration."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                v = self.values[section][key]
                lines.append(f"{key} = {'' if v is None else v}")
            lines.append("")
        return "\n".join(lines)

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = value

    def validate(self) -> None:
        """Cross-field checks and path resolution; raises ConfigError."""
        try:
            self.trainer_config()
            self.gateway_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        from .core import env_names

        known = env_names()
        for section, key in (("rollout", "env"), ("routing", "eval_env")):
            name = self.values[section][key]
            if name is not None and name not in known:
                raise ConfigError(f"[{section}] {key}: unknown environment {name!r}")
        a = self.values["analysis"]
        if a["runs"] < 1:
            raise ConfigError("[analysis] runs must be >= 1")
        if not 0.0 < a["min_fraction"] <= 1.0:
            raise ConfigError("[analysis] min_fraction must lie in (0, 1]")
        if self.workers < 1:
            raise ConfigError("[run] workers must be >= 1")
        for key, path in self.values["paths"].items():
            if path is not None and not self.resolve(path).exists():
                raise ConfigError(f"[paths] {key}: {path} does not exist")
        d = a["dictionary"]
        if d != "device" and not self.resolve(d).exists():
            raise ConfigError(f"[analysis] dictionary: {d} is neither 'device' nor an existing file")


def defaults() -> RunConfig:
    return RunConfig({s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text: str, source: Optional[Path] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text, source=str(source) if source else "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = defaults()
    cfg.source = source
    if source is not None:
        cfg.base_dir = source.resolve().parent
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            parser = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return cfg


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    cfg = parse_config(path.read_text(encoding="utf-8"), path)
    cfg.validate()
    return cfg
