"""Run configuration: a sectioned INI document with documented defaults.

Unknown sections and keys are rejected with the line they appear on. The
resolved configuration (defaults filled in) is what gets echoed next to
every output.
"""

from __future__ import annotations

import configparser
import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

from .learners import STRATEGIES, LearnerConfig
from .sigmod import CATALOG


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line when known."""


def _ints(text: str) -> list[int]:
    return [int(v) for v in _strs(text)]


def _floats(text: str) -> list[float]:
    return [float(v) for v in _strs(text)]


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip() in ("", "none") else int(text)


# section -> key -> (parser, default); learner keys come from LearnerConfig
_LEARNER_SKIP = {"strategy", "budget", "memory_policy", "seed", "length"}
# desk-scale defaults that differ from the library's LearnerConfig: fewer
# epochs to fit a single core, a larger step with gradient clipping so the
# shallow network trains in that budget without dead units
DESK_LEARNER = {"epochs_per_task": 12, "lr": 0.02, "grad_clip": 1.0}
_LEARNER_PARSERS = {
    bool: _bool, int: int, float: float, "tuple[float, ...]": _floats, "tuple[int, ...]": _ints,
}


def _learner_schema() -> dict:
    base = LearnerConfig()
    out = {"strategy": (_strs, list(STRATEGIES)), "seed": (int, 0)}
    for f in fields(LearnerConfig):
        if f.name in _LEARNER_SKIP:
            continue
        value = DESK_LEARNER.get(f.name, getattr(base, f.name))
        parser = _LEARNER_PARSERS.get(f.type) or _LEARNER_PARSERS[type(value)]
        out[f.name] = (parser, list(value) if isinstance(value, tuple) else value)
    return out


SCHEMA = {
    "dataset": {
        "catalog": (_strs, list(CATALOG)),
        "snr_db": (_ints, [20]),
        "frames_per_class": (int, 500),
        "length": (int, 256),
        "seed": (int, 0),
        "split_fraction": (float, 0.2),
        "sps": (int, 2),
        "beta": (float, 0.35),
        "span": (int, 8),
        "path": (str, ""),
    },
    "schedule": {
        "m": (int, 2),
        "k": (int, 2),
        "class_seed": (_opt_int, None),
    },
    "learner": _learner_schema(),
    "memory": {
        "budget": (int, 400),
        "policy": (str, "auto"),
    },
    "output": {
        "directory": (str, "out"),
        "formats": (_strs, ["csv", "svg"]),
        "timing": (_bool, True),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: copy.deepcopy(d) for k, (_, d) in keys.items()}
                                                  for s, keys in SCHEMA.items()})
    source: str | None = None

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def strategies(self) -> list[str]:
        return list(self["learner"]["strategy"])

    @property
    def class_seed(self) -> int:
        cs = self["schedule"]["class_seed"]
        return self["learner"]["seed"] if cs is None else cs

    def learner_config(self, strategy: str, seed: int | None = None, budget: int | None = None) -> LearnerConfig:
        kw = {k: v for k, v in self["learner"].items() if k not in ("strategy", "seed")}
        return LearnerConfig(
            strategy=strategy,
            seed=self["learner"]["seed"] if seed is None else seed,
            budget=self["memory"]["budget"] if budget is None else budget,
            memory_policy=self["memory"]["policy"],
            length=self["dataset"]["length"],
            **kw,
        )

    def dataset_kwargs(self) -> dict:
        d = self["dataset"]
        return {"snr_list": tuple(d["snr_db"]), "frames_per_class_per_snr": d["frames_per_class"],
                "length": d["length"], "seed": d["seed"], "test_fraction": d["split_fraction"],
                "sps": d["sps"], "beta": d["beta"], "span": d["span"]}

    def to_text(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for key, value in keys.items():
                lines.append(f"{key} = {_render(value)}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number of each ``key`` under each ``[section]`` header."""
    where = {}
    section = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            where.setdefault((section, ""), n)
            continue
        for sep in ("=", ":"):
            if sep in line:
                where.setdefault((section, line.split(sep, 1)[0].strip().lower()), n)
                break
    return where


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{source}:{lineno}: cannot parse {line.strip()!r}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc.message}") from None
    where = _key_lines(text)
    cfg = RunConfig(source=source)
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}:{where.get((section, ''), '?')}: unknown section [{section}]")
        for key, raw in parser.items(section):
            line = where.get((section, key), "?")
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}:{line}: unknown key {key!r} in [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for {section}.{key}: {exc}") from None
    validate(cfg, where, source)
    return cfg


def validate(cfg: RunConfig, where=None, source: str = "<config>") -> None:
    where = where or {}

    def fail(section, key, msg):
        raise ConfigError(f"{source}:{where.get((section, key), '?')}: {section}.{key}: {msg}")

    for s in cfg.strategies:
        if s not in STRATEGIES:
            fail("learner", "strategy", f"unknown strategy {s!r}")
    if not cfg.strategies:
        fail("learner", "strategy", "no strategy given")
    unknown = set(cfg["dataset"]["catalog"]) - set(CATALOG)
    if unknown:
        fail("dataset", "catalog", f"unknown schemes {sorted(unknown)}")
    if cfg["memory"]["policy"] not in ("auto", "herding", "random"):
        fail("memory", "policy", "expected auto, herding or random")
    for fmt in cfg["output"]["formats"]:
        if fmt not in ("csv", "svg"):
            fail("output", "formats", f"unknown format {fmt!r}")
    try:
        cfg.learner_config(cfg.strategies[0])
    except ValueError as exc:
        raise ConfigError(f"{source}: [learner] {exc}") from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
