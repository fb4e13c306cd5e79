"""Run configuration: flat ``key = value`` files with one section per module.

Example::

    [mesh]
    eps0 = 0.01
    h = 0.06

    [problem]
    lambda = 2.0

Unknown sections or keys, and values that do not parse, raise
:class:`ConfigError` with the offending line number.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from cavfem.energy import MaterialModel
from cavfem.meshgen import MeshConfig
from cavfem.solver import SolveSettings


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemConfig:
    lam: float = 2.0
    oracle_K: int = 2048


@dataclass(frozen=True)
class StudyConfig:
    hs: tuple[float, ...] = (0.06, 0.04, 0.03, 0.02, 0.01)
    eps0s: tuple[float, ...] = (0.01,)
    solve: bool = True
    workers: int = 1
    timing: bool = True  # false blanks wall_ms so the CSV is byte-reproducible


@dataclass(frozen=True)
class RunOptions:
    out_dir: str = "out"
    retry_halve_c1: bool = False
    max_retries: int = 6
    cache_dir: str = ""
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    mesh: MeshConfig = field(default_factory=lambda: MeshConfig(eps0=0.01, h=0.06))
    material: MaterialModel = field(default_factory=MaterialModel)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    solver: SolveSettings = field(default_factory=SolveSettings)
    study: StudyConfig = field(default_factory=StudyConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def settings(self) -> SolveSettings:
        """Solver settings with the problem's boundary stretch."""
        return dataclasses.replace(self.solver, lam=self.problem.lam)


# config-file key -> dataclass field, where they differ
_ALIASES = {("problem", "lambda"): "lam", ("output", "dir"): "out_dir"}
_SECTIONS = {
    "mesh": "mesh",
    "material": "material",
    "problem": "problem",
    "solver": "solver",
    "study": "study",
    "output": "run",
}
_SKIP = {("solver", "lam")}  # carried by [problem] lambda


def _key_for(section: str, name: str) -> str:
    for (sec, key), fname in _ALIASES.items():
        if sec == section and fname == name:
            return key
    return name


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _parse(raw: str, proto, typ: str):
    raw = raw.strip()
    if "tuple" in typ:
        return tuple(float(x) for x in raw.replace(",", " ").split())
    if "bool" in typ:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "None" in typ and raw.lower() in ("none", ""):
        return None
    if "int" in typ and "float" not in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw


def to_ini(cfg: RunConfig) -> str:
    lines = []
    for sec, attr in _SECTIONS.items():
        obj = getattr(cfg, attr)
        lines.append(f"[{sec}]")
        for f in fields(obj):
            if not f.init or (sec, f.name) in _SKIP:
                continue
            lines.append(f"{_key_for(sec, f.name)} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    out, sec = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            sec = s[1:-1].strip()
        elif "=" in s and not s.startswith(("#", ";")) and sec:
            out[(sec, s.split("=", 1)[0].strip().lower())] = no
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep case; keys are matched case-insensitively below
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lines = _line_numbers(text)
    base = RunConfig()
    parts = {}
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{sec}]")
    for sec, attr in _SECTIONS.items():
        proto = getattr(base, attr)
        kw = {}
        flds = {_key_for(sec, f.name).lower(): f for f in fields(proto) if f.init and (sec, f.name) not in _SKIP}
        if cp.has_section(sec):
            seen = set()
            for name, raw in cp.items(sec):
                key = name.lower()
                where = f"{source}:{lines.get((sec, key), '?')}"
                if key in seen:
                    raise ConfigError(f"{where}: duplicate key {name!r} in [{sec}]")
                seen.add(key)
                if key not in flds:
                    raise ConfigError(f"{where}: unknown key {name!r} in [{sec}]")
                f = flds[key]
                try:
                    kw[f.name] = _parse(raw, getattr(proto, f.name), str(f.type))
                except ValueError as exc:
                    raise ConfigError(f"{where}: bad value for {name}: {exc}") from exc
        try:
            parts[attr] = dataclasses.replace(proto, **kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: [{sec}] {exc}") from exc
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from exc
    return parse_config(text, str(p))
