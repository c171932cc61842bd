"""Plain-text run configuration.

The schema (``config_schema.txt`` next to this module) lists every key with
its type and default; :func:`load_config` returns a flat ``{dotted_key: value}``
dict with all keys present.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

ROOT = "__root__"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KeySpec:
    key: str
    type: str
    default: str
    doc: str

    @property
    def choices(self) -> tuple[str, ...]:
        return tuple(self.type.split(":", 1)[1].split("/")) if self.type.startswith("choice:") else ()


def schema_text() -> str:
    return resources.files(__package__).joinpath("config_schema.txt").read_text(encoding="utf-8")


def load_schema() -> dict[str, KeySpec]:
    out = {}
    for line in schema_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, typ, default, doc = (s.strip() for s in line.split("|", 3))
        out[key] = KeySpec(key, typ, default, doc)
    return out


def _list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def convert(spec: KeySpec, text: str):
    """Parse ``text`` according to ``spec``; raises :class:`ConfigError`."""
    text = text.strip()
    t = spec.type
    try:
        if t == "int":
            return int(text)
        if t == "float":
            return float(text)
        if t == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if t == "auto_float":
            return None if text.lower() == "auto" else float(text)
        if t == "floats":
            if text.lower() in ("auto", "none", ""):
                return None
            return tuple(float(s) for s in _list(text))
        if t == "strs":
            return () if text.lower() in ("none", "") else tuple(_list(text))
        if t == "str":
            return None if text.lower() == "none" else text
        if spec.choices:
            if text not in spec.choices:
                raise ValueError(f"expected one of {'/'.join(spec.choices)}")
            return text
    except ValueError as exc:
        raise ConfigError(f"{spec.key}: cannot parse {text!r} as {t} ({exc})") from None
    raise ConfigError(f"{spec.key}: unknown schema type {t!r}")


def _raw_pairs(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(
        interpolation=None, default_section="__defaults__", comment_prefixes=("#", ";"), inline_comment_prefixes=("#",)
    )
    parser.optionxform = str  # keys are case sensitive (problem.N vs problem.n)
    try:
        parser.read_string(f"[{ROOT}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    pairs: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section, raw=True):
            full = key if section == ROOT else f"{section}.{key}"
            if full in pairs:
                raise ConfigError(f"duplicate key {full}")
            pairs[full] = value
    return pairs


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def load_config(path=None, overrides=(), text: str | None = None) -> dict:
    """Merge schema defaults, the file at ``path`` (or ``text``) and ``key=value`` overrides."""
    schema = load_schema()
    raw = {k: s.default for k, s in schema.items()}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    given = _raw_pairs(text or "")
    for item in overrides:
        k, v = parse_override(item)
        given[k] = v
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    raw.update(given)
    cfg = {k: convert(schema[k], v) for k, v in raw.items()}
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg["problem.p"] >= 2, "problem.p must be >= 2")
    need(cfg["problem.n"] in (2, 3), "problem.n must be 2 or 3")
    need(cfg["problem.N"] >= 2, "problem.N must be >= 2")
    need(cfg["mesh.resolution"] > 0, "mesh.resolution must be positive")
    need(cfg["mesh.max_nodes"] > 0, "mesh.max_nodes must be positive")
    need(0 < cfg["solver.eps_decay"] < 1, "solver.eps_decay must lie in (0, 1)")
    need(cfg["solver.grad_tol"] > 0, "solver.grad_tol must be positive")
    need(cfg["solver.max_iters"] >= 0, "solver.max_iters must be >= 0")
    need(cfg["diagnostics.R"] > 0, "diagnostics.R must be positive")
    need(cfg["diagnostics.levels"] >= 0, "diagnostics.levels must be >= 0")
    need(cfg["diagnostics.eps_threshold"] > 0, "diagnostics.eps_threshold must be positive")
    need(0 < cfg["diagnostics.theta"] < 1, "diagnostics.theta must lie in (0, 1)")
    need(cfg["run.init_noise"] >= 0, "run.init_noise must be >= 0")
    n, N = cfg["problem.n"], cfg["problem.N"]
    if cfg["problem.domain"] != "halfball":
        for key in ("problem.lower", "problem.upper"):
            need(cfg[key] is not None and len(cfg[key]) == n, f"{key} needs {n} entries")
    else:
        need(cfg["problem.radius"] > 0, "problem.radius must be positive")
    if cfg["problem.boundary_data"] == "constant":
        need(cfg["problem.boundary_value"] is None or len(cfg["problem.boundary_value"]) == N,
             f"problem.boundary_value needs {N} entries")
    if cfg["fixture.kind"] == "linear":
        need(cfg["fixture.A"] is not None and len(cfg["fixture.A"]) == N * n, f"fixture.A needs {N * n} entries")
    if cfg["fixture.kind"] == "constant":
        need(cfg["fixture.c"] is None or len(cfg["fixture.c"]) == N, f"fixture.c needs {N} entries")
    res = cfg["sweep.resolutions"]
    need(res is not None and len(res) >= 2 and all(r > 0 for r in res), "sweep.resolutions needs >= 2 positive spacings")
    init = cfg["problem.init_file"]
    need(init is None or Path(init).is_file(), f"problem.init_file {init!r} does not exist")
    bad = set(cfg["output.formats"]) - {"json", "csv", "vtk"}
    need(not bad, f"unknown output formats {sorted(bad)}")


def canonical_text(cfg: dict) -> str:
    """Sorted ``key = repr(value)`` lines, without ``output.dir``; the basis of the config hash."""
    return "".join(f"{k} = {cfg[k]!r}\n" for k in sorted(cfg) if k != "output.dir")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()
