"""Run configuration: one TOML document, strictly validated before any compute.

Unknown sections or keys, wrong types and missing input files are all
``ConfigError``.  ``RunConfig.to_dict`` gives the canonical form echoed in
manifests (every field present, paths absolute).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .inference import FitConfig
from .synthgen import PRESETS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSection:
    m_bd: int = 3
    m_ls: int = 1
    m_lf: int = 1
    xor: bool = True


@dataclass(frozen=True)
class PriorsSection:
    mode: str = "hazus"
    gamma: float = 0.5
    curve: str = ""
    ls_grid: str = ""
    lf_grid: str = ""


@dataclass(frozen=True)
class DataSection:
    dpm: str = ""
    pga: str = ""
    shakemap: str = ""
    footprint: str = ""
    truth: str = ""
    truth_ls: str = ""
    truth_lf: str = ""
    y_floor: float = 1e-4
    allow_resample: bool = False


@dataclass(frozen=True)
class PruningSection:
    mode: str = "strict"
    tau: float = 0.2


@dataclass(frozen=True)
class OutputSection:
    dir: str = "qvcbi_out"
    formats: tuple = ("grids", "tables", "roc")


@dataclass(frozen=True)
class SynthSection:
    preset: str = ""
    nrows: int = 64
    ncols: int = 64
    coverage: float = -1.0
    footprint_missing: float = -1.0
    prior_corruption: float = -1.0
    prior_shrink: float = -1.0


OUTPUT_FORMATS = ("grids", "tables", "roc")

# [fit] accepts every FitConfig field except the seed, which lives at top level
FIT_KEYS = tuple(f.name for f in fields(FitConfig) if f.name != "seed")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    network: NetworkSection = NetworkSection()
    priors: PriorsSection = PriorsSection()
    data: DataSection = DataSection()
    pruning: PruningSection = PruningSection()
    fit: FitConfig = FitConfig()
    output: OutputSection = OutputSection()
    synth: SynthSection = SynthSection()
    base_dir: str = field(default=".", compare=False)

    @property
    def has_synth(self) -> bool:
        return bool(self.synth.preset)

    def fit_config(self, workers: int | None = None) -> FitConfig:
        cfg = replace(self.fit, seed=self.seed)
        return cfg if workers is None else replace(cfg, workers=workers)

    def to_dict(self) -> dict:
        fit = asdict(self.fit)
        fit.pop("seed")
        fit["learn"] = list(fit["learn"])
        out = asdict(self.output)
        out["formats"] = list(out["formats"])
        return {
            "seed": self.seed,
            "network": asdict(self.network),
            "priors": asdict(self.priors),
            "data": asdict(self.data),
            "pruning": asdict(self.pruning),
            "fit": fit,
            "output": out,
            "synth": asdict(self.synth),
        }


_SECTIONS = {
    "network": NetworkSection,
    "priors": PriorsSection,
    "data": DataSection,
    "pruning": PruningSection,
    "output": OutputSection,
    "synth": SynthSection,
}
_PATH_KEYS = {
    "priors": ("curve", "ls_grid", "lf_grid"),
    "data": ("dpm", "pga", "shakemap", "footprint", "truth", "truth_ls", "truth_lf"),
}


def _coerce(section: str, key: str, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{where} must be a list of strings, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _section(name: str, cls, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")
    vals = {k: _coerce(name, k, v, getattr(defaults, k)) for k, v in raw.items()}
    return replace(defaults, **vals)


def parse_config(doc: dict, base_dir=".") -> RunConfig:
    """Build and validate a RunConfig from a parsed TOML mapping."""
    allowed = {"seed", "fit", *_SECTIONS}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    base = Path(base_dir).resolve()
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    parts = {name: _section(name, cls, doc.get(name, {})) for name, cls in _SECTIONS.items()}
    for sec, keys in _PATH_KEYS.items():
        obj = parts[sec]
        upd = {k: str((base / getattr(obj, k)).resolve()) for k in keys if getattr(obj, k)}
        parts[sec] = replace(obj, **upd)
    parts["output"] = replace(parts["output"], dir=str((base / parts["output"].dir).resolve()))

    raw_fit = doc.get("fit", {})
    if not isinstance(raw_fit, dict):
        raise ConfigError("[fit] must be a table")
    if "seed" in raw_fit:
        raise ConfigError("[fit] seed is not allowed; set the top-level seed")
    unknown = sorted(set(raw_fit) - set(FIT_KEYS))
    if unknown:
        raise ConfigError(f"unknown key(s) in [fit]: {', '.join(unknown)}; allowed: {', '.join(sorted(FIT_KEYS))}")
    fdef = FitConfig()
    fvals = {k: _coerce("fit", k, v, getattr(fdef, k)) for k, v in raw_fit.items()}
    try:
        fit = FitConfig(**{**fvals, "seed": seed})
    except ValueError as exc:
        raise ConfigError(f"[fit] {exc}") from None

    cfg = RunConfig(seed=seed, fit=fit, base_dir=str(base), **parts)
    _check_values(cfg)
    return cfg


def _check_values(cfg: RunConfig) -> None:
    n = cfg.network
    if n.m_bd < 1 or n.m_ls < 1 or n.m_lf < 1:
        raise ConfigError("[network] cardinalities must be >= 1")
    p = cfg.priors
    if p.mode not in ("hazus", "pager", "combined"):
        raise ConfigError(f"[priors] mode must be hazus, pager or combined, got {p.mode!r}")
    if not 0.0 <= p.gamma <= 1.0:
        raise ConfigError("[priors] gamma must lie in [0, 1]")
    if cfg.pruning.mode not in ("none", "strict", "compensated"):
        raise ConfigError(f"[pruning] mode must be none, strict or compensated, got {cfg.pruning.mode!r}")
    if not 0.0 <= cfg.pruning.tau <= 1.0:
        raise ConfigError("[pruning] tau must lie in [0, 1]")
    if not 0.0 < cfg.data.y_floor < 1.0:
        raise ConfigError("[data] y_floor must lie in (0, 1)")
    bad = set(cfg.output.formats) - set(OUTPUT_FORMATS)
    if bad:
        raise ConfigError(f"[output] unknown format(s) {sorted(bad)}; allowed: {list(OUTPUT_FORMATS)}")
    s = cfg.synth
    if s.preset and s.preset not in PRESETS + ("custom",):
        raise ConfigError(f"[synth] unknown preset {s.preset!r}; available presets: {', '.join(PRESETS)}, custom")
    if s.nrows < 8 or s.ncols < 8:
        raise ConfigError("[synth] nrows and ncols must be >= 8")
    for k in ("coverage", "footprint_missing", "prior_corruption", "prior_shrink"):
        v = getattr(s, k)
        if v != -1.0 and not 0.0 <= v <= 1.0:
            raise ConfigError(f"[synth] {k} must lie in [0, 1] (or be omitted)")


def check_files(cfg: RunConfig, need_scene: bool = False, need_truth: bool = False) -> None:
    """Every referenced input must exist; scene inputs are required unless synthesized."""
    for sec, keys in _PATH_KEYS.items():
        obj = getattr(cfg, sec)
        for k in keys:
            v = getattr(obj, k)
            if v and not Path(v).is_file():
                raise ConfigError(f"[{sec}] {k}: file not found: {v}")
    if need_scene and not cfg.has_synth:
        if not cfg.data.dpm:
            raise ConfigError("[data] dpm is required")
        if not (cfg.data.pga or cfg.data.shakemap):
            raise ConfigError("[data] pga or shakemap is required")
    if need_truth and not cfg.has_synth and not cfg.data.truth:
        raise ConfigError("[data] truth is required for evaluation")


def load_config(path=None) -> RunConfig:
    """Read a TOML config file; ``None`` gives the defaults."""
    if path is None:
        return parse_config({})
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc, path.parent)
