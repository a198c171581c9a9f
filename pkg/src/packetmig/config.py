"""Run configuration: flat INI-style text files for the batch front-end.

Format: UTF-8 ``key = value`` lines under one level of bracketed
sections. Vectors are whitespace-separated numbers. Unknown sections or
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .grids import GridSpec
from .model import (GaussianLens, LineReflector, ReflectivityModel,
                    VelocityModel)

_KNOWN_KEYS = {
    "grid": {"n", "spacing", "origin"},
    "model": {"c0"},
    "tiling": {"kmax"},
    "schedule": {"ns", "t_start", "t_end"},
    "acquisition": {"t_total", "dt"},
    "source": {"position", "f_peak"},
    "initial": {"kind", "center", "sigma", "direction_deg", "frequency"},
    "fd": {"cfl", "sponge_width", "refine", "reflect_amplitude",
           "subtract_reference"},
    "imaging": {"tau_min", "min_energy_frac"},
    "gather": {"positions", "bin_width"},
    "output": {"dir"},
    "run": {"deterministic", "threads", "seed"},
}
# repeatable sections: lens1, lens2, ..., reflector1, ...
_LENS_KEYS = {"contrast", "center", "widths", "surface_band"}
_REFLECTOR_KEYS = {"p0", "p1", "amplitude"}


class ConfigError(ValueError):
    """Invalid or missing run configuration."""


@dataclass
class RunConfig:
    """Everything a batch run needs, resolved and validated."""

    grid: GridSpec
    model: VelocityModel
    k_max: int
    ns: int | None                  # None means auto schedule
    t_start: float
    t_end: float
    t_total: float                  # record length
    record_dt: float
    source_position: tuple | None = None
    f_peak: float = 7.0
    initial: dict | None = None     # packet initial data for fdsim
    reflectivity: ReflectivityModel | None = None
    reflect_amplitude: float = 0.1
    subtract_reference: bool = True
    fd_cfl: float = 0.45
    fd_sponge: int = 30
    fd_refine: int = 2              # data generation grid refinement
    tau_min: float | None = None
    min_energy_frac: float = 0.0
    gather_positions: tuple = ()
    gather_bin_width: float = 5.0
    outdir: str = "out"
    deterministic: bool = False
    threads: int = 1
    seed: int = 0
    extras: dict = field(default_factory=dict)


def _floats(s: str) -> tuple:
    try:
        return tuple(float(v) for v in s.split())
    except ValueError as exc:
        raise ConfigError("cannot parse %r as numbers" % s) from exc


def _ints(s: str) -> tuple:
    try:
        return tuple(int(v) for v in s.split())
    except ValueError as exc:
        raise ConfigError("cannot parse %r as integers" % s) from exc


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError("cannot parse %r as a boolean" % s)


def _check_known(parser: configparser.ConfigParser) -> None:
    for section in parser.sections():
        if section.startswith("lens"):
            allowed = _LENS_KEYS
        elif section.startswith("reflector"):
            allowed = _REFLECTOR_KEYS
        elif section in _KNOWN_KEYS:
            allowed = _KNOWN_KEYS[section]
        else:
            raise ConfigError("unknown section [%s]" % section)
        for key in parser[section]:
            if key not in allowed:
                raise ConfigError("unknown key %r in [%s]" % (key, section))


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a run configuration file.

    overrides (from command-line flags) replace file values; keys: kmax,
    ns, out, threads, deterministic, seed.
    """
    if not os.path.exists(path):
        raise ConfigError("config file %s does not exist" % path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError("cannot parse %s: %s" % (path, exc)) from exc
    _check_known(parser)
    overrides = dict(overrides or {})

    def get(section, key, default=None):
        if parser.has_option(section, key):
            return parser.get(section, key)
        return default

    def require(section, key):
        val = get(section, key)
        if val is None:
            raise ConfigError("missing [%s] %s" % (section, key))
        return val

    n = _ints(require("grid", "n"))
    spacing = _floats(require("grid", "spacing"))
    origin = _floats(get("grid", "origin", "0 0"))
    if len(n) != 2 or len(spacing) != 2 or len(origin) != 2:
        raise ConfigError("grid vectors must have 2 components")
    try:
        grid = GridSpec(n, spacing, origin)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    c0 = float(require("model", "c0"))
    lenses = []
    for section in sorted(s for s in parser.sections()
                          if s.startswith("lens")):
        center = _floats(require(section, "center"))
        widths = _floats(require(section, "widths"))
        band = get(section, "surface_band")
        if band is None:
            depth = center[-1]
            band = (0.04 * depth, 0.22 * depth)
        else:
            band = _floats(band)
        try:
            lenses.append(GaussianLens(
                contrast=float(require(section, "contrast")),
                center=center, widths=widths,
                surface_band=tuple(band)))
        except ValueError as exc:
            raise ConfigError("[%s]: %s" % (section, exc)) from exc
    try:
        model = VelocityModel(c0=c0, lenses=tuple(lenses))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    reflectors = []
    for section in sorted(s for s in parser.sections()
                          if s.startswith("reflector")):
        p0 = _floats(require(section, "p0"))
        p1 = _floats(require(section, "p1"))
        amp = float(get(section, "amplitude", "1.0"))
        reflectors.append(LineReflector(tuple(p0), tuple(p1), amp))
    reflectivity = (ReflectivityModel(tuple(reflectors))
                    if reflectors else None)

    k_max = int(overrides.get("kmax") or get("tiling", "kmax", "3"))
    if k_max < 1:
        raise ConfigError("kmax must be >= 1")

    ns_raw = overrides.get("ns") or get("schedule", "ns", "auto")
    if str(ns_raw).strip().lower() == "auto":
        ns = None
    else:
        ns = int(ns_raw)
        if ns < 1:
            raise ConfigError("ns must be >= 1 or 'auto'")
    t_start = float(get("schedule", "t_start", "0"))
    t_total = float(require("acquisition", "t_total"))
    t_end = float(get("schedule", "t_end", str(t_total)))
    if not t_start < t_end:
        raise ConfigError("schedule needs t_start < t_end")
    record_dt = float(require("acquisition", "dt"))
    if record_dt <= 0 or t_total <= 0:
        raise ConfigError("acquisition dt and t_total must be positive")

    source_position = None
    f_peak = 7.0
    if parser.has_section("source"):
        source_position = tuple(_floats(require("source", "position")))
        f_peak = float(get("source", "f_peak", "7.0"))
        if f_peak <= 0:
            raise ConfigError("f_peak must be positive")

    initial = None
    if parser.has_section("initial"):
        initial = {
            "kind": get("initial", "kind", "packet"),
            "center": _floats(require("initial", "center")),
            "sigma": float(require("initial", "sigma")),
            "direction_deg": float(get("initial", "direction_deg", "90")),
            "frequency": float(require("initial", "frequency")),
        }
        if initial["kind"] != "packet":
            raise ConfigError("unknown initial kind %r" % initial["kind"])

    tau_min = get("imaging", "tau_min")
    cfg = RunConfig(
        grid=grid, model=model, k_max=k_max, ns=ns,
        t_start=t_start, t_end=t_end, t_total=t_total,
        record_dt=record_dt,
        source_position=source_position, f_peak=f_peak,
        initial=initial,
        reflectivity=reflectivity,
        reflect_amplitude=float(get("fd", "reflect_amplitude", "0.1")),
        subtract_reference=_bool(get("fd", "subtract_reference", "true")),
        fd_cfl=float(get("fd", "cfl", "0.45")),
        fd_sponge=int(get("fd", "sponge_width", "30")),
        fd_refine=int(get("fd", "refine", "2")),
        tau_min=(float(tau_min) if tau_min is not None else None),
        min_energy_frac=float(get("imaging", "min_energy_frac", "0")),
        gather_positions=tuple(_floats(get("gather", "positions", ""))),
        gather_bin_width=float(get("gather", "bin_width", "5.0")),
        outdir=str(overrides.get("out") or get("output", "dir", "out")),
        deterministic=bool(overrides.get("deterministic", False)
                           or _bool(get("run", "deterministic", "false"))),
        threads=int(overrides.get("threads")
                    or get("run", "threads", "1")),
        seed=int(overrides.get("seed") or get("run", "seed", "0")),
    )
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.fd_refine < 1:
        raise ConfigError("fd refine factor must be >= 1")
    if cfg.reflectivity is not None:
        try:
            cfg.reflectivity.validate_inside(cfg.grid)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    from .frame import MIN_SAMPLES_PER_SCALE
    need = int(np.ceil(MIN_SAMPLES_PER_SCALE * 2 ** cfg.k_max)) + 1
    if min(cfg.grid.n) < need:
        raise ConfigError("grid too coarse for kmax=%d (need >= %d "
                          "samples per axis, have %d)"
                          % (cfg.k_max, need, min(cfg.grid.n)))
    return cfg
