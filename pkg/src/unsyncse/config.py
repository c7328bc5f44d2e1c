"""INI run configuration: scenario grid plus simulation knobs.

Sections and keys (all optional except ``[case] path``)::

    [case]        path
    [grid]        modes, scada_periods, grl_targets, seeds
    [simulation]  horizon, f_pmu, se_stride, stagger_scale, p, pmu_buses
    [ou]          theta, stationary_pct
    [meters]      scada_class, pmu_class, synthetic_factor, noise_scale, noise_mode
    [output]      dir

List values are comma separated. ``pmu_buses`` takes external bus ids or
``greedy``. Relative paths are resolved against the config file's folder.
"""
from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .estimator import MODES
from .experiment import DEFAULT_CASE, ScenarioConfig
from .grid import load_case
from .measurements import GRL_TARGETS

SCHEMA = {
    "case": {"path"},
    "grid": {"modes", "scada_periods", "grl_targets", "seeds"},
    "simulation": {"horizon", "f_pmu", "se_stride", "stagger_scale", "p", "pmu_buses"},
    "ou": {"theta", "stationary_pct"},
    "meters": {"scada_class", "pmu_class", "synthetic_factor", "noise_scale", "noise_mode"},
    "output": {"dir"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    case_path: Path = DEFAULT_CASE
    modes: tuple[str, ...] = ("traditional", "proposed")
    scada_periods: tuple[float, ...] = (1.0, 2.0, 4.0)
    grl_targets: tuple[str, ...] = ("grl_3", "grl_reduced")
    seeds: tuple[int, ...] = (0,)
    horizon: float = 21600.0
    f_pmu: int = 60
    se_stride: int = 1
    stagger_scale: float = 1.0
    p: float = 0.95
    pmu_buses: tuple[int, ...] | None = None  # external ids
    theta: float = 0.0125
    stationary_pct: float = 0.17
    scada_class: float = 0.01
    pmu_class: float = 0.01
    synthetic_factor: float = 5.0
    noise_scale: float = 1.0 / 3.0
    noise_mode: str = "scaled"
    output_dir: Path = Path("results")
    extra: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if not Path(self.case_path).is_file():
            raise ConfigError(f"case file not found: {self.case_path}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}; choose from {', '.join(MODES)}")
        for g in self.grl_targets:
            if g not in GRL_TARGETS:
                raise ConfigError(f"unknown GRL target {g!r}; choose from {', '.join(GRL_TARGETS)}")
        if any(t <= 0 for t in self.scada_periods):
            raise ConfigError("SCADA periods must be positive")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if not 0 < self.p < 1:
            raise ConfigError("p must lie strictly between 0 and 1")
        return self

    def scenarios(self) -> list[ScenarioConfig]:
        """Every grid cell as a scenario, ordered GRL, period, seed, mode."""
        pmu = None
        if self.pmu_buses is not None:
            model = load_case(self.case_path)
            try:
                pmu = tuple(model.index_of[b] for b in self.pmu_buses)
            except KeyError as exc:
                raise ConfigError(f"unknown PMU bus {exc.args[0]}") from None
        out = []
        for grl, period, seed, mode in itertools.product(self.grl_targets, self.scada_periods, self.seeds, self.modes):
            try:
                out.append(ScenarioConfig(
                    mode=mode, scada_period=period, grl_target=grl, pmu_buses=pmu, horizon=self.horizon,
                    seed=seed, p=self.p, theta=self.theta, ou_pct=self.stationary_pct, f_pmu=self.f_pmu,
                    se_stride=self.se_stride, stagger_scale=self.stagger_scale, scada_class=self.scada_class,
                    pmu_class=self.pmu_class, synthetic_factor=self.synthetic_factor,
                    noise_scale=self.noise_scale, noise_mode=self.noise_mode, case_path=str(self.case_path)))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return out

    def to_ini(self) -> str:
        def join(xs):
            return ", ".join(_num(x) for x in xs)

        cp = configparser.ConfigParser()
        cp["case"] = {"path": str(Path(self.case_path).resolve())}
        cp["grid"] = {"modes": join(self.modes), "scada_periods": join(self.scada_periods),
                      "grl_targets": join(self.grl_targets), "seeds": join(self.seeds)}
        cp["simulation"] = {"horizon": _num(self.horizon), "f_pmu": str(self.f_pmu), "se_stride": str(self.se_stride),
                            "stagger_scale": _num(self.stagger_scale), "p": _num(self.p),
                            "pmu_buses": "greedy" if self.pmu_buses is None else join(self.pmu_buses)}
        cp["ou"] = {"theta": _num(self.theta), "stationary_pct": _num(self.stationary_pct)}
        cp["meters"] = {"scada_class": _num(self.scada_class), "pmu_class": _num(self.pmu_class),
                        "synthetic_factor": _num(self.synthetic_factor), "noise_scale": _num(self.noise_scale),
                        "noise_mode": self.noise_mode}
        cp["output"] = {"dir": str(Path(self.output_dir).resolve())}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _num(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(cp[section]) - SCHEMA[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    base_dir = Path(base_dir)
    cfg = RunConfig()

    def get(section, key):
        return cp.get(section, key, fallback=None)

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    try:
        if (v := get("case", "path")) is not None:
            cfg.case_path = resolve(v)
        if (v := get("grid", "modes")) is not None:
            cfg.modes = tuple(_split(v))
        if (v := get("grid", "scada_periods")) is not None:
            cfg.scada_periods = tuple(float(x) for x in _split(v))
        if (v := get("grid", "grl_targets")) is not None:
            cfg.grl_targets = tuple(_split(v))
        if (v := get("grid", "seeds")) is not None:
            cfg.seeds = tuple(int(x) for x in _split(v))
        floats = {("simulation", "horizon"): "horizon", ("simulation", "stagger_scale"): "stagger_scale",
                  ("simulation", "p"): "p", ("ou", "theta"): "theta", ("ou", "stationary_pct"): "stationary_pct",
                  ("meters", "scada_class"): "scada_class", ("meters", "pmu_class"): "pmu_class",
                  ("meters", "synthetic_factor"): "synthetic_factor", ("meters", "noise_scale"): "noise_scale"}
        for (section, key), attr in floats.items():
            if (v := get(section, key)) is not None:
                setattr(cfg, attr, float(v))
        for key in ("f_pmu", "se_stride"):
            if (v := get("simulation", key)) is not None:
                setattr(cfg, key, int(v))
        if (v := get("simulation", "pmu_buses")) is not None:
            cfg.pmu_buses = None if v.strip() == "greedy" else tuple(int(x) for x in _split(v))
        if (v := get("meters", "noise_mode")) is not None:
            cfg.noise_mode = v.strip()
        if (v := get("output", "dir")) is not None:
            cfg.output_dir = resolve(v)
    except ValueError as exc:
        raise ConfigError(f"bad value: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)


def override(cfg: RunConfig, **changes) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None and k in known})
