"""Scenario orchestration, error metrics and FPR tables.

A scenario is one estimation mode simulated on one schedule. Modes that
share everything else are run together on a single timeline, so they see
identical load paths and measurement noise.
"""
from __future__ import annotations

import csv
import functools
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chi2 import chi2_threshold
from .estimator import MODES, EstimatorDivergence, EstimatorObservabilityError, WeightMatrix, two_step_estimate
from .grid import GridModel, PowerFlowDivergence, load_case
from .measurements import GRL_TARGETS, MeasurementPlan, MeterSigmas, build_plan, greedy_pmu_placement
from .ou import OuParams
from .scheduler import NOISE_MODES, SimulationSetup, build_schedule, estimation_ticks, snapshot_stream

log = logging.getLogger(__name__)

DEFAULT_CASE = Path(__file__).resolve().parents[2] / "cases" / "baranwu33.txt"


class ScenarioError(RuntimeError):
    """A solver failure inside a scenario, tagged with the tick it happened at."""

    def __init__(self, message: str, tick: int):
        self.tick = tick
        super().__init__(f"tick {tick}: {message}")


@dataclass(frozen=True)
class GrossError:
    tick: int
    def_index: int
    magnitude: float  # in units of the measurement's meter sigma


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = "proposed"
    scada_period: float = 1.0
    grl_target: str | float = "grl_3"
    pmu_buses: tuple[int, ...] | None = None  # internal indices; None = greedy placement of 11
    horizon: float = 21600.0
    seed: int = 0
    p: float = 0.95
    theta: float = 0.0125
    ou_pct: float = 0.17
    f_pmu: int = 60
    se_stride: int = 1
    stagger_scale: float = 1.0
    scada_class: float = 0.01
    pmu_class: float = 0.01
    synthetic_factor: float = 5.0
    noise_scale: float = 1.0 / 3.0
    noise_mode: str = "scaled"
    gross_errors: tuple[GrossError, ...] = ()
    case_path: str = str(DEFAULT_CASE)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie strictly between 0 and 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.se_stride < 1:
            raise ValueError("se_stride must be at least 1")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if isinstance(self.grl_target, str) and self.grl_target not in GRL_TARGETS:
            raise ValueError(f"unknown GRL target {self.grl_target!r}")

    @property
    def grl_label(self) -> str:
        return self.grl_target if isinstance(self.grl_target, str) else f"grl_{self.grl_target:g}"

    @property
    def name(self) -> str:
        return f"{self.mode}_T{self.scada_period:g}_{self.grl_label}_s{self.seed}"

    @property
    def timeline_key(self) -> tuple:
        """Everything except the mode: configs with equal keys can share a timeline."""
        return tuple((k, v) for k, v in asdict(self).items() if k != "mode")


@dataclass
class ExperimentMetrics:
    config: ScenarioConfig
    ticks: np.ndarray
    j_cme: np.ndarray
    threshold: float
    detected: np.ndarray
    se_error_series: np.ndarray
    gross_error_ticks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    suspects: dict[int, int] = field(default_factory=dict)

    @property
    def cum_se_error(self) -> np.ndarray:
        return np.cumsum(self.se_error_series)

    @property
    def _clean(self) -> np.ndarray:
        return ~np.isin(self.ticks, self.gross_error_ticks)

    @property
    def test_count(self) -> int:
        return int(self._clean.sum())

    @property
    def fp_count(self) -> int:
        return int((self.detected & self._clean).sum())

    @property
    def fpr(self) -> float:
        return self.fp_count / self.test_count if self.test_count else 0.0

    @property
    def detection_log(self) -> list[tuple[int, float, float, bool]]:
        return [(int(t), float(j), self.threshold, bool(d))
                for t, j, d in zip(self.ticks, self.j_cme, self.detected)]


def se_error(v_act, v_hat) -> float:
    """Euclidean norm of the bus voltage magnitude errors."""
    v_act = np.asarray(v_act, dtype=float)
    v_hat = np.asarray(v_hat, dtype=float)
    if v_act.shape != v_hat.shape:
        raise ValueError(f"length mismatch: {v_act.shape} vs {v_hat.shape}")
    return float(np.linalg.norm(v_act - v_hat))


@functools.lru_cache(maxsize=16)
def _grid(case_path: str) -> GridModel:
    return load_case(case_path)


@functools.lru_cache(maxsize=16)
def _plan(case_path: str, pmu_buses: tuple[int, ...], grl_target, sigmas: MeterSigmas) -> MeasurementPlan:
    return build_plan(_grid(case_path), pmu_buses, grl_target, sigmas)


def prepare(config: ScenarioConfig) -> SimulationSetup:
    """Grid, plan and random streams for a scenario."""
    model = _grid(config.case_path)
    pmu = tuple(config.pmu_buses) if config.pmu_buses is not None else tuple(greedy_pmu_placement(model, 11))
    sigmas = MeterSigmas(config.scada_class, config.pmu_class, config.synthetic_factor)
    plan = _plan(config.case_path, pmu, config.grl_target, sigmas)
    load_buses = np.flatnonzero(np.abs(model.base_loads) > 0)
    dt = 1.0 / config.f_pmu
    ou = [OuParams.from_stationary_pct(config.theta, config.ou_pct, abs(model.base_loads[b]), dt)
          for b in load_buses]
    return SimulationSetup(model, plan, load_buses, ou, config.seed, config.noise_scale, config.noise_mode)


def run_paired(configs: Sequence[ScenarioConfig]) -> dict[str, ExperimentMetrics]:
    """Run several modes on one shared timeline (common random numbers).

    The ideal mode reads every measurement fresh at the estimation tick,
    i.e. a fully synchronized schedule on the same load path and noise.
    """
    if not configs:
        return {}
    key = configs[0].timeline_key
    if any(c.timeline_key != key for c in configs):
        raise ValueError("paired configs may differ only in mode")
    if len({c.mode for c in configs}) != len(configs):
        raise ValueError("duplicate modes in a paired run")
    base = configs[0]
    setup = prepare(base)
    plan, model = setup.plan, setup.model
    schedule = build_schedule(base.f_pmu, base.scada_period, model.n, base.horizon, base.stagger_scale)
    ticks = estimation_ticks(schedule, base.se_stride)
    if len(ticks) == 0:
        raise ValueError("horizon ends before the estimator becomes eligible")

    ge_by_tick: dict[int, list[GrossError]] = {}
    for ge in base.gross_errors:
        ge_by_tick.setdefault(ge.tick, []).append(ge)
    meter_sigma = plan.meter_sigma
    n_mag = slice(model.n - 1, None)
    modes = [c.mode for c in configs]
    x0 = {m: None for m in modes}
    j = {m: np.empty(len(ticks)) for m in modes}
    det = {m: np.zeros(len(ticks), dtype=bool) for m in modes}
    err = {m: np.empty(len(ticks)) for m in modes}
    suspects: dict[str, dict[int, int]] = {m: {} for m in modes}

    for k, snap in enumerate(snapshot_stream(setup, schedule, ticks)):
        z_async = snap.z
        v_act = np.abs(snap.v_true)
        for mode in modes:
            if mode == "ideal":
                z = setup.measure(setup.functions.h(snap.v_true), snap.tick)
                z[setup.synthetic_idx] = setup.synthetic_values
            else:
                z = z_async.copy()
            for ge in ge_by_tick.get(snap.tick, ()):
                z[ge.def_index] += ge.magnitude * meter_sigma[ge.def_index]
            w = WeightMatrix.time_varying(plan, snap.staleness_var) if mode == "proposed" else None
            try:
                res = two_step_estimate(plan, z, mode, model, w, p=base.p, x0=x0[mode],
                                        functions=setup.functions)
            except (EstimatorDivergence, EstimatorObservabilityError, PowerFlowDivergence) as exc:
                raise ScenarioError(f"{mode}: {exc}", snap.tick) from exc
            x0[mode] = res.x_hat
            j[mode][k] = res.step1_j_cme
            det[mode][k] = res.detected
            if res.suspect_index is not None:
                suspects[mode][snap.tick] = res.suspect_index
            err[mode][k] = se_error(v_act, res.x_hat[n_mag])

    thr = chi2_threshold(plan.d, base.p)
    ge_ticks = np.array(sorted(ge_by_tick), dtype=int)
    return {c.mode: ExperimentMetrics(c, ticks, j[c.mode], thr, det[c.mode], err[c.mode], ge_ticks, suspects[c.mode])
            for c in configs}


def run_scenario(config: ScenarioConfig) -> ExperimentMetrics:
    return run_paired([config])[config.mode]


def group_for_pairing(configs: Iterable[ScenarioConfig]) -> list[list[ScenarioConfig]]:
    """Bundle configs that can share a timeline, keeping first-seen order."""
    groups: dict[tuple, list[ScenarioConfig]] = {}
    for c in configs:
        groups.setdefault(c.timeline_key, []).append(c)
    return list(groups.values())


# --- summaries and files ---------------------------------------------------------

FPR_HEADER = ["grl", "scada_period", "mode", "fp_count", "test_count", "fpr_percent"]
METRICS_HEADER = ["tick", "j_cme", "threshold", "detected", "se_error", "cum_se_error"]


def fpr_summary(metrics: Iterable[ExperimentMetrics]) -> list[dict]:
    """One row per (GRL, period, mode); seeds of the same cell are pooled."""
    cells: dict[tuple, list[int]] = {}
    for m in metrics:
        c = m.config
        if c.mode == "ideal":
            continue
        cell = cells.setdefault((c.grl_label, c.scada_period, c.mode), [0, 0])
        cell[0] += m.fp_count
        cell[1] += m.test_count
    rows = []
    for (grl, period, mode), (fp, n) in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] != "traditional")):
        rows.append({"grl": grl, "scada_period": period, "mode": mode, "fp_count": fp, "test_count": n,
                     "fpr_percent": 100.0 * fp / n if n else 0.0})
    return rows


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_fpr_summary(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FPR_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in FPR_HEADER])
    return path


def read_fpr_summary(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["scada_period"] = float(r["scada_period"])
        r["fp_count"] = int(r["fp_count"])
        r["test_count"] = int(r["test_count"])
        r["fpr_percent"] = float(r["fpr_percent"])
    return rows


def write_metrics(metrics: ExperimentMetrics, out_dir) -> Path:
    path = Path(out_dir) / f"metrics_{metrics.config.name}.csv"
    cum = metrics.cum_se_error
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for i, t in enumerate(metrics.ticks):
            w.writerow([int(t), _fmt(metrics.j_cme[i]), _fmt(metrics.threshold), _fmt(metrics.detected[i]),
                        _fmt(metrics.se_error_series[i]), _fmt(cum[i])])
    return path


def read_metrics(path) -> dict[str, np.ndarray]:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {k: np.atleast_1d(data[k]) for k in data.dtype.names}


def summary_from_metrics_files(paths: Iterable[Path]) -> list[dict]:
    """Rebuild FPR rows from metric CSVs (file names carry mode, period, GRL)."""
    cells: dict[tuple, list[int]] = {}
    for p in paths:
        mode, period, rest = Path(p).stem[len("metrics_"):].split("_", 2)
        if mode == "ideal":
            continue
        grl = rest.rsplit("_s", 1)[0]
        data = read_metrics(p)
        cell = cells.setdefault((grl, float(period[1:]), mode), [0, 0])
        cell[0] += int(data["detected"].sum())
        cell[1] += len(data["detected"])
    return [{"grl": g, "scada_period": t, "mode": m, "fp_count": fp, "test_count": n,
             "fpr_percent": 100.0 * fp / n if n else 0.0}
            for (g, t, m), (fp, n) in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] != "traditional"))]


def with_mode(config: ScenarioConfig, mode: str) -> ScenarioConfig:
    return replace(config, mode=mode)
