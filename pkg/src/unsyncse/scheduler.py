"""Staggered SCADA arrivals against the PMU clock.

One tick is one PMU sample. SCADA group ``g`` refreshes at ticks congruent to
its offset modulo ``scada_period * f_pmu``; PMU measurements refresh every
tick. Between refreshes a SCADA value stays frozen while its variance grows
with the staleness of the loads it observes.

Two drivers produce identical measurement snapshots:

* ``Timeline.advance_to`` steps tick by tick (loads, power flow, refreshes);
* ``snapshot_stream`` jumps straight to the requested estimation ticks,
  solving power flow only where a value is actually consumed.

Both draw load innovations from the same generator in the same order and
take measurement noise from a counter-based generator keyed on the tick.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .grid import GridModel, PowerFlowDivergence, ac_power_flow, power_flow_batch
from .measurements import MeasurementPlan, MeasurementSample, PlanFunctions, apply_noise, eval_h
from .ou import OuParams, OuPath, variance_update

log = logging.getLogger(__name__)

PMU_REFRESH = "pmu_refresh"
SCADA_REFRESH = "scada_group_refresh"
# scaled: noise_scale x rated sigma; raw: rated sigma; none: exact readings
NOISE_MODES = ("scaled", "raw", "none")


@dataclass(frozen=True)
class Schedule:
    f_pmu: int
    scada_period: float
    n_groups: int
    offsets: tuple[int, ...]
    horizon_ticks: int
    period_ticks: int

    @property
    def stagger(self) -> int:
        return self.f_pmu // self.n_groups

    @property
    def eligible_tick(self) -> int:
        """First tick at which the estimator may run (cold start excluded)."""
        return max(self.offsets) + self.period_ticks

    def last_refresh(self, tick: int) -> np.ndarray:
        """Most recent refresh tick of every group at ``tick`` (may be negative before the first)."""
        off = np.asarray(self.offsets)
        return tick - ((tick - off) % self.period_ticks)

    def ages(self, tick: int) -> np.ndarray:
        return tick - self.last_refresh(tick)


@dataclass(frozen=True)
class ArrivalEvent:
    tick: int
    kind: str
    group_id: int | None = None


def build_schedule(f_pmu: int, scada_period: float, n_groups: int, horizon_s: float,
                   stagger_scale: float = 1.0) -> Schedule:
    """Event table with groups spread by ``floor(f_pmu / n_groups)`` ticks.

    ``stagger_scale`` shrinks the spread (0.5 gives the "moderate" case).
    """
    if f_pmu <= 0 or scada_period <= 0 or horizon_s <= 0:
        raise ValueError("f_pmu, scada_period and horizon must be positive")
    if n_groups < 1:
        raise ValueError("n_groups must be at least 1")
    period_ticks = int(round(scada_period * f_pmu))
    if period_ticks < 1 or not math.isclose(period_ticks, scada_period * f_pmu):
        raise ValueError("scada_period * f_pmu must be a positive whole number of ticks")
    factor = f_pmu // n_groups
    if factor == 0:
        log.warning("f_pmu < n_groups: stagger factor is 0, SCADA groups arrive together")
    offsets = tuple(int(math.floor(g * factor * stagger_scale)) % period_ticks for g in range(n_groups))
    return Schedule(f_pmu, scada_period, n_groups, offsets, int(round(horizon_s * f_pmu)), period_ticks)


def synchronized_schedule(f_pmu: int, n_groups: int, horizon_s: float) -> Schedule:
    """Every group refreshes at every tick: no staleness anywhere."""
    return Schedule(f_pmu, 1.0 / f_pmu, n_groups, (0,) * n_groups, int(round(horizon_s * f_pmu)), 1)


def events_at(schedule: Schedule, tick: int) -> list[ArrivalEvent]:
    out = [ArrivalEvent(tick, PMU_REFRESH)]
    for g, off in enumerate(schedule.offsets):
        if (tick - off) % schedule.period_ticks == 0:
            out.append(ArrivalEvent(tick, SCADA_REFRESH, g))
    return out


def write_timeline(schedule: Schedule, path, start: int = 0, stop: int | None = None) -> Path:
    """CSV of arrivals: tick, event kind, group id, then every group's staleness age."""
    stop = schedule.horizon_ticks if stop is None else min(stop, schedule.horizon_ticks)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tick", "event", "group_id"] + [f"age_g{g}" for g in range(schedule.n_groups)])
        for t in range(start, stop):
            ages = [int(a) if a <= t else "" for a in schedule.ages(t)]
            for ev in events_at(schedule, t):
                w.writerow([t, ev.kind, "" if ev.group_id is None else ev.group_id] + ages)
    return path


def staleness_map(plan: MeasurementPlan, model: GridModel, load_buses: Sequence[int]) -> np.ndarray:
    """Matrix A with ``A[i, j]`` = share of load ``j``'s variance seen by measurement ``i``.

    Only SCADA rows are populated. Injections see their own load, flows the
    loads beyond the branch away from the slack; each P or Q channel takes
    half of the complex variance.
    """
    col = {b: k for k, b in enumerate(load_buses)}
    a = np.zeros((plan.d, len(load_buses)))
    for i, m in enumerate(plan.defs):
        if m.source != "scada":
            continue
        if m.kind.startswith("inj"):
            if m.location in col:
                a[i, col[m.location]] = 0.5
        elif m.kind.startswith("flow"):
            for b in model.subtree(*m.location):
                if b in col:
                    a[i, col[b]] = 0.5
    return a


def noise_draws(key: int, tick: int, d: int) -> np.ndarray:
    """Standard normals for every measurement at ``tick``; independent of call order."""
    return np.random.Generator(np.random.Philox(counter=tick, key=key)).standard_normal(d)


@dataclass
class Snapshot:
    tick: int
    z: np.ndarray
    staleness_var: np.ndarray
    variance_state: np.ndarray
    v_true: np.ndarray
    ages: np.ndarray


@dataclass
class SimulationSetup:
    """Everything a scenario run needs besides the schedule."""

    model: GridModel
    plan: MeasurementPlan
    load_buses: np.ndarray
    ou_params: list[OuParams]
    seed: int
    noise_scale: float = 1.0 / 3.0
    noise_mode: str = "scaled"
    functions: PlanFunctions = field(init=False)
    stale_map: np.ndarray = field(init=False)
    synthetic_values: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        self.functions = PlanFunctions(self.plan, self.model)
        self.stale_map = staleness_map(self.plan, self.model, self.load_buses)
        base = ac_power_flow(self.model)
        self.base_voltages = base.voltages
        self.synthetic_idx = self.plan.indices("synthetic")
        self.synthetic_values = np.array([eval_h(base, self.plan.defs[i], self.model)
                                          for i in self.synthetic_idx])
        self.stationary = np.array([p.stationary_var for p in self.ou_params])
        self.thetas = np.array([p.theta for p in self.ou_params])
        ss = np.random.SeedSequence(self.seed)
        ou_seed, noise_seed = ss.spawn(2)
        self._ou_seed = ou_seed
        self.noise_key = int(noise_seed.generate_state(1, dtype=np.uint64)[0])

    def ou_path(self) -> OuPath:
        return OuPath(self.ou_params, np.random.default_rng(self._ou_seed))

    @property
    def dt(self) -> float:
        return self.ou_params[0].dt

    def loads(self, deviations: np.ndarray) -> np.ndarray:
        base = np.broadcast_to(self.model.base_loads, deviations.shape[:-1] + (self.model.n,)).copy()
        base[..., self.load_buses] += deviations
        return base

    def measure(self, true_values: np.ndarray, tick: int) -> np.ndarray:
        """Noisy readings of every plan measurement taken at ``tick``."""
        if self.noise_mode == "none":
            return np.array(true_values, dtype=float)
        draw = noise_draws(self.noise_key, tick, self.plan.d)
        if self.noise_mode == "raw":
            return apply_noise(true_values, self.plan.meter_sigma, draw=draw)
        return apply_noise(true_values, self.noise_scale * self.plan.meter_sigma, draw=draw)


class Timeline:
    """Tick-by-tick reference driver."""

    def __init__(self, setup: SimulationSetup, schedule: Schedule):
        self.setup = setup
        self.schedule = schedule
        plan = setup.plan
        self.path = setup.ou_path()
        self.tick = -1
        self.v = setup.base_voltages.copy()
        self.values = np.zeros(plan.d)
        self.values[setup.synthetic_idx] = setup.synthetic_values
        self.acquired = np.zeros(plan.d, dtype=int)
        self.group_of = scada_group_of(plan, schedule)
        # staleness variance of every load as seen from every group's last refresh
        self.group_load_var = np.zeros((schedule.n_groups, len(setup.ou_params)))
        self.reported = np.zeros(schedule.n_groups, dtype=bool)
        self.samples: list[MeasurementSample] = [
            MeasurementSample(i, float(self.values[i]), 0, m.meter_sigma ** 2) for i, m in enumerate(plan.defs)]

    @property
    def eligible(self) -> bool:
        return bool(self.reported.all()) and self.tick >= self.schedule.eligible_tick

    def _step(self):
        s = self.setup
        self.tick += 1
        t = self.tick
        dev = self.path.step()
        self.group_load_var = np.array([variance_update(self.group_load_var[:, j], p)
                                        for j, p in enumerate(s.ou_params)]).T
        try:
            self.v = ac_power_flow(s.model, s.loads(dev), v0=self.v, timestamp=t).voltages
        except PowerFlowDivergence as exc:
            raise PowerFlowDivergence(f"tick {t}: {exc}", exc.mismatch, exc.iterations) from exc
        fresh = s.measure(s.functions.h(self.v), t)
        refresh = np.zeros(s.plan.d, dtype=bool)
        refresh[s.plan.indices("pmu")] = True
        for ev in events_at(self.schedule, t):
            if ev.kind == SCADA_REFRESH:
                refresh |= self.group_of == ev.group_id
                self.group_load_var[ev.group_id] = 0.0
                self.reported[ev.group_id] = True
        self.values[refresh] = fresh[refresh]
        self.acquired[refresh] = t

    def staleness(self) -> np.ndarray:
        out = np.zeros(self.setup.plan.d)
        scada = self.group_of >= 0
        out[scada] = np.einsum("ij,ij->i", self.setup.stale_map[scada], self.group_load_var[self.group_of[scada]])
        return out

    def advance_to(self, tick: int) -> list[MeasurementSample]:
        if tick >= self.schedule.horizon_ticks:
            raise ValueError(f"tick {tick} beyond horizon {self.schedule.horizon_ticks}")
        if tick < self.tick:
            raise ValueError("cannot move the timeline backwards")
        while self.tick < tick:
            self._step()
        var = self.setup.plan.meter_sigma ** 2 + self.staleness()
        for smp, val, acq, vs in zip(self.samples, self.values, self.acquired, var):
            smp.value, smp.acquired_tick, smp.variance_state = float(val), int(acq), float(vs)
        return self.samples

    def snapshot(self) -> Snapshot:
        stale = self.staleness()
        return Snapshot(self.tick, self.values.copy(), stale, self.setup.plan.meter_sigma ** 2 + stale,
                        self.v.copy(), self.tick - self.acquired)


def scada_group_of(plan: MeasurementPlan, schedule: Schedule) -> np.ndarray:
    """Schedule group of every measurement (-1 for PMU and synthetic ones).

    SCADA group ids are bus indices, so group ``g`` follows offset ``g``.
    """
    out = np.array([m.group_id if m.source == "scada" and m.group_id is not None else -1 for m in plan.defs])
    if out.max(initial=-1) >= schedule.n_groups:
        raise ValueError(f"plan uses SCADA group {out.max()}, schedule has only {schedule.n_groups}")
    return out


def estimation_ticks(schedule: Schedule, stride: int = 1) -> np.ndarray:
    return np.arange(schedule.eligible_tick, schedule.horizon_ticks, stride)


def snapshot_stream(setup: SimulationSetup, schedule: Schedule, ticks: Sequence[int],
                    block: int = 512) -> Iterator[Snapshot]:
    """Snapshots at ascending ``ticks``, solving power flow only where needed."""
    ticks = np.asarray(ticks, dtype=int)
    if len(ticks) == 0:
        return
    if np.any(np.diff(ticks) <= 0) or ticks[0] < schedule.eligible_tick or ticks[-1] >= schedule.horizon_ticks:
        raise ValueError("ticks must be ascending and inside [eligible_tick, horizon)")
    plan = setup.plan
    group_of = scada_group_of(plan, schedule)
    members = [np.flatnonzero(group_of == g) for g in range(schedule.n_groups)]
    scada = plan.indices("scada")
    path = setup.ou_path()
    buf_start, buf = 0, np.zeros((0, len(setup.ou_params)), dtype=complex)

    for start in range(0, len(ticks), block):
        se = ticks[start:start + block]
        refresh = np.stack([schedule.last_refresh(t) for t in se])  # (b, groups)
        needed = np.unique(np.concatenate([se, refresh.ravel()]))
        # extend the OU window up to the last needed tick, drop what is no longer reachable
        if needed[-1] >= buf_start + len(buf):
            extra = path.advance(int(needed[-1] - (buf_start + len(buf)) + 1))
            buf = np.concatenate([buf, extra])
        keep_from = int(needed[0]) - buf_start
        buf, buf_start = buf[keep_from:], int(needed[0])
        dev = buf[needed - buf_start]
        try:
            v = power_flow_batch(setup.model, setup.loads(dev), v_ref=setup.base_voltages)
        except PowerFlowDivergence as exc:
            raise PowerFlowDivergence(f"ticks {needed[0]}..{needed[-1]}: {exc}", exc.mismatch,
                                      exc.iterations) from exc
        readings = np.stack([setup.measure(hr, int(t)) for hr, t in zip(setup.functions.h(v), needed)])
        row = {int(t): r for r, t in enumerate(needed)}
        for b, t in enumerate(se):
            t = int(t)
            r_now = row[t]
            z = readings[r_now].copy()
            z[setup.synthetic_idx] = setup.synthetic_values
            ages = np.zeros(plan.d, dtype=int)
            for gi, idx in enumerate(members):
                q = int(refresh[b, gi])
                z[idx] = readings[row[q], idx]
                ages[idx] = t - q
            stale = np.zeros(plan.d)
            stale[scada] = _stale_rows(setup, scada, ages)
            yield Snapshot(t, z, stale, plan.meter_sigma ** 2 + stale, v[r_now], ages)


def _stale_rows(setup, rows, ages):
    elapsed = ages[rows].astype(float) * setup.dt
    per_load = setup.stationary[None, :] * -np.expm1(-2.0 * setup.thetas[None, :] * elapsed[:, None])
    return np.einsum("ij,ij->i", setup.stale_map[rows], per_load)
