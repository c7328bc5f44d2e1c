"""Measurement functions, Jacobians and measurement plans.

The state vector is ``[angles of non-slack buses, magnitudes of all buses]``,
length ``2n - 1``. Flow locations are directed bus pairs ``(at, other)``:
the terminal of branch at-other that sits at bus ``at``.
"""
from __future__ import annotations

import functools

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .grid import GridModel, TrueState, ac_power_flow

KINDS = ("flow_P", "flow_Q", "inj_P", "inj_Q", "vmag")
SOURCES = ("scada", "pmu", "synthetic")

GRL_TARGETS = {"grl_3": 3.0, "grl_reduced": 2.769}


class ObservabilityError(ValueError):
    def __init__(self, message: str, buses: Sequence[int] = ()):
        self.buses = tuple(buses)
        super().__init__(message)


@dataclass(frozen=True)
class MeterSigmas:
    """Rated meter precision as a fraction of the reading at base load.

    A measurement's ``meter_sigma`` is ``max(fraction * |h(base state)|, floor)``;
    synthetic injections get ``synthetic_factor`` times the SCADA injection value.
    """

    scada: float = 0.01
    pmu: float = 0.01
    synthetic_factor: float = 5.0
    floor: float = 1e-5

    def rated(self, source: str, base_value: float) -> float:
        if source == "synthetic":
            return self.synthetic_factor * max(self.scada * abs(base_value), self.floor)
        frac = self.scada if source == "scada" else self.pmu
        return max(frac * abs(base_value), self.floor)


@dataclass(frozen=True)
class MeasurementDef:
    kind: str
    location: int | tuple[int, int]
    source: str
    group_id: int | None
    meter_sigma: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown measurement source {self.source!r}")
        if not self.meter_sigma > 0:
            raise ValueError("meter_sigma must be positive")
        if self.kind.startswith("flow") != isinstance(self.location, tuple):
            raise ValueError(f"{self.kind} cannot be located at {self.location!r}")

    @property
    def bus(self) -> int:
        return self.location[0] if isinstance(self.location, tuple) else self.location


@dataclass(frozen=True, eq=False)
class MeasurementPlan:
    defs: tuple[MeasurementDef, ...]
    n_state: int
    target_d: int | None = None

    @property
    def d(self) -> int:
        return len(self.defs)

    @property
    def grl(self) -> float:
        return self.d / self.n_state

    @property
    def deficit(self) -> int:
        return 0 if self.target_d is None else max(self.target_d - self.d, 0)

    @functools.cached_property
    def meter_sigma(self) -> np.ndarray:
        out = np.array([m.meter_sigma for m in self.defs])
        out.flags.writeable = False
        return out

    def indices(self, source: str) -> np.ndarray:
        return np.array([i for i, m in enumerate(self.defs) if m.source == source], dtype=int)

    def group_members(self) -> dict[int, np.ndarray]:
        groups: dict[int, list[int]] = {}
        for i, m in enumerate(self.defs):
            if m.group_id is not None:
                groups.setdefault(m.group_id, []).append(i)
        return {g: np.array(v, dtype=int) for g, v in sorted(groups.items())}


@dataclass
class MeasurementSample:
    def_index: int
    value: float
    acquired_tick: int
    variance_state: float


# --- state vector helpers ---------------------------------------------------

def voltages_from_state(x, model: GridModel) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_state,):
        raise ValueError(f"state must have length {model.n_state}, got {x.shape}")
    va = np.zeros(model.n)
    va[model.nonslack] = x[: model.n - 1]
    va[model.slack] = np.angle(model.slack_voltage)
    return x[model.n - 1:] * np.exp(1j * va)


def state_from_voltages(v, model: GridModel) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    return np.concatenate([np.angle(v)[model.nonslack], np.abs(v)])


def flat_state(model: GridModel) -> np.ndarray:
    return np.concatenate([np.zeros(model.n - 1), np.full(model.n, abs(model.slack_voltage))])


def _as_polar(state, model):
    if isinstance(state, TrueState):
        v = state.voltages
    else:
        state = np.asarray(state)
        if not np.iscomplexobj(state):
            if state.shape != (model.n_state,):
                raise ValueError("state dimension does not match the model")
            # read the state directly; a complex round trip would perturb the last bits
            va = np.zeros(model.n)
            va[model.nonslack] = state[: model.n - 1]
            va[model.slack] = np.angle(model.slack_voltage)
            return va, state[model.n - 1:].astype(float)
        v = state
    if v.shape != (model.n,):
        raise ValueError("state dimension does not match the model")
    return np.angle(v), np.abs(v)


def _branch_params(model, at, other):
    try:
        k = model.terminal[(at, other)]
    except KeyError:
        raise ValueError(f"no in-service branch between internal buses {at} and {other}") from None
    br = model.branches[k]
    y = br.series_admittance
    return y.real, y.imag, 0.5 * br.shunt_susceptance


# --- per-measurement evaluation (polar form) ---------------------------------

def eval_h(state, mdef: MeasurementDef, model: GridModel) -> float:
    """Exact AC value of one measurement at ``state`` (voltages, TrueState or x)."""
    va, vm = _as_polar(state, model)
    if mdef.kind == "vmag":
        return float(vm[mdef.location])
    if mdef.kind.startswith("inj"):
        i = mdef.location
        g, b = model.ybus[i].real, model.ybus[i].imag
        dth = va[i] - va
        if mdef.kind == "inj_P":
            return float(vm[i] * np.sum(vm * (g * np.cos(dth) + b * np.sin(dth))))
        return float(vm[i] * np.sum(vm * (g * np.sin(dth) - b * np.cos(dth))))
    i, j = mdef.location
    g, b, bsh = _branch_params(model, i, j)
    dth = va[i] - va[j]
    c, s = np.cos(dth), np.sin(dth)
    if mdef.kind == "flow_P":
        return float(vm[i] ** 2 * g - vm[i] * vm[j] * (g * c + b * s))
    return float(-vm[i] ** 2 * (b + bsh) - vm[i] * vm[j] * (g * s - b * c))


def jacobian_row(state, mdef: MeasurementDef, model: GridModel) -> np.ndarray:
    """Analytic gradient of ``eval_h`` with respect to the state vector."""
    va, vm = _as_polar(state, model)
    n = model.n
    d_va = np.zeros(n)
    d_vm = np.zeros(n)
    if mdef.kind == "vmag":
        d_vm[mdef.location] = 1.0
    elif mdef.kind.startswith("inj"):
        i = mdef.location
        g, b = model.ybus[i].real, model.ybus[i].imag
        dth = va[i] - va
        c, s = np.cos(dth), np.sin(dth)
        p_i = vm[i] * np.sum(vm * (g * c + b * s))
        q_i = vm[i] * np.sum(vm * (g * s - b * c))
        if mdef.kind == "inj_P":
            d_va = vm[i] * vm * (g * s - b * c)
            d_va[i] = -q_i - b[i] * vm[i] ** 2
            d_vm = vm[i] * (g * c + b * s)
            d_vm[i] = p_i / vm[i] + g[i] * vm[i]
        else:
            d_va = -vm[i] * vm * (g * c + b * s)
            d_va[i] = p_i - g[i] * vm[i] ** 2
            d_vm = vm[i] * (g * s - b * c)
            d_vm[i] = q_i / vm[i] - b[i] * vm[i]
    else:
        i, j = mdef.location
        g, b, bsh = _branch_params(model, i, j)
        dth = va[i] - va[j]
        c, s = np.cos(dth), np.sin(dth)
        if mdef.kind == "flow_P":
            d_va[i] = vm[i] * vm[j] * (g * s - b * c)
            d_va[j] = -d_va[i]
            d_vm[i] = 2 * vm[i] * g - vm[j] * (g * c + b * s)
            d_vm[j] = -vm[i] * (g * c + b * s)
        else:
            d_va[i] = -vm[i] * vm[j] * (g * c + b * s)
            d_va[j] = -d_va[i]
            d_vm[i] = -2 * vm[i] * (b + bsh) - vm[j] * (g * s - b * c)
            d_vm[j] = -vm[i] * (g * s - b * c)
    return np.concatenate([d_va[model.nonslack], d_vm])


# --- whole-plan evaluation ------------------------------------------------------

class PlanFunctions:
    """Vectorised h(x) and H(x) for a whole plan.

    Built from complex matrix derivatives; agrees with the per-measurement
    ``eval_h``/``jacobian_row`` route to rounding.
    """

    def __init__(self, plan: MeasurementPlan, model: GridModel):
        self.plan = plan
        self.model = model
        n = model.n
        kinds = [m.kind for m in plan.defs]
        self.rows = {k: np.array([i for i, kk in enumerate(kinds) if kk == k], dtype=int) for k in KINDS}
        self.inj_p_bus = np.array([plan.defs[i].location for i in self.rows["inj_P"]], dtype=int)
        self.inj_q_bus = np.array([plan.defs[i].location for i in self.rows["inj_Q"]], dtype=int)
        self.vm_bus = np.array([plan.defs[i].location for i in self.rows["vmag"]], dtype=int)

        # one row of a terminal-admittance matrix per flow measurement
        flow_rows = np.concatenate([self.rows["flow_P"], self.rows["flow_Q"]])
        self.flow_rows = flow_rows
        self.n_flow_p = len(self.rows["flow_P"])
        yt = np.zeros((len(flow_rows), n), dtype=complex)
        at = np.zeros(len(flow_rows), dtype=int)
        for r, idx in enumerate(flow_rows):
            i, j = plan.defs[idx].location
            g, b, bsh = _branch_params(model, i, j)
            y = complex(g, b)
            yt[r, i] = y + 1j * bsh
            yt[r, j] = -y
            at[r] = i
        self.y_term = yt
        self.at = at
        self.nonslack = model.nonslack

    def h(self, v: np.ndarray) -> np.ndarray:
        """Measurement vector at complex voltages ``v`` (n,) or a batch (m, n)."""
        v = np.asarray(v, dtype=complex)
        batch = v.ndim == 2
        vv = v if batch else v[None, :]
        out = np.empty((len(vv), self.plan.d))
        s = vv * np.conj(vv @ self.model.ybus.T)
        out[:, self.rows["inj_P"]] = s[:, self.inj_p_bus].real
        out[:, self.rows["inj_Q"]] = s[:, self.inj_q_bus].imag
        out[:, self.rows["vmag"]] = np.abs(vv[:, self.vm_bus])
        sf = vv[:, self.at] * np.conj(vv @ self.y_term.T)
        out[:, self.rows["flow_P"]] = sf[:, : self.n_flow_p].real
        out[:, self.rows["flow_Q"]] = sf[:, self.n_flow_p:].imag
        return out if batch else out[0]

    def h_and_jacobian(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        model = self.model
        v = voltages_from_state(x, model)
        n = model.n
        ybus = model.ybus
        vnorm = v / np.abs(v)
        ibus = ybus @ v
        s = v * np.conj(ibus)
        ds_dvm = v[:, None] * np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
        ds_dva = 1j * v[:, None] * np.conj(np.diag(ibus) - ybus * v[None, :])

        it = self.y_term @ v
        sf = v[self.at] * np.conj(it)
        cf = np.zeros((len(self.at), n))
        cf[np.arange(len(self.at)), self.at] = 1.0
        dsf_dva = 1j * (np.conj(it)[:, None] * cf * v[None, :]
                        - v[self.at][:, None] * np.conj(self.y_term * v[None, :]))
        dsf_dvm = (v[self.at][:, None] * np.conj(self.y_term * vnorm[None, :])
                   + np.conj(it)[:, None] * cf * vnorm[None, :])

        d = self.plan.d
        hx = np.empty(d)
        jac = np.zeros((d, model.n_state))
        ns = self.nonslack
        nf = self.n_flow_p
        r = self.rows
        hx[r["inj_P"]] = s[self.inj_p_bus].real
        jac[r["inj_P"], : n - 1] = ds_dva[np.ix_(self.inj_p_bus, ns)].real
        jac[r["inj_P"], n - 1:] = ds_dvm[self.inj_p_bus].real
        hx[r["inj_Q"]] = s[self.inj_q_bus].imag
        jac[r["inj_Q"], : n - 1] = ds_dva[np.ix_(self.inj_q_bus, ns)].imag
        jac[r["inj_Q"], n - 1:] = ds_dvm[self.inj_q_bus].imag
        hx[r["flow_P"]] = sf[:nf].real
        jac[r["flow_P"], : n - 1] = dsf_dva[:nf][:, ns].real
        jac[r["flow_P"], n - 1:] = dsf_dvm[:nf].real
        hx[r["flow_Q"]] = sf[nf:].imag
        jac[r["flow_Q"], : n - 1] = dsf_dva[nf:][:, ns].imag
        jac[r["flow_Q"], n - 1:] = dsf_dvm[nf:].imag
        hx[r["vmag"]] = np.abs(v[self.vm_bus])
        jac[r["vmag"], n - 1 + self.vm_bus] = 1.0
        return hx, jac


# --- plans -----------------------------------------------------------------------

def _k_diag(jac, variances):
    w = 1.0 / variances
    gain = jac.T @ (jac * w[:, None])
    sol = np.linalg.solve(gain, jac.T)
    return np.einsum("ij,ji->i", jac, sol) * w


def check_observable(plan: MeasurementPlan, model: GridModel, tol: float = 1e-6) -> float:
    """Smallest singular value of H at flat start; raises when below ``tol``."""
    _, jac = PlanFunctions(plan, model).h_and_jacobian(flat_state(model))
    _, sv, vt = np.linalg.svd(jac, full_matrices=True)
    smallest = sv[-1] if len(sv) == model.n_state else 0.0
    if smallest <= tol:
        null = np.abs(vt[-1])
        cols = np.flatnonzero(null > 0.1 * null.max())
        buses = sorted({int(model.nonslack[c]) if c < model.n - 1 else int(c - (model.n - 1)) for c in cols})
        names = [model.buses[b].id for b in buses]
        raise ObservabilityError(f"plan is unobservable around buses {names}", names)
    return float(smallest)


def _min_ii_by_bus(plan, model):
    _, jac = PlanFunctions(plan, model).h_and_jacobian(flat_state(model))
    k = np.clip(_k_diag(jac, plan.meter_sigma ** 2), 1e-15, 1.0)
    ii = np.sqrt(np.clip(1 - k, 0, None)) / np.sqrt(k)
    out = np.full(model.n, np.inf)
    for m, val in zip(plan.defs, ii):
        buses = m.location if isinstance(m.location, tuple) else (m.location,)
        for b in buses:
            out[b] = min(out[b], val)
    return out


def synthetic_defs(plan: MeasurementPlan, model: GridModel, sigmas: MeterSigmas = MeterSigmas(),
                   base_state=None) -> list[MeasurementDef]:
    """Synthetic injection definitions filling the plan's deficit.

    Buses lacking injection measurements come first; within each tier buses
    are ranked by the smallest innovation index of the measurements touching
    them (flat-start estimate, meter weights). An odd deficit ends on a lone
    inj_P.
    """
    k = plan.deficit
    if k == 0:
        return []
    if base_state is None:
        base_state = ac_power_flow(model)
    has_inj = {m.location for m in plan.defs if m.kind.startswith("inj")}
    try:
        ii = _min_ii_by_bus(plan, model)
    except np.linalg.LinAlgError:
        ii = np.zeros(model.n)
    order = sorted(range(model.n), key=lambda b: (b in has_inj, ii[b], b))
    out: list[MeasurementDef] = []
    while len(out) < k:
        for b in order:
            for kind in ("inj_P", "inj_Q"):
                if len(out) < k:
                    probe = MeasurementDef(kind, b, "synthetic", None, 1.0)
                    out.append(replace(probe, meter_sigma=sigmas.rated("synthetic", eval_h(base_state, probe, model))))
            if len(out) >= k:
                break
    return out


def generate_synthetic(plan: MeasurementPlan, base_state, model: GridModel,
                       sigmas: MeterSigmas = MeterSigmas()) -> list[MeasurementSample]:
    """Synthetic samples for the plan's deficit, valued on ``base_state``.

    ``def_index`` values continue after the plan's existing definitions, in
    the order ``synthetic_defs`` returns them.
    """
    defs = synthetic_defs(plan, model, sigmas, base_state)
    return [MeasurementSample(plan.d + i, eval_h(base_state, m, model), 0, m.meter_sigma ** 2)
            for i, m in enumerate(defs)]


def real_measurements(model: GridModel, pmu_buses: Sequence[int],
                      sigmas: MeterSigmas = MeterSigmas(), base_state=None) -> list[MeasurementDef]:
    """Grouped SCADA/PMU measurements, one SCADA group per bus.

    Group ``b`` holds the P/Q flows at bus ``b``'s end of every incident
    branch; buses without a PMU also report their P/Q injection through
    SCADA, PMU buses report it through the PMU. The slack voltage magnitude
    closes the set.
    """
    pmu = set(pmu_buses)
    if not pmu <= set(range(model.n)):
        raise ValueError("pmu_buses must be internal bus indices of the model")
    if base_state is None:
        base_state = ac_power_flow(model)
    raw: list[tuple[str, object, str, int | None]] = []
    for b in range(model.n):
        for j in sorted(model.neighbours[b]):
            raw.append(("flow_P", (b, j), "scada", b))
            raw.append(("flow_Q", (b, j), "scada", b))
        src, grp = ("pmu", None) if b in pmu else ("scada", b)
        raw.append(("inj_P", b, src, grp))
        raw.append(("inj_Q", b, src, grp))
        if b == model.slack:
            raw.append(("vmag", b, src, grp))
    defs = []
    for kind, loc, src, grp in raw:
        probe = MeasurementDef(kind, loc, src, grp, 1.0)
        defs.append(replace(probe, meter_sigma=sigmas.rated(src, eval_h(base_state, probe, model))))
    return defs


def _trim(defs, model, target):
    """Drop the most redundant SCADA flows (smallest K_ii) until ``target`` remain."""
    defs = list(defs)
    while len(defs) > target:
        plan = MeasurementPlan(tuple(defs), model.n_state)
        _, jac = PlanFunctions(plan, model).h_and_jacobian(flat_state(model))
        k = _k_diag(jac, plan.meter_sigma ** 2)
        candidates = sorted((k[i], i) for i, m in enumerate(defs)
                            if m.source == "scada" and m.kind.startswith("flow"))
        for _, i in candidates:
            trial = MeasurementPlan(tuple(defs[:i] + defs[i + 1:]), model.n_state)
            try:
                check_observable(trial, model)
            except ObservabilityError:
                continue
            del defs[i]
            break
        else:
            raise ObservabilityError("cannot trim the plan to its target without losing observability")
    return defs


def build_plan(model: GridModel, pmu_buses: Sequence[int], target: str | float = "grl_3",
               sigmas: MeterSigmas = MeterSigmas()) -> MeasurementPlan:
    """Measurement plan sized to ``round(grl * N)`` measurements.

    ``target`` is a key of ``GRL_TARGETS`` or a GRL value. Surplus real
    measurements are trimmed (most redundant SCADA flows first); a deficit is
    filled with synthetic injections.
    """
    grl = GRL_TARGETS[target] if isinstance(target, str) else float(target)
    target_d = int(round(grl * model.n_state))
    if target_d < model.n_state:
        raise ValueError("target GRL below 1 cannot be observable")
    base_state = ac_power_flow(model)
    defs = real_measurements(model, pmu_buses, sigmas, base_state)
    if len(defs) > target_d:
        defs = _trim(defs, model, target_d)
    plan = MeasurementPlan(tuple(defs), model.n_state, target_d)
    if plan.deficit:
        plan = replace(plan, defs=plan.defs + tuple(synthetic_defs(plan, model, sigmas, base_state)))
    check_observable(plan, model)
    return plan


def apply_noise(true_value, sigma, rng: np.random.Generator | None = None, *, draw=None):
    """Add ``sigma`` times a standard normal draw (``draw`` overrides the rng)."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    if draw is None:
        draw = rng.standard_normal(np.shape(true_value))
    return true_value + sigma * draw


# --- CSV ---------------------------------------------------------------------------

CSV_HEADER = ["def_index", "kind", "location", "source", "group_id", "meter_sigma"]


def plan_to_csv(plan: MeasurementPlan, model: GridModel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for i, m in enumerate(plan.defs):
        if isinstance(m.location, tuple):
            loc = f"{model.buses[m.location[0]].id}-{model.buses[m.location[1]].id}"
        else:
            loc = str(model.buses[m.location].id)
        gid = "" if m.group_id is None else str(model.buses[m.group_id].id)
        w.writerow([i, m.kind, loc, m.source, gid, repr(m.meter_sigma)])
    return buf.getvalue()


def plan_from_csv(text: str, model: GridModel, target_d: int | None = None) -> MeasurementPlan:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and list(rows[0].keys()) != CSV_HEADER:
        raise ValueError(f"plan CSV header must be {','.join(CSV_HEADER)}")
    idx = model.index_of
    defs = []
    for n, row in enumerate(sorted(rows, key=lambda r: int(r["def_index"]))):
        if int(row["def_index"]) != n:
            raise ValueError("def_index values must be 0..d-1")
        loc_s = row["location"]
        if "-" in loc_s:
            a, b = loc_s.split("-")
            loc = (idx[int(a)], idx[int(b)])
        else:
            loc = idx[int(loc_s)]
        gid = idx[int(row["group_id"])] if row["group_id"] else None
        defs.append(MeasurementDef(row["kind"], loc, row["source"], gid, float(row["meter_sigma"])))
    for m in defs:
        if isinstance(m.location, tuple) and m.location not in model.terminal:
            raise ValueError(f"flow measurement on a missing or out-of-service branch: {m.location}")
    return MeasurementPlan(tuple(defs), model.n_state, target_d)


def greedy_pmu_placement(model: GridModel, count: int = 11) -> list[int]:
    """Spread ``count`` PMUs over the feeder, starting at the slack.

    Each pick is the bus farthest (in hops) from the PMUs already placed;
    ties go to the larger base load, then the lower index.
    """
    if not 1 <= count <= model.n:
        raise ValueError("count must be between 1 and the number of buses")

    def hops(src):
        dist = np.full(model.n, np.inf)
        dist[src] = 0
        queue = [src]
        while queue:
            i = queue.pop(0)
            for j in model.neighbours[i]:
                if dist[j] == np.inf:
                    dist[j] = dist[i] + 1
                    queue.append(j)
        return dist

    chosen = [model.slack]
    nearest = hops(model.slack)
    load = np.abs(model.base_loads)
    while len(chosen) < count:
        b = max((i for i in range(model.n) if i not in chosen),
                key=lambda i: (nearest[i], load[i], -i))
        chosen.append(b)
        nearest = np.minimum(nearest, hops(b))
    return sorted(chosen)
