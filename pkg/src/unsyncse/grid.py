"""Network data, admittance matrix and AC power flow.

Buses carry 1-based external ids in case files and 0-based internal indices
everywhere else. All quantities are per unit on ``base_mva`` once parsed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg

SLACK = "slack"
PQ = "PQ"


class CaseError(ValueError):
    """Malformed case file. ``line`` is the 1-based line number, if known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SingularBranchError(ValueError):
    pass


class PowerFlowDivergence(RuntimeError):
    def __init__(self, message: str, mismatch: float, iterations: int):
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(f"{message} (max mismatch {mismatch:.3e} pu after {iterations} iterations)")


@dataclass(frozen=True)
class Bus:
    id: int
    type: str
    base_load: complex  # per unit
    voltage: complex = 1.0 + 0.0j


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_impedance: complex
    shunt_susceptance: float = 0.0
    in_service: bool = True

    @property
    def series_admittance(self) -> complex:
        return 1.0 / self.series_impedance


@dataclass(frozen=True, eq=False)
class GridModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float
    slack_voltage: complex = 1.0 + 0.0j
    base_kv: float | None = None

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def n_state(self) -> int:
        return 2 * self.n - 1

    @cached_property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.type == SLACK)

    @cached_property
    def nonslack(self) -> np.ndarray:
        return np.array([i for i in range(self.n) if i != self.slack], dtype=int)

    @cached_property
    def index_of(self) -> dict[int, int]:
        """External bus id -> internal index."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def base_loads(self) -> np.ndarray:
        return np.array([b.base_load for b in self.buses], dtype=complex)

    @cached_property
    def ybus(self) -> np.ndarray:
        y = build_ybus(self)
        y.setflags(write=False)
        return y

    @cached_property
    def active_branches(self) -> tuple[int, ...]:
        return tuple(k for k, br in enumerate(self.branches) if br.in_service)

    @cached_property
    def terminal(self) -> dict[tuple[int, int], int]:
        """Directed bus pair (at, other) -> branch index, for in-service branches."""
        out = {}
        for k in self.active_branches:
            br = self.branches[k]
            out[(br.from_bus, br.to_bus)] = k
            out[(br.to_bus, br.from_bus)] = k
        return out

    @cached_property
    def neighbours(self) -> tuple[tuple[int, ...], ...]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for k in self.active_branches:
            br = self.branches[k]
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
        return tuple(tuple(a) for a in adj)

    @cached_property
    def parent(self) -> np.ndarray:
        """Parent of each bus in the BFS tree rooted at the slack (-1 for the slack)."""
        parent = np.full(self.n, -2, dtype=int)
        parent[self.slack] = -1
        queue = [self.slack]
        while queue:
            i = queue.pop(0)
            for j in self.neighbours[i]:
                if parent[j] == -2:
                    parent[j] = i
                    queue.append(j)
        return parent

    def subtree(self, at: int, other: int) -> frozenset[int]:
        """Buses on the side of branch at-other that does not contain the slack."""
        child = other if self.parent[other] == at else at
        members = {child}
        stack = [child]
        while stack:
            i = stack.pop()
            for j in self.neighbours[i]:
                if self.parent[j] == i and j not in members:
                    members.add(j)
                    stack.append(j)
        return frozenset(members)


@dataclass(frozen=True)
class TrueState:
    voltages: np.ndarray
    timestamp: int = 0
    mismatch_history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.voltages)


def parse_case(text: str, slack_voltage: complex = 1.0 + 0.0j) -> GridModel:
    base_mva = None
    base_kv = None
    raw_buses: list[tuple[int, str, float, float, int]] = []
    raw_branches: list[tuple[int, int, float, float, float, int, int]] = []
    seen: dict[int, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        key = tok[0].upper()
        try:
            if key == "BASE_MVA":
                if len(tok) != 2:
                    raise CaseError("BASE_MVA takes one value", lineno)
                base_mva = float(tok[1])
                if base_mva <= 0:
                    raise CaseError("BASE_MVA must be positive", lineno)
            elif key == "BASE_KV":
                base_kv = float(tok[1])
            elif key == "BUS":
                if len(tok) != 5:
                    raise CaseError("expected 'BUS id type Pd Qd'", lineno)
                bid = int(tok[1])
                btype = tok[2].lower()
                if btype not in ("slack", "pq"):
                    raise CaseError(f"unknown bus type {tok[2]!r}", lineno)
                if bid in seen:
                    raise CaseError(f"duplicate bus id {bid} (first on line {seen[bid]})", lineno)
                seen[bid] = lineno
                raw_buses.append((bid, SLACK if btype == "slack" else PQ, float(tok[3]), float(tok[4]), lineno))
            elif key == "BRANCH":
                if len(tok) != 7:
                    raise CaseError("expected 'BRANCH from to r x b status'", lineno)
                raw_branches.append((int(tok[1]), int(tok[2]), float(tok[3]), float(tok[4]),
                                     float(tok[5]), int(tok[6]), lineno))
            else:
                raise CaseError(f"unknown section {tok[0]!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, CaseError):
                raise
            raise CaseError(f"bad number: {exc}", lineno) from None

    if base_mva is None:
        raise CaseError("missing BASE_MVA")
    if not raw_buses:
        raise CaseError("no BUS records")
    n_slack = sum(1 for b in raw_buses if b[1] == SLACK)
    if n_slack != 1:
        raise CaseError(f"exactly one slack bus required, found {n_slack}")

    index = {b[0]: i for i, b in enumerate(raw_buses)}
    buses = tuple(Bus(id=bid, type=bt, base_load=complex(pd, qd) / base_mva)
                  for bid, bt, pd, qd, _ in raw_buses)
    branches = []
    for f, t, r, x, b, status, lineno in raw_branches:
        for bid in (f, t):
            if bid not in index:
                raise CaseError(f"branch references undeclared bus {bid}", lineno)
        if f == t:
            raise CaseError("branch connects a bus to itself", lineno)
        if status not in (0, 1):
            raise CaseError("branch status must be 0 or 1", lineno)
        if status and r == 0 and x == 0:
            raise CaseError("in-service branch with zero impedance", lineno)
        branches.append(Branch(index[f], index[t], complex(r, x), b, bool(status)))

    connected = set()
    for br in branches:
        if br.in_service:
            connected.update((br.from_bus, br.to_bus))
    if len(buses) > 1:
        for i, (bid, *_rest, lineno) in enumerate(raw_buses):
            if i not in connected:
                raise CaseError(f"bus {bid} is isolated", lineno)

    model = GridModel(buses, tuple(branches), base_mva, complex(slack_voltage), base_kv)
    if np.any(model.parent < -1):
        stray = [model.buses[i].id for i in np.flatnonzero(model.parent < -1)]
        raise CaseError(f"buses {stray} are not connected to the slack bus")
    return model


def load_case(path: str | Path, slack_voltage: complex = 1.0 + 0.0j) -> GridModel:
    return parse_case(Path(path).read_text(), slack_voltage)


def build_ybus(model: GridModel) -> np.ndarray:
    """Dense bus admittance matrix from the pi-model of each in-service branch."""
    n = model.n
    y = np.zeros((n, n), dtype=complex)
    for br in model.branches:
        if not br.in_service:
            continue
        if br.series_impedance == 0:
            raise SingularBranchError(
                f"zero series impedance on branch {model.buses[br.from_bus].id}-{model.buses[br.to_bus].id}")
        ys = br.series_admittance
        half = 0.5j * br.shunt_susceptance
        f, t = br.from_bus, br.to_bus
        y[f, f] += ys + half
        y[t, t] += ys + half
        y[f, t] -= ys
        y[t, f] -= ys
    return y


def _pf_jacobian(ybus: np.ndarray, v: np.ndarray, pvpq: np.ndarray) -> np.ndarray:
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    ds_dvm = np.diag(v) @ np.conj(ybus @ np.diag(vnorm)) + np.diag(np.conj(ibus) * vnorm)
    ds_dva = 1j * np.diag(v) @ np.conj(np.diag(ibus) - ybus @ np.diag(v))
    ix = np.ix_(pvpq, pvpq)
    return np.block([[ds_dva[ix].real, ds_dvm[ix].real],
                     [ds_dva[ix].imag, ds_dvm[ix].imag]])


def _mismatch(ybus, v, loads, pvpq):
    s = v * np.conj(ybus @ v) + loads
    return np.concatenate([s[pvpq].real, s[pvpq].imag])


def ac_power_flow(model: GridModel, loads=None, *, tol: float = 1e-8, max_iter: int = 30,
                  v0=None, timestamp: int = 0) -> TrueState:
    """Newton-Raphson power flow from a flat start (or ``v0``).

    ``loads`` is the complex per-bus demand in per unit; defaults to the base loads.
    """
    loads = model.base_loads if loads is None else np.asarray(loads, dtype=complex)
    ybus = model.ybus
    pvpq = model.nonslack
    npq = len(pvpq)
    if v0 is None:
        v = np.full(model.n, abs(model.slack_voltage), dtype=complex)
    else:
        v = np.array(v0, dtype=complex)
    v[model.slack] = model.slack_voltage
    va = np.angle(v)
    vm = np.abs(v)

    history = []
    f = _mismatch(ybus, v, loads, pvpq)
    norm = float(np.max(np.abs(f))) if npq else 0.0
    history.append(norm)
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise PowerFlowDivergence("power flow did not converge", norm, it)
        jac = _pf_jacobian(ybus, v, pvpq)
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise PowerFlowDivergence("singular power-flow Jacobian", norm, it) from None
        va[pvpq] += dx[:npq]
        vm[pvpq] += dx[npq:]
        v = vm * np.exp(1j * va)
        f = _mismatch(ybus, v, loads, pvpq)
        norm = float(np.max(np.abs(f)))
        history.append(norm)
        it += 1
        if not np.isfinite(norm) or np.any(vm <= 0):
            raise PowerFlowDivergence("power flow diverged", norm, it)
    return TrueState(v, timestamp, tuple(history))


def power_flow_batch(model: GridModel, loads: np.ndarray, *, tol: float = 1e-8,
                     max_iter: int = 40, v_ref=None) -> np.ndarray:
    """Solve many power flows at once, one per row of ``loads``.

    Uses a chord (fixed-Jacobian) Newton iteration with the Jacobian factored
    once at ``v_ref``; rows that do not reach ``tol`` fall back to the full
    Newton solver. Returns complex voltages, shape ``(len(loads), n)``.
    """
    loads = np.atleast_2d(np.asarray(loads, dtype=complex))
    ybus = model.ybus
    pvpq = model.nonslack
    npq = len(pvpq)
    if v_ref is None:
        v_ref = ac_power_flow(model, loads.mean(axis=0)).voltages
    lu = scipy.linalg.lu_factor(_pf_jacobian(ybus, v_ref, pvpq))

    m = len(loads)
    va = np.tile(np.angle(v_ref), (m, 1))
    vm = np.tile(np.abs(v_ref), (m, 1))
    v = vm * np.exp(1j * va)
    active = np.arange(m)
    for _ in range(max_iter):
        va_a, vm_a = va[active], vm[active]
        va_a[:, model.slack] = np.angle(model.slack_voltage)
        vm_a[:, model.slack] = abs(model.slack_voltage)
        va[active], vm[active] = va_a, vm_a
        v[active] = vm_a * np.exp(1j * va_a)
        s = v[active] * np.conj(v[active] @ ybus.T) + loads[active]
        f = np.concatenate([s[:, pvpq].real, s[:, pvpq].imag], axis=1)
        done = np.max(np.abs(f), axis=1) <= tol
        active, f = active[~done], f[~done]
        if len(active) == 0:
            break
        dx = scipy.linalg.lu_solve(lu, -f.T).T
        va[np.ix_(active, pvpq)] += dx[:, :npq]
        vm[np.ix_(active, pvpq)] += dx[:, npq:]
    for row in active:
        v[row] = ac_power_flow(model, loads[row], tol=tol, v0=v_ref).voltages
    return v
