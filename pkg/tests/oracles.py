"""Independent reference computations used only by the tests."""
import numpy as np
from scipy import integrate, special

# Reference solution of the 33-bus feeder at base load (from a backward/forward sweep
# solved to 1e-12, independent of the Newton solver under test).
BW33_V18 = 0.913090
BW33_LOSS_KW = 202.677


def sweep_power_flow(model, loads=None, tol=1e-12, max_iter=200):
    """Backward/forward sweep for radial feeders: branch currents up, voltages down."""
    loads = model.base_loads if loads is None else np.asarray(loads, dtype=complex)
    n = model.n
    parent = model.parent
    order = [model.slack]
    children = {i: [] for i in range(n)}
    for i in range(n):
        if parent[i] >= 0:
            children[parent[i]].append(i)
    k = 0
    while k < len(order):
        order.extend(children[order[k]])
        k += 1
    z = {}
    for br in model.branches:
        if br.in_service:
            z[(br.from_bus, br.to_bus)] = z[(br.to_bus, br.from_bus)] = br.series_impedance
    v = np.full(n, model.slack_voltage, dtype=complex)
    for _ in range(max_iter):
        current = np.conj(loads / v)
        for i in reversed(order[1:]):
            current[parent[i]] += current[i]
        new = v.copy()
        for i in order[1:]:
            new[i] = new[parent[i]] - z[(parent[i], i)] * current[i]
        if np.max(np.abs(new - v)) < tol:
            return new
        v = new
    raise RuntimeError("sweep did not converge")


def chi2_quantile_by_quadrature(dof, p):
    """Invert a numerically integrated chi-squared density by bisection."""
    k = dof / 2.0
    log_norm = -k * np.log(2.0) - special.gammaln(k)

    def cdf(x):
        f = lambda t: np.exp(log_norm + (k - 1) * np.log(t) - t / 2) if t > 0 else 0.0
        pts = [dof] if x > dof else None
        val, _ = integrate.quad(f, 0, x, points=pts, limit=200, epsabs=1e-13, epsrel=1e-12)
        return val

    lo, hi = 0.0, dof + 20 * np.sqrt(2 * dof) + 20
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
