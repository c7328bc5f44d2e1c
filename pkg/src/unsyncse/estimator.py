"""Non-linear WLS state estimation with projection-based error analytics.

Two-step procedure: step 1 weights either empirically (sigma = |z|/100) or
with the time-varying meter-plus-staleness variances; the chi-squared test on
J_CME decides whether a second pass with meter-precision weights runs and
names the suspect measurement.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .chi2 import chi2_threshold
from .grid import GridModel
from .measurements import MeasurementDef, MeasurementPlan, PlanFunctions, eval_h, flat_state, jacobian_row

log = logging.getLogger(__name__)

MODES = ("ideal", "traditional", "proposed")
WEIGHT_MODES = ("empirical_step1", "timevarying_step1", "meter_precision_step2")

EMPIRICAL_FRACTION = 0.01
EMPIRICAL_FLOOR = 1e-4


class EstimatorObservabilityError(np.linalg.LinAlgError):
    pass


class EstimatorDivergence(RuntimeError):
    def __init__(self, message: str, last_step: float, iterations: int):
        self.last_step = last_step
        self.iterations = iterations
        super().__init__(f"{message} (last max|dx| {last_step:.3e} after {iterations} iterations)")


@dataclass(frozen=True)
class WeightMatrix:
    variances: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.mode!r}")
        if np.any(~(np.asarray(self.variances) > 0)):
            raise ValueError("all variances must be positive")

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.variances

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.variances)

    @classmethod
    def empirical(cls, z) -> "WeightMatrix":
        sigma = np.maximum(np.abs(z) * EMPIRICAL_FRACTION, EMPIRICAL_FLOOR)
        return cls(sigma ** 2, "empirical_step1")

    @classmethod
    def meter(cls, plan: MeasurementPlan) -> "WeightMatrix":
        return cls(plan.meter_sigma ** 2, "meter_precision_step2")

    @classmethod
    def time_varying(cls, plan: MeasurementPlan, staleness_var) -> "WeightMatrix":
        return cls(plan.meter_sigma ** 2 + np.asarray(staleness_var), "timevarying_step1")


@dataclass
class WlsSolution:
    x_hat: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    iterations: int


@dataclass
class EstimationResult:
    x_hat: np.ndarray
    residuals: np.ndarray
    k_diag: np.ndarray
    ii: np.ndarray
    cme: np.ndarray
    cme_n: np.ndarray
    j_cme: float
    threshold: float
    detected: bool
    step_reached: int
    suspect_index: int | None
    iterations: int
    critical: np.ndarray
    step1_j_cme: float | None = None


def wls_solve(plan: MeasurementPlan, z, weights: WeightMatrix, model: GridModel, x0=None, *,
              tol: float = 1e-8, max_iter: int = 25, functions: PlanFunctions | None = None) -> WlsSolution:
    """Gauss-Newton iterations, each solved by QR of the whitened Jacobian, until max|dx| <= tol."""
    if plan.d < plan.n_state:
        raise EstimatorObservabilityError(f"{plan.d} measurements cannot determine {plan.n_state} states")
    fn = functions or PlanFunctions(plan, model)
    z = np.asarray(z, dtype=float)
    sw = np.sqrt(weights.weights)
    x = flat_state(model) if x0 is None else np.array(x0, dtype=float)
    step = np.inf
    for it in range(1, max_iter + 1):
        hx, jac = fn.h_and_jacobian(x)
        # whitened least squares; same step as the normal equations, better conditioned
        q, r = _whitened_qr(jac, sw)
        dx = scipy.linalg.solve_triangular(r, q.T @ (sw * (z - hx)))
        x += dx
        step = float(np.max(np.abs(dx)))
        if not np.isfinite(step):
            break
        if step <= tol:
            hx, jac = fn.h_and_jacobian(x)
            return WlsSolution(x, z - hx, jac, it)
    raise EstimatorDivergence("WLS did not converge", step, max_iter)


def _whitened_qr(jac, sw, rcond: float = 1e-12):
    q, r = scipy.linalg.qr(jac * sw[:, None], mode="economic")
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= rcond * diag.max():
        raise EstimatorObservabilityError("gain matrix is singular; plan unobservable at this state")
    return q, r


def projection_matrix(jac: np.ndarray, weights: WeightMatrix) -> np.ndarray:
    """K = H (H^T W H)^-1 H^T W, formed as W^-1/2 Q Q^T W^1/2."""
    sw = np.sqrt(weights.weights)
    q, _ = _whitened_qr(jac, sw)
    return (q / sw[:, None]) @ (q.T * sw[None, :])


def projection_and_indices(jac: np.ndarray, weights: WeightMatrix, *, critical_tol: float = 1e-9):
    """Diagonal of K = H (H^T W H)^-1 H^T W and the innovation indices.

    Returns ``(k_diag, ii, critical)``. Critical measurements (K_ii = 1) get
    II = 0; K_ii = 0 gives II = inf.
    """
    q, _ = _whitened_qr(jac, np.sqrt(weights.weights))
    k = np.einsum("ij,ij->i", q, q)
    critical = k >= 1.0 - critical_tol
    k = np.clip(k, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        ii = np.where(critical, 0.0, np.sqrt(1.0 - k) / np.sqrt(k))
    return k, ii, critical


def cme_analysis(residuals, ii, sigmas, d: int | None = None, p: float = 0.95, critical=None):
    """Composed measurement errors and the chi-squared verdict.

    Returns ``(cme, cme_n, j_cme, threshold, detected)``. Critical entries
    (II = 0) have undefined CME: they are NaN and left out of J_CME.
    """
    r = np.asarray(residuals, dtype=float)
    ii = np.asarray(ii, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if not (r.shape == ii.shape == sigmas.shape):
        raise ValueError("residuals, ii and sigmas must have the same length")
    critical = (ii == 0) if critical is None else np.asarray(critical, dtype=bool) | (ii == 0)
    if np.any(critical):
        log.info("excluding %d critical measurement(s) from J_CME", int(critical.sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.sqrt(1.0 + 1.0 / ii ** 2)
    with np.errstate(invalid="ignore"):
        cme = np.where(critical, np.nan, r * factor)
    cme_n = cme / sigmas
    j_cme = float(np.nansum(cme_n ** 2))
    threshold = chi2_threshold(len(r) if d is None else d, p)
    return cme, cme_n, j_cme, threshold, j_cme >= threshold


def _analyse(plan, z, weights, model, x0, p, fn):
    sol = wls_solve(plan, z, weights, model, x0, functions=fn)
    k, ii, critical = projection_and_indices(sol.jacobian, weights)
    cme, cme_n, j, thr, det = cme_analysis(sol.residuals, ii, weights.sigmas, plan.d, p, critical)
    return sol, k, ii, critical, cme, cme_n, j, thr, det


def two_step_estimate(plan: MeasurementPlan, z, mode: str, model: GridModel,
                      w_time: WeightMatrix | None = None, *, p: float = 0.95, x0=None,
                      functions: PlanFunctions | None = None) -> EstimationResult:
    """Run step 1 and, only if J_CME reaches the threshold, step 2.

    Step 1 weights: sigma = max(|z|/100, 1e-4) for ``ideal``/``traditional``,
    ``w_time`` (meter plus staleness variance) for ``proposed``. Step 2 uses
    meter-precision weights and reports the largest |CME^N| as the suspect.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    fn = functions or PlanFunctions(plan, model)
    z = np.asarray(z, dtype=float)
    if mode == "proposed":
        if w_time is None:
            raise ValueError("proposed mode needs the time-varying weight matrix")
        w1 = w_time
    else:
        w1 = WeightMatrix.empirical(z)

    sol, k, ii, crit, cme, cme_n, j, thr, det = _analyse(plan, z, w1, model, x0, p, fn)
    iterations = sol.iterations
    if not det:
        return EstimationResult(sol.x_hat, sol.residuals, k, ii, cme, cme_n, j, thr, False, 1, None,
                                iterations, crit, j)

    step1_j = j
    sol, k, ii, crit, cme, cme_n, j, thr, det = _analyse(plan, z, WeightMatrix.meter(plan), model,
                                                         sol.x_hat, p, fn)
    suspect = int(np.nanargmax(np.abs(cme_n))) if np.any(np.isfinite(cme_n)) else None
    return EstimationResult(sol.x_hat, sol.residuals, k, ii, cme, cme_n, j, thr, True, 2, suspect,
                            iterations + sol.iterations, crit, step1_j)


def truncation_error(model: GridModel, mdef: MeasurementDef, x_ref, x_true) -> float:
    """First-order Taylor remainder of h about ``x_ref`` evaluated at ``x_true``."""
    x_ref = np.asarray(x_ref, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    # difference of differences: exactly zero when h is linear in the state
    predicted = jacobian_row(x_ref, mdef, model) @ (x_true - x_ref)
    return float(predicted - (eval_h(x_true, mdef, model) - eval_h(x_ref, mdef, model)))
