"""Ornstein-Uhlenbeck load deviations and the staleness variance they induce.

Each load is ``S_i(t) = S_base_i + X_i(t)`` where ``X_i`` is a complex OU
process reverting to zero. The recursions below are exact discretisations,
so the step size only sets the sampling grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.signal


@dataclass(frozen=True)
class OuParams:
    theta: float
    sigma_ou: float
    dt: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if self.sigma_ou < 0:
            raise ValueError("sigma_ou must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def gamma(self) -> float:
        return math.exp(-2.0 * self.theta * self.dt)

    @property
    def decay(self) -> float:
        return math.exp(-self.theta * self.dt)

    @property
    def stationary_var(self) -> float:
        return self.sigma_ou ** 2 / (2.0 * self.theta)

    @classmethod
    def from_stationary_pct(cls, theta: float, pct: float, magnitude: float, dt: float) -> "OuParams":
        """Parameters whose stationary std is ``pct`` of ``magnitude``."""
        return cls(theta, pct * magnitude * math.sqrt(2.0 * theta), dt)


@dataclass(frozen=True)
class OuLoadState:
    s_now: complex
    s_anchor: complex
    anchor_tick: int
    staleness_var: float = 0.0

    def acquire(self, tick: int) -> "OuLoadState":
        return replace(self, s_anchor=self.s_now, anchor_tick=tick, staleness_var=0.0)


def innovation_std(params: OuParams) -> float:
    """Per-axis std of the one-step complex innovation."""
    return math.sqrt(0.5 * params.stationary_var * (1.0 - params.gamma))


def sample_step(state: OuLoadState, params: OuParams, rng: np.random.Generator,
                draw: np.ndarray | None = None) -> OuLoadState:
    """Advance one sample: ``S <- S e^{-theta dt} + zeta`` and grow the staleness variance.

    ``draw`` supplies the two standard normals (real, imaginary) instead of ``rng``.
    """
    if draw is None:
        draw = rng.standard_normal(2)
    zeta = innovation_std(params) * complex(draw[0], draw[1])
    return replace(state, s_now=state.s_now * params.decay + zeta,
                   staleness_var=variance_update(state.staleness_var, params))


def variance_update(prev_var, params: OuParams):
    g = params.gamma
    return prev_var * g + params.stationary_var * (1.0 - g)


def stale_variance(params: OuParams, elapsed):
    """Variance of the load change accumulated over ``elapsed`` seconds."""
    elapsed = np.asarray(elapsed, dtype=float)
    if np.any(elapsed < 0):
        raise ValueError("elapsed time must be non-negative")
    out = params.stationary_var * -np.expm1(-2.0 * params.theta * elapsed)
    return float(out) if out.ndim == 0 else out


class OuPath:
    """Streams deviations of many independent OU loads tick by tick or in chunks.

    Draws from ``rng`` in the same order whether advanced one tick or many at
    once, so both routes produce the same path.
    """

    def __init__(self, params: list[OuParams], rng: np.random.Generator, x0=None):
        self.params = params
        self.rng = rng
        self.decay = np.array([p.decay for p in params])
        self.scale = np.array([innovation_std(p) for p in params])
        self.x = np.zeros(len(params), dtype=complex) if x0 is None else np.array(x0, dtype=complex)
        self.tick = 0

    def step(self) -> np.ndarray:
        z = self.rng.standard_normal((len(self.params), 2))
        self.x = self.x * self.decay + self.scale * (z[:, 0] + 1j * z[:, 1])
        self.tick += 1
        return self.x

    def advance(self, ticks: int) -> np.ndarray:
        """Deviations at the next ``ticks`` ticks, shape ``(ticks, loads)``."""
        z = self.rng.standard_normal((ticks, len(self.params), 2))
        innov = self.scale * (z[..., 0] + 1j * z[..., 1])
        out = np.empty((ticks, len(self.params)), dtype=complex)
        for j, a in enumerate(self.decay):
            out[:, j], _ = scipy.signal.lfilter([1.0], [1.0, -a], innov[:, j], zi=[a * self.x[j]])
        self.x = out[-1].copy()
        self.tick += ticks
        return out
