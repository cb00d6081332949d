"""Exact prior evaluation through the probability-flow ODE.

The potential of an image is computed by integrating the flow ODE from t_eps
to the schedule horizon together with the accumulated divergence of the
velocity field (instantaneous change of variables).  The divergence is either
exact (analytic priors expose the trace of the score Jacobian), estimated
with Skilling-Hutchinson Rademacher probes, or averaged over every sign
pattern for small problems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grids import ImageGrid
from .priors import DiffusionSchedule, PriorModel

# Dormand-Prince 5(4) tableau; the fifth-order solution propagates.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_STAGES = 7


class StiffnessError(RuntimeError):
    """Raised when the adaptive step size underflows."""


@dataclass
class Rk45Report:
    n_evals: int
    accepted: int
    rejected: int
    atol: float
    rtol: float
    stages: int = _STAGES


@dataclass
class OdeSolveReport:
    """Outcome of one flow integration."""

    x_T: ImageGrid
    logdet_integral: float
    n_evals: int
    accepted: int
    rejected: int
    probe_count: int
    atol: float
    rtol: float
    divergence_mode: str = "probes"


def _error_norm(err, y0, y1, atol, rtol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(rhs, t0, t1, y0, f0, atol, rtol):
    """Step-size heuristic based on the local derivative magnitudes."""
    span = t1 - t0
    scale = atol + rtol * np.abs(y0)
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    if d1 <= 1e-14:
        return span
    h0 = min(0.01 * d0 / d1 if d0 > 1e-5 else 1e-6 * span, span)
    f1 = rhs(t0 + h0, y0 + h0 * f0)
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6 * span, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def rk45_integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    x0: np.ndarray,
    t0: float,
    t1: float,
    atol: float = 1e-5,
    rtol: float = 1e-5,
    max_steps: int = 100_000,
) -> tuple[np.ndarray, Rk45Report]:
    """Adaptive Dormand-Prince 4(5) integration of dy/dt = rhs(t, y).

    The per-step local error is controlled against atol + rtol * |state|
    componentwise.  Deterministic for deterministic rhs.
    """
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    if atol <= 0 or rtol <= 0:
        raise ValueError("tolerances must be positive")

    y = np.asarray(x0, dtype=np.float64).copy()
    t = t0
    n_evals = 0
    accepted = rejected = 0

    def f(tt, yy):
        nonlocal n_evals
        n_evals += 1
        return np.asarray(rhs(tt, yy), dtype=np.float64)

    f0 = f(t, y)
    h = _initial_step(lambda tt, yy: f(tt, yy), t, t1, y, f0, atol, rtol)

    for _ in range(max_steps):
        if t >= t1:
            break
        h = min(h, t1 - t)
        if h < 1e-12 * (t1 - t0):
            raise StiffnessError(f"step size underflow at t={t:.6g}")
        k = np.empty((_STAGES,) + y.shape)
        k[0] = f(t, y)
        for i in range(1, _STAGES):
            yi = y + h * np.tensordot(_DP_A[i], k[:i], axes=(0, 0))
            k[i] = f(t + _DP_C[i] * h, yi)
        y5 = y + h * np.tensordot(_DP_B5, k, axes=(0, 0))
        err = h * np.tensordot(_DP_B5 - _DP_B4, k, axes=(0, 0))
        norm = _error_norm(err, y, y5, atol, rtol)
        if norm <= 1.0:
            accepted += 1
            t = t + h
            y = y5
            if not np.all(np.isfinite(y)):
                raise StiffnessError(f"non-finite state at t={t:.6g}")
            factor = 5.0 if norm == 0.0 else min(5.0, 0.9 * norm**-0.2)
            h *= max(0.2, factor)
        else:
            rejected += 1
            h *= max(0.2, 0.9 * norm**-0.2)
    else:
        raise StiffnessError(f"exceeded {max_steps} steps")

    return y, Rk45Report(n_evals, accepted, rejected, atol, rtol)


def _rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def _fd_jvp(field, x, u):
    """Forward-difference directional derivative of field at x along u."""
    step = 1e-4 * (1.0 + float(np.max(np.abs(x)))) / float(np.max(np.abs(u)))
    return (field(x + step * u) - field(x)) / step


def hutchinson_divergence(
    field: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    probes: int,
    rng_seed: int,
    jvp: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> float:
    """Skilling-Hutchinson estimate (1/probes) sum u^T J_field(x) u.

    Probes are Rademacher vectors from a seeded generator.  Directional
    derivatives use ``jvp`` when the field supplies one, otherwise forward
    finite differences of the field.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    total = 0.0
    for _ in range(probes):
        u = _rademacher(rng, x.shape)
        du = jvp(x, u) if jvp is not None else _fd_jvp(field, x, u)
        total += float(np.sum(u * du))
    return total / probes


def exhaustive_divergence(
    field: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    jvp: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> float:
    """Average of u^T J u over all 2^d sign vectors (exact trace), d <= 20."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    if d > 20:
        raise ValueError(f"exhaustive enumeration over 2^{d} probes is infeasible")
    total = 0.0
    for bits in range(2**d):
        u = np.array([1.0 if bits >> i & 1 else -1.0 for i in range(d)]).reshape(x.shape)
        du = jvp(x, u) if jvp is not None else _fd_jvp(field, x, u)
        total += float(np.sum(u * du))
    return total / 2**d


def log_prior(
    prior: PriorModel,
    sched: DiffusionSchedule | None,
    x0: ImageGrid,
    probes: int = 16,
    atol: float = 1e-5,
    rtol: float = 1e-5,
    seed: int = 0,
    divergence: str = "auto",
    fresh_probes: bool = False,
) -> tuple[float, OdeSolveReport]:
    """Potential (negative log prior density) of x0 via the flow ODE.

    Integrates the state together with the accumulated divergence from t_eps
    to the horizon and anchors at the Gaussian N(0, sigma(T)^2 I) terminal
    density.  ``divergence`` selects "exact" (analytic trace), "probes"
    (Hutchinson), or "exhaustive" (all sign patterns); "auto" uses the exact
    trace when the prior provides one.  With ``fresh_probes`` the Rademacher
    set is redrawn at every velocity evaluation instead of held fixed.
    """
    if sched is None:
        sched = prior.sched
    if divergence == "auto":
        divergence = "exact" if prior.has_exact_divergence else "probes"
    if divergence not in ("exact", "probes", "exhaustive"):
        raise ValueError(f"unknown divergence mode {divergence!r}")

    shape = x0.shape
    d = x0.size
    rng = np.random.default_rng(seed)
    if divergence == "probes":
        probe_bank = [_rademacher(rng, shape) for _ in range(probes)]
        probe_count = probes
    elif divergence == "exhaustive":
        if d > 20:
            raise ValueError("exhaustive divergence is limited to d <= 20")
        probe_bank = [
            np.array([1.0 if bits >> i & 1 else -1.0 for i in range(d)]).reshape(shape)
            for bits in range(2**d)
        ]
        probe_count = 2**d
    else:
        probe_bank = []
        probe_count = 0

    def velocity(arr, t):
        return -0.5 * sched.g_squared(t) * prior.score_array(arr, t)

    # exact directional derivatives of the velocity, when the prior has them
    has_jvp = type(prior).score_jvp_array is not PriorModel.score_jvp_array

    def rhs(t, z):
        arr = z[:d].reshape(shape)
        v = velocity(arr, t)
        if divergence == "exact":
            div = -0.5 * sched.g_squared(t) * prior.score_divergence_array(arr, t)
        else:
            bank = probe_bank
            if fresh_probes and divergence == "probes":
                bank = [_rademacher(rng, shape) for _ in range(probes)]
            total = 0.0
            for u in bank:
                if has_jvp:
                    du = -0.5 * sched.g_squared(t) * prior.score_jvp_array(arr, u, t)
                else:
                    step = 1e-4 * (1.0 + float(np.max(np.abs(arr))))
                    du = (velocity(arr + step * u, t) - v) / step
                total += float(np.sum(u * du))
            div = total / len(bank)
        return np.concatenate([v.ravel(), [div]])

    z0 = np.concatenate([x0.ravel(), [0.0]])
    z_end, rk = rk45_integrate(rhs, z0, sched.t_eps, sched.horizon, atol, rtol)
    x_T = z_end[:d]
    logdet = float(z_end[d])

    sigma_T = sched.sigma(sched.horizon)
    log_p_T = -0.5 * d * math.log(2.0 * math.pi * sigma_T**2) - 0.5 * float(
        np.sum(x_T**2)
    ) / sigma_T**2
    potential = -log_p_T - logdet

    report = OdeSolveReport(
        x_T=ImageGrid(x_T.reshape(shape)),
        logdet_integral=logdet,
        n_evals=rk.n_evals,
        accepted=rk.accepted,
        rejected=rk.rejected,
        probe_count=probe_count,
        atol=atol,
        rtol=rtol,
        divergence_mode=divergence,
    )
    return potential, report
