"""Image priors: potential, score, and Hessian-vector products.

A prior exposes the potential q(x) = -log p(x) evaluated at a small diffusion
time t_eps (for numerical stability), the score grad log p_t at any time of a
variance-exploding noising schedule, and Hessian-vector products of q.  Two
analytic priors are provided: an isotropic Gaussian mixture, whose noised
marginals stay a mixture, and a convex quadratic acting through fixed Fourier
multipliers.  Both give exact oracles for every landscape probe; external
evaluators (e.g. a pretrained score network behind a pipe) plug in through the
same interface, see external.py.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .grids import ImageGrid


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance-exploding schedule: zero drift, sigma(t) geometric in t.

    g(t)^2 equals d sigma^2/dt, so the noised marginal of a base distribution
    at time t adds sigma(t)^2 of isotropic variance.
    """

    sigma_min: float = 0.01
    sigma_max: float = 50.0
    horizon: float = 1.0
    t_eps: float = 1e-3

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not 0 < self.t_eps < self.horizon:
            raise ValueError("need 0 < t_eps < horizon")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, t: float) -> float:
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** (t / self.horizon)

    def g(self, t: float) -> float:
        return self.sigma(t) * math.sqrt(2.0 * self.log_ratio / self.horizon)

    def g_squared(self, t: float) -> float:
        return self.sigma(t) ** 2 * 2.0 * self.log_ratio / self.horizon

    def check_time(self, t: float) -> float:
        if not self.t_eps - 1e-12 <= t <= self.horizon + 1e-12:
            raise ValueError(f"time {t} outside [{self.t_eps}, {self.horizon}]")
        return float(t)


DEFAULT_SCHEDULE = DiffusionSchedule()


class PriorModel:
    """Interface shared by all priors.

    Subclasses implement the array-level methods; the ImageGrid wrappers add
    validation.  ``score`` follows the convention score = grad log p_t, so the
    potential's gradient is -score(., t_eps).
    """

    has_exact_potential = False
    has_hvp = False
    has_exact_divergence = False

    def __init__(self, sched: DiffusionSchedule = DEFAULT_SCHEDULE):
        self.sched = sched

    # -- array-level API (hot paths) --
    def potential_array(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def score_array(self, x: np.ndarray, t: float | None = None) -> np.ndarray:
        raise NotImplementedError

    def hvp_array(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no Hessian-vector products")

    def score_jvp_array(self, x: np.ndarray, v: np.ndarray, t: float | None = None) -> np.ndarray:
        """Directional derivative of the score map, d/de score(x + e v, t)."""
        raise NotImplementedError

    def score_divergence_array(self, x: np.ndarray, t: float | None = None) -> float:
        """Exact trace of the score Jacobian at x (analytic priors only)."""
        raise NotImplementedError

    # -- ImageGrid API --
    def potential(self, x: ImageGrid) -> float:
        return float(self.potential_array(x.data))

    def score(self, x: ImageGrid, t: float | None = None) -> ImageGrid:
        return ImageGrid(self.score_array(x.data, t))

    def hvp(self, x: ImageGrid, v: ImageGrid) -> ImageGrid:
        return ImageGrid(self.hvp_array(x.data, v.data))

    def _time(self, t: float | None) -> float:
        return self.sched.t_eps if t is None else self.sched.check_time(t)


class GmmPrior(PriorModel):
    """Isotropic Gaussian mixture with per-component variance base_variance.

    Under the VE schedule the marginal at time t is the same mixture with
    component variance base_variance + sigma(t)^2, which makes every
    time-indexed quantity closed-form.  Responsibilities are computed in
    log-space with max subtraction so widely separated components stay stable.
    """

    has_exact_potential = True
    has_hvp = True
    has_exact_divergence = True

    def __init__(self, means, weights, base_variance: float, sched: DiffusionSchedule = DEFAULT_SCHEDULE):
        super().__init__(sched)
        mats = []
        shape = None
        for m in means:
            arr = m.data if isinstance(m, ImageGrid) else ImageGrid(m).data
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError("all component means must share one shape")
            mats.append(arr.ravel())
        self.image_shape = shape
        self.means = np.stack(mats)  # (k, d)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 1 or weights.size != self.means.shape[0]:
            raise ValueError("weights must be a vector matching the number of means")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        self.log_weights = np.log(weights)
        self.weights = weights
        if base_variance <= 0:
            raise ValueError("base_variance must be positive")
        self.base_variance = float(base_variance)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def variance_at(self, t: float | None = None) -> float:
        return self.base_variance + self.sched.sigma(self._time(t)) ** 2

    def _check(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).ravel()
        if flat.size != self.dim:
            raise ValueError(f"expected {self.dim} pixels, got {flat.size}")
        return flat

    def _log_joint(self, flat: np.ndarray, s: float) -> np.ndarray:
        d2 = np.sum((self.means - flat) ** 2, axis=1)
        return self.log_weights - 0.5 * d2 / s - 0.5 * self.dim * math.log(2.0 * math.pi * s)

    def log_density(self, x, t: float | None = None) -> float:
        flat = self._check(x.data if isinstance(x, ImageGrid) else x)
        return float(logsumexp(self._log_joint(flat, self.variance_at(t))))

    def responsibilities(self, flat: np.ndarray, s: float) -> np.ndarray:
        lj = self._log_joint(flat, s)
        lj = lj - lj.max()
        r = np.exp(lj)
        return r / r.sum()

    def potential_array(self, x):
        return -self.log_density(x)

    def score_array(self, x, t=None):
        flat = self._check(x)
        s = self.variance_at(t)
        r = self.responsibilities(flat, s)
        posterior_mean = r @ self.means
        return ((posterior_mean - flat) / s).reshape(self.image_shape)

    def hvp_array(self, x, v, t=None):
        flat = self._check(x)
        vflat = self._check(v)
        s = self.variance_at(t)
        r = self.responsibilities(flat, s)
        proj = self.means @ vflat  # (k,)
        cov_v = (r * proj) @ self.means - (r @ self.means) * (r @ proj)
        out = vflat / s - cov_v / s**2
        return out.reshape(self.image_shape)

    def score_jvp_array(self, x, v, t=None):
        return -self.hvp_array(x, v, t)

    def score_divergence_array(self, x, t=None):
        flat = self._check(x)
        s = self.variance_at(t)
        r = self.responsibilities(flat, s)
        diffs = self.means - flat
        mean_diff = r @ diffs
        trace_cov = float(r @ np.sum(diffs * diffs, axis=1) - mean_diff @ mean_diff)
        return -(self.dim / s - trace_cov / s**2)

    def mmse_denoise(self, x: ImageGrid, noise_variance: float) -> ImageGrid:
        """Posterior mean when x is the clean signal plus N(0, noise_variance)."""
        flat = self._check(x.data)
        s = self.base_variance + noise_variance
        r = self.responsibilities(flat, s)
        out = flat + noise_variance * ((r @ self.means - flat) / s)
        return ImageGrid(out.reshape(self.image_shape))

    def prox(self, v: ImageGrid, weight: float) -> ImageGrid:
        """Exact proximal map of weight * q, single-component mixtures only."""
        if self.means.shape[0] != 1:
            raise NotImplementedError("closed-form prox requires a single component")
        s = self.variance_at(None)
        a = weight / s
        out = (v.data.ravel() + a * self.means[0]) / (1.0 + a)
        return ImageGrid(out.reshape(self.image_shape))


class SpectralQuadraticPrior(PriorModel):
    """Convex quadratic potential through non-negative Fourier multipliers.

    q(x) = 1/2 sum_w d(w) |xhat(w)|^2 with a unitary FFT, the additive
    constant fixed to zero.  Multipliers are symmetrized under frequency
    negation so the gradient stays real.  For any non-negative unit-sum blur
    kernel |hhat| <= 1 entrywise, hence q(h * x) <= q(x) for every image.
    """

    has_exact_potential = True
    has_hvp = True
    has_exact_divergence = True

    def __init__(self, multipliers, image_shape=None, sched: DiffusionSchedule = DEFAULT_SCHEDULE):
        super().__init__(sched)
        d = np.asarray(multipliers, dtype=np.float64)
        if d.ndim not in (2, 3):
            raise ValueError("multipliers must be (H, W) or (C, H, W)")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("multipliers must be finite and non-negative")
        if d.ndim == 2:
            sym = 0.5 * (d + d[np.ix_((-np.arange(d.shape[0])) % d.shape[0], (-np.arange(d.shape[1])) % d.shape[1])])
        else:
            neg = d[:, (-np.arange(d.shape[1])) % d.shape[1]][:, :, (-np.arange(d.shape[2])) % d.shape[2]]
            sym = 0.5 * (d + neg)
        self.multipliers = sym
        if image_shape is None:
            image_shape = sym.shape if sym.ndim == 3 else (1,) + sym.shape
        if sym.shape[-2:] != tuple(image_shape[-2:]):
            raise ValueError("multiplier grid does not match the image shape")
        self.image_shape = tuple(image_shape)

    def _mult_at(self, t: float | None) -> np.ndarray:
        t = self._time(t)
        extra = self.sched.sigma(t) ** 2 - self.sched.sigma(self.sched.t_eps) ** 2
        d = self.multipliers
        return d / (1.0 + extra * d)

    def _apply_mult(self, arr: np.ndarray, mult: np.ndarray) -> np.ndarray:
        xhat = np.fft.fft2(arr, norm="ortho")
        return np.real(np.fft.ifft2(mult * xhat, norm="ortho"))

    def potential_array(self, x):
        xhat = np.fft.fft2(np.asarray(x, dtype=np.float64).reshape(self.image_shape), norm="ortho")
        return float(0.5 * np.sum(self.multipliers * np.abs(xhat) ** 2))

    def score_array(self, x, t=None):
        arr = np.asarray(x, dtype=np.float64).reshape(self.image_shape)
        return -self._apply_mult(arr, self._mult_at(t))

    def hvp_array(self, x, v):
        arr = np.asarray(v, dtype=np.float64).reshape(self.image_shape)
        return self._apply_mult(arr, self.multipliers)

    def score_jvp_array(self, x, v, t=None):
        arr = np.asarray(v, dtype=np.float64).reshape(self.image_shape)
        return -self._apply_mult(arr, self._mult_at(t))

    def score_divergence_array(self, x, t=None):
        mult = self._mult_at(t)
        channels = self.image_shape[0] if mult.ndim == 2 else 1
        return -float(channels * mult.sum())

    def prox(self, v: ImageGrid, weight: float) -> ImageGrid:
        """Exact proximal map of weight * q: Fourier shrinkage."""
        vhat = np.fft.fft2(v.data, norm="ortho")
        out = np.real(np.fft.ifft2(vhat / (1.0 + weight * self.multipliers), norm="ortho"))
        return ImageGrid(out)


def flow_velocity(prior: PriorModel, sched: DiffusionSchedule, x: ImageGrid, t: float) -> ImageGrid:
    """Velocity of the probability-flow ODE: f + g^2/2 * grad q_t, with f = 0."""
    return ImageGrid(flow_velocity_array(prior, sched, x.data, t))


def flow_velocity_array(prior: PriorModel, sched: DiffusionSchedule, x: np.ndarray, t: float) -> np.ndarray:
    sched.check_time(t)
    return -0.5 * sched.g_squared(t) * prior.score_array(x, t)
