"""Blind deconvolution by alternating MAP optimization.

One outer iteration runs many proximal-gradient steps on the image at the
current kernel, then a single gradient step on the kernel parameters; the
image is reset to the observation at a fixed cadence to escape bad local
minima.  A Douglas-Rachford variant swaps the inner image update for
denoiser-driven splitting steps, accepting any image-to-image map as the
denoiser.  Initialization helpers cover the large-kernel, small-Gaussian,
and sign-offset strategies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grids import ImageGrid, Kernel, fourier_multipliers
from .kernels import (
    KernelSpec,
    ONED_FAMILIES,
    family_from_spec,
    kernel_jacobian,
    simplex_project,
)
from .landscape import DivergenceError
from .priors import PriorModel


@dataclass
class SolverConfig:
    K: int = 400
    K_x: int = 100
    gamma_x: float = 0.01
    gamma_theta: float = 0.001
    reinit_period: int = 100
    sigma_y: float = 0.01
    init_strategy: str = "uniform_largest"
    init_epsilon: float = 0.15
    theta_hint: np.ndarray | None = None
    explicit_theta: np.ndarray | None = None
    algorithm: str = "alternating"
    kernel_snapshot_every: int = 0
    prior_weight_floor: float = 1e-4  # keeps the prior active when sigma_y = 0

    def __post_init__(self):
        if self.gamma_x <= 0 or self.gamma_theta <= 0:
            raise ValueError("step sizes must be positive")
        if self.reinit_period < 1:
            raise ValueError("reinit_period must be at least 1")

    @property
    def prior_weight(self) -> float:
        return max(self.sigma_y**2, self.prior_weight_floor)


@dataclass
class SolveTrace:
    thetas: list[np.ndarray] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    data_fidelity: list[float] = field(default_factory=list)
    potential: list[float] = field(default_factory=list)
    kernel_snapshots: list[tuple[int, Kernel]] = field(default_factory=list)
    clamped_steps: int = 0


def init_kernel(
    family: KernelSpec,
    strategy: str,
    epsilon: float = 0.15,
    hint: np.ndarray | None = None,
    explicit: np.ndarray | None = None,
) -> KernelSpec:
    """Initial kernel parameters for a family under a named strategy.

    uniform_largest picks the largest kernel in the family (uniform weights
    for the simplex family, theta_max for the one-parameter families);
    gaussian_small embeds a Gaussian of standard deviation 1.5 px;
    zernike_offset moves a hinted coefficient vector outward by epsilon in
    the componentwise sign direction.
    """
    fam = family_from_spec(family)
    if strategy == "explicit":
        if explicit is None:
            raise ValueError("explicit initialization requires a theta vector")
        return family.with_theta(explicit)
    if strategy == "uniform_largest":
        if family.family == "simplex":
            return family.with_theta(np.full(fam.theta_dim, 1.0 / fam.theta_dim))
        if family.family in ONED_FAMILIES:
            return family.with_theta([family.config.theta_max])
        raise ValueError(f"uniform_largest undefined for family {family.family!r}")
    if strategy == "gaussian_small":
        if family.family == "simplex":
            side = 2 * family.support_radius + 1
            dy = np.arange(-family.support_radius, family.support_radius + 1)[:, None]
            dx = dy.T
            w = np.exp(-(dy * dy + dx * dx) / (2.0 * 1.5**2))
            return family.with_theta((w / w.sum()).ravel())
        if family.family == "gaussian":
            return family.with_theta([1.5 / family.config.gaussian_std_per_theta])
        if family.family in ONED_FAMILIES:
            return family.with_theta([1.5])
        raise ValueError(f"gaussian_small undefined for family {family.family!r}")
    if strategy == "zernike_offset":
        if hint is None:
            raise ValueError("zernike_offset initialization requires a hint vector")
        hint = np.asarray(hint, dtype=np.float64)
        return family.with_theta(hint + epsilon * np.sign(hint))
    raise ValueError(f"unknown init strategy {strategy!r}")


def _kernel_space_gradient(x: np.ndarray, residual: np.ndarray, radius: int) -> np.ndarray:
    """d/dh of the data term for a free-form kernel: cross-correlation taps."""
    h, w = x.shape[-2:]
    corr = np.fft.irfft2(np.conj(np.fft.rfft2(x)) * np.fft.rfft2(residual), s=(h, w))
    corr = corr.sum(axis=0) if corr.ndim == 3 else corr
    offsets = np.arange(-radius, radius + 1)
    return corr[np.ix_(offsets % h, offsets % w)].ravel()


def _theta_step(family_name, fam, theta, x_arr, residual, gamma_theta, theta_max):
    """One kernel gradient step, with family-specific domain handling."""
    clamped = False
    if family_name == "simplex":
        g = _kernel_space_gradient(x_arr, residual, fam.support_radius)
        theta = simplex_project(theta - gamma_theta * g)
    else:
        jac = kernel_jacobian(fam, ImageGrid(x_arr), theta)
        grad = jac.matrix.T @ residual.ravel()
        theta = theta - gamma_theta * grad
        if family_name in ONED_FAMILIES:
            lo, hi = 0.0, theta_max
            if theta[0] < lo or theta[0] > hi:
                clamped = True
                theta = np.clip(theta, lo, hi)
    return theta, clamped


def _run_outer_loop(y, prior, family, cfg, inner_update, image_estimate):
    """Shared outer loop of the alternating algorithms."""
    if cfg.K < 1 or cfg.K_x < 1:
        raise ValueError("iteration counts must be at least 1")
    spec0 = init_kernel(family, cfg.init_strategy, cfg.init_epsilon,
                        cfg.theta_hint, cfg.explicit_theta)
    fam = family_from_spec(spec0)
    theta = spec0.theta.copy()
    theta_max = family.config.theta_max
    shape = y.shape
    y_arr = y.data
    yhat = np.fft.rfft2(y_arr)
    weight = cfg.prior_weight

    trace = SolveTrace()
    x = y_arr.copy()
    for k in range(cfg.K):
        if k % cfg.reinit_period == 0:
            x = y_arr.copy()
        kern = fam.kernel(theta)
        mult = fourier_multipliers(kern, shape[-2:])
        x = inner_update(x, mult, yhat)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite iterate at outer step {k}", trace)

        residual = np.fft.irfft2(np.fft.rfft2(x) * mult, s=shape[-2:]) - y_arr
        theta, clamped = _theta_step(family.family, fam, theta, x, residual,
                                     cfg.gamma_theta, theta_max)
        trace.clamped_steps += int(clamped)

        estimate = image_estimate(x)
        data_term = 0.5 * float(np.sum(residual**2))
        trace.thetas.append(theta.copy())
        trace.data_fidelity.append(data_term)
        if prior is not None and prior.has_exact_potential:
            q = prior.potential_array(estimate)
            trace.potential.append(q)
            trace.objective.append(data_term + weight * q)
        if cfg.kernel_snapshot_every and k % cfg.kernel_snapshot_every == 0:
            trace.kernel_snapshots.append((k, kern))

    final = ImageGrid(image_estimate(x))
    return final, spec0.with_theta(theta), trace


def solve_alternating(
    y: ImageGrid,
    prior: PriorModel,
    family: KernelSpec,
    cfg: SolverConfig,
) -> tuple[ImageGrid, KernelSpec, SolveTrace]:
    """Alternating MAP estimation of the image and the kernel parameters.

    Inner updates are proximal-gradient steps
    x <- prox of the data term at (x - gamma_x * sigma_y^2 * grad q(x)),
    with the proximal map solved in closed form per outer step; the kernel
    moves by one gradient step per outer iteration and the image restarts
    from the observation every ``reinit_period`` outer steps.
    """
    weight = cfg.prior_weight
    gx = cfg.gamma_x
    shape = y.shape

    def inner(x, mult, yhat):
        den = 1.0 + gx * np.abs(mult) ** 2
        cross = gx * np.conj(mult) * yhat
        for _ in range(cfg.K_x):
            z = x + gx * weight * prior.score_array(x, None)
            x = np.fft.irfft2((np.fft.rfft2(z) + cross) / den, s=shape[-2:])
        return x

    return _run_outer_loop(y, prior, family, cfg, inner, lambda x: x)


def solve_douglas_rachford(
    y: ImageGrid,
    denoiser: Callable[[ImageGrid], ImageGrid],
    family: KernelSpec,
    cfg: SolverConfig,
    prior: PriorModel | None = None,
) -> tuple[ImageGrid, KernelSpec, SolveTrace]:
    """Alternating estimation with Douglas-Rachford inner splitting.

    The inner update is z = D(x); x <- x + prox(2z - x) - z with the data
    proximal map, so any image-to-image denoiser stands in for the prior.
    The reported image is the denoised endpoint D(x_K) (the splitting
    variable itself is a pre-denoising auxiliary state); the optional prior
    is only used to record objective values along the trace.
    """
    gx = cfg.gamma_x
    shape = y.shape

    def apply_denoiser(arr: np.ndarray) -> np.ndarray:
        out = denoiser(ImageGrid(arr))
        return out.data if isinstance(out, ImageGrid) else np.asarray(out, dtype=np.float64)

    def inner(x, mult, yhat):
        den = 1.0 + gx * np.abs(mult) ** 2
        cross = gx * np.conj(mult) * yhat
        for _ in range(cfg.K_x):
            z = apply_denoiser(x)
            prox = np.fft.irfft2((np.fft.rfft2(2.0 * z - x) + cross) / den, s=shape[-2:])
            x = x + prox - z
        return x

    return _run_outer_loop(y, prior, family, cfg, inner, apply_denoiser)
