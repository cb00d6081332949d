"""Landscape probes: critical points, Hessian spectra, posterior profiles.

These are the reusable experiment procedures: fixed-step gradient descent on
the potential, dense Hessian assembly from Hessian-vector products, spectrum
thresholding for the intrinsic dimension, the prior profile under increasing
blur, and posterior profiles over a one-parameter kernel family in the
noiseless (exact Fourier inversion) and noisy (momentum descent) regimes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flow import log_prior
from .grids import ConvOperator, ImageGrid, Kernel, regularized_inverse
from .kernels import KernelSpec, family_from_spec
from .priors import PriorModel


class DivergenceError(RuntimeError):
    """Descent diverged; carries the trace collected so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class DescentTrace:
    iterates: list[ImageGrid]
    potentials: list[float]
    final_gradient_norm: float
    step: float
    iterations: int
    relative_distance: float  # ||x_end - x_0|| / ||x_0||


@dataclass
class PosteriorProfile:
    """Values of an objective across a grid of kernel parameters."""

    thetas: np.ndarray
    values: np.ndarray
    mode: str  # prior_blur | noiseless_exact | noisy_descent
    sigma_y: float = 0.0
    argmin_images: list[ImageGrid] | None = None
    flags: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diff(self.thetas) <= 0):
            raise ValueError("profile grid must be strictly increasing")


def descend_to_critical_point(
    prior: PriorModel,
    x0: ImageGrid,
    step: float = 0.02,
    iters: int = 10_000,
    grad_tol: float = 1e-8,
    thin: int = 100,
) -> tuple[ImageGrid, DescentTrace]:
    """Fixed-step gradient descent on the potential via x <- x + step * score.

    Stops early when the score norm drops below ``grad_tol``.  If the
    potential increases for 50 consecutive steps the run is declared divergent
    and the trace so far is attached to the raised error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = x0.data.copy()
    x0_norm = x0.norm()
    track_potential = prior.has_exact_potential
    iterates = [x0]
    potentials = [prior.potential_array(x)] if track_potential else []
    grad_norm = np.inf
    rising = 0
    last_potential = potentials[0] if track_potential else None
    done = 0
    for k in range(1, iters + 1):
        s = prior.score_array(x, None)
        grad_norm = float(np.linalg.norm(s))
        if grad_norm < grad_tol:
            break
        x = x + step * s
        done = k
        if track_potential:
            p = prior.potential_array(x)
            rising = rising + 1 if p > last_potential else 0
            last_potential = p
            if rising >= 50:
                trace = DescentTrace(iterates, potentials, grad_norm, step, k,
                                     float(np.linalg.norm(x - x0.data)) / max(x0_norm, 1e-30))
                raise DivergenceError(f"potential rose for 50 consecutive steps at iteration {k}", trace)
        if k % thin == 0:
            iterates.append(ImageGrid(x))
            if track_potential:
                potentials.append(last_potential)
    end = ImageGrid(x)
    if iterates[-1] is not end:
        iterates.append(end)
        if track_potential:
            potentials.append(prior.potential_array(x))
    trace = DescentTrace(
        iterates,
        potentials,
        grad_norm,
        step,
        done,
        float(np.linalg.norm(x - x0.data)) / max(x0_norm, 1e-30),
    )
    return end, trace


@dataclass
class HessianResult:
    matrix: np.ndarray
    asymmetry: float


def assemble_hessian(prior: PriorModel, x: ImageGrid, cap: int = 4096) -> HessianResult:
    """Dense potential Hessian from one hvp per canonical direction.

    The raw matrix is symmetrized as (H + H^T)/2 and the dropped asymmetry
    norm is reported alongside.
    """
    d = x.size
    if d > cap:
        raise ValueError(f"dimension {d} exceeds the dense-Hessian cap {cap}")
    shape = x.shape
    rows = np.empty((d, d))
    basis = np.zeros(d)
    for k in range(d):
        basis[k] = 1.0
        rows[k] = prior.hvp_array(x.data, basis.reshape(shape)).ravel()
        basis[k] = 0.0
    asymmetry = float(np.linalg.norm(rows - rows.T, ord=np.inf))
    return HessianResult(0.5 * (rows + rows.T), asymmetry)


def spectrum_and_dimension(
    hessian: np.ndarray, threshold: float = 1e-5
) -> tuple[np.ndarray, int]:
    """Eigenvalues in decreasing order and the count below the threshold.

    The count of near-zero curvature directions is read as the local
    manifold dimension at a critical point.
    """
    hessian = np.asarray(hessian, dtype=np.float64)
    if hessian.ndim != 2 or hessian.shape[0] != hessian.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.allclose(hessian, hessian.T, atol=1e-10 * max(1.0, float(np.abs(hessian).max()))):
        raise ValueError("expected a symmetric matrix")
    eigs = np.linalg.eigvalsh(hessian)[::-1]
    intrinsic_dim = int(np.sum(eigs < threshold))
    return eigs, intrinsic_dim


def _evaluate_potential(prior: PriorModel, x: ImageGrid, seed: int) -> float:
    if prior.has_exact_potential:
        return prior.potential(x)
    value, _ = log_prior(prior, prior.sched, x, seed=seed)
    return value


def blur_potential_profile(
    prior: PriorModel,
    x: ImageGrid,
    family: KernelSpec,
    n_points: int = 11,
    theta_max: float = 5.0,
    seed: int = 0,
    threads: int = 1,
) -> PosteriorProfile:
    """Potential of h_theta * x on an equally spaced theta grid from 0."""
    fam = family_from_spec(family)
    thetas = np.linspace(0.0, theta_max, n_points)

    def value_at(theta: float, idx: int) -> float:
        kern = fam.kernel(np.array([theta]))
        blurred = ConvOperator(kern).apply(x)
        return _evaluate_potential(prior, blurred, seed + idx)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(lambda it: value_at(it[1], it[0]), enumerate(thetas)))
    else:
        values = [value_at(t, i) for i, t in enumerate(thetas)]
    return PosteriorProfile(
        thetas, values, mode="prior_blur",
        metadata={"family": family.family, "seed": seed},
    )


def posterior_profile_noiseless(
    prior: PriorModel,
    x_bar: ImageGrid,
    family: KernelSpec,
    lam: float,
    grid: Sequence[float],
    theta_bar: float,
    seed: int = 0,
    keep_images: bool = False,
) -> PosteriorProfile:
    """Exact noiseless posterior profile: potential of the deblurred image.

    The observation is synthesized with the lambda-perturbed operator at
    theta_bar, so inversion at theta_bar returns x_bar exactly and the profile
    value there equals potential(x_bar).
    """
    fam = family_from_spec(family)
    y_bar = ConvOperator(fam.kernel(np.array([theta_bar])), lam).apply(x_bar)
    values = []
    images = [] if keep_images else None
    for i, theta in enumerate(grid):
        kern = fam.kernel(np.array([float(theta)]))
        x_hat = regularized_inverse(y_bar, kern, lam)
        values.append(_evaluate_potential(prior, x_hat, seed + i))
        if keep_images:
            images.append(x_hat)
    return PosteriorProfile(
        np.asarray(grid, dtype=np.float64), values, mode="noiseless_exact",
        argmin_images=images,
        metadata={"family": family.family, "lambda": lam, "theta_bar": theta_bar, "seed": seed},
    )


class PosteriorObjective:
    """l_y(x, theta) = 1/2 ||H_theta x - y||^2 + sigma_y^2 q(x) at fixed theta."""

    def __init__(self, prior: PriorModel, kernel: Kernel, y: ImageGrid, sigma_y: float):
        self.prior = prior
        self.op = ConvOperator(kernel)
        self.y = y.data
        self.weight = sigma_y**2

    def value(self, x: np.ndarray) -> float:
        r = self.op.apply_array(x) - self.y
        return 0.5 * float(np.sum(r * r)) + self.weight * self.prior.potential_array(x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        r = self.op.apply_array(x) - self.y
        return self.op.adjoint_array(r) - self.weight * self.prior.score_array(x, None)


def momentum_descent(
    objective: PosteriorObjective,
    x0: np.ndarray,
    step: float,
    momentum: float,
    iters: int,
    grad_tol: float = 1e-10,
) -> np.ndarray:
    """Heavy-ball iteration x <- x - step * grad + momentum * (x - x_prev)."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    x = x0.copy()
    x_prev = x0.copy()
    for _ in range(iters):
        g = objective.grad(x)
        if float(np.linalg.norm(g)) < grad_tol:
            break
        x_new = x - step * g + momentum * (x - x_prev)
        x_prev, x = x, x_new
        if not np.all(np.isfinite(x)):
            raise DivergenceError("momentum descent produced non-finite values")
    return x


def posterior_profile_noisy(
    prior: PriorModel,
    x_bar: ImageGrid,
    family: KernelSpec,
    sigma_y: float,
    grid: Sequence[float],
    theta_bar: float,
    n_starts: int = 3,
    step: float = 0.1,
    momentum: float = 0.9,
    iters: int = 2000,
    lam: float = 1e-3,
    seed: int = 0,
    keep_images: bool = False,
) -> PosteriorProfile:
    """Approximate inf_x l_y(x, theta) per grid point by momentum descent.

    y is synthesized at theta_bar with seeded white noise of scale sigma_y.
    Each grid point restarts from up to three initializations (the
    observation, the regularized inverse, and the ground truth plus a little
    noise); the endpoint attaining the lowest objective value is kept.  Grid
    entries where every start diverges are flagged invalid.
    """
    if sigma_y <= 0:
        raise ValueError("sigma_y must be positive")
    rng = np.random.default_rng(seed)
    fam = family_from_spec(family)
    clean = ConvOperator(fam.kernel(np.array([theta_bar]))).apply(x_bar)
    y = ImageGrid(clean.data + sigma_y * rng.standard_normal(clean.shape))

    values = []
    flags = []
    images = [] if keep_images else None
    for theta in grid:
        kern = fam.kernel(np.array([float(theta)]))
        objective = PosteriorObjective(prior, kern, y, sigma_y)
        starts = [y.data]
        if n_starts >= 2:
            try:
                starts.append(regularized_inverse(y, kern, lam).data)
            except Exception:
                pass
        if n_starts >= 3:
            starts.append(x_bar.data + 0.01 * sigma_y * rng.standard_normal(x_bar.shape))
        best_val, best_x = np.inf, None
        for x0 in starts[:n_starts]:
            try:
                x_end = momentum_descent(objective, x0, step, momentum, iters)
            except DivergenceError:
                continue
            val = objective.value(x_end)
            if val < best_val:
                best_val, best_x = val, x_end
        flags.append(best_x is not None)
        values.append(best_val if best_x is not None else np.nan)
        if keep_images:
            images.append(ImageGrid(best_x) if best_x is not None else None)

    return PosteriorProfile(
        np.asarray(grid, dtype=np.float64), np.asarray(values),
        mode="noisy_descent", sigma_y=sigma_y, argmin_images=images,
        flags=np.asarray(flags),
        metadata={"family": family.family, "theta_bar": theta_bar, "seed": seed,
                  "step": step, "momentum": momentum, "lambda": lam},
    )
