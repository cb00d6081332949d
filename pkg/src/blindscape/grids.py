"""Raster arithmetic and FFT-domain circular convolution.

Images are real-valued rasters of shape (channels, height, width).  All
convolutions are circular; a blur kernel lives on its own odd-sided square
grid with the center tap at the middle index, and is embedded into the image
grid by a circular shift so that the zero-offset tap lands at pixel (0, 0).
With that convention the Dirac kernel is exactly the identity operator.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LAMBDA_GRID = tuple(10.0 ** k for k in range(-6, 0))
ROUNDTRIP_TOL = 1e-5


class SingularOperatorError(RuntimeError):
    """Raised when a convolution operator cannot be inverted."""


class NumericBreakdownError(RuntimeError):
    """Raised when an iterative solve produces non-finite values."""


class ImageGrid:
    """Immutable real raster of shape (channels, height, width).

    Entries must be finite.  A 2-D array is promoted to a single channel.
    The underlying array is copied and marked read-only, so instances can be
    shared freely across threads.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[np.newaxis]
        if arr.ndim != 3:
            raise ValueError(f"expected a (channels, height, width) raster, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains NaN or Inf entries")
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def ravel(self) -> np.ndarray:
        return self._data.ravel()

    def norm(self) -> float:
        return float(np.linalg.norm(self._data))

    def __repr__(self):
        c, h, w = self.shape
        return f"ImageGrid(channels={c}, height={h}, width={w})"


class Kernel:
    """Non-negative blur kernel on a (2r+1) x (2r+1) grid, center at (r, r).

    Weights are normalized to unit sum at construction, so every kernel is a
    discrete probability mass and the no-blur kernel is exactly the Dirac.
    """

    __slots__ = ("_weights",)

    def __init__(self, weights, normalize: bool = True):
        arr = np.array(weights, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] % 2 == 0:
            raise ValueError(f"kernel grid must be odd-sided and square, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("kernel contains NaN or Inf entries")
        if np.any(arr < 0):
            raise ValueError("kernel weights must be non-negative")
        total = arr.sum()
        if total <= 0:
            raise ValueError("kernel has zero total mass")
        if normalize:
            arr = arr / total
        elif abs(total - 1.0) > 1e-9:
            raise ValueError(f"kernel mass {total} is not 1 and normalize=False")
        arr.flags.writeable = False
        self._weights = arr

    @classmethod
    def dirac(cls, radius: int = 0) -> "Kernel":
        w = np.zeros((2 * radius + 1, 2 * radius + 1))
        w[radius, radius] = 1.0
        return cls(w)

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def radius(self) -> int:
        return self._weights.shape[0] // 2

    def second_moment(self) -> float:
        """Sum of w(i,j) * ((i-r)^2 + (j-r)^2), a proxy for squared diameter."""
        r = self.radius
        dy = np.arange(-r, r + 1)[:, None]
        dx = np.arange(-r, r + 1)[None, :]
        return float(np.sum(self._weights * (dy * dy + dx * dx)))

    def __repr__(self):
        return f"Kernel(radius={self.radius})"


def embed_array(weights: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Place an odd-sided square tap array on an (H, W) grid, center at (0, 0)."""
    h, w = shape
    side = weights.shape[0]
    if weights.shape != (side, side) or side % 2 == 0:
        raise ValueError(f"tap array must be odd-sided and square, got {weights.shape}")
    if side > h or side > w:
        raise ValueError(f"kernel extent {side} exceeds image extent {(h, w)}")
    r = side // 2
    pad = np.zeros(shape)
    pad[:side, :side] = weights
    return np.roll(pad, (-r, -r), axis=(0, 1))


def embed_kernel(kernel: Kernel, shape: tuple[int, int]) -> np.ndarray:
    """Place the kernel on an (H, W) grid with its center tap at (0, 0)."""
    return embed_array(kernel.weights, shape)


def convolve_raster(arr: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Circular convolution of a (..., H, W) array with a signed tap array."""
    shape = arr.shape[-2:]
    mult = np.fft.rfft2(embed_array(taps, shape))
    return np.fft.irfft2(np.fft.rfft2(arr) * mult, s=shape)


def fourier_multipliers(kernel: Kernel, shape: tuple[int, int]) -> np.ndarray:
    """rfft2 of the embedded kernel; the operator is diagonal in this basis."""
    return np.fft.rfft2(embed_kernel(kernel, shape))


class ConvOperator:
    """Circular convolution by ``kernel + tikhonov_lambda * dirac``.

    The Fourier multipliers are the kernel transform plus ``tikhonov_lambda``
    entrywise.  Multiplier arrays are cached per image shape; the cache is
    lock-guarded so one operator may be shared across threads.
    """

    def __init__(self, kernel: Kernel, tikhonov_lambda: float = 0.0):
        if tikhonov_lambda < 0:
            raise ValueError("tikhonov_lambda must be non-negative")
        self.kernel = kernel
        self.tikhonov_lambda = float(tikhonov_lambda)
        self._cache: dict[tuple[int, int], np.ndarray] = {}
        self._lock = threading.Lock()

    def multipliers(self, shape: tuple[int, int]) -> np.ndarray:
        with self._lock:
            mult = self._cache.get(shape)
            if mult is None:
                mult = fourier_multipliers(self.kernel, shape) + self.tikhonov_lambda
                mult.flags.writeable = False
                self._cache[shape] = mult
        return mult

    def _spatial(self, arr: np.ndarray, mult: np.ndarray) -> np.ndarray:
        shape = arr.shape[-2:]
        return np.fft.irfft2(np.fft.rfft2(arr) * mult, s=shape)

    def apply_array(self, arr: np.ndarray) -> np.ndarray:
        return self._spatial(arr, self.multipliers(arr.shape[-2:]))

    def adjoint_array(self, arr: np.ndarray) -> np.ndarray:
        return self._spatial(arr, np.conj(self.multipliers(arr.shape[-2:])))

    def apply(self, x: ImageGrid) -> ImageGrid:
        return ImageGrid(self.apply_array(x.data))

    def adjoint(self, x: ImageGrid) -> ImageGrid:
        return ImageGrid(self.adjoint_array(x.data))

    def inverse_array(self, arr: np.ndarray) -> np.ndarray:
        mult = self.multipliers(arr.shape[-2:])
        moduli = np.abs(mult)
        smallest = float(moduli.min())
        if self.tikhonov_lambda == 0.0 and smallest <= 1e-12:
            raise SingularOperatorError(
                f"operator is singular: smallest Fourier multiplier modulus {smallest:.3e}"
            )
        if smallest == 0.0:
            raise SingularOperatorError("operator has an exactly vanishing Fourier multiplier")
        return np.fft.irfft2(np.fft.rfft2(arr) / mult, s=arr.shape[-2:])

    def inverse(self, y: ImageGrid) -> ImageGrid:
        return ImageGrid(self.inverse_array(y.data))


def convolve(x: ImageGrid, h: Kernel) -> ImageGrid:
    """Circular convolution of every channel of ``x`` with ``h``."""
    return ConvOperator(h).apply(x)


def adjoint_convolve(r: ImageGrid, h: Kernel) -> ImageGrid:
    """Apply the transpose operator, i.e. circular correlation with ``h``."""
    return ConvOperator(h).adjoint(r)


def regularized_inverse(y: ImageGrid, h: Kernel, lam: float) -> ImageGrid:
    """Entrywise Fourier division by (kernel transform + lam)."""
    return ConvOperator(h, lam).inverse(y)


@dataclass
class CgResult:
    x: ImageGrid
    converged: bool
    relative_residual: float
    iterations: int


def cg_solve(
    apply_A: Callable[[np.ndarray], np.ndarray] | Callable[[ImageGrid], ImageGrid],
    b: ImageGrid,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> CgResult:
    """Conjugate gradients for a symmetric positive-definite map on rasters.

    ``apply_A`` may act on ImageGrid or raw arrays.  Returns the first iterate
    with relative residual below ``tol``, or the best iterate seen together
    with ``converged=False`` after ``max_iter`` steps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")

    def matvec(arr: np.ndarray) -> np.ndarray:
        try:
            out = apply_A(arr)
        except (AttributeError, TypeError):
            out = apply_A(ImageGrid(arr))
        return out.data if isinstance(out, ImageGrid) else np.asarray(out, dtype=np.float64)

    b_arr = b.data
    b_norm = float(np.linalg.norm(b_arr))
    if b_norm == 0.0:
        return CgResult(ImageGrid(np.zeros_like(b_arr)), True, 0.0, 0)

    x = np.zeros_like(b_arr)
    r = b_arr.copy()
    p = r.copy()
    rs = float(np.vdot(r, r).real)
    best_x, best_res = x.copy(), np.sqrt(rs) / b_norm

    for it in range(1, max_iter + 1):
        ap = matvec(p)
        if not np.all(np.isfinite(ap)):
            raise NumericBreakdownError(f"non-finite values in CG at iteration {it}")
        denom = float(np.vdot(p, ap).real)
        if denom == 0.0:
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(np.vdot(r, r).real)
        if not np.isfinite(rs_new):
            raise NumericBreakdownError(f"non-finite residual in CG at iteration {it}")
        rel = np.sqrt(rs_new) / b_norm
        if rel < best_res:
            best_x, best_res = x.copy(), rel
        if rel <= tol:
            return CgResult(ImageGrid(x), True, rel, it)
        p = r + (rs_new / rs) * p
        rs = rs_new

    return CgResult(ImageGrid(best_x), False, best_res, max_iter)


def prox_data_fidelity(
    z: ImageGrid,
    h: Kernel,
    y: ImageGrid,
    gamma: float,
    method: str = "fourier",
) -> ImageGrid:
    """Proximal map of gamma/2 * ||h * x - y||^2 at the point ``z``.

    Solves (I + gamma HtH) x = z + gamma Ht y, either in closed form through
    the Fourier diagonalization (circular boundary) or with conjugate
    gradients.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0.0:
        return z
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch between z {z.shape} and y {y.shape}")
    op = ConvOperator(h)
    if method == "fourier":
        mult = op.multipliers(z.shape[-2:])
        num = np.fft.rfft2(z.data) + gamma * np.conj(mult) * np.fft.rfft2(y.data)
        den = 1.0 + gamma * np.abs(mult) ** 2
        return ImageGrid(np.fft.irfft2(num / den, s=z.shape[-2:]))
    if method == "cg":
        rhs = ImageGrid(z.data + gamma * op.adjoint_array(y.data))

        def normal_op(arr: np.ndarray) -> np.ndarray:
            return arr + gamma * op.adjoint_array(op.apply_array(arr))

        result = cg_solve(normal_op, rhs, tol=1e-12, max_iter=2000)
        return result.x
    raise ValueError(f"unknown prox method {method!r}")


def prox_optimality_residual(x: ImageGrid, z: ImageGrid, h: Kernel, y: ImageGrid, gamma: float) -> float:
    """Norm of (I + gamma HtH) x - z - gamma Ht y, for verification."""
    op = ConvOperator(h)
    lhs = x.data + gamma * op.adjoint_array(op.apply_array(x.data))
    rhs = z.data + gamma * op.adjoint_array(y.data)
    return float(np.linalg.norm(lhs - rhs))


def roundtrip_error(x: ImageGrid, kernel: Kernel, lam: float) -> float:
    """|| x - inv(conv(x, kernel + lam*dirac)) || for the perturbed operator."""
    op = ConvOperator(kernel, lam)
    try:
        back = op.inverse_array(op.apply_array(x.data))
    except SingularOperatorError:
        return np.inf
    return float(np.linalg.norm(x.data - back))


def find_tikhonov_lambda(
    kernels: Sequence[Kernel],
    shape: tuple[int, int, int],
    grid: Sequence[float] = LAMBDA_GRID,
    tol: float = ROUNDTRIP_TOL,
    seed: int = 0,
) -> float:
    """Smallest lambda on the grid with round-trip error <= tol for all kernels.

    The round trip blurs a seeded random image with the perturbed operator and
    divides back; failure indicates a near-vanishing multiplier at that lambda.
    """
    rng = np.random.default_rng(seed)
    x = ImageGrid(rng.random(shape))
    for lam in sorted(grid):
        if all(roundtrip_error(x, k, lam) <= tol for k in kernels):
            return float(lam)
    raise SingularOperatorError(
        f"no lambda in {list(grid)} reaches round-trip error <= {tol}"
    )
