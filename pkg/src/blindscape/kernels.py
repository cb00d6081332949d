"""Blur kernel parameterizations and their Jacobians.

Six families map a parameter vector theta to a normalized point-spread
function: four one-parameter families (gaussian, motion, airy, defocus) whose
theta roughly tracks the kernel diameter in pixels and whose theta=0 kernel is
exactly the Dirac, a Zernike diffraction family driven by pupil-phase
aberration coefficients, and a free-form family given by Euclidean projection
onto the probability simplex.  A linear test family (raw combination of fixed
basis kernels) is included for landscape and identifiability experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import j1 as bessel_j1

from .grids import ImageGrid, Kernel, convolve_raster

ONED_FAMILIES = ("gaussian", "motion", "airy", "defocus")
FAMILIES = ONED_FAMILIES + ("zernike", "simplex")

DEFAULT_SUPPORT_RADIUS = 15  # 31 x 31 kernels
FD_STEP_SCALE = 1e-4


@dataclass(frozen=True)
class FamilyConfig:
    """Pixel scales and pupil settings for the kernel families.

    The per-theta scales are implementation choices (the families are only
    specified up to "theta roughly tracks the diameter"), kept in one place so
    they can be overridden from a config file.
    """

    gaussian_std_per_theta: float = 1.0
    motion_px_per_theta: float = 2.0
    motion_halfwidth: float = 0.5
    airy_scale: float = 1.0
    defocus_radius_per_theta: float = 1.0
    theta_max: float = 5.0
    supersample: int = 4
    edge_ramp: float = 0.25
    pupil_size: int = 128
    pupil_cutoff: float = 0.25
    noll_indices: tuple[int, ...] = (4, 5, 6, 7, 11)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "FamilyConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown family config keys: {sorted(unknown)}")
        if "noll_indices" in mapping:
            mapping = dict(mapping, noll_indices=tuple(int(j) for j in mapping["noll_indices"]))
        return cls(**mapping)


DEFAULT_CONFIG = FamilyConfig()


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family name plus its parameter vector and support."""

    family: str
    theta: np.ndarray
    support_radius: int = DEFAULT_SUPPORT_RADIUS
    angle: float = 0.0
    config: FamilyConfig = field(default_factory=FamilyConfig)

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=np.float64)).copy()
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        if self.family not in FAMILIES and self.family != "linear":
            raise ValueError(f"unknown kernel family {self.family!r}")
        expected = expected_theta_dim(self.family, self.support_radius, self.config)
        if expected is not None and theta.size != expected:
            raise ValueError(
                f"family {self.family!r} expects {expected} parameters, got {theta.size}"
            )

    def with_theta(self, theta) -> "KernelSpec":
        return replace(self, theta=np.atleast_1d(np.asarray(theta, dtype=np.float64)))


def expected_theta_dim(family: str, support_radius: int, config: FamilyConfig) -> int | None:
    if family in ONED_FAMILIES:
        return 1
    if family == "zernike":
        return len(config.noll_indices)
    if family == "simplex":
        return (2 * support_radius + 1) ** 2
    return None


# ---------------------------------------------------------------------------
# family implementations
# ---------------------------------------------------------------------------


class KernelFamily:
    """Shared protocol: theta -> Kernel, plus optional analytic derivatives."""

    theta_dim: int
    support_radius: int

    def kernel(self, theta: np.ndarray) -> Kernel:
        raise NotImplementedError

    def kernel_derivatives(self, theta: np.ndarray):
        """Return (list of d(weights)/d(theta_p) rasters, boundary flag) or None.

        None means the family has no closed-form theta-derivative and callers
        should fall back to finite differences.
        """
        return None

    def clip_theta(self, theta: np.ndarray) -> tuple[np.ndarray, bool]:
        """Project theta back into the admissible domain; flag if it moved."""
        return theta, False

    def _offsets(self):
        r = self.support_radius
        dy = np.arange(-r, r + 1)[:, None]
        dx = np.arange(-r, r + 1)[None, :]
        return dy, dx


class OneDimFamily(KernelFamily):
    theta_dim = 1

    def __init__(self, support_radius: int = DEFAULT_SUPPORT_RADIUS, config: FamilyConfig = DEFAULT_CONFIG):
        self.support_radius = support_radius
        self.config = config

    def _check_theta(self, theta: np.ndarray) -> float:
        value = float(theta[0])
        if not 0.0 <= value <= self.config.theta_max:
            raise ValueError(
                f"theta={value} outside the domain [0, {self.config.theta_max}]"
            )
        return value

    def clip_theta(self, theta, eps: float = 0.0):
        clipped = np.clip(theta, 0.0 + eps, self.config.theta_max - eps)
        return clipped, bool(np.any(clipped != theta))

    def _on_boundary(self, value: float) -> bool:
        return value <= 0.0 or value >= self.config.theta_max

    def _supersample_points(self):
        n = self.config.supersample
        sub = (np.arange(n) + 0.5) / n - 0.5
        dy, dx = self._offsets()
        yy = dy[..., None, None] + sub[None, None, :, None]
        xx = dx[..., None, None] + sub[None, None, None, :]
        return yy, xx


class GaussianFamily(OneDimFamily):
    """Isotropic Gaussian with standard deviation scale * theta pixels."""

    def _sigma(self, theta_value: float) -> float:
        return self.config.gaussian_std_per_theta * theta_value

    def kernel(self, theta):
        value = self._check_theta(theta)
        sigma = self._sigma(value)
        if sigma == 0.0:
            return Kernel.dirac(self.support_radius)
        dy, dx = self._offsets()
        w = np.exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma))
        return Kernel(w)

    def kernel_derivatives(self, theta):
        value = self._check_theta(theta)
        boundary = self._on_boundary(value)
        sigma = self._sigma(value)
        if sigma == 0.0:
            side = 2 * self.support_radius + 1
            return [np.zeros((side, side))], True
        h = self.kernel(theta).weights
        dy, dx = self._offsets()
        r2 = dy * dy + dx * dx
        m2 = np.sum(h * r2)
        dh_dsigma = h * (r2 - m2) / sigma**3
        return [self.config.gaussian_std_per_theta * dh_dsigma], boundary


class MotionFamily(OneDimFamily):
    """Line-segment blur of length scale * theta at a fixed angle.

    Rendered by supersampling with a short linear edge ramp, which keeps the
    map theta -> weights Lipschitz despite the hard segment geometry.
    """

    def __init__(self, support_radius=DEFAULT_SUPPORT_RADIUS, angle: float = 0.0, config=DEFAULT_CONFIG):
        super().__init__(support_radius, config)
        self.angle = float(angle)

    def kernel(self, theta):
        value = self._check_theta(theta)
        half_len = 0.5 * self.config.motion_px_per_theta * value
        ux, uy = math.cos(self.angle), math.sin(self.angle)
        yy, xx = self._supersample_points()
        # distance from each subsample to the centered segment
        t = np.clip(xx * ux + yy * uy, -half_len, half_len)
        dist = np.hypot(xx - t * ux, yy - t * uy)
        ramp = self.config.edge_ramp
        coverage = np.clip((self.config.motion_halfwidth + 0.5 * ramp - dist) / ramp, 0.0, 1.0)
        w = coverage.mean(axis=(2, 3))
        if w.sum() <= 0:
            return Kernel.dirac(self.support_radius)
        return Kernel(w)


class AiryFamily(OneDimFamily):
    """Squared-jinc diffraction profile with first zero near 1.22 * theta px."""

    def kernel(self, theta):
        value = self._check_theta(theta)
        scale = self.config.airy_scale * value
        if scale == 0.0:
            return Kernel.dirac(self.support_radius)
        dy, dx = self._offsets()
        r = np.hypot(dy, dx)
        z = np.pi * r / scale
        w = np.ones_like(z)
        nz = z > 0
        w[nz] = (2.0 * bessel_j1(z[nz]) / z[nz]) ** 2
        return Kernel(w)


class DefocusFamily(OneDimFamily):
    """Disk indicator of radius scale * theta with supersampled soft edge."""

    def kernel(self, theta):
        value = self._check_theta(theta)
        radius = self.config.defocus_radius_per_theta * value
        if radius == 0.0:
            return Kernel.dirac(self.support_radius)
        yy, xx = self._supersample_points()
        dist = np.hypot(yy, xx)
        ramp = self.config.edge_ramp
        coverage = np.clip((radius - dist) / ramp + 0.5, 0.0, 1.0)
        w = coverage.mean(axis=(2, 3))
        if w.sum() <= 0:
            return Kernel.dirac(self.support_radius)
        return Kernel(w)


def noll_to_nm(j: int) -> tuple[int, int]:
    """Map a Noll index (1-based) to radial degree n and azimuthal order m."""
    if j < 1:
        raise ValueError("Noll indices start at 1")
    n, j1 = 0, j - 1
    while j1 > n:
        n += 1
        j1 -= n
    m = (-1) ** j * ((n % 2) + 2 * ((j1 + (n + 1) % 2) // 2))
    return n, m


def zernike_polynomial(j: int, rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Noll-normalized Zernike polynomial on the unit disk (zero outside)."""
    n, m = noll_to_nm(j)
    am = abs(m)
    radial = np.zeros_like(rho)
    for k in range((n - am) // 2 + 1):
        coeff = (
            (-1) ** k
            * math.factorial(n - k)
            / (math.factorial(k) * math.factorial((n + am) // 2 - k) * math.factorial((n - am) // 2 - k))
        )
        radial += coeff * rho ** (n - 2 * k)
    if m == 0:
        z = math.sqrt(n + 1.0) * radial
    elif m > 0:
        z = math.sqrt(2.0 * (n + 1.0)) * radial * np.cos(am * phi)
    else:
        z = math.sqrt(2.0 * (n + 1.0)) * radial * np.sin(am * phi)
    return np.where(rho <= 1.0, z, 0.0)


class ZernikeFamily(KernelFamily):
    """Diffraction PSF: squared-modulus Fourier transform of an aberrated pupil.

    The pupil phase is a combination of Noll-indexed Zernike modes over a
    circular aperture; theta holds the mode coefficients.  theta = 0 gives the
    Airy pattern of the unaberrated aperture.
    """

    def __init__(self, support_radius=DEFAULT_SUPPORT_RADIUS, config: FamilyConfig = DEFAULT_CONFIG):
        self.support_radius = support_radius
        self.config = config
        self.theta_dim = len(config.noll_indices)
        n = config.pupil_size
        if 2 * support_radius + 1 > n:
            raise ValueError("kernel support exceeds the pupil grid")
        coords = np.arange(n) - n // 2
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        aperture_radius = config.pupil_cutoff * n
        rho = np.hypot(yy, xx) / aperture_radius
        phi = np.arctan2(yy, xx)
        self._aperture = (rho <= 1.0).astype(np.float64)
        self._modes = np.stack(
            [zernike_polynomial(j, rho, phi) * self._aperture for j in config.noll_indices]
        )

    def _pupil(self, theta):
        phase = np.tensordot(theta, self._modes, axes=(0, 0))
        return self._aperture * np.exp(-2j * np.pi * phase)

    def _crop(self, full: np.ndarray) -> np.ndarray:
        n = self.config.pupil_size
        r = self.support_radius
        c = n // 2
        return full[c - r : c + r + 1, c - r : c + r + 1]

    def kernel(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        amplitude = np.fft.fft2(self._pupil(theta))
        psf = self._crop(np.fft.fftshift(np.abs(amplitude) ** 2))
        return Kernel(psf)

    def kernel_derivatives(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        pupil = self._pupil(theta)
        amplitude = np.fft.fft2(pupil)
        psf = self._crop(np.fft.fftshift(np.abs(amplitude) ** 2))
        total = psf.sum()
        derivs = []
        for p in range(self.theta_dim):
            damp = np.fft.fft2(-2j * np.pi * self._modes[p] * pupil)
            dpsf = self._crop(np.fft.fftshift(2.0 * np.real(np.conj(amplitude) * damp)))
            # quotient rule for the unit-sum normalization over the crop
            derivs.append((dpsf * total - psf * dpsf.sum()) / total**2)
        return derivs, False


class SimplexFamily(KernelFamily):
    """Free-form kernel: orthogonal projection of theta onto the simplex."""

    def __init__(self, support_radius=DEFAULT_SUPPORT_RADIUS):
        self.support_radius = support_radius
        self.side = 2 * support_radius + 1
        self.theta_dim = self.side**2

    def kernel(self, theta):
        w = simplex_project(np.asarray(theta, dtype=np.float64))
        return Kernel(w.reshape(self.side, self.side), normalize=False)

    def kernel_derivatives(self, theta):
        theta = np.asarray(theta, dtype=np.float64).ravel()
        w, tau = _simplex_project_with_threshold(theta)
        active = w > 0.0
        n_active = int(active.sum())
        boundary = bool(np.any(np.abs(theta - tau) < 1e-12) and not np.all(active))
        derivs = []
        base = active.astype(np.float64) / n_active
        for p in range(theta.size):
            col = np.zeros(theta.size)
            if active[p]:
                col[active] = -base[active]
                col[p] += 1.0
            derivs.append(col.reshape(self.side, self.side))
        return derivs, boundary


class LinearKernelFamily(KernelFamily):
    """Raw linear combination of fixed basis kernels (test family).

    No renormalization is applied, so the Jacobian of theta -> h * x is
    constant in theta; callers keep theta on the unit-mass slice.
    """

    def __init__(self, basis: list[np.ndarray]):
        basis = [np.asarray(b, dtype=np.float64) for b in basis]
        side = basis[0].shape[0]
        if any(b.shape != (side, side) for b in basis):
            raise ValueError("all basis kernels must share one square support")
        self.basis = basis
        self.theta_dim = len(basis)
        self.support_radius = side // 2

    def kernel(self, theta):
        w = np.tensordot(np.asarray(theta, dtype=np.float64), np.stack(self.basis), axes=(0, 0))
        return Kernel(w, normalize=False)

    def kernel_derivatives(self, theta):
        return [b.copy() for b in self.basis], False


def family_from_spec(spec: KernelSpec) -> KernelFamily:
    if spec.family == "gaussian":
        return GaussianFamily(spec.support_radius, spec.config)
    if spec.family == "motion":
        return MotionFamily(spec.support_radius, spec.angle, spec.config)
    if spec.family == "airy":
        return AiryFamily(spec.support_radius, spec.config)
    if spec.family == "defocus":
        return DefocusFamily(spec.support_radius, spec.config)
    if spec.family == "zernike":
        return ZernikeFamily(spec.support_radius, spec.config)
    if spec.family == "simplex":
        return SimplexFamily(spec.support_radius)
    raise ValueError(f"unknown kernel family {spec.family!r}")


def make_kernel(spec: KernelSpec) -> Kernel:
    """Realize the normalized PSF for a kernel specification."""
    return family_from_spec(spec).kernel(spec.theta)


def zernike_psf(theta, support_radius: int = DEFAULT_SUPPORT_RADIUS, config: FamilyConfig = DEFAULT_CONFIG) -> Kernel:
    """Diffraction PSF for Zernike coefficients theta (see ZernikeFamily)."""
    return ZernikeFamily(support_radius, config).kernel(np.asarray(theta, dtype=np.float64))


# ---------------------------------------------------------------------------
# simplex projection
# ---------------------------------------------------------------------------


def _simplex_project_with_threshold(theta: np.ndarray) -> tuple[np.ndarray, float]:
    v = theta.ravel()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    rho = int(np.nonzero(cond)[0][-1])
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0), float(tau)


def simplex_project(theta) -> np.ndarray:
    """Euclidean projection of a vector onto {w : w >= 0, sum w = 1}."""
    theta = np.asarray(theta, dtype=np.float64)
    w, _ = _simplex_project_with_threshold(theta)
    return w.reshape(theta.shape)


def simplex_kernel(theta, support_radius: int) -> Kernel:
    return SimplexFamily(support_radius).kernel(np.asarray(theta, dtype=np.float64))


# ---------------------------------------------------------------------------
# Jacobian of theta -> h_theta * x
# ---------------------------------------------------------------------------


@dataclass
class JacobianResult:
    """Jacobian matrix of shape (x.size, theta_dim) plus provenance flags."""

    matrix: np.ndarray
    used_finite_differences: bool
    boundary: bool


def _fd_weight_derivatives(family: KernelFamily, theta: np.ndarray):
    """Central differences of the realized weights, one-sided at the domain edge."""
    derivs = []
    boundary = False
    for p in range(theta.size):
        step = FD_STEP_SCALE * max(1.0, abs(float(theta[p])))
        up = theta.copy()
        dn = theta.copy()
        up[p] += step
        dn[p] -= step
        up, clipped_up = family.clip_theta(up)
        dn, clipped_dn = family.clip_theta(dn)
        boundary = boundary or clipped_up or clipped_dn
        span = float(up[p] - dn[p])
        if span == 0.0:
            derivs.append(np.zeros((2 * family.support_radius + 1,) * 2))
            continue
        derivs.append((family.kernel(up).weights - family.kernel(dn).weights) / span)
    return derivs, boundary


def kernel_jacobian(spec_or_family, x: ImageGrid, theta=None) -> JacobianResult:
    """Columns (d h_theta / d theta_p) * x, flattened to x.size rows.

    Families with closed-form theta-derivatives (gaussian, zernike, simplex,
    linear) are differentiated analytically; the rest fall back to central
    finite differences of the realized weights.
    """
    if isinstance(spec_or_family, KernelSpec):
        family = family_from_spec(spec_or_family)
        theta = spec_or_family.theta
    else:
        family = spec_or_family
        if theta is None:
            raise ValueError("theta is required when passing a family directly")
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))

    analytic = family.kernel_derivatives(theta)
    used_fd = analytic is None
    if used_fd:
        derivs, boundary = _fd_weight_derivatives(family, theta)
    else:
        derivs, boundary = analytic

    cols = [convolve_raster(x.data, d).ravel() for d in derivs]
    return JacobianResult(np.stack(cols, axis=1), used_fd, boundary)
