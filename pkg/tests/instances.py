"""Synthetic problem instances shared across tests.

The dichotomy instance pairs a band-normalized scene with a two-mode mixture
prior: a narrow mode at the clean scene and a heavier mode at an over-blurred
copy.  The true scene additionally carries fine texture that the blur wipes
out, so the prior scores the ground truth strictly worse than its own modes,
mirroring how learned priors prefer smoothed images.
"""

from __future__ import annotations

import numpy as np

from blindscape.grids import ImageGrid, fourier_multipliers
from blindscape.kernels import GaussianFamily
from blindscape.priors import GmmPrior


def blur_with(arr: np.ndarray, family, s: float) -> np.ndarray:
    n = arr.shape[-1]
    mult = fourier_multipliers(family.kernel(np.array([float(s)])), arr.shape[-2:])
    return np.fft.irfft2(np.fft.rfft2(arr) * mult, s=arr.shape[-2:])


def band_split(arr: np.ndarray, cuts=(0.07, 0.18)):
    n1, n2 = arr.shape[-2:]
    fy = np.fft.fftfreq(n1)[:, None]
    fx = np.fft.rfftfreq(n2)[None, :]
    radius = np.hypot(fy, fx)
    ahat = np.fft.rfft2(arr)
    bands = []
    lo = -1.0
    for hi in list(cuts) + [1.0]:
        mask = (radius > lo) & (radius <= hi)
        bands.append(np.fft.irfft2(ahat * mask, s=(n1, n2)))
        lo = hi
    return bands


def smooth_scene(rng: np.random.Generator, n: int = 32,
                 band_energies=(183.0, 30.0, 7.0)) -> np.ndarray:
    """Smooth blobs plus boxes, per-band energies pinned for reproducibility."""
    z = rng.standard_normal((n, n))
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.rfftfreq(n)[None, :]
    zh = np.fft.rfft2(z) * np.exp(-2 * np.pi**2 * 2.5**2 * (fy**2 + fx**2))
    base = np.fft.irfft2(zh, s=(n, n))
    base = (base - base.min()) / (base.max() - base.min())
    for side_h, side_w in [(5, 7), (7, 4), (4, 4)]:
        i = rng.integers(1, n - side_h - 1)
        j = rng.integers(1, n - side_w - 1)
        base[i:i + side_h, j:j + side_w] += 0.35 * (1 if rng.random() < 0.5 else -1)
    parts = band_split(base)
    scene = np.zeros((n, n))
    for comp, target in zip(parts, band_energies):
        nrm = np.linalg.norm(comp)
        if nrm > 0:
            scene += comp * (target / nrm)
    return scene[None]


def highpass_texture(rng: np.random.Generator, n: int, cutoff: float = 0.33) -> np.ndarray:
    """Unit-norm texture above the cutoff frequency; a 31x31 blur removes it."""
    tex = rng.standard_normal((n, n))
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.rfftfreq(n)[None, :]
    that = np.fft.rfft2(tex)
    that[np.hypot(fy, fx) < cutoff] = 0.0
    tex = np.fft.irfft2(that, s=(n, n))
    return (tex / np.linalg.norm(tex))[None]


def dichotomy_instance(seed: int, n: int = 32, theta_bar: float = 2.0,
                       sigma_y: float = 0.01, support_radius: int = 15,
                       blur_mode: float = 2.25, texture_norm: float = 4.5,
                       sigma0: float = 0.04, w_sharp: float = 0.3):
    """One synthetic blind-deconvolution instance for the init dichotomy.

    Returns (prior, x_true, y, family) with y = h(theta_bar) * x_true + noise.
    """
    rng = np.random.default_rng(seed)
    family = GaussianFamily(support_radius=support_radius)
    x_clean = smooth_scene(rng, n=n)
    x_true = x_clean + texture_norm * highpass_texture(rng, n)
    catcher = blur_with(x_clean, family, blur_mode)
    prior = GmmPrior([ImageGrid(x_clean), ImageGrid(catcher)],
                     [w_sharp, 1.0 - w_sharp], sigma0**2)
    clean_obs = blur_with(x_true, family, theta_bar)
    y = ImageGrid(clean_obs + sigma_y * rng.standard_normal((1, n, n)))
    return prior, ImageGrid(x_true), y, family


def gmm_mode_instance(seed: int, shape=(1, 6, 8), sigma0: float = 0.2,
                      support_radius: int = 2, separation: float = 12.0):
    """A well-separated mixture whose first mean is an exact critical point."""
    rng = np.random.default_rng(seed)
    n1, n2 = shape[-2:]
    fy = np.fft.fftfreq(n1)[:, None]
    fx = np.fft.rfftfreq(n2)[None, :]
    base = np.fft.irfft2(
        np.fft.rfft2(rng.standard_normal((n1, n2)))
        * np.exp(-2 * np.pi**2 * 1.0 * (fy**2 + fx**2)),
        s=(n1, n2),
    )[None]
    base = base / np.linalg.norm(base)
    mu1 = base
    mu2 = base + separation * sigma0 * rng.standard_normal(shape) / np.sqrt(base.size)
    prior = GmmPrior([ImageGrid(mu1), ImageGrid(mu2)], [0.5, 0.5], sigma0**2)
    family = GaussianFamily(support_radius=support_radius)
    return prior, ImageGrid(mu1), family
