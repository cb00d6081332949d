import math

import numpy as np
import pytest
from scipy.integrate import dblquad

from blindscape.grids import ImageGrid, Kernel
from blindscape.kernels import GaussianFamily
from blindscape.priors import (
    DiffusionSchedule,
    GmmPrior,
    SpectralQuadraticPrior,
    flow_velocity,
)

from oracles import fd_gradient, mixture_log_density


@pytest.fixture
def sched():
    return DiffusionSchedule()


def small_gmm(rng, sched, k=2, shape=(1, 3, 3), sigma0=0.3, spread=1.0):
    means = [ImageGrid(spread * rng.standard_normal(shape)) for _ in range(k)]
    weights = rng.random(k) + 0.5
    weights /= weights.sum()
    return GmmPrior(means, weights, sigma0**2, sched)


class TestSchedule:
    def test_g_squared_is_variance_rate(self, sched):
        for t in [1e-3, 0.1, 0.5, 0.9]:
            h = 1e-6
            fd = (sched.sigma(t + h) ** 2 - sched.sigma(t - h) ** 2) / (2 * h)
            assert abs(fd - sched.g_squared(t)) / fd < 1e-6

    def test_sigma_is_increasing(self, sched):
        ts = np.linspace(0, 1, 11)
        sig = [sched.sigma(t) for t in ts]
        assert all(a < b for a, b in zip(sig, sig[1:]))

    def test_time_domain_checked(self, sched):
        with pytest.raises(ValueError):
            sched.check_time(1e-5)
        with pytest.raises(ValueError):
            sched.check_time(1.5)


class TestGmmPotential:
    def test_single_component_at_mean(self, sched):
        mu = ImageGrid(np.full((3, 2, 2), 0.7))
        prior = GmmPrior([mu], [1.0], 0.25**2, sched)
        s = 0.25**2 + sched.sigma(sched.t_eps) ** 2
        expected = 0.5 * 12 * math.log(2 * math.pi * s)
        assert abs(prior.potential(mu) - expected) < 1e-12

    def test_two_far_components(self, sched, rng):
        mu1 = ImageGrid(rng.standard_normal((1, 2, 2)))
        mu2 = ImageGrid(mu1.data + 50.0)
        prior = GmmPrior([mu1, mu2], [0.25, 0.75], 0.1**2, sched)
        s = prior.variance_at(None)
        single = 0.5 * 4 * math.log(2 * math.pi * s)
        assert abs(prior.potential(mu1) - (single - math.log(0.25))) < 1e-6

    def test_matches_direct_mixture_oracle(self, sched, rng):
        prior = small_gmm(rng, sched, k=3)
        x = rng.standard_normal((1, 3, 3))
        oracle = mixture_log_density(x, prior.means, prior.weights, prior.variance_at(None))
        assert abs(prior.potential_array(x) + oracle) < 1e-9

    def test_shape_checked(self, sched, rng):
        prior = small_gmm(rng, sched)
        with pytest.raises(ValueError):
            prior.potential(ImageGrid(np.zeros((1, 2, 2))))


class TestGmmScore:
    def test_zero_at_single_mean(self, sched, rng):
        mu = ImageGrid(rng.random((1, 3, 3)))
        prior = GmmPrior([mu], [1.0], 0.2**2, sched)
        assert np.abs(prior.score(mu).data).max() == 0.0

    def test_zero_at_symmetric_midpoint(self, sched, rng):
        m = rng.standard_normal((1, 2, 2))
        prior = GmmPrior([ImageGrid(m), ImageGrid(-m)], [0.5, 0.5], 0.3**2, sched)
        mid = ImageGrid(np.zeros((1, 2, 2)))
        assert np.abs(prior.score(mid).data).max() < 1e-14

    @pytest.mark.parametrize("t", [None, 0.3])
    def test_matches_fd_log_density(self, sched, rng, t):
        prior = small_gmm(rng, sched)
        x = rng.standard_normal((1, 3, 3))
        score = prior.score_array(x, t)
        fd = fd_gradient(lambda a: prior.log_density(a, t), x, h=1e-6)
        assert np.abs(score - fd).max() / np.abs(fd).max() < 1e-5


class TestHvp:
    def test_spectral_hvp_is_multiplier_action(self, rng):
        d = rng.random((6, 6)) + 0.2
        prior = SpectralQuadraticPrior(d)
        v = rng.standard_normal((1, 6, 6))
        out1 = prior.hvp_array(rng.standard_normal((1, 6, 6)), v)
        out2 = prior.hvp_array(np.zeros((1, 6, 6)), v)
        assert np.allclose(out1, out2, atol=1e-14)
        vhat = np.fft.fft2(v, norm="ortho")
        expected = np.real(np.fft.ifft2(prior.multipliers * vhat, norm="ortho"))
        assert np.allclose(out1, expected, atol=1e-12)

    def test_gmm_hvp_matches_score_differences(self, sched, rng):
        prior = small_gmm(rng, sched)
        x = rng.standard_normal((1, 3, 3))
        v = rng.standard_normal((1, 3, 3))
        hvp = prior.hvp_array(x, v)
        eps = 1e-5
        fd = (prior.score_array(x, None) - prior.score_array(x + eps * v, None)) / eps
        assert np.abs(hvp - fd).max() / np.abs(hvp).max() < 1e-3

    def test_zero_vector(self, sched, rng):
        prior = small_gmm(rng, sched)
        out = prior.hvp_array(rng.standard_normal((1, 3, 3)), np.zeros((1, 3, 3)))
        assert np.abs(out).max() == 0.0

    def test_symmetry_as_bilinear_form(self, sched, rng):
        for prior in (small_gmm(rng, sched), SpectralQuadraticPrior(rng.random((3, 3)))):
            x = rng.standard_normal((1, 3, 3))
            u = rng.standard_normal((1, 3, 3))
            v = rng.standard_normal((1, 3, 3))
            left = float(np.sum(prior.hvp_array(x, u) * v))
            right = float(np.sum(u * prior.hvp_array(x, v)))
            assert abs(left - right) < 1e-8


class TestSpectralPrior:
    def test_unit_multipliers_parseval(self, rng):
        prior = SpectralQuadraticPrior(np.ones((5, 5)))
        x = rng.standard_normal((1, 5, 5))
        assert abs(prior.potential_array(x) - 0.5 * np.sum(x * x)) < 1e-10

    def test_blur_never_increases_potential(self, rng):
        prior = SpectralQuadraticPrior(rng.random((12, 12)))
        for _ in range(100):
            radius = int(rng.integers(0, 4))
            kern = Kernel(rng.random((2 * radius + 1, 2 * radius + 1)) + 1e-6)
            x = ImageGrid(rng.standard_normal((1, 12, 12)))
            from blindscape.grids import convolve

            assert prior.potential(convolve(x, kern)) <= prior.potential(x) + 1e-10

    def test_gradient_consistent_with_potential(self, rng):
        prior = SpectralQuadraticPrior(rng.random((4, 4)))
        x = rng.standard_normal((1, 4, 4))
        fd = fd_gradient(prior.potential_array, x, h=1e-6)
        score = prior.score_array(x, None)
        assert np.abs(fd + score).max() < 1e-6

    def test_prox_optimality(self, rng):
        prior = SpectralQuadraticPrior(rng.random((4, 4)) + 0.1)
        v = ImageGrid(rng.standard_normal((1, 4, 4)))
        w = 0.7
        x = prior.prox(v, w)
        grad = (x.data - v.data) - w * prior.score_array(x.data, None)
        assert np.abs(grad).max() < 1e-10

    def test_negative_multipliers_rejected(self):
        with pytest.raises(ValueError):
            SpectralQuadraticPrior(np.array([[1.0, -0.1], [0.0, 0.0]]))


class TestScoreConsistency:
    def test_fd_gradient_of_potential_is_negative_score(self, sched, rng):
        priors = [small_gmm(rng, sched), SpectralQuadraticPrior(rng.random((3, 3)) + 0.1)]
        for prior in priors:
            for _ in range(25):
                x = rng.standard_normal((1, 3, 3))
                fd = fd_gradient(prior.potential_array, x, h=1e-6)
                score = prior.score_array(x, None)
                assert np.abs(fd + score).max() / max(np.abs(score).max(), 1e-12) < 1e-4


class TestNoisedNormalization:
    @pytest.mark.parametrize("t", [1e-3, 0.25, 0.5])
    def test_density_integrates_to_one_2pixel(self, sched, rng, t):
        m = rng.standard_normal((1, 1, 2))
        prior = GmmPrior([ImageGrid(m), ImageGrid(-m)], [0.4, 0.6], 0.2**2, sched)
        s = prior.variance_at(t)
        span = 10 * math.sqrt(s) + np.abs(prior.means).max()

        def dens(a, b):
            return math.exp(prior.log_density(np.array([a, b]).reshape(1, 1, 2), t))

        total, err = dblquad(dens, -span, span, -span, span, epsabs=1e-9)
        assert abs(total - 1.0) < 1e-6


class TestFlowVelocity:
    def test_zero_score_gives_zero_velocity(self, sched, rng):
        mu = ImageGrid(rng.random((1, 2, 2)))
        prior = GmmPrior([mu], [1.0], 0.2**2, sched)
        v = flow_velocity(prior, sched, mu, sched.t_eps)
        assert np.abs(v.data).max() < 1e-12

    def test_gaussian_closed_form(self, sched, rng):
        prior = GmmPrior([ImageGrid(np.zeros((1, 2, 2)))], [1.0], 0.5**2, sched)
        x = ImageGrid(rng.standard_normal((1, 2, 2)))
        for t in [sched.t_eps, 0.4, 0.9]:
            v = flow_velocity(prior, sched, x, t)
            expected = 0.5 * sched.g_squared(t) * x.data / (0.25 + sched.sigma(t) ** 2)
            assert np.allclose(v.data, expected, atol=1e-12)

    def test_velocity_scales_with_g_squared(self, rng):
        # schedules matched at t_eps in sigma but with quadrupled g^2 there
        s1 = DiffusionSchedule(sigma_min=0.01, sigma_max=50.0)
        r1 = 5000.0
        r2 = r1**4
        sigma_min2 = 0.01 * r1**s1.t_eps / r2**s1.t_eps
        s2 = DiffusionSchedule(sigma_min=sigma_min2, sigma_max=sigma_min2 * r2)
        assert abs(s1.sigma(s1.t_eps) - s2.sigma(s2.t_eps)) < 1e-15
        mult = rng.random((2, 2)) + 0.2
        x = ImageGrid(rng.standard_normal((1, 2, 2)))
        v1 = flow_velocity(SpectralQuadraticPrior(mult, sched=s1), s1, x, s1.t_eps)
        v2 = flow_velocity(SpectralQuadraticPrior(mult, sched=s2), s2, x, s2.t_eps)
        assert np.allclose(v2.data, 4.0 * v1.data, rtol=1e-12)
