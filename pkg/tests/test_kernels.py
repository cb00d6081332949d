import numpy as np
import pytest

from blindscape.grids import ImageGrid, Kernel, fourier_multipliers
from blindscape.kernels import (
    AiryFamily,
    DefocusFamily,
    FamilyConfig,
    GaussianFamily,
    KernelSpec,
    LinearKernelFamily,
    MotionFamily,
    ONED_FAMILIES,
    SimplexFamily,
    ZernikeFamily,
    family_from_spec,
    kernel_jacobian,
    make_kernel,
    noll_to_nm,
    simplex_project,
    zernike_psf,
)

from oracles import simplex_projection_active_set


def spec_for(family, theta, radius=7, angle=0.3):
    return KernelSpec(family, np.atleast_1d(theta), support_radius=radius, angle=angle)


class TestMakeKernel:
    @pytest.mark.parametrize("family", ONED_FAMILIES)
    def test_theta_zero_is_dirac(self, family):
        kern = make_kernel(spec_for(family, 0.0))
        expected = np.zeros((15, 15))
        expected[7, 7] = 1.0
        assert np.array_equal(kern.weights, expected)

    def test_gaussian_matches_direct_formula(self):
        kern = make_kernel(spec_for("gaussian", 2.0))
        dy, dx = np.mgrid[-7:8, -7:8]
        raw = np.exp(-(dy**2 + dx**2) / 8.0)
        assert np.allclose(kern.weights, raw / raw.sum(), atol=1e-12)
        assert np.allclose(kern.weights, np.rot90(kern.weights), atol=1e-12)

    def test_defocus_against_area_count_oracle(self):
        kern = make_kernel(spec_for("defocus", 3.0))
        # hard-indicator area fractions on a fine subgrid
        sub = (np.arange(32) + 0.5) / 32 - 0.5
        dy, dx = np.mgrid[-7:8, -7:8]
        yy = dy[..., None, None] + sub[None, None, :, None]
        xx = dx[..., None, None] + sub[None, None, None, :]
        inside = (np.hypot(yy, xx) <= 3.0).mean(axis=(2, 3))
        oracle = inside / inside.sum()
        interior = inside == 1.0
        exterior = inside == 0.0
        assert np.allclose(kern.weights[exterior], 0.0, atol=1e-12)
        assert np.abs(kern.weights - oracle).sum() < 0.05
        assert np.abs(kern.weights[interior] - oracle[interior]).max() < 0.01
        smaller = make_kernel(spec_for("defocus", 2.0))
        assert kern.second_moment() > smaller.second_moment()

    @pytest.mark.parametrize("family", ONED_FAMILIES)
    def test_second_moment_monotone(self, family):
        moments = [make_kernel(spec_for(family, t)).second_moment() for t in [0.5, 1.5, 3.0, 4.5]]
        assert all(a < b for a, b in zip(moments, moments[1:]))

    @pytest.mark.parametrize("family", ONED_FAMILIES)
    def test_domain_error(self, family):
        with pytest.raises(ValueError):
            make_kernel(spec_for(family, 5.5))
        with pytest.raises(ValueError):
            make_kernel(spec_for(family, -0.1))

    @pytest.mark.parametrize("family", ONED_FAMILIES)
    @pytest.mark.parametrize("theta", [0.0, 0.7, 2.0, 5.0])
    def test_normalized_nonnegative(self, family, theta):
        kern = make_kernel(spec_for(family, theta))
        assert kern.weights.min() >= 0.0
        assert abs(kern.weights.sum() - 1.0) <= 1e-9

    @pytest.mark.parametrize("family,theta", [("gaussian", 2.37), ("airy", 2.37)])
    def test_continuity_linear_secant(self, family, theta):
        base = make_kernel(spec_for(family, theta)).weights
        diffs = []
        for delta in (1e-2, 1e-3, 1e-4):
            shifted = make_kernel(spec_for(family, theta + delta)).weights
            diffs.append(np.linalg.norm(shifted - base))
        assert 0.05 < diffs[1] / diffs[0] < 0.2
        assert 0.05 < diffs[2] / diffs[1] < 0.2

    @pytest.mark.parametrize("family", ["motion", "defocus"])
    def test_continuity_lipschitz(self, family):
        # supersampled families are Lipschitz through the edge ramp
        base = make_kernel(spec_for(family, 2.37)).weights
        rate = None
        for delta in (1e-2, 1e-3, 1e-4):
            shifted = make_kernel(spec_for(family, 2.37 + delta)).weights
            diff = np.linalg.norm(shifted - base)
            if rate is None:
                rate = diff / delta
            assert diff <= 2.0 * rate * delta + 1e-12

    def test_fourier_decay_ordering(self):
        mins = {}
        for name, fam in [
            ("gaussian", GaussianFamily(7)),
            ("airy", AiryFamily(7)),
            ("motion", MotionFamily(7, angle=0.3)),
            ("defocus", DefocusFamily(7)),
        ]:
            mult = fourier_multipliers(fam.kernel(np.array([2.0])), (24, 24))
            mins[name] = np.abs(mult).min()
        assert max(mins["gaussian"], mins["airy"]) < min(mins["motion"], mins["defocus"])


class TestZernike:
    def test_noll_mapping(self):
        assert noll_to_nm(1) == (0, 0)
        assert noll_to_nm(4) == (2, 0)
        assert noll_to_nm(5) == (2, -2)
        assert noll_to_nm(6) == (2, 2)
        assert noll_to_nm(7) == (3, -1)
        assert noll_to_nm(11) == (4, 0)

    def test_zero_coefficients_give_airy_pattern(self):
        kern = zernike_psf(np.zeros(5), support_radius=15)
        w = kern.weights
        center = (15, 15)
        assert w[center] == w.max()
        assert w.min() >= 0.0

    def test_weights_nonnegative_random_theta(self, rng):
        for _ in range(5):
            theta = rng.uniform(-0.7, 0.7, size=5)
            kern = zernike_psf(theta, support_radius=15)
            assert kern.weights.min() >= 0.0
            assert abs(kern.weights.sum() - 1.0) <= 1e-9

    def test_second_moment_grows_outward(self, rng):
        fam = ZernikeFamily(support_radius=15)
        for _ in range(20):
            theta = rng.uniform(-0.5, 0.5, size=5)
            base = fam.kernel(theta).second_moment()
            pushed = fam.kernel(theta + 0.15 * np.sign(theta)).second_moment()
            assert pushed >= base - 1e-9

    def test_analytic_jacobian_matches_fd(self, rng):
        fam = ZernikeFamily(support_radius=8)
        theta = rng.uniform(-0.4, 0.4, size=5)
        derivs, boundary = fam.kernel_derivatives(theta)
        assert not boundary
        for p in range(5):
            step = 1e-5
            up = theta.copy()
            dn = theta.copy()
            up[p] += step
            dn[p] -= step
            fd = (fam.kernel(up).weights - fam.kernel(dn).weights) / (2 * step)
            scale = max(np.abs(fd).max(), 1e-12)
            assert np.abs(derivs[p] - fd).max() / scale < 1e-4


class TestSimplexProject:
    def test_idempotent_on_simplex(self):
        p = 16
        uniform = np.full(p, 1.0 / p)
        assert np.allclose(simplex_project(uniform), uniform, atol=1e-15)

    def test_symmetric_pair(self):
        assert np.allclose(simplex_project([1.0, 1.0, 0.0, 0.0]), [0.5, 0.5, 0.0, 0.0])

    def test_single_dominant(self):
        assert np.allclose(simplex_project([2.0, 0.0, 0.0, 0.0]), [1.0, 0.0, 0.0, 0.0])

    def test_matches_active_set_oracle(self, rng):
        for _ in range(100):
            p = int(rng.integers(2, 7))
            theta = rng.standard_normal(p) * rng.uniform(0.1, 4.0)
            ours = simplex_project(theta)
            oracle = simplex_projection_active_set(theta)
            assert np.abs(ours - oracle).max() < 1e-10

    def test_idempotence_random(self, rng):
        theta = rng.standard_normal(25)
        once = simplex_project(theta)
        assert np.abs(simplex_project(once) - once).max() < 1e-12

    def test_kkt_certificate(self, rng):
        for _ in range(50):
            theta = rng.standard_normal(9) * 2.0
            w = simplex_project(theta)
            assert abs(w.sum() - 1.0) < 1e-12
            active = w > 0
            taus = theta[active] - w[active]
            assert np.ptp(taus) < 1e-10
            tau = taus.mean()
            assert np.all(theta[~active] - tau <= 1e-10)


class TestKernelJacobian:
    def test_zero_image_gives_zero(self, rng):
        x = ImageGrid(np.zeros((1, 16, 16)))
        res = kernel_jacobian(spec_for("gaussian", 2.0), x)
        assert np.abs(res.matrix).max() == 0.0

    def test_gaussian_analytic_vs_fd(self, rng):
        x = ImageGrid(rng.standard_normal((1, 20, 20)))
        spec = spec_for("gaussian", 2.0)
        analytic = kernel_jacobian(spec, x)
        assert not analytic.used_finite_differences
        fam = family_from_spec(spec)
        step = 1e-5
        fd_kernel = (fam.kernel(np.array([2.0 + step])).weights
                     - fam.kernel(np.array([2.0 - step])).weights) / (2 * step)
        from blindscape.grids import convolve_raster

        fd_col = convolve_raster(x.data, fd_kernel).ravel()
        rel = np.linalg.norm(analytic.matrix[:, 0] - fd_col) / np.linalg.norm(fd_col)
        assert rel < 1e-4

    @pytest.mark.parametrize("family", ["motion", "airy", "defocus"])
    def test_fd_fallback_flagged(self, family, rng):
        x = ImageGrid(rng.standard_normal((1, 16, 16)))
        res = kernel_jacobian(spec_for(family, 2.0), x)
        assert res.used_finite_differences
        assert not res.boundary

    def test_boundary_flag_at_domain_edge(self, rng):
        x = ImageGrid(rng.standard_normal((1, 16, 16)))
        assert kernel_jacobian(spec_for("motion", 0.0), x).boundary
        assert kernel_jacobian(spec_for("gaussian", 0.0), x).boundary
        assert kernel_jacobian(spec_for("defocus", 5.0), x).boundary

    def test_linear_family_jacobian_constant(self, rng):
        b1 = np.zeros((3, 3))
        b1[1, 1] = 1.0
        b2 = np.zeros((3, 3))
        b2[1, 2] = 1.0
        fam = LinearKernelFamily([b1, b2])
        x = ImageGrid(rng.standard_normal((1, 8, 8)))
        j1 = kernel_jacobian(fam, x, np.array([0.7, 0.3]))
        j2 = kernel_jacobian(fam, x, np.array([0.2, 0.8]))
        assert np.allclose(j1.matrix, j2.matrix, atol=1e-14)
        from blindscape.grids import convolve_raster

        assert np.allclose(j1.matrix[:, 0], convolve_raster(x.data, b1).ravel(), atol=1e-14)

    def test_simplex_jacobian_projection_rule(self, rng):
        fam = SimplexFamily(support_radius=1)
        theta = np.array([0.5, 0.4, 0.3, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0])
        derivs, _ = fam.kernel_derivatives(theta)
        w = simplex_project(theta)
        active = w > 0
        n_active = active.sum()
        for p in range(9):
            col = derivs[p].ravel()
            if not active[p]:
                assert np.abs(col).max() == 0.0
            else:
                expected = -active.astype(float) / n_active
                expected[p] += 1.0
                assert np.allclose(col, expected, atol=1e-12)


class TestFamilyConfig:
    def test_scales_are_configurable(self):
        config = FamilyConfig(gaussian_std_per_theta=2.0)
        spec = KernelSpec("gaussian", [1.0], support_radius=7, config=config)
        wide = make_kernel(spec)
        narrow = make_kernel(spec_for("gaussian", 1.0))
        assert wide.second_moment() > narrow.second_moment()

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            FamilyConfig.from_mapping({"no_such_scale": 1.0})

    def test_theta_dimension_checked(self):
        with pytest.raises(ValueError):
            KernelSpec("zernike", np.zeros(3), support_radius=7)
        with pytest.raises(ValueError):
            KernelSpec("simplex", np.zeros(10), support_radius=2)
