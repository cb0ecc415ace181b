import numpy as np
import pytest

from siamfv.errors import SiamFvError
from siamfv.fv import GmmModel, fv_encode, fv_unnormalized
from siamfv.gradients import (
    FvGradients,
    _block_error,
    central_differences,
    finite_diff_check,
    fv_grads,
    fv_input_grads,
    fv_param_grads,
    merge_reports,
    normalized_chain,
    tau_partials,
)
from test_fv_core import make_gmm, random_gmm


class TestTauPartials:
    def test_single_cluster_constant(self):
        gmm = make_gmm([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        data = np.array([[0.7, -0.3]])
        assert tau_partials(data, gmm, 0, 0, 0) == (0.0, 0.0, 0.0)
        assert tau_partials(data, gmm, 0, 0, 1) == (0.0, 0.0, 0.0)

    def test_symmetric_pair_antisymmetry(self):
        gmm = make_gmm([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], np.ones((2, 2)))
        data = np.array([[0.0, 0.0]])
        _, _, dx1 = tau_partials(data, gmm, 0, 0, 0)
        _, _, dx2 = tau_partials(data, gmm, 0, 1, 0)
        assert dx1 == pytest.approx(-dx2, rel=1e-14)
        assert dx1 != 0.0

    def test_matches_central_differences(self):
        rng = np.random.default_rng(5)
        gmm = random_gmm(rng, 3, 2)
        data = rng.normal(0.0, 1.0, (4, 2))
        h = 1e-6
        for t, j, k in [(0, 0, 0), (2, 1, 1), (3, 2, 0)]:
            d_mu, d_sigma, d_x = tau_partials(data, gmm, t, j, k)

            def tau_of(means=None, stddevs=None, x=None):
                model = GmmModel(
                    gmm.weights,
                    gmm.means if means is None else means,
                    gmm.stddevs if stddevs is None else stddevs,
                )
                rows = data if x is None else x
                from siamfv.fv import assignments

                return assignments(rows, model).values[t, j]

            mu_p, mu_m = gmm.means.copy(), gmm.means.copy()
            mu_p[j, k] += h
            mu_m[j, k] -= h
            assert d_mu == pytest.approx((tau_of(means=mu_p) - tau_of(means=mu_m)) / (2 * h), rel=1e-6, abs=1e-10)
            sg_p, sg_m = gmm.stddevs.copy(), gmm.stddevs.copy()
            sg_p[j, k] += h
            sg_m[j, k] -= h
            assert d_sigma == pytest.approx((tau_of(stddevs=sg_p) - tau_of(stddevs=sg_m)) / (2 * h), rel=1e-6, abs=1e-10)
            x_p, x_m = data.copy(), data.copy()
            x_p[t, k] += h
            x_m[t, k] -= h
            assert d_x == pytest.approx((tau_of(x=x_p) - tau_of(x=x_m)) / (2 * h), rel=1e-6, abs=1e-10)

    def test_assignment_rows_have_zero_derivative_sum(self):
        # d/dx_tk of sum_j tau_tj must vanish
        rng = np.random.default_rng(9)
        gmm = random_gmm(rng, 4, 3)
        data = rng.normal(size=(3, 3))
        for t in range(3):
            for k in range(3):
                total = sum(tau_partials(data, gmm, t, j, k)[2] for j in range(4))
                assert total == pytest.approx(0.0, abs=1e-14)

    def test_x_partial_is_shift_of_mean_partials(self):
        # moving x_tk mirrors moving every mean's k-th entry the other way
        rng = np.random.default_rng(21)
        gmm = random_gmm(rng, 3, 2)
        data = rng.normal(size=(2, 2))
        from siamfv.fv import assignments

        tau = assignments(data, gmm).values
        dq_mu = (data[:, None, :] - gmm.means[None]) / gmm.stddevs[None] ** 2
        for t, j, k in [(0, 1, 0), (1, 2, 1)]:
            cross_sum = tau[t, j] * (1 - tau[t, j]) * dq_mu[t, j, k] + sum(
                -tau[t, j] * tau[t, i] * dq_mu[t, i, k] for i in range(3) if i != j
            )
            assert tau_partials(data, gmm, t, j, k)[2] == pytest.approx(-cross_sum, rel=1e-12)

    def test_index_bounds(self):
        gmm = make_gmm([1.0], [[0.0]], [[1.0]])
        with pytest.raises(IndexError):
            tau_partials(np.array([[0.0]]), gmm, 1, 0, 0)


class TestParamGrads:
    def test_centered_descriptors_zero_weight_grad(self):
        gmm = make_gmm([1.0], [[0.4, -0.2]], [[1.0, 1.0]])
        data = np.tile([[0.4, -0.2]], (3, 1))
        grads = fv_param_grads(data, gmm)
        np.testing.assert_array_equal(grads.d_omega, np.zeros_like(grads.d_omega))

    def test_weight_grad_hand_case(self):
        # C=1, d=1, unit parameters, X={2,4}: -(1/(2T)) * (2+4) = -1.5
        gmm = make_gmm([1.0], [[0.0]], [[1.0]])
        grads = fv_param_grads(np.array([[2.0], [4.0]]), gmm)
        assert grads.d_omega[0, 0, 0] == pytest.approx(-1.5, rel=1e-14)

    def test_weight_grad_equals_sqrt_prefactor_difference(self):
        # finite difference on the 1/sqrt(w) prefactor alone
        gmm = make_gmm([1.0], [[0.0]], [[1.0]])
        data = np.array([[2.0], [4.0]])
        h = 1e-7
        from siamfv.fv import _fv_raw_arrays

        up = _fv_raw_arrays(data, np.array([1.0 + h]), gmm.means, gmm.stddevs, "plain")
        dn = _fv_raw_arrays(data, np.array([1.0 - h]), gmm.means, gmm.stddevs, "plain")
        fd = (up - dn) / (2 * h)
        assert fv_param_grads(data, gmm).d_omega[0, 0, 0] == pytest.approx(fd[0], rel=1e-8)


class TestInputGrads:
    def test_single_cluster_uniform(self):
        gmm = make_gmm([1.0], [[0.0]], [[1.0]])
        data = np.array([[1.0], [3.0], [-2.0]])
        d_x = fv_input_grads(data, gmm).d_x
        np.testing.assert_allclose(d_x[:, 0, 0, 0], [1.0 / 3] * 3, rtol=1e-15)

    def test_sigma_scaling(self):
        data = np.array([[1.0], [3.0]])
        one = fv_input_grads(data, make_gmm([1.0], [[0.0]], [[1.0]])).d_x
        two = fv_input_grads(data, make_gmm([1.0], [[0.0]], [[2.0]])).d_x
        np.testing.assert_allclose(two, one / 2.0, rtol=1e-15)


class TestNormalizedChain:
    def test_orthogonal_gradient_passes_through(self):
        raw = np.array([1.0, 0.0])
        jac = np.array([[0.0, 2.0]])  # orthogonal to raw, raw already unit
        chained = normalized_chain(raw, FvGradients(d_omega=jac.reshape(1, 1, 2)))
        np.testing.assert_allclose(chained.d_omega.reshape(-1), [0.0, 2.0], atol=1e-15)

    def test_parallel_gradient_killed(self):
        raw = np.array([3.0, 4.0])
        jac = raw[None, :].copy()
        chained = normalized_chain(raw, FvGradients(d_omega=jac.reshape(1, 1, 2)))
        np.testing.assert_allclose(chained.d_omega, 0.0, atol=1e-15)

    def test_degenerate_raw_rejected(self):
        with pytest.raises(SiamFvError, match="degenerate"):
            normalized_chain(np.zeros(3), FvGradients(d_omega=np.zeros((1, 1, 3))))

    def test_chained_gradients_orthogonal_to_output(self):
        rng = np.random.default_rng(17)
        gmm = random_gmm(rng, 3, 4)
        data = rng.normal(size=(6, 4))
        enc = fv_encode(data, gmm)
        chained = normalized_chain(enc.raw, fv_grads(data, gmm))
        for jac in (chained.d_omega, chained.d_mu, chained.d_sigma, chained.d_x):
            dots = jac.reshape(-1, enc.normalized.size) @ enc.normalized
            np.testing.assert_allclose(dots, 0.0, atol=1e-10)


class TestFiniteDiffCheck:
    def test_correct_implementation_certifies(self):
        rng = np.random.default_rng(123)
        gmm = random_gmm(rng, 4, 3)
        data = rng.normal(0.0, 1.0, (8, 3))
        report = finite_diff_check(data, gmm)
        assert report.max_rel_error <= 1e-6
        assert set(report.per_family_errors) == {
            "omega", "mu", "sigma", "x", "normalized_chain",
        }

    def test_self_comparison_is_zero(self):
        block = np.random.default_rng(0).normal(size=(4, 7))
        assert _block_error(block, block.copy(), noise=1e-8) == 0.0

    def test_injected_fault_isolated_in_mu(self, monkeypatch):
        import siamfv.gradients as gradients_mod

        real = gradients_mod.fv_grads

        def corrupted(descriptors, gmm):
            grads = real(descriptors, gmm)
            return FvGradients(
                d_omega=grads.d_omega,
                d_mu=2.0 * grads.d_mu,
                d_sigma=grads.d_sigma,
                d_x=grads.d_x,
            )

        monkeypatch.setattr(gradients_mod, "fv_grads", corrupted)
        rng = np.random.default_rng(2)
        gmm = random_gmm(rng, 3, 2)
        report = gradients_mod.finite_diff_check(rng.normal(size=(5, 2)), gmm)
        assert report.per_family_errors["mu"] > 0.1
        assert report.per_family_errors["omega"] <= 1e-6
        assert report.per_family_errors["sigma"] <= 1e-6
        assert report.worst_parameter.startswith("mu")

    def test_step_range_enforced(self):
        gmm = make_gmm([1.0], [[0.0]], [[1.0]])
        with pytest.raises(ValueError):
            finite_diff_check(np.array([[1.0]]), gmm, h=0.5)

    def test_weighted_mode_mean_sigma_input_families(self):
        # the weight family intentionally omits the assignment coupling in
        # weighted mode, so only the exact families are asserted here
        rng = np.random.default_rng(31)
        gmm = random_gmm(rng, 3, 2, mode="weighted")
        report = finite_diff_check(rng.normal(size=(6, 2)), gmm)
        assert report.per_family_errors["mu"] <= 1e-6
        assert report.per_family_errors["sigma"] <= 1e-6
        assert report.per_family_errors["x"] <= 1e-6

    def test_merge_reports_takes_maxima(self):
        from siamfv.gradients import GradCheckReport

        a = GradCheckReport(1e-8, "mu[0,0]", {"mu": 1e-8, "x": 1e-9})
        b = GradCheckReport(1e-7, "x[1,0]", {"mu": 1e-10, "x": 1e-7})
        merged = merge_reports(a, b)
        assert merged.per_family_errors == {"mu": 1e-8, "x": 1e-7}
        assert merged.max_rel_error == 1e-7
        assert merged.worst_parameter == "x[1,0]"


class TestCentralDifferences:
    def test_quadratic_exact_to_truncation(self):
        jac = central_differences(lambda th: np.array([th[0] ** 2]), np.array([3.0]), 1e-6)
        assert jac[0, 0] == pytest.approx(6.0, rel=1e-9)
