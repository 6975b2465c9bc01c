import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import expit

from hdpgp.errors import DataError, NumericalError
from hdpgp.gp import (
    GpMulticlass,
    KernelSpec,
    fit_multiclass,
    gp_regress_fit,
    gp_regress_predict,
    jitter_cholesky,
    kernel_matrix,
    laplace_fit,
    load_gp,
    load_regressors,
    log_marginal_and_grad,
    optimize_hyperparams,
    optimize_regression,
    predict_binary,
    predict_multiclass,
    save_gp,
    save_regressors,
    sigmoid_gauss_expectation,
)
from hdpgp.gp.laplace import latent_predictive
from hdpgp.gp.optimize import maximize_cg
from hdpgp.gp.regression import log_marginal_and_grad as reg_lml_and_grad


def random_instance(seed, n=None, d=2):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(3, 9))
    X = rng.normal(size=(n, d))
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    y[0], y[1] = 1.0, -1.0
    return X, y


def central_diff(fun, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (fun(theta + e) - fun(theta - e)) / (2 * h)
    return g


class TestKernel:
    def test_self_similarity_is_signal_variance(self):
        spec = KernelSpec("ard", 1.7, (0.3, 2.0))
        x = np.array([[0.4, -1.2]])
        assert kernel_matrix(x, x, spec)[0, 0] == pytest.approx(1.7**2)

    def test_worked_example(self):
        spec = KernelSpec("rbf", 1.0, (1.0,))
        k = kernel_matrix([[0.0, 0.0]], [[1.0, 1.0]], spec)[0, 0]
        assert k == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_ard_matches_elementwise_formula(self):
        rng = np.random.default_rng(0)
        A, B = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        spec = KernelSpec("ard", 0.8, (0.5, 1.5, 3.0))
        want = np.array(
            [[0.64 * math.exp(-0.5 * sum((a[d] - b[d]) ** 2 / spec.length_scales[d] ** 2 for d in range(3)))
              for b in B] for a in A]
        )
        np.testing.assert_allclose(kernel_matrix(A, B, spec), want, rtol=1e-12)

    def test_huge_length_scale_ignores_coordinate(self):
        spec = KernelSpec("ard", 1.0, (1.0, 1e6))
        a = kernel_matrix([[0.0, 0.0]], [[0.5, 0.0]], spec)
        b = kernel_matrix([[0.0, 0.0]], [[0.5, 1.0]], spec)
        assert abs(a[0, 0] - b[0, 0]) < 1e-12

    def test_rbf_is_ard_with_shared_scale(self):
        X = np.random.default_rng(1).normal(size=(6, 3))
        np.testing.assert_allclose(
            kernel_matrix(X, None, KernelSpec("rbf", 1.3, (0.7,))),
            kernel_matrix(X, None, KernelSpec("ard", 1.3, (0.7,) * 3)),
            rtol=1e-14,
        )

    @given(st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_symmetric_and_factorizable(self, seed):
        X = np.random.default_rng(seed).normal(size=(12, 2))
        K = kernel_matrix(X, None, KernelSpec("ard", 1.0, (0.8, 1.3)))
        assert np.max(np.abs(K - K.T)) <= 1e-12
        jitter_cholesky(K)

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            kernel_matrix(np.zeros((2, 3)), None, KernelSpec("ard", 1.0, (1.0, 1.0)))

    @pytest.mark.parametrize(
        "kw", [dict(kind="poly"), dict(signal_sigma=0.0), dict(length_scales=(1.0, -1.0)),
               dict(kind="rbf", length_scales=(1.0, 2.0)), dict(noise_sigma_n=-0.1)]
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(DataError):
            KernelSpec(**{"kind": "ard", "signal_sigma": 1.0, "length_scales": (1.0,), **kw})


class TestJitter:
    def test_duplicate_points_need_jitter(self):
        X = np.zeros((3, 1))
        L, jit = jitter_cholesky(kernel_matrix(X, None, KernelSpec("rbf", 1.0, (1.0,))))
        assert jit > 0
        assert np.all(np.isfinite(L))

    def test_indefinite_matrix_fails(self):
        with pytest.raises(NumericalError):
            jitter_cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_non_finite_matrix(self):
        with pytest.raises(NumericalError):
            jitter_cholesky(np.array([[np.nan]]))


def brute_force_mode(X, y, kernel):
    """Maximize the exact log posterior with a generic trust-region optimizer."""
    K = kernel_matrix(X, None, kernel)
    Kinv = np.linalg.inv(K)

    def neg(f):
        return -(np.sum(np.log(expit(y * f))) - 0.5 * f @ Kinv @ f)

    def grad(f):
        return -((y + 1) / 2 - expit(f) - Kinv @ f)

    def hess(f):
        p = expit(f)
        return np.diag(p * (1 - p)) + Kinv

    res = minimize(neg, np.zeros(y.size), jac=grad, hess=hess, method="trust-exact",
                   options={"gtol": 1e-13})
    return res.x


class TestLaplace:
    kernel = KernelSpec("ard", 1.5, (1.0, 1.0))

    def test_two_point_antisymmetry(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.0]])
        m = laplace_fit(X, [1.0, -1.0], self.kernel)
        assert m.f_tilde[0] == pytest.approx(-m.f_tilde[1], abs=1e-8)
        assert predict_binary(m, [[0.0, 0.0]])[0] == pytest.approx(0.5, abs=1e-9)

    @pytest.mark.parametrize("seed", range(6))
    def test_mode_is_stationary(self, seed):
        X, y = random_instance(seed)
        m = laplace_fit(X, y, self.kernel)
        assert m.stationarity_residual() < 1e-8
        # K^-1 f~ against the likelihood gradient directly
        K = kernel_matrix(X, None, self.kernel)
        resid = (y + 1) / 2 - expit(m.f_tilde) - np.linalg.solve(K, m.f_tilde)
        assert np.max(np.abs(resid)) < 1e-8
        assert np.all(m.W >= 0)

    @pytest.mark.parametrize("seed", range(6))
    def test_mode_matches_brute_force(self, seed):
        X, y = random_instance(seed)
        m = laplace_fit(X, y, self.kernel)
        np.testing.assert_allclose(m.f_tilde, brute_force_mode(X, y, self.kernel), atol=1e-6)

    def test_deterministic(self):
        X, y = random_instance(3)
        a, b = laplace_fit(X, y, self.kernel), laplace_fit(X, y, self.kernel)
        np.testing.assert_array_equal(a.f_tilde, b.f_tilde)

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            laplace_fit(np.zeros((3, 2)), [1.0, 1.0, 1.0], self.kernel)

    def test_labels_must_be_signs(self):
        with pytest.raises(DataError):
            laplace_fit(np.zeros((2, 2)), [1.0, 0.0], self.kernel)

    def test_far_query_reverts_to_prior(self):
        X, y = random_instance(1)
        m = laplace_fit(X, y, self.kernel)
        mu, var = latent_predictive(m, [[1e3, 1e3]])
        assert abs(mu[0]) < 1e-12
        assert var[0] == pytest.approx(self.kernel.signal_sigma**2)
        assert predict_binary(m, [[1e3, 1e3]])[0] == pytest.approx(0.5, abs=1e-12)

    def test_predictive_matches_dense_formulas(self):
        X, y = random_instance(4, n=7)
        m = laplace_fit(X, y, self.kernel)
        Xs = np.random.default_rng(9).normal(size=(5, 2))
        K = kernel_matrix(X, None, self.kernel)
        Ks = kernel_matrix(X, Xs, self.kernel)
        mu_want = Ks.T @ np.linalg.solve(K, m.f_tilde)
        var_want = self.kernel.signal_sigma**2 - np.einsum(
            "ij,ij->j", Ks, np.linalg.solve(K + np.diag(1.0 / m.W), Ks)
        )
        mu, var = latent_predictive(m, Xs)
        np.testing.assert_allclose(mu, mu_want, atol=1e-8)
        np.testing.assert_allclose(var, var_want, atol=1e-8)


class TestQuadrature:
    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(2024)
        pairs = [(rng.normal(0, 2), rng.uniform(0.1, 3.0)) for _ in range(5)]
        for mu, sd in pairs:
            z = rng.normal(mu, sd, size=10**7)
            s = expit(z)
            mc, se = s.mean(), s.std() / math.sqrt(z.size)
            got = sigmoid_gauss_expectation(np.array([mu]), np.array([sd**2]))[0]
            assert abs(got - mc) <= 3 * se

    def test_zero_variance_is_sigmoid(self):
        mu = np.linspace(-5, 5, 11)
        np.testing.assert_allclose(sigmoid_gauss_expectation(mu, np.zeros(11)), expit(mu), rtol=1e-12)

    @given(st.floats(0.0, 9.0))
    def test_monotone_in_mean_and_inside_unit_interval(self, var):
        mu = np.linspace(-40, 40, 81)
        p = sigmoid_gauss_expectation(mu, np.full(mu.size, var))
        assert np.all(np.diff(p) >= 0)
        assert np.all((p > 0) & (p < 1))


class TestClassifierGradient:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("kind", ["ard", "rbf"])
    def test_matches_finite_differences(self, seed, kind):
        rng = np.random.default_rng(seed)
        X, y = random_instance(seed, n=int(rng.integers(4, 11)))
        spec = KernelSpec.default(kind, 2, signal_sigma=1.3, length_scale=0.9)
        theta = spec.log_params()
        _, g, _ = log_marginal_and_grad(X, y, spec)
        fd = central_diff(lambda t: log_marginal_and_grad(X, y, spec.with_log_params(t))[0], theta)
        assert np.max(np.abs(g - fd)) <= 1e-4 * max(1.0, np.max(np.abs(fd)))


class TestOptimizer:
    def test_concave_quadratic(self):
        A = np.array([[3.0, 1.0], [1.0, 2.0]])
        b = np.array([1.0, -1.0])
        res = maximize_cg(lambda t: (-0.5 * t @ A @ t + b @ t, -A @ t + b), np.zeros(2), gtol=1e-7)
        np.testing.assert_allclose(res.theta, np.linalg.solve(A, b), atol=1e-8)
        assert res.converged

    def test_objective_never_decreases(self):
        X, y = random_instance(7, n=10)
        spec = KernelSpec("ard", 1.0, (0.3, 0.3))

        def fun(t):
            v, g, _ = log_marginal_and_grad(X, y, spec.with_log_params(t))
            return v, g

        res = maximize_cg(fun, spec.log_params(), max_iter=30)
        assert np.all(np.diff(res.history) >= 0)

    def test_non_finite_start(self):
        with pytest.raises(NumericalError, match="rescaled"):
            maximize_cg(lambda t: (np.nan, np.zeros(1)), np.zeros(1))

    @pytest.mark.parametrize("seed", [0, 1])
    def test_recovers_length_scale(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-4, 4, size=(64, 1))
        K = kernel_matrix(X, None, KernelSpec("rbf", 3.0, (1.0,))) + 1e-8 * np.eye(64)
        f = np.linalg.cholesky(K) @ rng.standard_normal(64)
        y = np.where(rng.random(64) < expit(f), 1.0, -1.0)
        got = optimize_hyperparams(X, y, KernelSpec("rbf", 1.0, (0.2,)))
        assert 0.5 <= got.length_scales[0] <= 2.0


def clusters(seed=0, per=15):
    rng = np.random.default_rng(seed)
    centres = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
    X = np.vstack([c + 0.3 * rng.normal(size=(per, 2)) for c in centres])
    labels = np.repeat([4, 7, 9], per)
    return X, labels


@pytest.fixture(scope="module")
def multiclass():
    X, labels = clusters()
    return X, labels, fit_multiclass(X, labels, "ard", optimize=True, max_iter=30)


class TestMulticlass:
    def test_probabilities_normalized(self, multiclass):
        X, _, m = multiclass
        P = predict_multiclass(m, X + 0.1)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)

    def test_training_point_in_cluster_core(self, multiclass):
        X, labels, m = multiclass
        P = predict_multiclass(m, X)
        assert m.classes == (4, 7, 9)
        pred = np.array(m.classes)[np.argmax(P, axis=1)]
        np.testing.assert_array_equal(pred, labels)

    def test_normalization_keeps_argmax(self, multiclass):
        X, _, m = multiclass
        Xs = np.random.default_rng(5).uniform(-1, 4, size=(30, 2))
        raw = np.column_stack([predict_binary(b, Xs) for b in m.binaries])
        np.testing.assert_array_equal(np.argmax(raw, 1), np.argmax(predict_multiclass(m, Xs), 1))

    def test_needs_two_classes(self):
        with pytest.raises(DataError):
            fit_multiclass(np.zeros((3, 2)), [1, 1, 1], "ard", optimize=False)

    def test_rejects_mismatched_binaries(self, multiclass):
        with pytest.raises(DataError):
            GpMulticlass((1, 2, 3), multiclass[2].binaries[:2])

    def test_file_round_trip(self, multiclass, tmp_path):
        X, _, m = multiclass
        save_gp(m, tmp_path / "gp.json")
        back = load_gp(tmp_path / "gp.json")
        assert back.classes == m.classes
        Xs = X[::5] + 0.05
        np.testing.assert_allclose(predict_multiclass(back, Xs), predict_multiclass(m, Xs), atol=1e-10)


def dense_regression(X, t, Xs, spec):
    K = kernel_matrix(X, None, spec) + spec.noise_sigma_n**2 * np.eye(len(t))
    Ks = kernel_matrix(X, Xs, spec)
    mu = Ks.T @ np.linalg.solve(K, t)
    var = spec.signal_sigma**2 - np.einsum("ij,ij->j", Ks, np.linalg.solve(K, Ks))
    return mu, np.sqrt(np.maximum(var, 0))


class TestRegression:
    def test_single_point_closed_form(self):
        spec = KernelSpec("rbf", 1.5, (1.0,), noise_sigma_n=0.5)
        reg = gp_regress_fit([[0.3]], [2.0], spec)
        mu, _ = gp_regress_predict(reg, [[0.3]])
        assert mu[0] == pytest.approx(1.5**2 * 2.0 / (1.5**2 + 0.5**2), rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 21))
        X, t = rng.normal(size=(n, 3)), rng.normal(size=n)
        spec = KernelSpec("ard", 1.2, (0.7, 1.1, 2.0), noise_sigma_n=0.3)
        Xs = rng.normal(size=(6, 3))
        mu, sd = gp_regress_predict(gp_regress_fit(X, t, spec), Xs)
        mu_w, sd_w = dense_regression(X, t, Xs, spec)
        np.testing.assert_allclose(mu, mu_w, atol=1e-8)
        np.testing.assert_allclose(sd, sd_w, atol=1e-8)

    def test_interpolates_at_small_noise(self):
        rng = np.random.default_rng(0)
        X, t = rng.uniform(-2, 2, size=(8, 1)), rng.normal(size=8)
        spec = KernelSpec("rbf", 1.0, (0.5,), noise_sigma_n=1e-6)
        mu, _ = gp_regress_predict(gp_regress_fit(X, t, spec), X)
        np.testing.assert_allclose(mu, t, atol=1e-4)

    def test_far_query_reverts_to_prior(self):
        spec = KernelSpec("rbf", 0.8, (1.0,), noise_sigma_n=0.1)
        reg = gp_regress_fit([[0.0], [1.0]], [1.0, -1.0], spec, mean=0.25)
        mu, sd = gp_regress_predict(reg, [[1e3]])
        assert mu[0] == pytest.approx(0.25)
        assert sd[0] == pytest.approx(0.8)

    def test_noise_scale_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        X, t = rng.normal(size=(9, 2)), rng.normal(size=9)
        v = rng.uniform(0.2, 3.0, size=9)
        spec = KernelSpec("ard", 1.0, (1.0, 0.6), noise_sigma_n=0.4)
        Xs = rng.normal(size=(4, 2))
        mu, sd = gp_regress_predict(gp_regress_fit(X, t, spec, noise_scale=v), Xs,
                                    include_noise=True, noise_scale=np.full(4, 2.0))
        K = kernel_matrix(X, None, spec) + np.diag(0.16 * v)
        Ks = kernel_matrix(X, Xs, spec)
        mu_w = Ks.T @ np.linalg.solve(K, t)
        var_w = 1.0 - np.einsum("ij,ij->j", Ks, np.linalg.solve(K, Ks)) + 0.16 * 2.0
        np.testing.assert_allclose(mu, mu_w, atol=1e-10)
        np.testing.assert_allclose(sd**2, var_w, atol=1e-10)

    @pytest.mark.parametrize("noise_scale", [None, "random"])
    def test_gradient_matches_finite_differences(self, noise_scale):
        rng = np.random.default_rng(11)
        X, t = rng.normal(size=(10, 2)), rng.normal(size=10)
        v = rng.uniform(0.5, 2.0, size=10) if noise_scale else None
        spec = KernelSpec("ard", 0.9, (0.8, 1.4), noise_sigma_n=0.3)
        theta = spec.log_params(with_noise=True)
        _, g, _ = reg_lml_and_grad(X, t, spec, 0.1, v)

        def f(th):
            return reg_lml_and_grad(X, t, spec.with_log_params(th, with_noise=True), 0.1, v)[0]

        fd = central_diff(f, theta)
        assert np.max(np.abs(g - fd)) <= 1e-4 * max(1.0, np.max(np.abs(fd)))

    def test_fixed_noise_is_left_alone(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(-3, 3, size=(30, 1))
        t = np.sin(X[:, 0]) + 0.1 * rng.normal(size=30)
        init = KernelSpec("rbf", 1.0, (0.3,), noise_sigma_n=0.25)
        got = optimize_regression(X, t, init, learn_noise=False, max_iter=50)
        assert got.noise_sigma_n == 0.25
        assert got.length_scales[0] != 0.3
        free = optimize_regression(X, t, init, max_iter=50)
        assert free.noise_sigma_n != 0.25

    def test_fixed_noise_must_be_positive(self):
        with pytest.raises(NumericalError):
            optimize_regression([[0.0], [1.0]], [0.0, 1.0], KernelSpec("rbf", 1.0, (1.0,)),
                                learn_noise=False)

    @pytest.mark.parametrize("X,t", [(np.zeros((2, 1)), [1.0]), (np.zeros((0, 1)), []),
                                     (np.zeros((1, 1)), [np.nan])])
    def test_bad_input(self, X, t):
        with pytest.raises(DataError):
            gp_regress_fit(X, t, KernelSpec("rbf", 1.0, (1.0,), 0.1))

    def test_bad_noise_scale(self):
        with pytest.raises(DataError):
            gp_regress_fit([[0.0], [1.0]], [0.0, 1.0], KernelSpec("rbf", 1.0, (1.0,), 0.1),
                           noise_scale=[1.0, 0.0])

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        X, t = rng.normal(size=(6, 2)), rng.normal(size=6)
        spec = KernelSpec("ard", 1.0, (1.0, 2.0), noise_sigma_n=0.2)
        regs = [(0, gp_regress_fit(X, t, spec, 0.3)),
                (2, gp_regress_fit(X, -t, spec, noise_scale=np.linspace(1, 2, 6)))]
        save_regressors(regs, tmp_path / "r.json")
        back = load_regressors(tmp_path / "r.json")
        assert [i for i, _ in back] == [0, 2]
        Xs = rng.normal(size=(3, 2))
        for (_, a), (_, b) in zip(regs, back):
            np.testing.assert_allclose(gp_regress_predict(a, Xs), gp_regress_predict(b, Xs), atol=1e-12)
