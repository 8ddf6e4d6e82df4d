import math

import numpy as np
import pytest

from gradleak.errors import ContractError, DimensionError
from gradleak.gradmatch import AffineGradientMap, GradLossKind, GradTarget, gm_loss
from gradleak.lavp import (
    PROXY_NAMES,
    HvpOperator,
    MatrixOperator,
    ProxyParams,
    compute_proxies,
    dense_hessian_oracle,
    fusion_geomean,
    grad_norm_proxy,
    max_eigen_power,
    max_rayleigh_random,
    min_eigen_deflate,
)
from gradleak.smallnet import grad_weights
from gradleak.tensorcore import SeededRng, sym_eigen_dense

from conftest import make_sample, target_of

L2, COS = GradLossKind.L2, GradLossKind.COSINE


def affine_op(kind, seed=0, n=12, d=5):
    rng = SeededRng(seed)
    A = rng.normal((n, d))
    b = rng.normal(n)
    x = rng.uniform(size=d)
    gmap = AffineGradientMap(A, b)
    return HvpOperator(kind, gmap, x, GradTarget(A @ x + b)), A, A @ x + b


class TestOperatorOnAffineMap:
    """With g(x) = A x + b the Hessians have closed forms."""

    def test_l2_is_ata(self):
        op, A, _ = affine_op(L2)
        v = SeededRng(1).normal(5)
        np.testing.assert_allclose(op.hvp(v), A.T @ A @ v, rtol=1e-8)
        np.testing.assert_allclose(op.jacobian(), A, rtol=1e-9)

    def test_cosine_projected_form(self):
        op, A, g = affine_op(COS)
        u = g / np.linalg.norm(g)
        P = np.eye(len(g)) - np.outer(u, u)
        H = A.T @ P @ A / (g @ g)
        v = SeededRng(2).normal(5)
        np.testing.assert_allclose(op.hvp(v), H @ v, rtol=1e-7, atol=1e-12)
        assert op.rayleigh(v) == pytest.approx(v @ H @ v / (v @ v), rel=1e-8)

    def test_cosine_hessian_is_second_derivative_of_loss(self):
        # 1 - cos(g(x), g*) ~ 0.5 dx^T H dx near x*
        op, A, g = affine_op(COS, seed=3)
        t = GradTarget(g)
        H = dense_hessian_oracle(op)
        dx = SeededRng(4).normal(5) * 1e-4
        loss = gm_loss(COS, A @ (op.x_star + dx) + op.gmap.b, t)
        assert loss == pytest.approx(0.5 * dx @ H @ dx, rel=1e-3)

    def test_scipy_linear_operator(self):
        op, A, _ = affine_op(L2)
        lo = op.as_linear_operator()
        v = np.ones(5)
        np.testing.assert_allclose(lo @ v, op.hvp(v))

    def test_dimension_check(self):
        op, _, _ = affine_op(L2)
        with pytest.raises(DimensionError):
            op.hvp(np.ones(4))

    def test_bad_fd_step(self):
        op, _, _ = affine_op(L2)
        with pytest.raises(ContractError):
            HvpOperator(L2, op.gmap, op.x_star, op.target, fd_step=0.0)


class TestPowerIteration:
    def test_diagonal_extremes(self):
        op = MatrixOperator(np.diag([5.0, 3.0, 1.0]))
        top = max_eigen_power(op, 2000, 1e-12, SeededRng(0))
        bottom = min_eigen_deflate(op, top.value, 2000, 1e-12, SeededRng(1))
        assert top.value == pytest.approx(5.0, rel=1e-9)
        assert bottom.value == pytest.approx(1.0, rel=1e-6)
        assert top.converged

    def test_singular_operator_clamped(self):
        op = MatrixOperator(np.diag([2.0, 1.0, 0.0]))
        bottom = min_eigen_deflate(op, 2.0, 2000, 1e-12, SeededRng(1))
        assert bottom.value >= 0.0
        assert bottom.value < 1e-6

    def test_matches_dense_eigensolver(self):
        rng = SeededRng(5)
        B = rng.normal((20, 8))
        H = B.T @ B
        vals, _ = sym_eigen_dense(H)
        op = MatrixOperator(H)
        top = max_eigen_power(op, 5000, 1e-13, SeededRng(6))
        bottom = min_eigen_deflate(op, top.value, 5000, 1e-13, SeededRng(7))
        assert top.value == pytest.approx(vals[0], rel=1e-8)
        assert bottom.value == pytest.approx(vals[-1], rel=1e-6)

    def test_start_orthogonal_to_top_recovers(self):
        # the fixed all-ones probe rescues a start vector with no top-eigenvector component
        H = np.diag([1.0, 10.0])
        op = MatrixOperator(H)

        class FixedStart:
            def normal(self, size=None):
                return np.array([1.0, 0.0])

        top = max_eigen_power(op, 500, 1e-12, FixedStart())
        assert top.value == pytest.approx(10.0, rel=1e-9)

    def test_random_lower_bound(self):
        op = MatrixOperator(np.diag([4.0, 2.0, 1.0]))
        est = max_rayleigh_random(op, 50, SeededRng(0))
        assert 1.0 <= est <= 4.0

    def test_bad_args(self):
        op = MatrixOperator(np.eye(2))
        with pytest.raises(ContractError):
            max_eigen_power(op, 0)
        with pytest.raises(ContractError):
            min_eigen_deflate(op, -1.0)


class TestNetworkProxies:
    @pytest.mark.parametrize("kind", [L2, COS])
    def test_oracle_is_psd_and_symmetric(self, default_net, kind):
        s = make_sample(2)
        op = HvpOperator.from_model(kind, default_net, s)
        H = dense_hessian_oracle(op)
        np.testing.assert_array_equal(H, H.T)
        vals, _ = sym_eigen_dense(H)
        assert vals[-1] >= -1e-10 * vals[0]

    def test_hvp_oracle_close_to_jacobian_oracle(self, default_net):
        s = make_sample(2)
        op = HvpOperator.from_model(L2, default_net, s)
        Hj = dense_hessian_oracle(op, "jacobian")
        Hh = dense_hessian_oracle(op, "hvp", symmetrize=False)
        assert np.abs(Hh - Hh.T).max() <= 1e-5 * np.abs(Hj).max()
        np.testing.assert_allclose(Hh, Hj, atol=1e-5 * np.abs(Hj).max())

    def test_grad_norm_proxy(self, default_net):
        s = make_sample(3)
        assert grad_norm_proxy(default_net, s) == pytest.approx(
            np.linalg.norm(grad_weights(default_net, s)), rel=1e-14)

    def test_fusion(self):
        assert fusion_geomean(4.0, 9.0) == 6.0
        with pytest.raises(ContractError):
            fusion_geomean(-1.0, 1.0)

    def test_compute_proxies_consistent(self, default_net):
        s = make_sample(4)
        rec = compute_proxies(default_net, s, 0, ProxyParams(max_iters=300))
        assert set(rec.values()) == set(PROXY_NAMES)
        assert rec.l2_max >= rec.l2_min >= 0
        assert rec.cos_max >= rec.cos_min >= 0
        assert rec.fusion == pytest.approx(math.sqrt(rec.l2_max * rec.cos_min))
        again = compute_proxies(default_net, s, 0, ProxyParams(max_iters=300))
        assert rec.values() == again.values()

    def test_proxies_match_dense_spectrum(self, linear_net):
        s = make_sample(6)
        rec = compute_proxies(linear_net, s, 0, ProxyParams())
        for kind, hi, lo in ((L2, rec.l2_max, rec.l2_min), (COS, rec.cos_max, rec.cos_min)):
            vals, _ = sym_eigen_dense(dense_hessian_oracle(HvpOperator.from_model(kind, linear_net, s)))
            assert hi == pytest.approx(vals[0], rel=1e-6)
            assert lo == pytest.approx(max(vals[-1], 0.0), rel=1e-4, abs=1e-8 * vals[0])
