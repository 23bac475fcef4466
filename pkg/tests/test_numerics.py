import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icon import autodiff as ad
from icon.errors import ContractError, CorrelationUndefinedError
from icon.numerics import (RngStream, finite_diff_jacobian, named_stream,
                           pca_axes, pca_project, pearson, rmse, spectral_norm)

from .oracles import jacobi_svd_max, loop_rmse


class TestRngStream:
    def test_identical_pairs_reproduce(self):
        a = RngStream(123, 4).generator().standard_normal(100)
        b = RngStream(123, 4).generator().standard_normal(100)
        assert np.array_equal(a, b)

    def test_streams_are_distinct(self):
        a = RngStream(123, 0).generator().standard_normal(10)
        b = RngStream(123, 1).generator().standard_normal(10)
        assert not np.array_equal(a, b)

    def test_named_stream_stable(self):
        assert named_stream(9, "trainer.x") == named_stream(9, "trainer.x")
        assert named_stream(9, "a").stream_id != named_stream(9, "b").stream_id


class TestFiniteDiffJacobian:
    def test_identity(self):
        jac = finite_diff_jacobian(lambda v: v, np.array([0.3, -0.7]))
        assert np.allclose(jac, np.eye(2), atol=1e-10)

    def test_linear_map_exact(self):
        a = np.array([[2.0, 0.0], [0.0, 3.0]])
        jac = finite_diff_jacobian(lambda v: a @ v, np.array([0.5, 1.5]))
        assert np.allclose(jac, a, atol=1e-10)

    def test_matches_reverse_mode_on_mixer(self):
        rng = np.random.default_rng(0)
        w1 = rng.standard_normal((3, 5)) * 0.5
        w2 = rng.standard_normal((5, 3)) * 0.5

        def f(v):
            return ad.tanh(v @ w1) @ w2

        x = rng.standard_normal(3)
        jac_fd = finite_diff_jacobian(f, x)
        # reverse-mode oracle: one backward pass per output row
        jac_ad = np.empty((3, 3))
        for i in range(3):
            leaf = ad.Tensor(x)
            out = ad.matmul(ad.tanh(ad.matmul(ad.reshape(leaf, (1, 3)), w1)), w2)
            ad.backprop(out[(0, i)])
            jac_ad[i] = leaf.grad
        assert np.max(np.abs(jac_fd - jac_ad)) / np.max(np.abs(jac_ad)) < 1e-4

    def test_nonfinite_rejected(self):
        from icon.errors import NumericDomainError
        with pytest.raises(NumericDomainError):
            finite_diff_jacobian(lambda v: np.log(v), np.array([-1.0]))


class TestSpectralNorm:
    def test_identity(self):
        assert spectral_norm(np.eye(3)) == pytest.approx(1.0, abs=1e-12)

    def test_diag(self):
        assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-10)

    def test_zero(self):
        assert spectral_norm(np.zeros((4, 4))) == 0.0

    def test_against_jacobi_oracle(self):
        rng = np.random.default_rng(7)
        m = rng.standard_normal((8, 8))
        assert spectral_norm(m) == pytest.approx(jacobi_svd_max(m), rel=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounded_by_frobenius(self, seed):
        m = np.random.default_rng(seed).standard_normal((5, 3))
        assert spectral_norm(m) <= np.sqrt((m * m).sum()) + 1e-9


class TestRmse:
    def test_equal_inputs(self):
        a = np.arange(6.0).reshape(2, 3)
        assert rmse(a, a) == 0.0

    def test_analytic(self):
        assert rmse(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == \
            pytest.approx(np.sqrt(12.5), rel=1e-12)

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((7, 5))
        assert rmse(a, b) == pytest.approx(loop_rmse(a, b), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            rmse(np.zeros((2, 2)), np.zeros((2, 3)))


class TestPearson:
    def test_perfect(self):
        a = np.array([0.5, 1.0, 2.0])
        assert pearson(a, a) == pytest.approx(1.0)
        assert pearson(a, -a) == pytest.approx(-1.0)

    def test_hand_computed(self):
        # cov = 1, var_a = 2/3, var_b = 14/9 per-sample: r = 3/sqrt(28/3)
        assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.98198, abs=1e-5)

    def test_zero_variance(self):
        with pytest.raises(CorrelationUndefinedError):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


class TestPca:
    def test_full_rank_2d_is_isometry(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((50, 2)) @ np.array([[2.0, 0.3], [0.1, 0.5]])
        proj = pca_project(pts, k=2)
        d_orig = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d_proj = np.linalg.norm(proj[:, None] - proj[None, :], axis=2)
        assert np.max(np.abs(d_orig - d_proj)) < 1e-10

    def test_collinear_cloud(self):
        t = np.linspace(-1, 1, 30)
        pts = np.outer(t, [1.0, 2.0, -0.5])
        proj = pca_project(pts, k=2)
        assert np.max(np.abs(proj[:, 1])) < 1e-10

    def test_discarded_variance_matches_eigenvalues(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((200, 6)) * np.array([3, 2, 1.5, 1, 0.5, 0.2])
        axes, eigvals = pca_axes(pts, k=2)
        centered = pts - pts.mean(axis=0)
        resid = centered - (centered @ axes) @ axes.T
        discarded = (resid ** 2).sum() / (pts.shape[0] - 1)
        assert discarded == pytest.approx(eigvals[2:].sum(), rel=1e-8)

    def test_needs_enough_points(self):
        with pytest.raises(ContractError):
            pca_project(np.zeros((2, 3)))
