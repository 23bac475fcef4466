import math

import numpy as np
import pytest

from icon import flow as fl
from icon.errors import ContractError
from icon.numerics import RngStream, finite_diff_jacobian

from .oracles import change_of_variables_ll

LOG2PI = math.log(2.0 * math.pi)


def random_flow(K=6, N=None, n_blocks=4, width=24, seed=0, jitter=0.3):
    f = fl.init_flow(K, N or K, n_blocks=n_blocks, width=width, rng=seed)
    rng = np.random.default_rng(seed + 1)
    f.theta = f.theta + jitter * rng.standard_normal(f.theta.size)
    return f


class TestInit:
    def test_initial_flow_is_composed_permutation(self):
        f = fl.init_flow(4, 4, n_blocks=3, width=8, rng=5)
        z = np.random.default_rng(0).standard_normal((10, 4))
        out = np.asarray(fl.forward(f, z))
        expect = z.copy()
        for p in f.permutations:
            expect = expect[:, p]
        assert np.array_equal(out, expect)

    def test_parameter_count_closed_form(self):
        K, N, blocks, width = 16, 8, 8, 64
        f = fl.init_flow(K, N, n_blocks=blocks, width=width, rng=0)
        d1, d2 = 8, 8
        per_block = d1 * width + width + width * width + width + width * 2 * d2 + 2 * d2
        assert f.theta.size == blocks * per_block + N

    def test_seed_determinism(self):
        a = fl.init_flow(5, 3, n_blocks=2, width=16, rng=RngStream(42, 7))
        b = fl.init_flow(5, 3, n_blocks=2, width=16, rng=RngStream(42, 7))
        assert np.array_equal(a.theta, b.theta)
        assert all(np.array_equal(p, q) for p, q in zip(a.permutations, b.permutations))

    def test_invalid_dims(self):
        with pytest.raises(ContractError):
            fl.init_flow(4, 5)
        with pytest.raises(ContractError):
            fl.init_flow(4, 0)
        with pytest.raises(ContractError):
            fl.init_flow(4, 4, n_blocks=0)


class TestRoundTrip:
    def test_inverse_of_initial_flow_is_inverse_permutation(self):
        f = fl.init_flow(4, 4, n_blocks=2, width=8, rng=1)
        x = np.random.default_rng(2).standard_normal((6, 4))
        z = np.asarray(fl.inverse(f, x))
        assert np.allclose(np.asarray(fl.forward(f, z)), x, atol=1e-12)

    def test_round_trip_random_flow(self):
        f = random_flow(seed=3)
        rng = np.random.default_rng(4)
        z = rng.standard_normal((200, 6))
        x = np.asarray(fl.forward(f, z))
        assert np.max(np.abs(np.asarray(fl.inverse(f, x)) - z)) < 1e-8
        x2 = rng.standard_normal((200, 6))
        assert np.max(np.abs(np.asarray(fl.forward(f, np.asarray(fl.inverse(f, x2)))) - x2)) < 1e-8

    def test_single_block_hand_computed(self):
        # K=4, one block, identity permutation, zero W3 and a fixed b3 so the
        # coupling is the constant map y2 = x2 * exp(s) + t with
        # s = center(2 tanh([a, b]))
        f = fl.init_flow(4, 4, n_blocks=1, width=8, rng=0)
        f.permutations = [np.arange(4)]
        a_raw, b_raw, t1, t2 = 0.7, -0.2, 0.5, -1.0
        off, shape = f.layout.segments["b0.b3"]
        f.theta[off:off + 4] = [a_raw, b_raw, t1, t2]
        x = np.array([[0.3, -0.8, 1.2, 0.4]])
        sa, sb = 2 * math.tanh(a_raw), 2 * math.tanh(b_raw)
        mean = (sa + sb) / 2
        expect = np.array([[0.3, -0.8,
                            1.2 * math.exp(sa - mean) + t1,
                            0.4 * math.exp(sb - mean) + t2]])
        assert np.allclose(np.asarray(fl.forward(f, x)), expect, atol=1e-12)

    def test_k1_degenerate_flow_is_identity(self):
        f = fl.init_flow(1, 1, n_blocks=2, width=4, rng=0)
        x = np.array([[0.0], [1.5]])
        assert np.array_equal(np.asarray(fl.forward(f, x)), x)


class TestPosterior:
    def test_sigma_default(self):
        f = fl.init_flow(4, 3, n_blocks=2, width=8, rng=0)
        post = fl.posterior(f, np.zeros((2, 4)))
        assert np.allclose(np.asarray(post.sigma), 0.1, atol=1e-15)

    def test_mu_is_inverse_head(self):
        f = fl.init_flow(4, 4, n_blocks=2, width=8, rng=1)
        x = np.random.default_rng(0).standard_normal((5, 4))
        post = fl.posterior(f, x)
        assert np.array_equal(np.asarray(post.mu), np.asarray(fl.inverse(f, x)))

    def test_posterior_sampling_moments(self):
        f = random_flow(K=4, seed=7)
        x = np.random.default_rng(1).standard_normal((1, 4))
        post = fl.posterior(f, x)
        mu = np.asarray(post.mu)[0]
        sigma = np.asarray(post.sigma)
        rng = np.random.default_rng(2)
        n = 100_000
        draws = mu + sigma * rng.standard_normal((n, 4))
        se_mean = sigma / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - mu) < 3 * se_mean)
        se_std = sigma / np.sqrt(2 * (n - 1))
        assert np.all(np.abs(draws.std(axis=0, ddof=1) - sigma) < 3 * se_std)


class TestLikelihood:
    def test_k1_identity_flow_at_zero(self):
        f = fl.init_flow(1, 1, n_blocks=1, width=4, rng=0)
        ll = np.asarray(fl.log_likelihood(f, np.array([[0.0]])))
        assert ll[0] == pytest.approx(-0.5 * LOG2PI, abs=1e-12)

    def test_permutation_invariance_at_init(self):
        f = fl.init_flow(5, 5, n_blocks=3, width=8, rng=2)
        x = np.random.default_rng(3).standard_normal((20, 5))
        expect = -0.5 * (x ** 2).sum(axis=1) - 2.5 * LOG2PI
        assert np.allclose(np.asarray(fl.log_likelihood(f, x)), expect, atol=1e-12)

    def test_change_of_variables_oracle(self):
        f = random_flow(K=5, seed=9)
        xs = np.random.default_rng(5).standard_normal((5, 5))
        ll = np.asarray(fl.log_likelihood(f, xs))

        def inv_row(row):
            return np.asarray(fl.inverse(f, row[None, :]))[0]

        for i in range(5):
            oracle = change_of_variables_ll(inv_row, xs[i])
            assert abs(ll[i] - oracle) / abs(oracle) < 1e-3

    def test_sample_mean_near_entropy(self):
        f = random_flow(K=4, seed=11, jitter=0.2)
        rng = np.random.default_rng(6)
        n = 100_000
        z = rng.standard_normal((n, 4))
        x = np.asarray(fl.forward(f, z))
        ll = np.asarray(fl.log_likelihood(f, x))
        expect = -2.0 * (1.0 + LOG2PI)
        se = ll.std(ddof=1) / np.sqrt(n)
        assert abs(ll.mean() - expect) < 3 * se


class TestVolumePreservation:
    def test_zero_sum_log_scales(self):
        f = random_flow(K=7, seed=13)
        z = np.random.default_rng(7).standard_normal((50, 7))
        assert np.max(np.abs(fl.sum_log_scales(f, z))) < 1e-12

    def test_finite_difference_log_det(self):
        f = random_flow(K=4, seed=15)
        rng = np.random.default_rng(8)
        for _ in range(10):
            z = rng.standard_normal(4)
            jac = finite_diff_jacobian(lambda v: np.asarray(fl.forward(f, v[None, :]))[0], z)
            _, logdet = np.linalg.slogdet(jac)
            assert abs(logdet) < 1e-3

    def test_mass_round_trip_property(self):
        f = random_flow(K=6, seed=17)
        z = np.random.default_rng(9).standard_normal((1000, 6))
        x = np.asarray(fl.forward(f, z))
        back = np.asarray(fl.inverse(f, x))
        assert np.max(np.abs(back - z)) < 1e-8
