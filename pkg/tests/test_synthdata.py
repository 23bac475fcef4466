import numpy as np
import pytest
from scipy import stats

from icon import synthdata as sd
from icon.errors import ContractError
from icon.evaluate import recovery_r2
from icon.numerics import RngStream, finite_diff_jacobian


class TestSpec:
    def test_defaults_match_benchmark_shape(self):
        spec = sd.SynthSpec()
        assert (spec.T, spec.n_per_task, spec.K) == (4, 10000, 16)
        assert spec.d_inv == spec.d_var == 8

    def test_validation(self):
        with pytest.raises(ContractError):
            sd.SynthSpec(mu_range=(4, -4))
        with pytest.raises(ContractError):
            sd.SynthSpec(var_range=(1.0, 0.1))
        with pytest.raises(ContractError):
            sd.SynthSpec(train_frac=1.5)


class TestTaskParams:
    def test_draws_within_ranges(self):
        spec = sd.SynthSpec(T=50, seed=1)
        for mu, var in sd.gen_task_params(spec, RngStream(1)):
            assert np.all((mu >= -4) & (mu <= 4))
            assert np.all((var >= 0.1) & (var <= 1.0))

    def test_seed_determinism(self):
        spec = sd.SynthSpec(seed=2)
        a = sd.gen_task_params(spec, RngStream(5))
        b = sd.gen_task_params(spec, RngStream(5))
        for (m1, v1), (m2, v2) in zip(a, b):
            assert np.array_equal(m1, m2) and np.array_equal(v1, v2)

    def test_mu_mean_near_zero(self):
        spec = sd.SynthSpec(T=12500, seed=3)  # 12500 tasks x 8 dims = 1e5 draws
        draws = np.concatenate([mu for mu, _ in sd.gen_task_params(spec, RngStream(3))])
        se = np.sqrt(64.0 / 12.0 / draws.size)
        assert abs(draws.mean()) < 3 * se


class TestLatents:
    def test_invariant_block_centered(self):
        mu = np.array([2.0, -3.0])
        var = np.array([0.5, 0.25])
        z = sd.gen_latents((mu, var), 100_000, RngStream(4), d_inv=8)
        se = 1.0 / np.sqrt(z.shape[0])
        assert np.all(np.abs(z[:, :8].mean(axis=0)) < 3 * se)

    def test_variant_block_mean(self):
        mu = np.array([1.5, -0.5, 3.0])
        var = np.array([0.9, 0.2, 0.4])
        z = sd.gen_latents((mu, var), 100_000, RngStream(5), d_inv=4)
        se = np.sqrt(var / z.shape[0])
        assert np.all(np.abs(z[:, 4:].mean(axis=0) - mu) < 3 * se)

    def test_invariant_block_shared_across_tasks(self):
        spec = sd.SynthSpec(T=2, seed=6)
        params = sd.gen_task_params(spec, RngStream(6))
        z1 = sd.gen_latents(params[0], 50_000, RngStream(6, 1))
        z2 = sd.gen_latents(params[1], 50_000, RngStream(6, 2))
        diff = z1[:, :8].mean(axis=0) - z2[:, :8].mean(axis=0)
        se = np.sqrt(2.0 / 50_000)
        assert np.all(np.abs(diff) < 3 * se)


class TestMixer:
    def test_inverse_recovers(self):
        mixer = sd.make_mixer(sd.SynthSpec(seed=7), RngStream(7))
        z = np.random.default_rng(0).standard_normal((100, 16))
        x = sd.mixer_forward(mixer, z)
        assert np.max(np.abs(sd.mixer_inverse(mixer, x) - z)) < 1e-8

    def test_jacobian_nonsingular_at_100_points(self):
        mixer = sd.make_mixer(sd.SynthSpec(seed=8), RngStream(8))
        rng = np.random.default_rng(1)
        for _ in range(100):
            z = rng.standard_normal(16) * 2
            jac = finite_diff_jacobian(lambda v: sd.mixer_forward(mixer, v[None, :])[0], z)
            assert np.linalg.svd(jac, compute_uv=False)[-1] > 1e-3

    def test_exact_jacobian_matches_fd(self):
        mixer = sd.make_mixer(sd.SynthSpec(seed=9), RngStream(9))
        z = np.random.default_rng(2).standard_normal(16)
        jac = finite_diff_jacobian(lambda v: sd.mixer_forward(mixer, v[None, :])[0], z)
        assert np.max(np.abs(jac - sd.mixer_jacobian(mixer, z))) < 1e-6

    def test_condition_bound(self):
        mixer = sd.make_mixer(sd.SynthSpec(seed=10), RngStream(10))
        assert np.linalg.cond(mixer.W1) < 100
        assert np.linalg.cond(mixer.W2) < 100

    def test_determinism(self):
        a = sd.make_mixer(sd.SynthSpec(seed=11), RngStream(11))
        b = sd.make_mixer(sd.SynthSpec(seed=11), RngStream(11))
        assert np.array_equal(a.W1, b.W1) and np.array_equal(a.W2, b.W2)


class TestGenerate:
    def test_benchmark_shapes(self):
        datasets, mixer, manifest = sd.generate(sd.SynthSpec(seed=12))
        assert len(datasets) == 4
        for ds in datasets:
            assert ds.X.shape == (10000, 16)
            assert ds.Z_true.shape == (10000, 16)
        assert manifest["n_train"] == 9000

    def test_observations_reproduce_from_latents(self):
        spec = sd.SynthSpec(T=2, n_per_task=500, seed=13)
        datasets, mixer, _ = sd.generate(spec)
        for ds in datasets:
            assert np.max(np.abs(sd.mixer_forward(mixer, ds.Z_true) - ds.X)) < 1e-10

    def test_variant_observation_statistics_separate(self):
        spec = sd.SynthSpec(T=4, n_per_task=5000, seed=14)
        datasets, _, manifest = sd.generate(spec)
        params = manifest["task_params"]
        for a in range(4):
            for b in range(a + 1, 4):
                gap = np.abs(np.array(params[a]["mu"]) - np.array(params[b]["mu"]))
                if gap.max() <= 0.5:
                    continue
                xa, xb = datasets[a].X, datasets[b].X
                diff = np.abs(xa.mean(axis=0) - xb.mean(axis=0))
                se = np.sqrt(xa.var(axis=0) / xa.shape[0] + xb.var(axis=0) / xb.shape[0])
                assert diff.max() > 3 * se.max()

    def test_ground_truth_recoverable(self):
        spec = sd.SynthSpec(T=1, n_per_task=2000, seed=15)
        datasets, mixer, _ = sd.generate(spec)
        z_hat = sd.mixer_inverse(mixer, datasets[0].X)
        assert recovery_r2(z_hat, datasets[0].Z_true) == pytest.approx(1.0, abs=1e-8)

    def test_invariant_marginals_pass_ks(self):
        spec = sd.SynthSpec(T=2, n_per_task=10_000, seed=16)
        datasets, _, _ = sd.generate(spec)
        n = m = 10_000
        critical = 1.628 * np.sqrt((n + m) / (n * m))  # alpha = 0.01
        for j in range(spec.d_inv):
            stat = stats.ks_2samp(datasets[0].Z_true[:, j], datasets[1].Z_true[:, j]).statistic
            assert stat < critical

    def test_split_dataset(self):
        spec = sd.SynthSpec(T=1, n_per_task=100, seed=17)
        datasets, _, manifest = sd.generate(spec)
        tr, te = sd.split_dataset(datasets[0], manifest["n_train"])
        assert tr.n == 90 and te.n == 10
        assert tr.split == "train" and te.split == "test"
        assert np.array_equal(np.vstack([tr.X, te.X]), datasets[0].X)
        with pytest.raises(ContractError):
            sd.split_dataset(datasets[0], 100)
