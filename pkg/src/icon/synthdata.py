"""Synthetic multi-task benchmark with ground-truth latents and an invertible mixer.

Latents are 16-dimensional per sample: an invariant block drawn from N(0, I)
identically for every task, and a task-specific block drawn from N(mu_t,
sigma_t^2 I) with per-task parameters sampled once per run. Observations come
from a two-layer leaky-ReLU perceptron with condition-bounded square weights,
which is globally invertible in closed form.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GenerationError
from .numerics import as_generator, named_stream
from .objectives import TaskDataset

LEAKY_SLOPE = 0.2
_COND_BOUND = 100.0
_MAX_RESAMPLE = 100


@dataclass
class SynthSpec:
    T: int = 4
    n_per_task: int = 10000
    d_inv: int = 8
    d_var: int = 8
    mu_range: tuple = (-4.0, 4.0)
    var_range: tuple = (0.1, 1.0)
    train_frac: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.n_per_task < 1 or self.d_inv < 0 or self.d_var < 1:
            raise ContractError("invalid synthetic spec sizes")
        if not (self.mu_range[0] < self.mu_range[1] and 0 < self.var_range[0] < self.var_range[1]):
            raise ContractError("ranges must be ordered (variances positive)")
        if not (0.0 < self.train_frac < 1.0):
            raise ContractError("train_frac must be in (0, 1)")

    @property
    def K(self) -> int:
        return self.d_inv + self.d_var


@dataclass
class MixerParams:
    """Two square weight matrices around one leaky-ReLU, plus cached inverses."""

    W1: np.ndarray
    W2: np.ndarray
    alpha: float = LEAKY_SLOPE
    W1_inv: np.ndarray = field(init=False)
    W2_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        self.W1_inv = np.linalg.inv(self.W1)
        self.W2_inv = np.linalg.inv(self.W2)

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.W1.astype("<f8").tobytes())
        h.update(self.W2.astype("<f8").tobytes())
        return h.hexdigest()


def leaky_relu(v: np.ndarray, alpha: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(v > 0, v, alpha * v)


def leaky_relu_inv(v: np.ndarray, alpha: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(v > 0, v, v / alpha)


def mixer_forward(m: MixerParams, z: np.ndarray) -> np.ndarray:
    return leaky_relu(np.asarray(z) @ m.W1, m.alpha) @ m.W2


def mixer_inverse(m: MixerParams, x: np.ndarray) -> np.ndarray:
    return leaky_relu_inv(np.asarray(x) @ m.W2_inv, m.alpha) @ m.W1_inv


def mixer_jacobian(m: MixerParams, z: np.ndarray) -> np.ndarray:
    """Exact Jacobian dx/dz at one point (column convention)."""
    pre = np.asarray(z) @ m.W1
    d = np.where(pre > 0, 1.0, m.alpha)
    return m.W2.T @ np.diag(d) @ m.W1.T


def gen_task_params(spec: SynthSpec, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-task mean and variance vectors of the task-specific latent block."""
    gen = as_generator(rng)
    out = []
    for _ in range(spec.T):
        mu = gen.uniform(*spec.mu_range, size=spec.d_var)
        var = gen.uniform(*spec.var_range, size=spec.d_var)
        out.append((mu, var))
    return out


def gen_latents(task_params: tuple[np.ndarray, np.ndarray], n: int, rng,
                d_inv: int = 8) -> np.ndarray:
    """Invariant block from N(0, I), task block from N(mu, var)."""
    gen = as_generator(rng)
    mu, var = task_params
    z_inv = gen.standard_normal((n, d_inv))
    z_var = mu[None, :] + np.sqrt(var)[None, :] * gen.standard_normal((n, mu.size))
    return np.concatenate([z_inv, z_var], axis=1)


def _conditioned_square(gen: np.random.Generator, d: int) -> np.ndarray:
    for _ in range(_MAX_RESAMPLE):
        q, r = np.linalg.qr(gen.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))[None, :]  # unique QR, deterministic sign
        w = q @ np.diag(gen.uniform(0.7, 1.6, size=d))
        if np.linalg.cond(w) < _COND_BOUND:
            return w
    raise GenerationError(f"no weight matrix with condition < {_COND_BOUND} "
                          f"after {_MAX_RESAMPLE} draws")


def make_mixer(spec: SynthSpec, rng) -> MixerParams:
    gen = as_generator(rng)
    return MixerParams(W1=_conditioned_square(gen, spec.K),
                       W2=_conditioned_square(gen, spec.K))


def generate(spec: SynthSpec) -> tuple[list[TaskDataset], MixerParams, dict]:
    """Full benchmark: T task datasets with ground-truth latents, plus a manifest."""
    params = gen_task_params(spec, named_stream(spec.seed, "synth.task_params"))
    mixer = make_mixer(spec, named_stream(spec.seed, "synth.mixer"))
    datasets = []
    for t in range(1, spec.T + 1):
        stream = named_stream(spec.seed, f"synth.latents.{t}")
        z = gen_latents(params[t - 1], spec.n_per_task, stream, d_inv=spec.d_inv)
        x = mixer_forward(mixer, z)
        datasets.append(TaskDataset(task_id=t, X=x, Z_true=z))
    n_train = int(round(spec.train_frac * spec.n_per_task))
    manifest = {
        "seed": spec.seed,
        "T": spec.T,
        "n_per_task": spec.n_per_task,
        "K": spec.K,
        "d_inv": spec.d_inv,
        "d_var": spec.d_var,
        "n_train": n_train,
        "task_params": [{"mu": mu.tolist(), "var": var.tolist()} for mu, var in params],
        "mixer_hash": mixer.weight_hash(),
        "leaky_slope": mixer.alpha,
    }
    return datasets, mixer, manifest


def split_dataset(ds: TaskDataset, n_train: int) -> tuple[TaskDataset, TaskDataset]:
    """Deterministic head/tail split; rows are already i.i.d. by construction."""
    if not (0 < n_train < ds.n):
        raise ContractError("n_train must leave both splits non-empty")

    def cut(lo, hi, tag):
        return TaskDataset(
            task_id=ds.task_id,
            X=ds.X[lo:hi],
            Z_true=None if ds.Z_true is None else ds.Z_true[lo:hi],
            labels=None if ds.labels is None else ds.labels[lo:hi],
            split=tag,
        )

    return cut(0, n_train, "train"), cut(n_train, ds.n, "test")


def manifest_json(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True)
