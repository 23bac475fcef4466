"""Volume-preserving invertible networks with Gaussian posteriors.

Each block permutes the coordinates and then applies an affine coupling:
the first ceil(K/2) coordinates drive a 2-hidden-layer tanh subnet that
emits a raw scale and a translation for the remaining floor(K/2). Scales
pass through 2*tanh and are mean-centered per sample, so their sum is
exactly zero and the Jacobian determinant is identically one. That makes
the log-likelihood a plain standard-normal density of the inverse image.

All evaluation functions take an optional ``theta`` override so training
can pass a taped Tensor through the same code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamLayout
from .errors import ContractError, InstabilityError
from .numerics import as_generator

LOG_SIGMA_INIT = math.log(0.1)
_SCALE_LIMIT = 30.0  # log-space guard; the 2*tanh bound keeps |s| < 4 in practice


@dataclass
class FlowParams:
    """One volume-preserving flow: dims, fixed permutations, flat parameters."""

    K: int
    N: int
    n_blocks: int
    width: int
    permutations: list  # one K-permutation per block
    layout: ParamLayout
    theta: np.ndarray

    def copy(self) -> "FlowParams":
        return FlowParams(self.K, self.N, self.n_blocks, self.width,
                          [p.copy() for p in self.permutations],
                          self.layout, self.theta.copy())


@dataclass
class GaussianPosterior:
    """Per-sample diagonal Gaussian over the designated latents."""

    mu: object    # (n, N) array or Tensor
    sigma: object  # (N,) array or Tensor, strictly positive


def _split_dims(K: int) -> tuple[int, int]:
    d1 = (K + 1) // 2
    return d1, K - d1


def flow_layout(K: int, n_blocks: int, width: int, N: int) -> ParamLayout:
    d1, d2 = _split_dims(K)
    spec = []
    for b in range(n_blocks):
        spec += [
            (f"b{b}.W1", (d1, width)),
            (f"b{b}.b1", (width,)),
            (f"b{b}.W2", (width, width)),
            (f"b{b}.b2", (width,)),
            (f"b{b}.W3", (width, 2 * d2)),
            (f"b{b}.b3", (2 * d2,)),
        ]
    spec.append(("log_sigma", (N,)))
    return ParamLayout.build(spec)


def init_flow(K: int, N: int, n_blocks: int = 8, width: int = 64,
              rng=None) -> FlowParams:
    """Near-identity initialization: zeroed final layers leave only the permutations."""
    if not (1 <= N <= K):
        raise ContractError(f"need 1 <= N <= K, got N={N}, K={K}")
    if n_blocks < 1:
        raise ContractError("n_blocks must be >= 1")
    gen = as_generator(rng if rng is not None else 0)
    d1, _ = _split_dims(K)
    layout = flow_layout(K, n_blocks, width, N)
    theta = np.zeros(layout.size)
    perms = [gen.permutation(K) for _ in range(n_blocks)]
    for b in range(n_blocks):
        for name, fan_in in ((f"b{b}.W1", d1), (f"b{b}.W2", width)):
            off, shape = layout.segments[name]
            scale = 1.0 / math.sqrt(fan_in)
            n = int(np.prod(shape))
            theta[off:off + n] = gen.uniform(-scale, scale, size=n)
        # W3, b3 stay zero so each block starts as the identity coupling
    off, shape = layout.segments["log_sigma"]
    theta[off:off + N] = LOG_SIGMA_INIT
    return FlowParams(K, N, n_blocks, width, perms, layout, theta)


def _coupling_terms(theta, layout: ParamLayout, b: int, cond):
    """Centered log-scales and translations from the conditioning half."""
    h = ad.tanh(ad.matmul(cond, layout.view(theta, f"b{b}.W1")) + layout.view(theta, f"b{b}.b1"))
    h = ad.tanh(ad.matmul(h, layout.view(theta, f"b{b}.W2")) + layout.view(theta, f"b{b}.b2"))
    out = ad.matmul(h, layout.view(theta, f"b{b}.W3")) + layout.view(theta, f"b{b}.b3")
    d2 = out.shape[1] // 2
    s = ad.mul(ad.tanh(out[:, :d2]), 2.0)
    s = ad.sub(s, ad.tmean(s, axis=1, keepdims=True))
    t = out[:, d2:]
    sv = s.value if isinstance(s, ad.Tensor) else s
    if sv.size and np.max(np.abs(sv)) > _SCALE_LIMIT:
        raise InstabilityError("coupling log-scale left the safe range")
    return s, t


def forward(flow: FlowParams, z_ext, theta=None):
    """Map extended latents (n, K) to observations (n, K)."""
    theta = flow.theta if theta is None else theta
    d1, d2 = _split_dims(flow.K)
    y = z_ext
    for b in range(flow.n_blocks):
        y = y[:, flow.permutations[b]]
        if d2 == 0:
            continue
        x1 = y[:, :d1]
        s, t = _coupling_terms(theta, flow.layout, b, x1)
        y2 = ad.add(ad.mul(y[:, d1:], ad.exp(s)), t)
        y = ad.concat([x1, y2], axis=1)
    return y


def inverse(flow: FlowParams, x, theta=None):
    """Exact algebraic inverse of :func:`forward`, blocks applied in reverse."""
    theta = flow.theta if theta is None else theta
    d1, d2 = _split_dims(flow.K)
    y = x
    for b in reversed(range(flow.n_blocks)):
        if d2 > 0:
            y1 = y[:, :d1]
            s, t = _coupling_terms(theta, flow.layout, b, y1)
            x2 = ad.mul(ad.sub(y[:, d1:], t), ad.exp(ad.mul(s, -1.0)))
            y = ad.concat([y1, x2], axis=1)
        y = y[:, np.argsort(flow.permutations[b])]
    return y


def posterior(flow: FlowParams, x, theta=None) -> GaussianPosterior:
    """mu = designated-latent coordinates of the inverse; sigma = exp(log_sigma)."""
    theta = flow.theta if theta is None else theta
    z_ext = inverse(flow, x, theta)
    mu = z_ext[:, :flow.N]
    sigma = ad.exp(flow.layout.view(theta, "log_sigma"))
    return GaussianPosterior(mu=mu, sigma=sigma)


def log_likelihood(flow: FlowParams, x, theta=None):
    """Per-sample log p(x) under a standard-normal prior on all K inverse coordinates.

    The Jacobian log-determinant is identically zero by the zero-sum-scale
    construction, so no change-of-variables term appears.
    """
    z = inverse(flow, x, theta)
    quad = ad.mul(ad.tsum(ad.mul(z, z), axis=1), -0.5)
    return ad.add(quad, -0.5 * flow.K * math.log(2.0 * math.pi))


def sum_log_scales(flow: FlowParams, z_ext: np.ndarray) -> np.ndarray:
    """Per-sample sum of applied log-scales across all blocks (0 by construction)."""
    d1, d2 = _split_dims(flow.K)
    y = np.asarray(z_ext, dtype=np.float64)
    total = np.zeros(y.shape[0])
    for b in range(flow.n_blocks):
        y = y[:, flow.permutations[b]]
        if d2 == 0:
            continue
        x1 = y[:, :d1]
        s, t = _coupling_terms(flow.theta, flow.layout, b, x1)
        total += s.sum(axis=1)
        y = np.concatenate([x1, y[:, d1:] * np.exp(s) + t], axis=1)
    return total
