"""Numeric checks for the identifiability assumptions on sampled latent clouds.

Manifolds are only ever accessed through finite samples here, so every
geometric quantity is a cloud statistic: manifold distance is an exact
pairwise min-scan, path-connectedness becomes eps-graph connectivity, and
compactness becomes a finite bounding box. The Jacobian-based bound uses
finite differences plus power-iteration spectral norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError
from .numerics import finite_diff_jacobian, spectral_norm


@dataclass
class LatentCloud:
    """Finite sample of one latent manifold with provenance."""

    points: np.ndarray
    tag: str = ""
    task_id: int = 0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.shape[0] < 1 or not np.all(np.isfinite(self.points)):
            raise ContractError("cloud must be non-empty and finite")

    @property
    def n(self) -> int:
        return self.points.shape[0]


def manifold_distance(a: LatentCloud, b: LatentCloud) -> float:
    """Minimum Euclidean distance over all cross-cloud pairs (exact scan)."""
    return kernels.min_pair_distance(a.points, b.points)


def nearest_in_cloud(z: np.ndarray, c: LatentCloud) -> tuple[np.ndarray, float]:
    """Closest cloud point to z and its distance; ties break to the lowest index."""
    idx, dist = kernels.nearest_index(np.asarray(z, dtype=np.float64), c.points)
    return c.points[idx].copy(), dist


def intersection_estimate(a: LatentCloud, b: LatentCloud, eps: float) -> LatentCloud:
    """Midpoints of every cross-cloud pair within eps; empty means no overlap at this scale."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    ia, ib = kernels.pairs_within_eps(a.points, b.points, eps)
    if ia.size == 0:
        pts = np.empty((0, a.points.shape[1]))
    else:
        pts = 0.5 * (a.points[ia] + b.points[ib])
    cloud = LatentCloud.__new__(LatentCloud)
    cloud.points = pts
    cloud.tag = "intersection"
    cloud.task_id = a.task_id
    return cloud


def connectivity_check(c: LatentCloud, eps: float) -> bool:
    """True iff the eps-neighborhood graph over the cloud is one component."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    return kernels.eps_graph_connected(c.points, eps)


def median_nn_distance(c: LatentCloud) -> float:
    """Median distance from each point to its nearest other point."""
    pts = c.points
    if pts.shape[0] < 2:
        return 0.0
    dists = np.empty(pts.shape[0])
    for i in range(pts.shape[0]):
        others = np.delete(pts, i, axis=0)
        _, dists[i] = kernels.nearest_index(pts[i], others)
    return float(np.median(dists))


def line_integral_check(g, z: np.ndarray, z1: np.ndarray, n_steps: int = 1000) -> float:
    """Relative residual of the segment identity g(z1) - g(z) = (integral of J_g) h.

    The right side integrates the finite-difference Jacobian along the segment
    with the composite trapezoid rule and applies it to h = z1 - z.
    """
    if n_steps < 1:
        raise ContractError("n_steps must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    h = z1 - z
    lhs = np.asarray(g(z1), dtype=np.float64) - np.asarray(g(z), dtype=np.float64)
    lam = np.linspace(0.0, 1.0, n_steps + 1)
    weights = np.full(n_steps + 1, 1.0 / n_steps)
    weights[0] *= 0.5
    weights[-1] *= 0.5
    acc = np.zeros_like(lhs)
    for lam_k, w in zip(lam, weights):
        jac = finite_diff_jacobian(g, lam_k * z + (1.0 - lam_k) * z1)
        acc += w * (jac @ h)
    denom = max(float(np.linalg.norm(lhs)), 1e-12)
    return float(np.linalg.norm(lhs - acc) / denom)


@dataclass
class Assumption5Result:
    j_u: float
    cloud_distance: float
    bound: float
    max_out_of_intersection: float
    slack: float
    h1_norm: float
    h2_norm: float
    separation_inequality_holds: bool
    passes: bool


def _sample_rows(points: np.ndarray, k: int) -> np.ndarray:
    if points.shape[0] <= k:
        return points
    idx = np.linspace(0, points.shape[0] - 1, k).astype(np.int64)
    return points[idx]


def assumption5_check(g, cloud1: LatentCloud, cloud2: LatentCloud,
                      intersection: LatentCloud, samples: int = 50) -> Assumption5Result:
    """Distance bound of the out-of-intersection constraint, evaluated on samples.

    j_u is the largest finite-difference Jacobian spectral norm over sampled
    points of both clouds; the bound is D(cloud1, cloud2) / (2 j_u). Out-of-
    intersection distances are measured from sampled cloud points to their
    nearest intersection point.
    """
    if intersection.n == 0:
        raise ContractError("intersection cloud is empty; assumption 2 fails first")
    j_u = 0.0
    for pts in (_sample_rows(cloud1.points, samples), _sample_rows(cloud2.points, samples)):
        for row in pts:
            j_u = max(j_u, spectral_norm(finite_diff_jacobian(g, row)))
    dist = manifold_distance(cloud1, cloud2)
    bound = dist / (2.0 * j_u) if j_u > 0 else np.inf
    max_out = 0.0
    for pts in (_sample_rows(cloud1.points, samples), _sample_rows(cloud2.points, samples)):
        for row in pts:
            _, d = nearest_in_cloud(row, intersection)
            max_out = max(max_out, d)
    # separation inequality on a constructed pair: nearest cloud points to one
    # intersection point, h_i = z_i - z
    z = intersection.points[0]
    z1, _ = nearest_in_cloud(z, cloud1)
    z2, _ = nearest_in_cloud(z, cloud2)
    h1 = float(np.linalg.norm(z1 - z))
    h2 = float(np.linalg.norm(z2 - z))
    return Assumption5Result(
        j_u=j_u,
        cloud_distance=dist,
        bound=bound,
        max_out_of_intersection=max_out,
        slack=bound - max_out,
        h1_norm=h1,
        h2_norm=h2,
        separation_inequality_holds=bool(max(h1, h2) >= bound - 1e-12),
        passes=bool(bound - max_out >= -1e-12),
    )


@dataclass
class TheoremReport:
    """Measured quantities and pass flags for the five assumptions."""

    invertible: bool
    min_jacobian_singular_value: float
    max_roundtrip_error: float
    intersection_eps: float
    intersection_size: int
    connectivity_eps: float
    connected: dict
    bounding_box: dict
    j_u: float
    assumption5: Assumption5Result | None
    line_integral_residuals: list = field(default_factory=list)
    passes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "invertible": self.invertible,
            "min_jacobian_singular_value": self.min_jacobian_singular_value,
            "max_roundtrip_error": self.max_roundtrip_error,
            "intersection_eps": self.intersection_eps,
            "intersection_size": self.intersection_size,
            "connectivity_eps": self.connectivity_eps,
            "connected": self.connected,
            "bounding_box": self.bounding_box,
            "j_u": self.j_u,
            "line_integral_residuals": self.line_integral_residuals,
            "passes": self.passes,
        }
        if self.assumption5 is not None:
            d["assumption5"] = {
                "j_u": self.assumption5.j_u,
                "cloud_distance": self.assumption5.cloud_distance,
                "bound": self.assumption5.bound,
                "max_out_of_intersection": self.assumption5.max_out_of_intersection,
                "slack": self.assumption5.slack,
                "h1_norm": self.assumption5.h1_norm,
                "h2_norm": self.assumption5.h2_norm,
                "separation_inequality_holds": self.assumption5.separation_inequality_holds,
            }
        else:
            d["assumption5"] = None
        return d


def build_report(g, g_inverse, cloud1: LatentCloud, cloud2: LatentCloud, observations: np.ndarray,
                 intersection_eps: float = 0.1, connectivity_eps: float | None = None,
                 j_samples: int = 50, line_segments: int = 5, line_steps: int = 1000,
                 rng=None) -> TheoremReport:
    """Run every assumption check on a pair of latent clouds under the map g."""
    from .numerics import as_generator
    gen = as_generator(rng if rng is not None else 0)

    # assumption 1: invertibility at sampled points
    probe = _sample_rows(cloud1.points, j_samples)
    sigma_min = np.inf
    roundtrip = 0.0
    for row in probe:
        jac = finite_diff_jacobian(g, row)
        sigma_min = min(sigma_min, float(np.linalg.svd(jac, compute_uv=False)[-1]))
        if g_inverse is not None:
            roundtrip = max(roundtrip, float(np.max(np.abs(g_inverse(np.asarray(g(row))) - row))))
    invertible = sigma_min > 1e-3 and (g_inverse is None or roundtrip < 1e-6)

    # assumption 2: non-empty eps-intersection
    inter = intersection_estimate(cloud1, cloud2, intersection_eps)

    # assumption 3: eps-graph connectivity, scale-aware default eps
    if connectivity_eps is None:
        connectivity_eps = 5.0 * max(median_nn_distance(cloud1), median_nn_distance(cloud2))
        if connectivity_eps == 0.0:
            connectivity_eps = 1.0
    connected = {
        cloud1.tag or "cloud1": connectivity_check(cloud1, connectivity_eps),
        cloud2.tag or "cloud2": connectivity_check(cloud2, connectivity_eps),
    }

    # assumption 4: compactness proxy, a finite bounding box over observations
    obs = np.asarray(observations, dtype=np.float64)
    box = {"low": obs.min(axis=0).tolist(), "high": obs.max(axis=0).tolist()}
    bounded = bool(np.all(np.isfinite(obs)))

    a5 = None
    if inter.n > 0:
        a5 = assumption5_check(g, cloud1, cloud2, inter, samples=j_samples)

    residuals = []
    for _ in range(line_segments):
        za = cloud1.points[gen.integers(cloud1.n)]
        zb = cloud2.points[gen.integers(cloud2.n)]
        if np.allclose(za, zb):
            continue
        # cap segment length at 0.5: short segments keep the trapezoid error
        # small when the map has leaky-ReLU kinks
        direction = zb - za
        length = float(np.linalg.norm(direction))
        if length > 0.5:
            zb = za + 0.5 * direction / length
        residuals.append(line_integral_check(g, za, zb, n_steps=line_steps))

    passes = {
        "assumption1_smooth_invertible": bool(invertible),
        "assumption2_intersection": bool(inter.n > 0),
        "assumption3_connected": bool(all(connected.values())),
        "assumption4_compact": bounded,
        "assumption5_distance_bound": bool(a5.passes) if a5 is not None else False,
    }
    return TheoremReport(
        invertible=bool(invertible),
        min_jacobian_singular_value=float(sigma_min),
        max_roundtrip_error=float(roundtrip),
        intersection_eps=float(intersection_eps),
        intersection_size=int(inter.n),
        connectivity_eps=float(connectivity_eps),
        connected=connected,
        bounding_box=box,
        j_u=float(a5.j_u) if a5 is not None else 0.0,
        assumption5=a5,
        line_integral_residuals=[float(r) for r in residuals],
        passes=passes,
    )
