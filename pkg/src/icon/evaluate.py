"""Experiment metrics and figure exports.

The reconstruction protocol encodes observations, resamples the designated
latents from the Gaussian posterior, and decodes; with the posterior mean
instead of a sample the round trip is exact for K = N, so the comparison
table always reports the sampled variant (the posterior scale is what makes
reconstruction sensitive to how well a flow fits a region).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import flow as fl
from .errors import ContractError
from .numerics import as_generator, named_stream, pca_axes, rmse
from .objectives import ModelBank, TaskDataset, forgetting  # noqa: F401  (re-export)

PALETTE = {"pta": "#1f77b4", "ata": "#d62728"}


@dataclass
class Metrics:
    rmse: dict = field(default_factory=dict)
    forgetting: float | None = None
    kl_trace: list = field(default_factory=list)
    alignment: dict = field(default_factory=dict)
    recovery_r2: float | None = None
    accuracy: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "forgetting": self.forgetting,
            "kl_trace": self.kl_trace,
            "alignment": self.alignment,
            "recovery_r2": self.recovery_r2,
            "accuracy": self.accuracy,
        }


def reconstruct(flow: fl.FlowParams, x: np.ndarray,
                latents: np.ndarray | None = None,
                sample: bool = False, rng=None) -> np.ndarray:
    """Decode from the encoded inverse with designated latents swapped in.

    ``latents`` overrides the posterior mean; ``sample=True`` draws from the
    posterior instead. Noise coordinates (when N < K) pass through unchanged.
    """
    z_ext = np.asarray(fl.inverse(flow, x))
    post = fl.posterior(flow, x)
    lat = np.asarray(post.mu) if latents is None else np.asarray(latents)
    if sample:
        gen = as_generator(rng if rng is not None else 0)
        lat = lat + np.asarray(post.sigma)[None, :] * gen.standard_normal(lat.shape)
    z_ext = np.concatenate([lat, z_ext[:, flow.N:]], axis=1)
    return np.asarray(fl.forward(flow, z_ext))


def reconstruction_rmse(flow: fl.FlowParams, dataset: TaskDataset,
                        sample: bool = False, rng=None) -> float:
    """RMSE between observations and their posterior-mean round trip."""
    if dataset.X.shape[1] != flow.K:
        raise ContractError("dataset dimensionality does not match the flow")
    return rmse(dataset.X, reconstruct(flow, dataset.X, sample=sample, rng=rng))


def bank_rmse(bank: ModelBank, datasets: list, tag: str) -> tuple[float, float]:
    """(pta, ata) average sampled-reconstruction RMSE over tasks."""
    pta_vals, ata_vals = [], []
    for ds in datasets:
        t = ds.task_id
        if t not in bank.pta:
            raise ContractError(f"bank lacks pta[{t}]")
        pta_vals.append(reconstruction_rmse(
            bank.pta[t], ds, sample=True, rng=named_stream(0, f"table1.{tag}.pta.{t}")))
        ata_vals.append(reconstruction_rmse(
            bank.ata, ds, sample=True, rng=named_stream(0, f"table1.{tag}.ata.{t}")))
    return float(np.mean(pta_vals)), float(np.mean(ata_vals))


def table1(bank_with_kl: ModelBank, bank_without_kl: ModelBank,
           datasets: list) -> Metrics:
    """Four averaged reconstruction RMSE entries: PTA/ATA with and without KL."""
    if (bank_with_kl.ata.K, bank_with_kl.ata.N) != (bank_without_kl.ata.K, bank_without_kl.ata.N):
        raise ContractError("the two runs use different model dimensions")
    if sorted(bank_with_kl.pta) != sorted(bank_without_kl.pta):
        raise ContractError("the two runs cover different tasks")
    missing = [ds.task_id for ds in datasets if ds.task_id not in bank_with_kl.pta]
    if missing:
        raise ContractError(f"datasets include tasks without models: {missing}")
    m = Metrics()
    pta_kl, ata_kl = bank_rmse(bank_with_kl, datasets, "with_kl")
    pta_no, ata_no = bank_rmse(bank_without_kl, datasets, "without_kl")
    m.rmse = {"pta_with_kl": pta_kl, "ata_with_kl": ata_kl,
              "pta_without_kl": pta_no, "ata_without_kl": ata_no}
    return m


def alignment_report(z_pta: np.ndarray, z_ata: np.ndarray) -> tuple[np.ndarray, float]:
    """Optimally matched per-dimension |Pearson| between two latent sets.

    The assignment is the exact Hungarian solution on the absolute
    correlation matrix; the mean of the matched diagonal is an MCC-style
    score in [0, 1].
    """
    a = np.asarray(z_pta, dtype=np.float64)
    b = np.asarray(z_ata, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("latent matrices must have equal shapes")
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    sa = da.std(axis=0)
    sb = db.std(axis=0)
    if np.any(sa == 0) or np.any(sb == 0):
        warnings.warn("constant latent dimension scored as 0 correlation")
    sa[sa == 0] = np.inf
    sb[sb == 0] = np.inf
    corr = (da / sa).T @ (db / sb) / a.shape[0]
    rows, cols = linear_sum_assignment(-np.abs(corr))
    matched = np.abs(corr)[rows, cols]
    return matched, float(matched.mean())


def recovery_r2(z_hat: np.ndarray, z_true: np.ndarray) -> float:
    """Average R^2 of the best affine map from recovered to true latents."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_true = np.asarray(z_true, dtype=np.float64)
    if z_hat.shape[0] != z_true.shape[0]:
        raise ContractError("sample counts differ")
    design = np.concatenate([z_hat, np.ones((z_hat.shape[0], 1))], axis=1)
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        warnings.warn("rank-deficient design; using ridge 1e-8")
        gram = design.T @ design + 1e-8 * np.eye(design.shape[1])
        coef = np.linalg.solve(gram, design.T @ z_true)
    else:
        coef, *_ = np.linalg.lstsq(design, z_true, rcond=None)
    resid = z_true - design @ coef
    ss_res = (resid ** 2).sum(axis=0)
    ss_tot = ((z_true - z_true.mean(axis=0)) ** 2).sum(axis=0)
    ss_tot[ss_tot == 0] = np.inf
    return float(np.mean(1.0 - ss_res / ss_tot))


@dataclass
class ScatterExport:
    points: np.ndarray    # (rows, 2) projected coordinates
    setups: list          # "pta" / "ata" per row
    tasks: np.ndarray     # task id per row
    csv_path: Path | None = None
    svg_path: Path | None = None
    meta_path: Path | None = None


def export_scatter(bank: ModelBank, datasets: list, out_dir, n: int = 1000,
                   rng=None) -> ScatterExport:
    """Sample latent clouds per task/setup, project with pooled PCA, write CSV + SVG."""
    gen = as_generator(rng if rng is not None else 0)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blocks, setups, tasks = [], [], []
    for ds in sorted(datasets, key=lambda d: d.task_id):
        t = ds.task_id
        if n > ds.n:
            warnings.warn(f"task {t} has fewer than {n} rows; sampling with replacement")
            rows = gen.choice(ds.n, size=n, replace=True)
        else:
            rows = gen.choice(ds.n, size=n, replace=False)
        x = ds.X[rows]
        for setup, flow_obj in (("pta", bank.pta[t]), ("ata", bank.ata)):
            blocks.append(np.asarray(fl.posterior(flow_obj, x).mu))
            setups.extend([setup] * n)
            tasks.extend([t] * n)
    pooled = np.concatenate(blocks, axis=0)
    axes, _ = pca_axes(pooled, k=2)
    proj = (pooled - pooled.mean(axis=0)) @ axes

    csv_path = out_dir / "scatter.csv"
    lines = ["x,y,setup,task"]
    for (px, py), setup, t in zip(proj, setups, tasks):
        lines.append(f"{px:.10g},{py:.10g},{setup},{t}")
    csv_path.write_text("\n".join(lines) + "\n")

    svg_path = out_dir / "scatter.svg"
    svg_path.write_text(_scatter_svg(proj, setups))

    meta_path = out_dir / "scatter_meta.json"
    meta_path.write_text(json.dumps({
        "projection": "pca on the pooled latent cloud",
        "n_per_setup_per_task": n,
        "tasks": sorted({int(t) for t in tasks}),
        "palette": PALETTE,
    }, indent=2, sort_keys=True) + "\n")

    return ScatterExport(points=proj, setups=setups, tasks=np.asarray(tasks),
                         csv_path=csv_path, svg_path=svg_path, meta_path=meta_path)


def _scatter_svg(proj: np.ndarray, setups: list, size: int = 600, margin: int = 30) -> str:
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def to_px(p):
        u = (p - lo) / span
        return (margin + u[0] * (size - 2 * margin),
                size - margin - u[1] * (size - 2 * margin))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {size} {size}">']
    for p, setup in zip(proj, setups):
        x, y = to_px(p)
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="{PALETTE[setup]}" '
                     f'fill-opacity="0.5"/>')
    parts.append("</svg>")
    return "\n".join(parts)
