"""Training losses and the forgetting metric.

Losses evaluate on plain arrays for reporting and on taped Tensors for
training; the flow evaluation functions make that transparent. Sign
convention: all ``loss_*`` functions return quantities to minimize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as fl
from .autodiff import ParamLayout
from .errors import ContractError

NCE_HIDDEN = 256
NCE_OUT = 512


@dataclass
class TaskDataset:
    """Observations of one task, optionally with ground-truth latents and labels."""

    task_id: int
    X: np.ndarray
    Z_true: np.ndarray | None = None
    labels: np.ndarray | None = None
    split: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.task_id < 1:
            raise ContractError("task_id starts at 1")
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ContractError("X must be a non-empty (n, K) matrix")
        if not np.all(np.isfinite(self.X)):
            raise ContractError("X has non-finite entries")
        if self.Z_true is not None:
            self.Z_true = np.asarray(self.Z_true, dtype=np.float64)
            if self.Z_true.shape[0] != self.X.shape[0] or not np.all(np.isfinite(self.Z_true)):
                raise ContractError("Z_true must be finite with one row per sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.X.shape[0],) or np.any(self.labels < 0):
                raise ContractError("labels must be one non-negative id per sample")

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class ModelBank:
    """The single ATA flow plus the per-task PTA flows of a run."""

    ata: fl.FlowParams
    pta: dict = field(default_factory=dict)

    def __post_init__(self):
        for t, f in self.pta.items():
            if (f.K, f.N) != (self.ata.K, self.ata.N):
                raise ContractError(f"pta[{t}] dims disagree with ata")
        keys = sorted(self.pta)
        if keys and keys != list(range(1, len(keys) + 1)):
            raise ContractError("pta task ids must be contiguous from 1")


def _by_task(datasets) -> dict:
    table = {}
    for ds in datasets:
        table[ds.task_id] = ds
    return table


def mle_nll(flow: fl.FlowParams, batches, theta=None):
    """Average over batches of the per-batch mean negative log-likelihood.

    Batches go through the flow as one concatenated matrix (one tape pass),
    then per-batch means come from slices of the per-sample vector.
    """
    if len(batches) == 1:
        return ad.mul(ad.tmean(fl.log_likelihood(flow, batches[0], theta)), -1.0)
    sizes = [np.shape(b)[0] for b in batches]
    xcat = np.concatenate([np.asarray(b) for b in batches], axis=0)
    ll = fl.log_likelihood(flow, xcat, theta)
    total = None
    lo = 0
    for size in sizes:
        term = ad.tmean(ll[lo:lo + size])
        lo += size
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, -1.0 / len(batches))


def kl_mean_over_sets(ata: fl.FlowParams, pta: fl.FlowParams, xs,
                      theta_ata=None, theta_pta=None):
    """Mean per-sample KL(ATA || PTA) per batch, averaged over the batches."""
    sizes = [np.shape(x)[0] for x in xs]
    xcat = xs[0] if len(xs) == 1 else np.concatenate([np.asarray(x) for x in xs], axis=0)
    p = fl.posterior(ata, xcat, theta_ata)
    q = fl.posterior(pta, xcat, theta_pta)
    kl = kl_gauss(p, q)
    total = None
    lo = 0
    for size in sizes:
        term = ad.tmean(kl[lo:lo + size])
        lo += size
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(xs))


def loss_pta(bank: ModelBank, t: int, datasets, theta=None):
    """Stage-1 objective of the task-t partial model over tasks 1..t."""
    table = _by_task(datasets)
    missing = [i for i in range(1, t + 1) if i not in table]
    if missing:
        raise ContractError(f"datasets missing tasks {missing}")
    return mle_nll(bank.pta[t], [table[i].X for i in range(1, t + 1)], theta)


def loss_ata(ata: fl.FlowParams, datasets, theta=None):
    """MLE objective of the all-task model averaged over every provided task."""
    if not datasets:
        raise ContractError("no datasets given")
    return mle_nll(ata, [ds.X for ds in datasets], theta)


def kl_gauss(p: fl.GaussianPosterior, q: fl.GaussianPosterior):
    """Closed-form KL(p || q) for diagonal Gaussians, per sample row.

    Returns a scalar for single rows, a length-n vector for (n, N) means.
    """
    for g in (p, q):
        if isinstance(g.sigma, np.ndarray) and np.any(g.sigma <= 0):
            raise ContractError("sigma must be strictly positive")
    var_ratio = ad.div(ad.mul(p.sigma, p.sigma), ad.mul(q.sigma, q.sigma))
    log_ratio = ad.sub(ad.log(q.sigma), ad.log(p.sigma))
    dmu = ad.sub(p.mu, q.mu)
    quad = ad.div(ad.mul(dmu, dmu), ad.mul(ad.mul(q.sigma, q.sigma), 2.0))
    terms = ad.add(ad.add(log_ratio, ad.mul(var_ratio, 0.5)), ad.add(quad, -0.5))
    axis = 1 if len(terms.shape) == 2 else 0
    return ad.tsum(terms, axis=axis)


def kl_align(bank: ModelBank, t: int, datasets,
             theta_ata=None, theta_pta=None):
    """Stage-2 objective: mean KL(ATA posterior || task-t PTA posterior) over tasks 1..t."""
    if t not in bank.pta:
        raise ContractError(f"bank has no pta[{t}]")
    table = _by_task(datasets)
    missing = [i for i in range(1, t + 1) if i not in table]
    if missing:
        raise ContractError(f"datasets missing tasks {missing}")
    return kl_mean_over_sets(bank.ata, bank.pta[t],
                             [table[i].X for i in range(1, t + 1)],
                             theta_ata, theta_pta)


def forgetting(bank: ModelBank, datasets, ata: fl.FlowParams | None = None) -> float:
    """Mean per-task log-likelihood gap between the matching PTA model and ATA.

    Positive values mean the all-task model underfits old tasks.
    """
    ata = bank.ata if ata is None else ata
    gaps = []
    for ds in datasets:
        if ds.task_id not in bank.pta:
            raise ContractError(f"no pta model for task {ds.task_id}")
        ll_pta = fl.log_likelihood(bank.pta[ds.task_id], ds.X)
        ll_ata = fl.log_likelihood(ata, ds.X)
        gaps.append(float(np.mean(ll_pta - ll_ata)))
    return float(np.mean(gaps))


def head_layout(n_latent: int, hidden: int = NCE_HIDDEN, out: int = NCE_OUT) -> ParamLayout:
    return ParamLayout.build([
        ("Wh", (n_latent, hidden)),
        ("bh", (hidden,)),
        ("Wo", (hidden, out)),
        ("bo", (out,)),
    ])


def init_head(n_latent: int, rng, hidden: int = NCE_HIDDEN, out: int = NCE_OUT) -> np.ndarray:
    from .numerics import as_generator
    gen = as_generator(rng)
    layout = head_layout(n_latent, hidden, out)
    theta = np.zeros(layout.size)
    for name, fan_in in (("Wh", n_latent), ("Wo", hidden)):
        off, shape = layout.segments[name]
        n = int(np.prod(shape))
        scale = 1.0 / math.sqrt(fan_in)
        theta[off:off + n] = gen.uniform(-scale, scale, size=n)
    return theta


def project_head(z_hat, head, layout: ParamLayout):
    """One-hidden-layer tanh projection of latents into the class-embedding space."""
    h = ad.tanh(ad.add(ad.matmul(z_hat, layout.view(head, "Wh")), layout.view(head, "bh")))
    return ad.add(ad.matmul(h, layout.view(head, "Wo")), layout.view(head, "bo"))


def cosine_scores(z_hat, head, layout: ParamLayout, text_emb):
    """Cosine similarity of projected latents against every class embedding."""
    emb_norms = np.linalg.norm(np.asarray(text_emb, dtype=np.float64), axis=1)
    if np.any(emb_norms == 0):
        raise ContractError("class embedding with zero norm")
    e_hat = np.asarray(text_emb, dtype=np.float64) / emb_norms[:, None]
    proj = project_head(z_hat, head, layout)
    sq = ad.tsum(ad.mul(proj, proj), axis=1, keepdims=True)
    sqv = sq.value if isinstance(sq, ad.Tensor) else sq
    if np.any(sqv == 0):
        raise ContractError("projected vector with zero norm")
    unit = ad.div(proj, ad.sqrt(sq))
    return ad.matmul(unit, e_hat.T)


def nce_loss(z_hat, head, labels, text_emb, tau: float):
    """Temperature-scaled softmax cross-entropy over cosine scores, summed over the batch."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels >= np.asarray(text_emb).shape[0]):
        raise ContractError("label outside the class-embedding table")
    n_latent = z_hat.shape[1]
    layout = head_layout(n_latent)
    sim = cosine_scores(z_hat, head, layout, text_emb)
    log_probs = ad.log_softmax(ad.mul(sim, 1.0 / tau), axis=1)
    picked = log_probs[(np.arange(labels.size), labels)]
    return ad.mul(ad.tsum(picked), -1.0)
