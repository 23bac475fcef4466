"""Sequential-task orchestration of the two-stage training procedure.

Stage 1 fits the task-t partial model by MLE on tasks 1..t (full access)
and the all-task model on current-task batches mixed 1:1 with replay
exemplars. Stage 2 jointly tunes both flows to shrink the KL divergence
between their posteriors on tasks 1..t. The optional contrastive term
rides on the all-task branch in both stages (classification runs).

Determinism: every random choice draws from a stream named by (seed, task,
stage), so a fixed config reproduces parameters bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as fl
from . import objectives as obj
from .errors import ContractError, DivergenceError
from .numerics import named_stream


@dataclass
class TrainConfig:
    lr0: float = 0.002
    lr_min: float = 0.0
    weight_decay: float = 1e-2
    epochs_stage1: int = 60
    epochs_stage2: int = 20
    batch_size: int = 256
    tau: float = 0.07
    replay_size: int = 2000
    nce_weight: float = 0.0
    warm_start_pta: bool = True
    stage2_per_task: bool = True
    train_sigma: bool = False
    pta_lr_scale: float = 0.1  # stage 2 moves the reference model gently
    seed: int = 0

    def __post_init__(self):
        if min(self.lr0, self.batch_size, self.tau) <= 0 or self.replay_size < 0:
            raise ContractError("rates and sizes must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0 or self.weight_decay < 0:
            raise ContractError("epochs and weight decay must be non-negative")


@dataclass
class FlowConfig:
    n_latent: int | None = None  # None: all K coordinates are designated latents
    n_blocks: int = 8
    width: int = 64


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adamw_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState,
               lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, wd_mask: np.ndarray | None = None
               ) -> tuple[np.ndarray, OptimizerState]:
    """Adaptive-moment update with decoupled weight decay."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ContractError("parameter, gradient, and state shapes disagree")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite gradient at optimizer step {state.step + 1}")
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    decay = params if wd_mask is None else wd_mask * params
    new_params = params - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * decay)
    return new_params, state


def cosine_lr(step: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr0 at step 0 to lr_min at step == total."""
    if not (0 <= step <= max(total, 0)):
        raise ContractError("step outside [0, total]")
    if total == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total))


def weight_decay_mask(layout: ad.ParamLayout) -> np.ndarray:
    """Decay weight matrices only; biases and log-scales stay undecayed."""
    mask = np.zeros(layout.size)
    for name, (off, shape) in layout.segments.items():
        leaf = name.split(".")[-1]
        if leaf.startswith("W"):
            n = int(np.prod(shape))
            mask[off:off + n] = 1.0
    return mask


def sigma_freeze_mask(layout: ad.ParamLayout) -> np.ndarray:
    """1 everywhere except the posterior log-scale segment.

    Left free, the alignment stage can shrink the KL by inflating the
    reference posterior scale instead of moving means together; freezing
    the scales closes that shortcut.
    """
    mask = np.ones(layout.size)
    if "log_sigma" in layout.segments:
        off, shape = layout.segments["log_sigma"]
        mask[off:off + int(np.prod(shape))] = 0.0
    return mask


@dataclass
class ReplayBuffer:
    """Per-task exemplar row indices into the stored train datasets."""

    capacity: int
    indices: dict = field(default_factory=dict)

    def update(self, task_id: int, n_rows: int, rng, labels: np.ndarray | None = None) -> None:
        """Admit a new task and rebalance so per-task counts differ by at most 1."""
        tasks = sorted(self.indices) + [task_id]
        base, extra = divmod(self.capacity, len(tasks))
        quotas = {t: base + (1 if i < extra else 0) for i, t in enumerate(tasks)}
        # shrinking a uniform sample by truncation keeps it uniform
        for t in list(self.indices):
            self.indices[t] = self.indices[t][:quotas[t]]
        take = min(quotas[task_id], n_rows)
        if labels is None:
            chosen = rng.choice(n_rows, size=take, replace=False)
        else:
            chosen = _class_balanced_choice(labels, take, rng)
        self.indices[task_id] = np.sort(chosen)

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.indices.values())


def _class_balanced_choice(labels: np.ndarray, take: int, rng) -> np.ndarray:
    classes = np.unique(labels)
    per, extra = divmod(take, classes.size)
    chosen = []
    for i, c in enumerate(classes):
        rows = np.flatnonzero(labels == c)
        want = min(per + (1 if i < extra else 0), rows.size)
        chosen.append(rng.choice(rows, size=want, replace=False))
    return np.concatenate(chosen)[:take]


class _BatchCycler:
    """Reshuffling cyclic minibatch source over one dataset (optionally a row subset)."""

    def __init__(self, X: np.ndarray, labels: np.ndarray | None,
                 batch_size: int, rng: np.random.Generator):
        self.X = X
        self.labels = labels
        self.batch = min(batch_size, X.shape[0])
        self.rng = rng
        self.order = rng.permutation(X.shape[0])
        self.cursor = 0

    def next(self) -> tuple[np.ndarray, np.ndarray | None]:
        if self.cursor + self.batch > self.order.size:
            self.order = self.rng.permutation(self.X.shape[0])
            self.cursor = 0
        rows = self.order[self.cursor:self.cursor + self.batch]
        self.cursor += self.batch
        y = None if self.labels is None else self.labels[rows]
        return self.X[rows], y


def _nce_term(flow_obj, theta, x, labels, head_theta, class_emb, tau):
    post = fl.posterior(flow_obj, x, theta)
    loss = obj.nce_loss(post.mu, head_theta, labels, class_emb, tau)
    return ad.mul(loss, 1.0 / x.shape[0])


@dataclass
class RunState:
    bank: obj.ModelBank
    head: np.ndarray | None
    buffer: ReplayBuffer
    traces: dict = field(default_factory=dict)
    stage2_metrics: list = field(default_factory=list)


def _loss_or_abort(loss_grad: ad.LossGrad, where: str) -> ad.LossGrad:
    if not np.isfinite(loss_grad.value) or not np.all(np.isfinite(loss_grad.grad)):
        raise DivergenceError(f"non-finite loss/gradient in {where}")
    return loss_grad


def train_stage1(state: RunState, datasets: list, t: int, cfg: TrainConfig,
                 class_emb: np.ndarray | None = None) -> None:
    """MLE epochs for pta[t] (tasks 1..t) and ata (task t + replay)."""
    bank = state.bank
    table = {ds.task_id: ds for ds in datasets}
    if any(i not in table for i in range(1, t + 1)):
        raise ContractError(f"stage 1 needs datasets for tasks 1..{t}")
    if t > 1 and cfg.warm_start_pta:
        bank.pta[t] = bank.pta[t - 1].copy()
    elif t not in bank.pta:
        bank.pta[t] = fl.init_flow(bank.ata.K, bank.ata.N, bank.ata.n_blocks,
                                   bank.ata.width, rng=named_stream(cfg.seed, f"init.pta.{t}"))
    pta = bank.pta[t]

    rng = named_stream(cfg.seed, f"stage1.batches.{t}").generator()
    pta_sources = [_BatchCycler(table[i].X, table[i].labels, cfg.batch_size, rng)
                   for i in range(1, t + 1)]
    # current task plus one pooled replay source, weighted 1:1
    ata_sources = [_BatchCycler(table[t].X, table[t].labels, cfg.batch_size, rng)]
    pool_x, pool_y = [], []
    for past in sorted(state.buffer.indices):
        rows = state.buffer.indices[past]
        if rows.size and past in table:
            pool_x.append(table[past].X[rows])
            if table[past].labels is not None:
                pool_y.append(table[past].labels[rows])
    if pool_x:
        labels = np.concatenate(pool_y) if len(pool_y) == len(pool_x) else None
        ata_sources.append(_BatchCycler(np.concatenate(pool_x, axis=0), labels,
                                        cfg.batch_size, rng))

    use_nce = cfg.nce_weight > 0 and class_emb is not None and state.head is not None
    pta_mask = weight_decay_mask(pta.layout)
    head_size = state.head.size if use_nce else 0
    ata_vec = np.concatenate([bank.ata.theta, state.head]) if use_nce else bank.ata.theta
    ata_mask = np.concatenate([weight_decay_mask(bank.ata.layout),
                               weight_decay_mask(obj.head_layout(bank.ata.N))]) \
        if use_nce else weight_decay_mask(bank.ata.layout)

    opt_pta = OptimizerState.zeros(pta.theta.size)
    opt_ata = OptimizerState.zeros(ata_vec.size)
    steps_per_epoch = max(math.ceil(table[t].n / cfg.batch_size), 1)
    total = cfg.epochs_stage1 * steps_per_epoch
    na = bank.ata.theta.size

    def pta_loss(theta, batches):
        return obj.mle_nll(pta, batches, theta)

    def ata_loss(vec, batches, labels):
        theta = vec[:na] if use_nce else vec
        loss = obj.mle_nll(bank.ata, batches, theta)
        if use_nce:
            head = vec[na:na + head_size]
            xcat = np.concatenate(batches, axis=0)
            ycat = np.concatenate(labels)
            loss = ad.add(loss, ad.mul(
                _nce_term(bank.ata, theta, xcat, ycat, head, class_emb, cfg.tau),
                cfg.nce_weight))
        return loss

    trace_pta, trace_ata = [], []
    step = 0
    for _ in range(cfg.epochs_stage1):
        ep_pta, ep_ata = 0.0, 0.0
        for _ in range(steps_per_epoch):
            lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min)
            batches = [src.next()[0] for src in pta_sources]
            res = _loss_or_abort(ad.value_and_grad(pta_loss, pta.theta, batches),
                                 f"stage1 pta task {t}")
            pta.theta, opt_pta = adamw_step(pta.theta, res.grad, opt_pta, lr,
                                            cfg.weight_decay, wd_mask=pta_mask)
            ep_pta += res.value

            drawn = [src.next() for src in ata_sources]
            xb = [d[0] for d in drawn]
            yb = [d[1] for d in drawn]
            res = _loss_or_abort(ad.value_and_grad(ata_loss, ata_vec, xb, yb),
                                 f"stage1 ata task {t}")
            ata_vec, opt_ata = adamw_step(ata_vec, res.grad, opt_ata, lr,
                                          cfg.weight_decay, wd_mask=ata_mask)
            ep_ata += res.value
            step += 1
        trace_pta.append(ep_pta / steps_per_epoch)
        trace_ata.append(ep_ata / steps_per_epoch)

    if use_nce:
        bank.ata.theta = ata_vec[:na]
        state.head = ata_vec[na:]
    else:
        bank.ata.theta = ata_vec
    state.traces[f"stage1.pta.{t}"] = trace_pta
    state.traces[f"stage1.ata.{t}"] = trace_ata


def _stage2_eval_sets(state: RunState, table: dict, t: int) -> list:
    """Current task in full plus replay exemplars of past tasks."""
    sets = []
    for i in range(1, t + 1):
        ds = table[i]
        if i == t:
            sets.append(ds)
        else:
            rows = state.buffer.indices.get(i, np.empty(0, dtype=np.int64))
            if rows.size:
                sets.append(obj.TaskDataset(task_id=i, X=ds.X[rows],
                                            labels=None if ds.labels is None else ds.labels[rows]))
    return sets


def train_stage2(state: RunState, datasets: list, t: int, cfg: TrainConfig,
                 class_emb: np.ndarray | None = None) -> dict:
    """Joint KL-alignment epochs over both flows; returns entry/exit metrics."""
    bank = state.bank
    if t not in bank.pta:
        raise ContractError(f"stage 1 has not produced pta[{t}]")
    table = {ds.task_id: ds for ds in datasets}
    eval_sets = _stage2_eval_sets(state, table, t)
    use_nce = cfg.nce_weight > 0 and class_emb is not None and state.head is not None

    na = bank.ata.theta.size
    npta = bank.pta[t].theta.size
    head_size = state.head.size if use_nce else 0
    vec = np.concatenate([bank.ata.theta, bank.pta[t].theta] +
                         ([state.head] if use_nce else []))
    mask = np.concatenate([weight_decay_mask(bank.ata.layout),
                           weight_decay_mask(bank.pta[t].layout)] +
                          ([weight_decay_mask(obj.head_layout(bank.ata.N))] if use_nce else []))

    def split(v):
        return v[:na], v[na:na + npta], (v[na + npta:] if use_nce else None)

    def kl_on(sets, v):
        # like kl_align but tolerant of past tasks absent from the replay buffer
        theta_a, theta_p, _ = split(v)
        return obj.kl_mean_over_sets(bank.ata, bank.pta[t], [ds.X for ds in sets],
                                     theta_a, theta_p)

    def stage2_loss(v, sets):
        loss = kl_on(sets, v)
        if use_nce:
            theta_a, _, head = split(v)
            xcat = np.concatenate([ds.X for ds in sets], axis=0)
            ycat = np.concatenate([ds.labels for ds in sets])
            loss = ad.add(loss, ad.mul(
                _nce_term(bank.ata, theta_a, xcat, ycat, head, class_emb, cfg.tau),
                cfg.nce_weight))
        return loss

    metrics = {"task": t, "kl_entry": float(np.asarray(kl_on(eval_sets, vec)))}
    metrics["align_entry"] = _alignment(bank, t, eval_sets)

    freeze = None
    if not cfg.train_sigma:
        freeze = np.concatenate([sigma_freeze_mask(bank.ata.layout),
                                 sigma_freeze_mask(bank.pta[t].layout)] +
                                ([np.ones(head_size)] if use_nce else []))

    rng = named_stream(cfg.seed, f"stage2.batches.{t}").generator()
    cyclers = [_BatchCycler(ds.X, ds.labels, cfg.batch_size, rng) for ds in eval_sets]
    steps_per_epoch = max(math.ceil(table[t].n / cfg.batch_size), 1)
    total = cfg.epochs_stage2 * steps_per_epoch
    # Adam normalizes away gradient scaling, so the gentler reference-model
    # steps need their own optimizer slice with a scaled learning rate.
    pta_slice = slice(na, na + npta)
    opt_main = OptimizerState.zeros(vec.size - npta)
    opt_pta = OptimizerState.zeros(npta)
    main_idx = np.concatenate([np.arange(na), np.arange(na + npta, vec.size)])
    step = 0
    trace = []
    for _ in range(cfg.epochs_stage2):
        ep = 0.0
        for _ in range(steps_per_epoch):
            lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min)
            drawn = [c.next() for c in cyclers]
            sets = [obj.TaskDataset(task_id=ds.task_id, X=xb, labels=yb)
                    for ds, (xb, yb) in zip(eval_sets, drawn)]
            res = _loss_or_abort(ad.value_and_grad(stage2_loss, vec, sets),
                                 f"stage2 task {t}")
            grad = res.grad if freeze is None else res.grad * freeze
            vec[main_idx], opt_main = adamw_step(
                vec[main_idx], grad[main_idx], opt_main, lr, cfg.weight_decay,
                wd_mask=mask[main_idx])
            vec[pta_slice], opt_pta = adamw_step(
                vec[pta_slice], grad[pta_slice], opt_pta, lr * cfg.pta_lr_scale,
                cfg.weight_decay, wd_mask=mask[pta_slice])
            ep += res.value
            step += 1
        trace.append(ep / steps_per_epoch)

    bank.ata.theta, bank.pta[t].theta, head = split(vec)
    if use_nce:
        state.head = head
    metrics["kl_exit"] = float(np.asarray(kl_on(eval_sets, vec)))
    metrics["align_exit"] = _alignment(bank, t, eval_sets)
    state.traces[f"stage2.{t}"] = trace
    state.stage2_metrics.append(metrics)
    return metrics


def _alignment(bank: obj.ModelBank, t: int, sets: list) -> float:
    from .evaluate import alignment_report
    x = np.concatenate([ds.X for ds in sets], axis=0)
    z_pta = np.asarray(fl.posterior(bank.pta[t], x).mu)
    z_ata = np.asarray(fl.posterior(bank.ata, x).mu)
    _, mean_r = alignment_report(z_pta, z_ata)
    return float(mean_r)


def run_sequence(datasets: list, cfg: TrainConfig, flow_cfg: FlowConfig | None = None,
                 use_kl: bool = True, class_emb: np.ndarray | None = None,
                 with_head: bool = False) -> RunState:
    """Sequential tasks: stage 1, optional stage 2, then replay-buffer update."""
    if not datasets:
        raise ContractError("no datasets")
    flow_cfg = flow_cfg or FlowConfig()
    table = {ds.task_id: ds for ds in datasets}
    T = max(table)
    K = table[1].X.shape[1]
    N = flow_cfg.n_latent or K
    ata = fl.init_flow(K, N, flow_cfg.n_blocks, flow_cfg.width,
                       rng=named_stream(cfg.seed, "init.ata"))
    bank = obj.ModelBank(ata=ata, pta={})
    head = obj.init_head(N, named_stream(cfg.seed, "init.head")) \
        if (with_head or cfg.nce_weight > 0) else None
    state = RunState(bank=bank, head=head, buffer=ReplayBuffer(capacity=cfg.replay_size))

    for t in range(1, T + 1):
        subset = [table[i] for i in range(1, t + 1)]
        train_stage1(state, subset, t, cfg, class_emb=class_emb)
        if use_kl and cfg.stage2_per_task:
            train_stage2(state, subset, t, cfg, class_emb=class_emb)
        rng = named_stream(cfg.seed, f"replay.{t}").generator()
        state.buffer.update(t, table[t].n, rng, labels=table[t].labels)
    if use_kl and not cfg.stage2_per_task:
        train_stage2(state, [table[i] for i in range(1, T + 1)], T, cfg, class_emb=class_emb)
    return state
