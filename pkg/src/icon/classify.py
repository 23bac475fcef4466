"""Continual classification over pre-extracted embeddings.

Feature extraction is out of scope: the artifact ingests embedding files in
the shared dataset format plus a manifest that assigns classes to tasks.
A synthetic stand-in generator produces class clusters on the sphere with a
controllable separation, so the continual protocol can run at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from . import flow as fl
from . import trainer
from .errors import ContractError, IngestionError
from .numerics import as_generator, named_stream
from .objectives import TaskDataset, head_layout, project_head

EMBED_DIM = 512


@dataclass
class ClassEmbeddings:
    """Unit-normalized class (text) embeddings, one row per class."""

    e: np.ndarray

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64)
        norms = np.linalg.norm(self.e, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError("class embeddings must have unit rows")

    @property
    def n_classes(self) -> int:
        return self.e.shape[0]


@dataclass
class EmbeddingDataset:
    """Feature rows with labels and a class-to-task partition."""

    X: np.ndarray
    labels: np.ndarray
    task_of_class: np.ndarray  # (C,) 1-based task id per class
    split: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.task_of_class = np.asarray(self.task_of_class, dtype=np.int64)
        if self.labels.shape != (self.X.shape[0],):
            raise ContractError("one label per row required")
        if np.any(self.labels < 0) or np.any(self.labels >= self.task_of_class.size):
            bad = int(self.labels[(self.labels < 0) |
                                  (self.labels >= self.task_of_class.size)][0])
            raise IngestionError(f"label {bad} outside the {self.task_of_class.size}-class manifest")

    @property
    def n_tasks(self) -> int:
        return int(self.task_of_class.max())

    def task_datasets(self) -> list:
        """One TaskDataset per task, rows grouped by their label's task."""
        out = []
        for t in range(1, self.n_tasks + 1):
            mask = self.task_of_class[self.labels] == t
            if not np.any(mask):
                raise ContractError(f"task {t} has no rows")
            out.append(TaskDataset(task_id=t, X=self.X[mask], labels=self.labels[mask],
                                   split=self.split))
        return out


def load_embeddings(path) -> EmbeddingDataset:
    """Read an embedding file plus its sibling .json manifest and validate."""
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not manifest_path.exists():
        raise IngestionError(f"{path.name}: missing manifest {manifest_path.name}")
    manifest = dataio.read_json(manifest_path)
    for key in ("n_classes", "classes_per_task"):
        if key not in manifest:
            raise IngestionError(f"{manifest_path.name}: missing field {key!r}")
    n_classes = int(manifest["n_classes"])
    per_task = int(manifest["classes_per_task"])
    if "task_of_class" in manifest:
        task_of_class = np.asarray(manifest["task_of_class"], dtype=np.int64)
        if task_of_class.size != n_classes:
            raise IngestionError(f"{manifest_path.name}: task_of_class length != n_classes")
        for c in range(n_classes):
            if task_of_class[c] < 1:
                raise IngestionError(f"{manifest_path.name}: class {c} has invalid task")
        counts = np.bincount(task_of_class)[1:]
        if np.any(counts != per_task):
            bad = int(np.flatnonzero(counts != per_task)[0]) + 1
            raise IngestionError(
                f"{manifest_path.name}: task {bad} does not hold exactly {per_task} classes")
    else:
        if n_classes % per_task:
            raise IngestionError(f"{manifest_path.name}: n_classes not divisible by classes_per_task")
        task_of_class = np.arange(n_classes) // per_task + 1
    ds = dataio.read_dataset(path, task_id=1, split=manifest.get("split", ""))
    if ds.labels is None:
        raise IngestionError(f"{path.name}: embedding files require labels")
    if np.any(ds.labels >= n_classes):
        bad = int(ds.labels[ds.labels >= n_classes][0])
        raise IngestionError(f"{path.name}: label {bad} out of range for {n_classes} classes")
    return EmbeddingDataset(X=ds.X, labels=ds.labels, task_of_class=task_of_class,
                            split=manifest.get("split", ""))


def save_embeddings(path, ds: EmbeddingDataset, classes_per_task: int,
                    embedding_source: str = "synthetic") -> None:
    path = Path(path)
    dataio.write_dataset(path, TaskDataset(task_id=1, X=ds.X, labels=ds.labels,
                                           split=ds.split))
    dataio.write_json(path.with_suffix(".json"), {
        "n_classes": int(ds.task_of_class.size),
        "classes_per_task": int(classes_per_task),
        "task_of_class": ds.task_of_class.tolist(),
        "embedding_source": embedding_source,
        "split": ds.split,
    })


def synth_embeddings(n_classes: int, per_class: int, dim: int = EMBED_DIM,
                     sep: float = 2.0, noise: float = 0.3, rng=None,
                     n_tasks: int = 1) -> tuple[EmbeddingDataset, ClassEmbeddings]:
    """Class clusters on the sphere; ``sep`` widens pairwise angles, ``noise`` blurs features."""
    if sep <= 0:
        raise ContractError("sep must be positive")
    gen = as_generator(rng if rng is not None else 0)
    shared = gen.standard_normal(dim)
    shared /= np.linalg.norm(shared)
    means = np.empty((n_classes, dim))
    for c in range(n_classes):
        u = gen.standard_normal(dim)
        u /= np.linalg.norm(u)
        v = shared + sep * u
        means[c] = v / np.linalg.norm(v)
    labels = np.repeat(np.arange(n_classes), per_class)
    x = means[labels] + noise * gen.standard_normal((labels.size, dim))
    if n_classes % n_tasks:
        raise ContractError("n_classes must divide evenly into tasks")
    task_of_class = np.arange(n_classes) // (n_classes // n_tasks) + 1
    ds = EmbeddingDataset(X=x, labels=labels, task_of_class=task_of_class)
    return ds, ClassEmbeddings(e=means)


def predict(bank, head: np.ndarray, x: np.ndarray, class_emb: ClassEmbeddings) -> np.ndarray:
    """Argmax cosine score over all classes; temperature does not change the argmax."""
    mu = np.asarray(fl.posterior(bank.ata, x).mu)
    proj = np.asarray(project_head(mu, head, head_layout(bank.ata.N)))
    norms = np.linalg.norm(proj, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ContractError("projected vector with zero norm")
    scores = (proj / norms) @ class_emb.e.T
    return np.argmax(scores, axis=1)


@dataclass
class ClassifyResult:
    per_task: list
    average: float
    state: trainer.RunState


def continual_classify(train: EmbeddingDataset, test: EmbeddingDataset,
                       class_emb: ClassEmbeddings, cfg: trainer.TrainConfig,
                       flow_cfg: trainer.FlowConfig | None = None,
                       use_kl: bool = True) -> ClassifyResult:
    """Sequential training with the contrastive head, then test accuracy per task.

    Inference uses only the all-task flow and the head: no task identity is
    consumed when predicting.
    """
    if cfg.nce_weight <= 0:
        raise ContractError("classification training needs nce_weight > 0")
    state = trainer.run_sequence(train.task_datasets(), cfg, flow_cfg,
                                 use_kl=use_kl, class_emb=class_emb.e, with_head=True)
    per_task = []
    for ds in test.task_datasets():
        pred = predict(state.bank, state.head, ds.X, class_emb)
        per_task.append(float(np.mean(pred == ds.labels)))
    return ClassifyResult(per_task=per_task, average=float(np.mean(per_task)), state=state)


def make_benchmark(n_classes: int = 20, n_tasks: int = 4, per_class_train: int = 40,
                   per_class_test: int = 20, dim: int = EMBED_DIM, sep: float = 2.0,
                   noise: float = 0.3, seed: int = 0
                   ) -> tuple[EmbeddingDataset, EmbeddingDataset, ClassEmbeddings]:
    """Train/test embedding datasets with a shared class-embedding table."""
    full, emb = synth_embeddings(n_classes, per_class_train + per_class_test, dim=dim,
                                 sep=sep, noise=noise,
                                 rng=named_stream(seed, "classify.embeddings"),
                                 n_tasks=n_tasks)
    train_rows, test_rows = [], []
    for c in range(n_classes):
        rows = np.flatnonzero(full.labels == c)
        train_rows.append(rows[:per_class_train])
        test_rows.append(rows[per_class_train:])
    train_rows = np.concatenate(train_rows)
    test_rows = np.concatenate(test_rows)
    train = EmbeddingDataset(X=full.X[train_rows], labels=full.labels[train_rows],
                             task_of_class=full.task_of_class, split="train")
    test = EmbeddingDataset(X=full.X[test_rows], labels=full.labels[test_rows],
                            task_of_class=full.task_of_class, split="test")
    return train, test, emb
