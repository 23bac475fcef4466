"""Binary file formats: task datasets, flow checkpoints, run manifests.

Dataset container: header {magic "ICON", version, n, K, N, flags} as
little-endian uint32 words after the 4-byte magic, then row-major
little-endian float32 payloads for X, the optional ground-truth latents,
and the optional labels. Bulk arrays are float32 on disk; everything is
float64 in memory.

Flow checkpoint: length-prefixed JSON header (dims, permutations, layout)
followed by the raw little-endian float64 parameter array, so a save/load
round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamLayout
from .errors import IngestionError
from .flow import FlowParams
from .objectives import TaskDataset

MAGIC = b"ICON"
VERSION = 1
_FLAG_Z = 1
_FLAG_LABELS = 2


def write_dataset(path, ds: TaskDataset) -> None:
    path = Path(path)
    flags = (_FLAG_Z if ds.Z_true is not None else 0) | \
            (_FLAG_LABELS if ds.labels is not None else 0)
    n, k = ds.X.shape
    z_dim = ds.Z_true.shape[1] if ds.Z_true is not None else 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", VERSION, n, k, z_dim, flags))
        fh.write(ds.X.astype("<f4").tobytes())
        if ds.Z_true is not None:
            fh.write(ds.Z_true.astype("<f4").tobytes())
        if ds.labels is not None:
            fh.write(ds.labels.astype("<f4").tobytes())


def read_dataset(path, task_id: int = 1, split: str = "") -> TaskDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 24 or raw[:4] != MAGIC:
        raise IngestionError(f"{path.name}: not a dataset file (bad magic)")
    version, n, k, z_dim, flags = struct.unpack("<5I", raw[4:24])
    if version != VERSION:
        raise IngestionError(f"{path.name}: unsupported version {version}")
    offset = 24
    need = n * k * 4
    if len(raw) < offset + need:
        raise IngestionError(f"{path.name}: truncated observation block")
    x = np.frombuffer(raw, dtype="<f4", count=n * k, offset=offset).reshape(n, k)
    offset += need
    z = None
    if flags & _FLAG_Z:
        need = n * z_dim * 4
        if len(raw) < offset + need:
            raise IngestionError(f"{path.name}: truncated latent block")
        z = np.frombuffer(raw, dtype="<f4", count=n * z_dim, offset=offset).reshape(n, z_dim)
        offset += need
    labels = None
    if flags & _FLAG_LABELS:
        need = n * 4
        if len(raw) < offset + need:
            raise IngestionError(f"{path.name}: truncated label block")
        lab = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        if not np.all(np.isfinite(lab)) or np.any(lab < 0) or np.any(lab != np.round(lab)):
            raise IngestionError(f"{path.name}: labels must be non-negative integers")
        labels = lab.astype(np.int64)
    if not np.all(np.isfinite(x)):
        raise IngestionError(f"{path.name}: non-finite observations")
    return TaskDataset(task_id=task_id, X=np.asarray(x, dtype=np.float64),
                       Z_true=None if z is None else np.asarray(z, dtype=np.float64),
                       labels=labels, split=split)


def save_flow(path, flow: FlowParams) -> None:
    header = {
        "K": flow.K,
        "N": flow.N,
        "n_blocks": flow.n_blocks,
        "width": flow.width,
        "permutations": [p.tolist() for p in flow.permutations],
        "layout": [[name, list(shape)] for name, (_, shape) in flow.layout.segments.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flow.theta.astype("<f8").tobytes())


def load_flow(path) -> FlowParams:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IngestionError(f"{Path(path).name}: truncated checkpoint")
    (hlen,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    layout = ParamLayout.build([(name, tuple(shape)) for name, shape in header["layout"]])
    theta = np.frombuffer(raw, dtype="<f8", offset=4 + hlen).astype(np.float64)
    if theta.size != layout.size:
        raise IngestionError(f"{Path(path).name}: parameter block does not match layout")
    return FlowParams(K=header["K"], N=header["N"], n_blocks=header["n_blocks"],
                      width=header["width"],
                      permutations=[np.asarray(p, dtype=np.int64) for p in header["permutations"]],
                      layout=layout, theta=theta)


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
