"""Command-line entry point: gen, train, eval, verify, export, classify.

Configs are JSON documents with sections {data, flow, train, eval,
classify, verify} and a mandatory top-level seed. Unknown keys are
rejected before any compute, so validation failures never leave partial
outputs. Exit codes: 0 success, 2 validation error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import classify as cls
from . import dataio
from . import evaluate as ev
from . import flow as fl
from . import synthdata, theory, trainer
from .errors import (ContractError, DivergenceError, IngestionError,
                     InstabilityError, NumericDomainError)
from .numerics import named_stream
from .objectives import ModelBank

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3

DEFAULTS = {
    "data": {"T": 4, "n_per_task": 10000, "d_inv": 8, "d_var": 8, "train_frac": 0.9},
    "flow": {"n_latent": None, "n_blocks": 8, "width": 64},
    "train": {"lr0": 0.002, "lr_min": 0.0, "weight_decay": 1e-2,
              "epochs_stage1": 60, "epochs_stage2": 20, "batch_size": 256,
              "tau": 0.07, "replay_size": 2000, "nce_weight": 0.0,
              "warm_start_pta": True, "stage2_per_task": True},
    "eval": {"scatter_n": 1000},
    "classify": {"n_classes": 20, "n_tasks": 4, "per_class_train": 40,
                 "per_class_test": 20, "dim": 512, "sep": 2.0, "noise": 0.3,
                 "n_latent": 24, "n_blocks": 4, "width": 64,
                 "epochs_stage1": 12, "epochs_stage2": 8, "batch_size": 100,
                 "replay_size": 100, "nce_weight": 1.0, "lr0": 0.002,
                 "tau": 0.07},
    "verify": {"n_points": 2000, "task_a": 1, "task_b": 2,
               "intersection_eps": 0.1, "connectivity_eps": None,
               "j_samples": 30, "line_segments": 5, "line_steps": 1000},
}


class ConfigError(ContractError):
    pass


def _merge_validate(user: dict, defaults: dict, path: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            merged[key] = _merge_validate(value, defaults[key], where)
        else:
            merged[key] = value
    return merged


def load_config(path: str | None, seed_flag: int | None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    seed = user.pop("seed", None)
    cfg = _merge_validate(user, DEFAULTS)
    if seed_flag is not None:
        seed = seed_flag
    if seed is None:
        raise ConfigError("a top-level seed is mandatory (config key or --seed)")
    cfg["seed"] = int(seed)
    return cfg


def train_config_from(cfg: dict, section: str = "train") -> trainer.TrainConfig:
    s = cfg[section]
    return trainer.TrainConfig(
        lr0=s["lr0"], lr_min=s.get("lr_min", 0.0), weight_decay=s.get("weight_decay", 1e-2),
        epochs_stage1=s["epochs_stage1"], epochs_stage2=s["epochs_stage2"],
        batch_size=s["batch_size"], tau=s["tau"], replay_size=s["replay_size"],
        nce_weight=s["nce_weight"], warm_start_pta=s.get("warm_start_pta", True),
        stage2_per_task=s.get("stage2_per_task", True), seed=cfg["seed"])


# ---------------------------------------------------------------------------
# dataset directory helpers


def write_data_dir(out: Path, datasets, mixer, manifest) -> None:
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for ds in datasets:
        name = f"task{ds.task_id}.icon"
        dataio.write_dataset(out / name, ds)
        files[str(ds.task_id)] = name
    manifest = dict(manifest, files=files)
    dataio.write_json(out / "manifest.json", manifest)
    dataio.write_json(out / "mixer.json", {
        "W1": mixer.W1.tolist(), "W2": mixer.W2.tolist(), "alpha": mixer.alpha,
    })


def load_data_dir(data_dir: Path):
    manifest = dataio.read_json(data_dir / "manifest.json")
    datasets = []
    for t_str, name in sorted(manifest["files"].items(), key=lambda kv: int(kv[0])):
        datasets.append(dataio.read_dataset(data_dir / name, task_id=int(t_str)))
    return datasets, manifest


def load_mixer(data_dir: Path) -> synthdata.MixerParams:
    blob = dataio.read_json(data_dir / "mixer.json")
    return synthdata.MixerParams(W1=np.asarray(blob["W1"]), W2=np.asarray(blob["W2"]),
                                 alpha=blob["alpha"])


def split_all(datasets, n_train: int):
    trains, tests = [], []
    for ds in datasets:
        tr, te = synthdata.split_dataset(ds, n_train)
        trains.append(tr)
        tests.append(te)
    return trains, tests


def save_checkpoints(out: Path, state: trainer.RunState, cfg: dict, use_kl: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_flow(out / "ata.flow", state.bank.ata)
    for t, flow_obj in sorted(state.bank.pta.items()):
        dataio.save_flow(out / f"pta_{t:03d}.flow", flow_obj)
    if state.head is not None:
        np.save(out / "head.npy", state.head)
    dataio.write_json(out / "run.json", {
        "config": cfg,
        "use_kl": use_kl,
        "traces": state.traces,
        "stage2_metrics": state.stage2_metrics,
        "replay_indices": {str(t): v.tolist() for t, v in state.buffer.indices.items()},
    })


def load_checkpoints(ckpt_dir: Path) -> tuple[ModelBank, dict]:
    run = dataio.read_json(ckpt_dir / "run.json")
    ata = dataio.load_flow(ckpt_dir / "ata.flow")
    pta = {}
    for f in sorted(ckpt_dir.glob("pta_*.flow")):
        t = int(f.stem.split("_")[1])
        pta[t] = dataio.load_flow(f)
    return ModelBank(ata=ata, pta=pta), run


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.seed)
    data = cfg["data"]
    if args.tasks is not None:
        data["T"] = args.tasks
    if args.n is not None:
        data["n_per_task"] = args.n
    spec = synthdata.SynthSpec(T=data["T"], n_per_task=data["n_per_task"],
                               d_inv=data["d_inv"], d_var=data["d_var"],
                               train_frac=data["train_frac"], seed=cfg["seed"])
    datasets, mixer, manifest = synthdata.generate(spec)
    write_data_dir(Path(args.out), datasets, mixer, manifest)
    print(f"wrote {len(datasets)} task files to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    datasets, manifest = load_data_dir(Path(args.data))
    trains, _ = split_all(datasets, manifest["n_train"])
    tc = train_config_from(cfg)
    fc = trainer.FlowConfig(n_latent=cfg["flow"]["n_latent"],
                            n_blocks=cfg["flow"]["n_blocks"], width=cfg["flow"]["width"])
    state = trainer.run_sequence(trains, tc, fc, use_kl=not args.no_kl)
    save_checkpoints(Path(args.out), state, cfg, use_kl=not args.no_kl)
    print(f"trained {len(state.bank.pta)} tasks -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    datasets, manifest = load_data_dir(Path(args.data))
    _, tests = split_all(datasets, manifest["n_train"])
    bank, run = load_checkpoints(Path(args.checkpoints))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    report = {"rmse": {}, "stage2_metrics": run.get("stage2_metrics", [])}
    pta_rmse, ata_rmse = ev.bank_rmse(bank, tests, "main")
    report["rmse"]["pta"] = pta_rmse
    report["rmse"]["ata"] = ata_rmse
    report["forgetting"] = ev.forgetting(bank, tests)

    aligns = []
    for ds in tests:
        z_pta = np.asarray(fl.posterior(bank.pta[ds.task_id], ds.X).mu)
        z_ata = np.asarray(fl.posterior(bank.ata, ds.X).mu)
        _, mean_r = ev.alignment_report(z_pta, z_ata)
        aligns.append(mean_r)
    report["alignment"] = {"per_task": aligns, "mean": float(np.mean(aligns))}

    if all(ds.Z_true is not None for ds in tests):
        z_hat = np.concatenate([np.asarray(fl.posterior(bank.ata, ds.X).mu) for ds in tests])
        z_true = np.concatenate([ds.Z_true[:, :bank.ata.N] for ds in tests])
        report["recovery_r2"] = ev.recovery_r2(z_hat, z_true)

    if args.baseline:
        baseline_bank, _ = load_checkpoints(Path(args.baseline))
        report["table1"] = ev.table1(bank, baseline_bank, tests).rmse

    ev.export_scatter(bank, tests, out, n=cfg["eval"]["scatter_n"],
                      rng=named_stream(cfg["seed"], "eval.scatter"))
    dataio.write_json(out / "report.json", report)
    print(f"report -> {out / 'report.json'}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = load_config(args.config, args.seed)
    datasets, manifest = load_data_dir(Path(args.data))
    _, tests = split_all(datasets, manifest["n_train"])
    bank, _ = load_checkpoints(Path(args.checkpoints))
    n = args.n if args.n is not None else cfg["eval"]["scatter_n"]
    res = ev.export_scatter(bank, tests, Path(args.out), n=n,
                            rng=named_stream(cfg["seed"], "eval.scatter"))
    print(f"scatter -> {res.csv_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config, args.seed)
    vc = cfg["verify"]
    data_dir = Path(args.data)
    datasets, manifest = load_data_dir(data_dir)
    table = {ds.task_id: ds for ds in datasets}
    ta, tb = vc["task_a"], vc["task_b"]
    if ta not in table or tb not in table:
        raise ContractError(f"verify needs tasks {ta} and {tb} in the data directory")
    n_points = vc["n_points"]

    if args.checkpoints:
        bank, _ = load_checkpoints(Path(args.checkpoints))
        xa = table[ta].X[:n_points]
        cloud1 = theory.LatentCloud(np.asarray(fl.posterior(bank.pta[ta], xa).mu),
                                    tag="pta", task_id=ta)
        cloud2 = theory.LatentCloud(np.asarray(fl.posterior(bank.ata, xa).mu),
                                    tag="ata", task_id=ta)
        pad = bank.ata.K - bank.ata.N

        def g(z):
            z_ext = np.concatenate([z, np.zeros(pad)]) if pad else z
            return np.asarray(fl.forward(bank.ata, z_ext[None, :]))[0]

        g_inverse = None
        observations = xa
    else:
        mixer = load_mixer(data_dir)
        if table[ta].Z_true is None:
            raise ContractError("verify without checkpoints needs ground-truth latents")
        cloud1 = theory.LatentCloud(table[ta].Z_true[:n_points], tag="truth", task_id=ta)
        cloud2 = theory.LatentCloud(table[tb].Z_true[:n_points], tag="truth", task_id=tb)

        def g(z):
            return synthdata.mixer_forward(mixer, z[None, :])[0]

        def g_inverse(x):
            return synthdata.mixer_inverse(mixer, x[None, :])[0]

        observations = np.concatenate([table[ta].X[:n_points], table[tb].X[:n_points]])

    report = theory.build_report(
        g, g_inverse, cloud1, cloud2, observations,
        intersection_eps=vc["intersection_eps"], connectivity_eps=vc["connectivity_eps"],
        j_samples=vc["j_samples"], line_segments=vc["line_segments"],
        line_steps=vc["line_steps"], rng=named_stream(cfg["seed"], "verify"))
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "theorem_report.json"
    dataio.write_json(out, report.to_dict())
    print(f"theorem report -> {out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    cfg = load_config(args.config, args.seed)
    cc = cfg["classify"]
    out = Path(args.out)
    if args.data:
        train = cls.load_embeddings(Path(args.data))
        test = cls.load_embeddings(Path(args.test)) if args.test else train
        emb_path = Path(args.data).with_suffix(".classes.npy")
        if not emb_path.exists():
            raise IngestionError(f"missing class-embedding table {emb_path.name}")
        emb = cls.ClassEmbeddings(np.load(emb_path))
    else:
        train, test, emb = cls.make_benchmark(
            n_classes=cc["n_classes"], n_tasks=cc["n_tasks"],
            per_class_train=cc["per_class_train"], per_class_test=cc["per_class_test"],
            dim=cc["dim"], sep=cc["sep"], noise=cc["noise"], seed=cfg["seed"])
    tc = trainer.TrainConfig(
        lr0=cc["lr0"], epochs_stage1=cc["epochs_stage1"], epochs_stage2=cc["epochs_stage2"],
        batch_size=cc["batch_size"], tau=cc["tau"], replay_size=cc["replay_size"],
        nce_weight=cc["nce_weight"], seed=cfg["seed"])
    fc = trainer.FlowConfig(n_latent=cc["n_latent"], n_blocks=cc["n_blocks"],
                            width=cc["width"])
    result = cls.continual_classify(train, test, emb, tc, fc, use_kl=not args.no_kl)
    out.mkdir(parents=True, exist_ok=True)
    if not args.data:
        cls.save_embeddings(out / "embeddings_train.icon", train,
                            cc["n_classes"] // cc["n_tasks"])
        cls.save_embeddings(out / "embeddings_test.icon", test,
                            cc["n_classes"] // cc["n_tasks"])
        np.save(out / "embeddings_train.classes.npy", emb.e)
    dataio.write_json(out / "accuracy.json", {
        "per_task": result.per_task,
        "average": result.average,
        "use_kl": not args.no_kl,
    })
    print(f"average accuracy {result.average:.4f} -> {out / 'accuracy.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icon", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False, checkpoints=False):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=True, help="output directory (or file for verify)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if checkpoints:
            sp.add_argument("--checkpoints", required=True, help="checkpoint directory")

    sp = sub.add_parser("gen", help="generate the synthetic benchmark")
    common(sp)
    sp.add_argument("--tasks", type=int, default=None)
    sp.add_argument("--n", type=int, default=None, help="samples per task")
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="two-stage sequential training")
    common(sp, data=True)
    sp.add_argument("--no-kl", action="store_true", help="skip the alignment stage")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="reconstruction metrics and scatter exports")
    common(sp, data=True, checkpoints=True)
    sp.add_argument("--baseline", default=None, help="checkpoint dir of the no-KL arm")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("export", help="latent scatter export only")
    common(sp, data=True, checkpoints=True)
    sp.add_argument("--n", type=int, default=None, help="points per setup per task")
    sp.set_defaults(fn=cmd_export)

    sp = sub.add_parser("verify", help="numeric checks of the identifiability assumptions")
    common(sp, data=True)
    sp.add_argument("--checkpoints", default=None, help="use trained flows instead of the mixer")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("classify", help="continual classification over embeddings")
    common(sp)
    sp.add_argument("--data", default=None, help="embedding file (.icon with .json manifest)")
    sp.add_argument("--test", default=None, help="test embedding file")
    sp.add_argument("--no-kl", action="store_true")
    sp.set_defaults(fn=cmd_classify)
    return p


def _apply_thread_cap() -> None:
    cap = os.environ.get("ICON_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise ConfigError(f"ICON_THREADS must be an integer, got {cap!r}")
    try:
        import numba
        numba.set_num_threads(n)
    except ImportError:
        pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.fn(args)
    except (ConfigError, ContractError, IngestionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, InstabilityError, NumericDomainError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
