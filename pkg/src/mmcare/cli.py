"""Command-line interface: gen, train, eval, analyze, add-task.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Every command writes a run manifest (resolved config, seed,
input digests, timestamps) into its output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from . import __version__, data as data_mod, metrics as metrics_mod, training
from .data import Dataset, GenConfig, gen_config_from_dict
from .model import Model, ModelConfig
from .tasks import HeadKind, TaskSpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ABLATION_FLAGS = {
    # variant -> (use_comb_tokens, use_decorrel, use_moe)
    "a-": (False, False, False),
    "b-": (True, False, False),
    "c-": (True, True, False),
    "d-": (True, False, True),
}


class ConfigError(ValueError):
    pass


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_digests(data_dir: str) -> Dict[str, str]:
    digests = {}
    for root, _, files in os.walk(data_dir):
        for fname in sorted(files):
            fpath = os.path.join(root, fname)
            digests[os.path.relpath(fpath, data_dir)] = _sha256(fpath)
    return digests


def write_run_manifest(out_dir: str, command: str, config: dict, seed: int,
                       digests: Dict[str, str], started: float,
                       outputs: List[str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "build_version": __version__,
        "config": config,
        "seed": seed,
        "input_digests": digests,
        "started_at": started,
        "finished_at": time.time(),
        "outputs": outputs,
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}")


def _dataclass_from(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}")


def load_configs(path: Optional[str]) -> tuple:
    """(ModelConfig, TrainConfig) from a JSON file with 'model'/'train' sections."""
    raw = _load_json(path) if path else {}
    model_cfg = _dataclass_from(ModelConfig, raw.get("model", {}), "model config")
    train_cfg = _dataclass_from(training.TrainConfig, raw.get("train", {}),
                                "train config")
    return model_cfg, train_cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    started = time.time()
    if args.config:
        raw = _load_json(args.config)
        cfg = _gen_config_from_raw(raw)
    else:
        cfg = GenConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.with_extension_task:
        cfg.include_extension_task = True
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e))
    data_mod.generate(cfg, args.out)
    write_run_manifest(args.out, "gen", data_mod._gen_config_to_dict(cfg), cfg.seed,
                       dataset_digests(args.out), started, [args.out])
    print(f"generated {len(cfg.active_tasks())} task datasets under {args.out}")
    return EXIT_OK


def _gen_config_from_raw(raw: dict) -> GenConfig:
    try:
        return gen_config_from_dict(raw)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"generator config: {e}")


def _apply_ablation(model_cfg: ModelConfig, code: Optional[str]) -> ModelConfig:
    if code is None:
        return model_cfg
    if code not in ABLATION_FLAGS:
        raise ConfigError(f"unknown ablation code {code!r}; "
                          f"choose from {sorted(ABLATION_FLAGS)}")
    comb, dec, use_moe = ABLATION_FLAGS[code]
    return dataclasses.replace(model_cfg, use_comb_tokens=comb,
                               use_decorrel=dec, use_moe=use_moe)


def _restrict_dataset(dataset: Dataset, names: List[str]) -> Dataset:
    samples = {n: dataset.samples[n] for n in names}
    return Dataset(tasks=dataset.tasks, samples=samples, manifest=dataset.manifest)


def cmd_train(args) -> int:
    started = time.time()
    model_cfg, train_cfg = load_configs(args.config)
    model_cfg = _apply_ablation(model_cfg, args.ablate)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    dataset = data_mod.load(args.data)
    model_cfg = _sync_dims(model_cfg, dataset)
    digests = dataset_digests(args.data)
    os.makedirs(args.out, exist_ok=True)

    if args.single_task:
        names = [args.single_task]
        if args.single_task not in dataset.samples:
            raise data_mod.DataError(f"no dataset for task {args.single_task!r}")
    else:
        names = [t.name for t in dataset.tasks]

    outputs = []
    for run_name, task_names in ([(n, [n]) for n in names] if args.single_task
                                 else [("multitask", names)]):
        specs = _reindex([t for t in dataset.tasks if t.name in task_names])
        model = Model(model_cfg, specs, seed=train_cfg.seed)
        sub = _restrict_dataset(dataset, task_names)
        log_path = os.path.join(args.out, f"metrics_{run_name}.jsonl")
        training.train(model, sub, train_cfg, log_path=log_path)
        ckpt = os.path.join(args.out, f"checkpoint_{run_name}")
        training.save_checkpoint(model, ckpt)
        outputs.extend([ckpt, log_path])
        print(f"trained {run_name}: checkpoint at {ckpt}")
    write_run_manifest(args.out, "train",
                       {"model": model_cfg.to_dict(),
                        "train": dataclasses.asdict(train_cfg),
                        "ablate": args.ablate, "single_task": args.single_task},
                       train_cfg.seed, digests, started, outputs)
    return EXIT_OK


def _reindex(specs: List[TaskSpec]) -> List[TaskSpec]:
    return [dataclasses.replace(t, task_id=i) for i, t in enumerate(specs)]


def _sync_dims(model_cfg: ModelConfig, dataset: Dataset) -> ModelConfig:
    """Align modality input dims with the dataset manifest."""
    dims = dataset.manifest["dims"]
    return dataclasses.replace(
        model_cfg, ts_feat_dim=dims["ts_feat_dim"],
        ts_max_steps=dims["ts_steps"],
        image_size=dims["image_size"], image_channels=dims["image_channels"],
        note_dim=dims["note_dim"],
        note_max_tokens=dims["note_tokens"])


def cmd_eval(args) -> int:
    started = time.time()
    model = training.load_checkpoint(args.checkpoint)
    dataset = data_mod.load(args.data)
    names = [args.task] if args.task else \
        [t.name for t in model.tasks if t.name in dataset.samples]
    rows = []
    for name in names:
        bundle = training.evaluate(model, dataset, name, split=args.split)
        for metric, value in bundle.values.items():
            rows.append((name, metric, value))
    print("task,metric,value")
    for name, metric, value in rows:
        print(f"{name},{metric},{value:.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.csv"), "w", encoding="utf-8") as fh:
            fh.write("task,metric,value\n")
            for name, metric, value in rows:
                fh.write(f"{name},{metric},{value:.6f}\n")
        write_run_manifest(args.out, "eval", {"checkpoint": args.checkpoint,
                                              "split": args.split}, 0,
                           dataset_digests(args.data), started,
                           [os.path.join(args.out, "eval.csv")])
    return EXIT_OK


def cmd_analyze(args) -> int:
    started = time.time()
    model = training.load_checkpoint(args.checkpoint)
    dataset = data_mod.load(args.data)
    if args.kind == "experts":
        table = metrics_mod.export_expert_stats(model, dataset, split=args.split)
        fname = "expert_stats.csv"
    elif args.kind == "embeddings":
        table = metrics_mod.export_embeddings(model, dataset,
                                              n_per_task=args.n_per_task,
                                              split=args.split, seed=args.seed or 0)
        fname = "embeddings.csv"
    elif args.kind == "alphas":
        table = metrics_mod.export_alphas(model, dataset, split=args.split)
        fname = "alphas.csv"
    else:
        raise ConfigError(f"unknown analysis kind {args.kind!r}")
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, fname)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(table)
    write_run_manifest(args.out, "analyze", {"kind": args.kind}, args.seed or 0,
                       dataset_digests(args.data), started, [out_path])
    print(f"wrote {out_path}")
    return EXIT_OK


def _subsample_train(dataset: Dataset, task: str, fraction: float, seed: int) -> None:
    samples = dataset.samples[task]["train"]
    n_keep = max(1, int(round(fraction * len(samples))))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF4AC]))
    keep = sorted(rng.permutation(len(samples))[:n_keep])
    dataset.samples[task]["train"] = [samples[i] for i in keep]


def cmd_add_task(args) -> int:
    started = time.time()
    model_cfg, train_cfg = load_configs(args.config)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    dataset = data_mod.load(args.data)
    if args.task not in dataset.samples:
        raise data_mod.DataError(f"no dataset for new task {args.task!r}")
    spec_src = dataset.task_by_name(args.task)

    if args.from_scratch:
        model_cfg = _sync_dims(model_cfg, dataset)
        model = Model(model_cfg, [dataclasses.replace(spec_src, task_id=0)],
                      seed=train_cfg.seed)
    else:
        model = training.load_checkpoint(args.checkpoint)
        if any(t.name == args.task for t in model.tasks):
            raise ConfigError(f"task {args.task!r} already registered "
                              f"in the checkpoint")
        model.register_task(dataclasses.replace(spec_src, task_id=len(model.tasks)))

    if args.fraction is not None:
        if not 0.0 < args.fraction <= 1.0:
            raise ConfigError("--fraction must be in (0, 1]")
        _subsample_train(dataset, args.task, args.fraction, train_cfg.seed)

    sub = _restrict_dataset(dataset, [args.task])
    log_path = os.path.join(args.out, "metrics_add_task.jsonl")
    os.makedirs(args.out, exist_ok=True)
    training.train(model, sub, train_cfg, log_path=log_path)
    ckpt = os.path.join(args.out, "checkpoint_extended")
    training.save_checkpoint(model, ckpt)
    bundle = training.evaluate(model, dataset, args.task, split="test")
    print("task,metric,value")
    for metric, value in bundle.values.items():
        print(f"{args.task},{metric},{value:.6f}")
    write_run_manifest(args.out, "add-task",
                       {"task": args.task, "fraction": args.fraction,
                        "from_scratch": args.from_scratch,
                        "train": dataclasses.asdict(train_cfg)},
                       train_cfg.seed, dataset_digests(args.data), started,
                       [ckpt, log_path])
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmcare",
        description="multimodal multitask clinical prediction, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    default_out = os.environ.get("MMCARE_OUT_ROOT", "runs")

    p = sub.add_parser("gen", help="generate the synthetic dataset suite")
    p.add_argument("--config", help="generator config JSON")
    p.add_argument("--out", default=os.path.join(default_out, "data"))
    p.add_argument("--seed", type=int)
    p.add_argument("--with-extension-task", action="store_true",
                   help="also generate the note-dominant extension task")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train the model (full, ablated, or single-task)")
    p.add_argument("--config", help="JSON with 'model' and 'train' sections")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=os.path.join(default_out, "train"))
    p.add_argument("--seed", type=int)
    p.add_argument("--single-task", metavar="NAME",
                   help="train one fresh model on the named task only")
    p.add_argument("--ablate", choices=sorted(ABLATION_FLAGS),
                   help="disable module groups (a-: all off ... d-: MoE only)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", help="single task (default: all)")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="export analysis tables")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, choices=["experts", "embeddings", "alphas"])
    p.add_argument("--out", default=os.path.join(default_out, "analysis"))
    p.add_argument("--split", default="test")
    p.add_argument("--n-per-task", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("add-task", help="register and fine-tune a new task")
    p.add_argument("--checkpoint", help="pretrained checkpoint (omit with --from-scratch)")
    p.add_argument("--task", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON with 'model' and 'train' sections")
    p.add_argument("--out", default=os.path.join(default_out, "add_task"))
    p.add_argument("--seed", type=int)
    p.add_argument("--fraction", type=float,
                   help="use this fraction of the new task's training split")
    p.add_argument("--from-scratch", action="store_true",
                   help="ignore pretrained weights; train a fresh model")
    p.set_defaults(fn=cmd_add_task)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "add-task" and not args.from_scratch and not args.checkpoint:
        parser.error("add-task requires --checkpoint unless --from-scratch")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.DataError, training.CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
