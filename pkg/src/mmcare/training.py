"""Alternating single-task training loop, Adam, checkpoints, gradient checks.

Each epoch interleaves every task's mini-batches in a seeded random order;
every optimizer step sees one task's mini-batch only. Adam state updates
lazily: parameters that got no gradient this step (other tasks' tokens and
heads) are left bit-unchanged.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .data import Dataset, PatientBatch, batch_iter, make_batch
from .model import Model, ModelConfig
from .tasks import HeadKind, TaskSpec
from .tensor import Tensor, no_grad

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0          # decoupled L2 on parameters
    task_weight_decay: float = 0.0     # exponential decay of loss weights per epoch
    seed: int = 0
    eval_split: str = "valid"
    eval_every_task: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")


class Adam:
    """Adaptive-moment optimizer with lazy per-parameter state.

    Parameters whose gradient is None this step are skipped entirely, so
    tensors untouched by the current task stay bit-identical.
    """

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data, dtype=np.float64)
                self.v[name] = np.zeros_like(p.data, dtype=np.float64)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            np.sqrt(v_hat, out=v_hat)
            v_hat += self.eps
            update = m_hat
            update /= v_hat
            update *= self.lr
            if self.weight_decay:
                update += self.lr * self.weight_decay * p.data
            p.data = (p.data - update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class MetricRecord:
    epoch: int
    task: str
    metric: str
    value: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def evaluate(model: Model, dataset: Dataset, task_name: str, split: str = "test",
             batch_size: int = 64) -> metrics_mod.MetricBundle:
    """Metric bundle for one task over a split; deterministic given inputs."""
    task = model.task_by_name(task_name)
    samples = dataset.split(task_name, split)
    dims = dataset.manifest["dims"]
    scores, labels = [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = make_batch(samples[start:start + batch_size], task_name, dims)
            out = model.forward_batch(batch)
            scores.append(out.probs)
            labels.append(batch.labels)
    scores = np.concatenate(scores, axis=0)
    labels = np.concatenate(labels, axis=0)
    return metrics_mod.task_metrics(scores, labels, task)


def train(model: Model, dataset: Dataset, config: TrainConfig,
          log_path: Optional[str] = None,
          step_hook: Optional[Callable[[int, str, float], None]] = None
          ) -> List[MetricRecord]:
    """Run the alternating single-task loop; returns the metric log."""
    for task in model.tasks:
        if task.name in dataset.samples and not dataset.split(task.name, "train"):
            raise ValueError(f"task {task.name}: empty training split")
    train_tasks = [t for t in model.tasks if t.name in dataset.samples]
    if not train_tasks:
        raise ValueError("no task datasets available for training")
    opt = Adam(model.parameters(), lr=config.learning_rate,
               weight_decay=config.weight_decay)
    records: List[MetricRecord] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            decay = (1.0 - config.task_weight_decay) ** epoch
            weight_scale = decay if config.task_weight_decay else 1.0
            # interleave every task's single-task mini-batches in a random
            # order so no task is systematically stale at epoch end
            batches = [(task, batch) for task in train_tasks
                       for batch in batch_iter(dataset, task.name,
                                               config.batch_size,
                                               config.seed, epoch=epoch)]
            order_rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, 0x0DE2, epoch]))
            order = order_rng.permutation(len(batches))
            loss_sum = {t.name: 0.0 for t in train_tasks}
            loss_count = {t.name: 0 for t in train_tasks}
            for task, batch in (batches[i] for i in order):
                opt.zero_grad()
                out = model.forward_batch(batch)
                loss = out.loss * weight_scale if weight_scale != 1.0 else out.loss
                if not np.isfinite(loss.data):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, task {task.name}, "
                        f"step {step}: {float(loss.data)}")
                loss.backward()
                opt.step()
                if step_hook:
                    step_hook(step, task.name, float(loss.data))
                loss_sum[task.name] += float(loss.data)
                loss_count[task.name] += 1
                step += 1
            for task in train_tasks:
                rec = MetricRecord(epoch=epoch, task=task.name,
                                   metric="train_loss",
                                   value=loss_sum[task.name]
                                   / max(1, loss_count[task.name]))
                records.append(rec)
                if log_fh:
                    log_fh.write(rec.to_json() + "\n")
                if config.eval_every_task:
                    try:
                        bundle = evaluate(model, dataset, task.name,
                                          split=config.eval_split)
                    except metrics_mod.UndefinedMetricError:
                        # degenerate split (single class); skip this entry
                        continue
                    for mname, val in bundle.values.items():
                        rec = MetricRecord(epoch=epoch, task=task.name,
                                           metric=mname, value=val)
                        records.append(rec)
                        if log_fh:
                            log_fh.write(rec.to_json() + "\n")
            if log_fh:
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return records


# ---------------------------------------------------------------------------
# checkpointing: manifest.json + one little-endian float32 binary per tensor

def _tensor_filename(name: str) -> str:
    return name.replace("/", "_") + ".bin"


def save_checkpoint(model: Model, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    params = model.parameters()
    manifest = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "tasks": [{"task_id": t.task_id, "name": t.name,
                   "head_kind": t.head_kind.value, "label_dim": t.label_dim,
                   "loss_weight": t.loss_weight} for t in model.tasks],
        "tensors": [{"name": n, "shape": list(p.data.shape), "dtype": "<f4",
                     "file": _tensor_filename(n)} for n, p in params.items()],
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for name, p in params.items():
        p.data.astype("<f4").tofile(os.path.join(path, _tensor_filename(name)))


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path: str) -> Model:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no manifest.json under {path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = manifest.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    config = ModelConfig(**manifest["config"])
    task_specs = [TaskSpec(task_id=t["task_id"], name=t["name"],
                           head_kind=HeadKind(t["head_kind"]),
                           label_dim=t["label_dim"], loss_weight=t["loss_weight"])
                  for t in manifest["tasks"]]
    model = Model(config, task_specs)
    params = model.parameters()
    listed = {entry["name"] for entry in manifest["tensors"]}
    if listed != set(params):
        raise CheckpointError("tensor name set does not match the model")
    for entry in manifest["tensors"]:
        p = params[entry["name"]]
        fpath = os.path.join(path, entry["file"])
        raw = np.fromfile(fpath, dtype="<f4")
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if raw.size != expected:
            raise CheckpointError(
                f"tensor {entry['name']}: payload has {raw.size} values, "
                f"expected {expected}")
        if tuple(entry["shape"]) != p.data.shape:
            raise CheckpointError(
                f"tensor {entry['name']}: shape {entry['shape']} does not match "
                f"model shape {list(p.data.shape)}")
        p.data = raw.reshape(entry["shape"]).astype(model.config.np_dtype)
    return model


# ---------------------------------------------------------------------------
# gradient verification

@dataclass
class GradCheckReport:
    per_tensor: Dict[str, float]   # max relative error per tensor
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.per_tensor.values())

    def worst(self) -> tuple:
        name = max(self.per_tensor, key=self.per_tensor.get)
        return name, self.per_tensor[name]


def grad_check(model: Model, batch: PatientBatch, tolerance: float = 1e-4,
               step: float = 1e-5, max_entries: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """Central-difference check of every parameter tensor (double precision)."""
    model.astype(np.float64)
    params = model.parameters()
    model.zero_grad()
    model.forward_batch(batch).loss.backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in params.items()}

    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n_entries = flat.size
        if max_entries is not None and n_entries > max_entries:
            entries = rng.choice(n_entries, size=max_entries, replace=False)
        else:
            entries = np.arange(n_entries)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for j in entries:
            old = flat[j]
            flat[j] = old + step
            with no_grad():
                up = float(model.forward_batch(batch).loss.data)
            flat[j] = old - step
            with no_grad():
                down = float(model.forward_batch(batch).loss.data)
            flat[j] = old
            numeric = (up - down) / (2 * step)
            denom = max(abs(numeric), abs(a_flat[j]), 1e-6)
            worst = max(worst, abs(numeric - a_flat[j]) / denom)
        report[name] = worst
    return GradCheckReport(per_tensor=report, tolerance=tolerance)
