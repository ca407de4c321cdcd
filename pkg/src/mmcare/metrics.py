"""From-scratch evaluation metrics and analysis exporters.

AUROC is the pairwise rank statistic (ties count 0.5), computed via
average ranks. AUPRC is step-sum average precision with equal scores
grouped into one threshold. Macro averages over multilabel columns skip
single-class columns and report the skip count.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .seqlayout import combination_name
from .tasks import HeadKind, TaskSpec


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. single-class AUROC)."""


@dataclass
class MetricBundle:
    values: Dict[str, float]
    n_samples: int
    skipped_labels: int = 0


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outranks random negative); ties contribute 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision via the step sum Σ (R_k − R_{k−1}) · P_k.

    Thresholds descend over distinct score values, so tied scores enter
    as one group.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        fp += (j - i + 1) - int(y[i:j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return ap


def f1_scores(pred: Sequence[int], true: Sequence[int], n_classes: int
              ) -> Tuple[float, float]:
    """(macro F1, micro F1) over hard class predictions; 0/0 counts as 0."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.min() < 0 or pred.max() >= n_classes or true.min() < 0 \
            or true.max() >= n_classes:
        raise ValueError("labels out of range")
    f1s = []
    tp_total = fp_total = fn_total = 0
    for c in range(n_classes):
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
        tp_total += tp
        fp_total += fp
        fn_total += fn
    micro_denom = 2 * tp_total + fp_total + fn_total
    micro = 2 * tp_total / micro_denom if micro_denom else 0.0
    return float(np.mean(f1s)), micro


def multilabel_auroc(scores: np.ndarray, labels: np.ndarray
                     ) -> Tuple[float, float, int]:
    """(macro, micro, skipped columns); macro skips single-class columns."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    per_label = []
    skipped = 0
    for j in range(labels.shape[1]):
        col = labels[:, j]
        if col.min() == col.max():
            skipped += 1
            continue
        per_label.append(auroc(scores[:, j], col))
    if not per_label:
        raise UndefinedMetricError("no label column with both classes present")
    micro = auroc(scores.reshape(-1), labels.reshape(-1))
    return float(np.mean(per_label)), micro, skipped


def task_metrics(scores: np.ndarray, labels: np.ndarray, task: TaskSpec
                 ) -> MetricBundle:
    """The task's metric set: AUROC/AUPRC, ma/mi-F1, or ma/mi-AUROC."""
    n = len(labels)
    if task.head_kind == HeadKind.BINARY:
        s = scores[:, 0]
        return MetricBundle({"auroc": auroc(s, labels),
                             "auprc": auprc(s, labels)}, n)
    if task.head_kind == HeadKind.MULTICLASS:
        pred = scores.argmax(axis=1)
        macro, micro = f1_scores(pred, labels, task.label_dim)
        return MetricBundle({"macro_f1": macro, "micro_f1": micro}, n)
    macro, micro, skipped = multilabel_auroc(scores, labels)
    return MetricBundle({"macro_auroc": macro, "micro_auroc": micro}, n,
                        skipped_labels=skipped)


PRIMARY_METRIC = {HeadKind.BINARY: "auroc", HeadKind.MULTICLASS: "micro_f1",
                  HeadKind.MULTILABEL: "micro_auroc"}


# ---------------------------------------------------------------------------
# analysis exporters (comma-separated tables with a header row)

def export_expert_stats(model, dataset, split: str = "test",
                        batch_size: int = 64) -> str:
    """Expert-selection frequencies per (task, combination); rows sum to 1."""
    from .data import make_batch
    from .tensor import no_grad

    counts: Dict[tuple, np.ndarray] = {}
    dims = dataset.manifest["dims"]
    for task in model.tasks:
        if task.name not in dataset.samples:
            continue
        samples = dataset.split(task.name, split)
        with no_grad():
            for start in range(0, len(samples), batch_size):
                batch = make_batch(samples[start:start + batch_size],
                                   task.name, dims)
                out = model.forward_batch(batch)
                for combos, sel in zip(out.combinations, out.gate_selections):
                    for c, experts in zip(combos, sel):
                        key = (task.name, combination_name(c))
                        if key not in counts:
                            counts[key] = np.zeros(model.moe.n_experts)
                        for e in experts:
                            counts[key][e] += 1
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["task", "combination", "expert", "frequency"])
    for (task_name, comb) in sorted(counts):
        row = counts[(task_name, comb)]
        total = row.sum()
        for e in range(model.moe.n_experts):
            writer.writerow([task_name, comb, e,
                             f"{row[e] / total:.6f}" if total else "0.000000"])
    return buf.getvalue()


def export_embeddings(model, dataset, n_per_task: int, split: str = "test",
                      seed: int = 0) -> str:
    """Patient-level representations (width 2d) for external projection."""
    from . import fusion as fusion_mod
    from .data import make_batch
    from .tensor import no_grad

    dims = dataset.manifest["dims"]
    buf = io.StringIO()
    writer = csv.writer(buf)
    d2 = 2 * model.config.d
    writer.writerow(["task", "sample_id"] + [f"x{i}" for i in range(d2)])
    rng = np.random.default_rng(seed)
    for task in model.tasks:
        if task.name not in dataset.samples or n_per_task == 0:
            continue
        samples = dataset.split(task.name, split)
        pick = rng.permutation(len(samples))[:n_per_task]
        chosen = [samples[i] for i in sorted(pick)]
        with no_grad():
            for start in range(0, len(chosen), 64):
                batch = make_batch(chosen[start:start + 64], task.name, dims)
                reps = _patient_representations(model, batch)
                for sid, rep in zip(batch.sample_ids, reps):
                    writer.writerow([task.name, sid] +
                                    [f"{v:.6f}" for v in rep])
    return buf.getvalue()


def _patient_representations(model, batch) -> np.ndarray:
    """Forward pass capturing s^p for each sample (batch order)."""
    from . import fusion as fusion_mod, moe as moe_mod
    from .tensor import Tensor

    task = model.task_by_name(batch.task)
    reps = np.zeros((len(batch), 2 * model.config.d))
    for (present, counts), idx in model._group_indices(batch).items():
        enc, layout = model._encode_group(batch, idx, present, counts, task)
        z_comb, _ = model._comb_representations(enc, layout)
        g, n_comb, d = z_comb.shape
        if model.config.use_moe:
            flat = z_comb.reshape(g * n_comb, d)
            task_rows = (enc.z_task.reshape(g, 1, d)
                         * Tensor(np.ones((1, n_comb, 1), dtype=z_comb.dtype))
                         ).reshape(g * n_comb, d)
            refined, _, _ = moe_mod.moe_forward_batch(flat, task_rows, model.moe)
            s_comb = refined.reshape(g, n_comb, d)
        else:
            s_comb = z_comb
        s_p, _ = fusion_mod.fuse_batch(enc.z_task, s_comb, model.fusion)
        reps[idx] = s_p.data
    return reps


def export_alphas(model, dataset, split: str = "test", batch_size: int = 64) -> str:
    """Per-sample fusion attention weights over present combinations."""
    from .data import make_batch
    from .tensor import no_grad

    dims = dataset.manifest["dims"]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["task", "sample_id", "combination", "alpha"])
    for task in model.tasks:
        if task.name not in dataset.samples:
            continue
        samples = dataset.split(task.name, split)
        with no_grad():
            for start in range(0, len(samples), batch_size):
                batch = make_batch(samples[start:start + batch_size],
                                   task.name, dims)
                out = model.forward_batch(batch)
                for sid, combos, alpha in zip(batch.sample_ids,
                                              out.combinations, out.alphas):
                    for c, a in zip(combos, alpha):
                        writer.writerow([task.name, sid, combination_name(c),
                                         f"{a:.6f}"])
    return buf.getvalue()
