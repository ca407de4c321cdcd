"""Task registry, prediction heads, per-task losses, and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, masked_softmax, parameter, zeros_parameter

PROB_FLOOR = 1e-7  # probabilities clamped to [PROB_FLOOR, 1 - PROB_FLOOR] in losses


class HeadKind(str, Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"
    MULTILABEL = "multilabel"


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    head_kind: HeadKind
    label_dim: int
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.label_dim < 1 or self.loss_weight <= 0:
            raise ValueError("label_dim and loss_weight must be positive")
        if self.head_kind == HeadKind.BINARY and self.label_dim != 1:
            raise ValueError("binary tasks have label_dim 1")


@dataclass
class HeadParams:
    w: Tensor  # (2d, label_dim)
    b: Tensor  # (label_dim,)


def init_head_params(rng: np.random.Generator, d: int, label_dim: int,
                     dtype=np.float32) -> HeadParams:
    return HeadParams(w=parameter(rng, (2 * d, label_dim), dtype=dtype),
                      b=zeros_parameter((label_dim,), dtype=dtype))


def predict(s_p: Tensor, task: TaskSpec, head: HeadParams) -> Tensor:
    """Head probabilities: sigmoid (binary, multilabel) or softmax (multiclass)."""
    logits = as_tensor(s_p) @ head.w + head.b
    if task.head_kind == HeadKind.MULTICLASS:
        return masked_softmax(logits)
    return logits.sigmoid()


def _check_labels(y: np.ndarray, task: TaskSpec) -> np.ndarray:
    y = np.asarray(y)
    if task.head_kind == HeadKind.MULTICLASS:
        if y.min() < 0 or y.max() >= task.label_dim:
            raise ValueError(f"class labels out of range for task {task.name}")
        return y.astype(np.int64)
    if ((y < 0) | (y > 1)).any():
        raise ValueError(f"labels for task {task.name} must be 0/1")
    return y.astype(np.float64)


def task_loss(y: np.ndarray, y_hat: Tensor, task: TaskSpec) -> Tensor:
    """Per-task loss, averaged over the batch (and label dims for BCE)."""
    y_hat = as_tensor(y_hat)
    batched = y_hat.ndim == 2
    y = _check_labels(y, task)
    p = y_hat.clip(PROB_FLOOR, 1.0 - PROB_FLOOR)
    if task.head_kind == HeadKind.MULTICLASS:
        rows = np.arange(p.shape[0]) if batched else slice(None)
        picked = p[(rows, y)] if batched else p[int(y)]
        return -(picked.log().mean() if batched else picked.log())
    target = y.reshape(y_hat.shape) if batched else y.reshape(p.shape)
    bce = -(target * p.log() + (1.0 - target) * (1.0 - p).log())
    return bce.mean()


def total_loss(pred_loss: Tensor, l_cov: Tensor, balance: Tensor,
               task: TaskSpec, beta: float) -> Tensor:
    """Combined objective λ_τ · (L_pred + β·L_cov + L_balance)."""
    for v in (pred_loss, l_cov, balance):
        if not np.all(np.isfinite(as_tensor(v).data)):
            raise FloatingPointError("non-finite loss component")
    return (as_tensor(pred_loss) + beta * as_tensor(l_cov)
            + as_tensor(balance)) * task.loss_weight


def validate_registry(tasks: Sequence[TaskSpec]) -> None:
    ids = [t.task_id for t in tasks]
    names = [t.name for t in tasks]
    if ids != list(range(len(tasks))):
        raise ValueError("task ids must be dense from 0 in registry order")
    if len(set(names)) != len(names):
        raise ValueError("task names must be unique")
