"""Temperature-softmax aggregation of refined combination tokens into a
patient-level representation, scored under task guidance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .tensor import Tensor, as_tensor, concat, layer_norm, masked_softmax, parameter, zeros_parameter


@dataclass
class FusionParams:
    w1: Tensor       # (2d, d)
    w2: Tensor       # (d, 1)
    ln_gain: Tensor  # (d,)
    ln_bias: Tensor  # (d,)
    epsilon: float = 1.0  # softmax temperature

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("temperature must be positive")


def init_fusion_params(rng: np.random.Generator, d: int, epsilon: float = 1.0,
                       dtype=np.float32) -> FusionParams:
    return FusionParams(
        w1=parameter(rng, (2 * d, d), dtype=dtype),
        w2=parameter(rng, (d, 1), dtype=dtype),
        ln_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln_bias=zeros_parameter((d,), dtype=dtype),
        epsilon=epsilon)


def score_combination(z_task: Tensor, s_c: Tensor, params: FusionParams) -> Tensor:
    """Unnormalized attention score: tanh([z_task || s_c] W1) · W2."""
    z_task, s_c = as_tensor(z_task), as_tensor(s_c)
    joint = concat([z_task, s_c], axis=-1)
    return ((joint @ params.w1).tanh() @ params.w2).reshape(joint.shape[:-1])


def fuse_batch(z_task: Tensor, s_comb: Tensor, params: FusionParams,
               present_mask=None) -> Tuple[Tensor, np.ndarray]:
    """Fuse (B, n_comb, d) refined tokens under (B, d) task outputs.

    Returns the patient representation (B, 2d) and the attention weights
    (B, n_comb) as a plain array for export. `present_mask` is an optional
    additive (B, n_comb) array; entries of a large negative constant zero
    out padded combination slots so one padded tensor can carry samples
    with different presence patterns.
    """
    z_task, s_comb = as_tensor(z_task), as_tensor(s_comb)
    b, n_comb, d = s_comb.shape
    if n_comb < 1:
        raise ValueError("at least one combination representation is required")
    task_rows = z_task.reshape(b, 1, d) * Tensor(np.ones((1, n_comb, 1), dtype=z_task.dtype))
    scores = score_combination(task_rows, s_comb, params)   # (B, n_comb)
    alphas = masked_softmax(scores * (1.0 / params.epsilon), mask=present_mask)
    fused = (alphas.reshape(b, n_comb, 1) * s_comb).sum(axis=1)
    fused = layer_norm(fused, params.ln_gain, params.ln_bias)
    return concat([z_task, fused], axis=-1), alphas.data.copy()


def fuse(z_task: Tensor, s_list: Sequence[Tensor], params: FusionParams) -> Tensor:
    """Single-sample convenience wrapper over `fuse_batch`."""
    from .tensor import stack

    if len(s_list) == 0:
        raise ValueError("at least one combination representation is required")
    z_task = as_tensor(z_task)
    s = stack([as_tensor(s_c) for s_c in s_list], axis=0)
    rep, _ = fuse_batch(z_task.reshape(1, -1), s.reshape(1, *s.shape), params)
    return rep.reshape(-1)
