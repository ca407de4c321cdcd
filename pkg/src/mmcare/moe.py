"""Task/modality-conditioned top-k mixture-of-experts.

Router logits are the sum of two linear projections, one of the token
being refined and one of the task token, so expert selection depends on
both modality content and task identity. Selection keeps the top-k logits
(ties broken by lowest index), gates are a softmax over the survivors, and
only the selected experts are evaluated. Gradients flow through the gates
and experts but not through the discrete selection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .seqlayout import NEG_INF
from .tensor import Tensor, as_tensor, fused_mlp, masked_softmax, parameter, scatter_rows, zeros_parameter


@dataclass
class ExpertParams:
    w1: Tensor  # (d, d_ff)
    b1: Tensor  # (d_ff,)
    w2: Tensor  # (d_ff, d)
    b2: Tensor  # (d,)


@dataclass
class MoEParams:
    experts: List[ExpertParams]
    router_w1: Tensor  # (d, N^e), applied to the combination token
    router_w2: Tensor  # (d, N^e), applied to the task token
    k: int
    noise_std: float = 0.0  # optional Gaussian router noise, off by default

    @property
    def n_experts(self) -> int:
        return len(self.experts)


@dataclass
class GateRecord:
    expert_ids: np.ndarray    # (k,) distinct indices
    gate_weights: np.ndarray  # (k,) positive, sums to 1


def init_moe_params(rng: np.random.Generator, d: int, d_ff: int, n_experts: int,
                    k: int, noise_std: float = 0.0, dtype=np.float32) -> MoEParams:
    if not 1 <= k <= n_experts:
        raise ValueError("k must be in [1, n_experts]")
    experts = [ExpertParams(
        w1=parameter(rng, (d, d_ff), dtype=dtype),
        b1=zeros_parameter((d_ff,), dtype=dtype),
        w2=parameter(rng, (d_ff, d), dtype=dtype),
        b2=zeros_parameter((d,), dtype=dtype),
    ) for _ in range(n_experts)]
    return MoEParams(
        experts=experts,
        router_w1=parameter(rng, (d, n_experts), dtype=dtype),
        router_w2=parameter(rng, (d, n_experts), dtype=dtype),
        k=k, noise_std=noise_std)


def expert_forward(e: ExpertParams, x: Tensor) -> Tensor:
    return fused_mlp(x, e.w1, e.b1, e.w2, e.b2)


def router_logits(z_c: Tensor, z_task: Tensor, params: MoEParams,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    z_c, z_task = as_tensor(z_c), as_tensor(z_task)
    if z_c.shape[-1] != params.router_w1.shape[0] or \
            z_task.shape[-1] != params.router_w2.shape[0]:
        raise ValueError("router input width mismatch")
    logits = z_c @ params.router_w1 + z_task @ params.router_w2
    if params.noise_std > 0.0 and rng is not None:
        logits = logits + (rng.standard_normal(logits.shape) *
                           params.noise_std).astype(logits.dtype)
    return logits


def topk_selection(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties keep the lowest index."""
    if not 1 <= k <= v.shape[-1]:
        raise ValueError(f"k={k} out of range for {v.shape[-1]} experts")
    order = np.argsort(-v, axis=-1, kind="stable")
    return order[..., :k]


def topk_mask(v: np.ndarray, k: int, neg: float = NEG_INF) -> np.ndarray:
    """Keep the top-k entries of each row, suppress the rest to `neg`."""
    v = np.asarray(v, dtype=np.float64)
    sel = topk_selection(v, k)
    out = np.full_like(v, neg)
    np.put_along_axis(out, sel, np.take_along_axis(v, sel, axis=-1), axis=-1)
    return out


def selection_mask(v: np.ndarray, k: int, neg: float = NEG_INF) -> np.ndarray:
    """Additive mask: 0 on the selected entries, `neg` elsewhere."""
    sel = topk_selection(np.asarray(v), k)
    mask = np.full(v.shape, neg)
    np.put_along_axis(mask, sel, 0.0, axis=-1)
    return mask


def gate(logits: Tensor, k: int) -> GateRecord:
    """Softmax over the top-k logits of a single routing decision."""
    logits = as_tensor(logits)
    sel = np.sort(topk_selection(logits.data, k))
    gates = masked_softmax(logits, selection_mask(logits.data, k))
    return GateRecord(expert_ids=sel, gate_weights=gates.data[sel].copy())


def moe_forward(z_c: Tensor, z_task: Tensor, params: MoEParams,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Refine a single token: gate-weighted sum of the selected experts."""
    logits = router_logits(z_c, z_task, params, rng)
    sel = topk_selection(logits.data, params.k)
    gates = masked_softmax(logits, selection_mask(logits.data, params.k))
    out = None
    for i in sorted(sel.tolist()):
        term = gates[i] * expert_forward(params.experts[i], z_c)
        out = term if out is None else out + term
    return out


def moe_forward_batch(tokens: Tensor, task_rows: Tensor, params: MoEParams,
                      rng: Optional[np.random.Generator] = None
                      ) -> Tuple[Tensor, Tensor, np.ndarray]:
    """Route a stack of tokens (M × d) with matching task rows (M × d).

    Returns (refined tokens (M × d), dense gate matrix (M × N^e) for the
    balance loss, selected indices (M × k) for statistics). Experts are
    evaluated only on the rows routed to them.
    """
    logits = router_logits(tokens, task_rows, params, rng)
    sel = np.sort(topk_selection(logits.data, params.k), axis=-1)
    gates = masked_softmax(logits, selection_mask(logits.data, params.k))
    m = tokens.shape[0]
    out = None
    for i in range(params.n_experts):
        rows = np.nonzero((sel == i).any(axis=-1))[0]
        if rows.size == 0:
            continue
        expert_out = expert_forward(params.experts[i], tokens[rows])
        weighted = gates[(rows, np.full(rows.shape, i))].reshape(-1, 1) * expert_out
        term = scatter_rows(weighted, rows, m)
        out = term if out is None else out + term
    return out, gates, sel


def balance_loss(gates: Tensor, w_balance: float = 0.01) -> Tensor:
    """Importance loss: squared coefficient of variation of per-expert gate mass."""
    gates = as_tensor(gates)
    if gates.data.size == 0 or gates.shape[0] == 0:
        raise ValueError("no routed tokens")
    importance = gates.sum(axis=0)            # (N^e,)
    mean = importance.mean()
    var = ((importance - mean) ** 2).mean()
    cv2 = var / (mean * mean + 1e-10)
    return cv2 * w_balance
