"""Token-level covariance regularization of combination-token embeddings.

The covariance is taken across feature columns between token rows, so the
penalty pushes different combination tokens (not feature dimensions) to be
decorrelated. Centering uses the column mean; the source formulation
writes the centering vector without the 1/d factor, which breaks the
constant-row zero-covariance property, so the mean is the default and the
literal variant is available behind a flag.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .tensor import Tensor, as_tensor

ArrayLike = Union[np.ndarray, Tensor]


def token_covariance(z: ArrayLike, literal_center: bool = False) -> Tensor:
    """Covariance between token rows of `z` (..., n_tok, d), across features.

    Each row is centered by its mean over the d feature columns and the
    outer products are averaged with 1/(d-1). With `literal_center` the
    centering vector is the plain column sum instead of the mean.
    """
    z = as_tensor(z)
    d = z.shape[-1]
    if d < 2:
        raise ValueError("need at least 2 feature columns (division by d-1)")
    center = z.sum(axis=-1, keepdims=True) if literal_center \
        else z.mean(axis=-1, keepdims=True)
    centered = z - center
    return (centered @ centered.swapaxes(-1, -2)) * (1.0 / (d - 1))


def comb_regularizer(cov: ArrayLike, n_comb: int) -> Tensor:
    """Squared off-diagonal sum of `cov`, scaled by 1/(n_comb-1)^2.

    A single present combination has nothing to decorrelate and yields 0.
    """
    cov = as_tensor(cov)
    if n_comb < 2:
        return Tensor(np.zeros(cov.shape[:-2], dtype=cov.dtype))
    off_diag = 1.0 - np.eye(cov.shape[-1], dtype=cov.dtype)
    sq = cov * cov * off_diag
    return sq.sum(axis=(-1, -2)) * (1.0 / (n_comb - 1) ** 2)


def cov_loss(c_values: Union[Sequence[float], ArrayLike]) -> Tensor:
    """Mini-batch mean of per-sample regularizer values."""
    if isinstance(c_values, Tensor):
        if c_values.data.size == 0:
            raise ValueError("empty batch")
        return c_values.mean()
    if isinstance(c_values, (list, tuple)) and \
            any(isinstance(v, Tensor) for v in c_values):
        if not c_values:
            raise ValueError("empty batch")
        from .tensor import stack
        return stack([as_tensor(v).reshape(()) for v in c_values]).mean()
    arr = np.asarray(c_values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty batch")
    return as_tensor(arr).mean()
