"""Pure-numpy reference implementations of the hot kernels."""

import numpy as np


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = (y * gy).sum(axis=-1, keepdims=True)
    return y * (gy - dot)


def layernorm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std[..., 0]


def layernorm_bwd(gy: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray,
                  gain: np.ndarray):
    d = xhat.shape[-1]
    gxhat = gy * gain
    mean_g = gxhat.mean(axis=-1, keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
    gx = (gxhat - mean_g - xhat * mean_gx) * inv_std[..., None]
    axes = tuple(range(gy.ndim - 1))
    ggain = (gy * xhat).sum(axis=axes)
    gbias = gy.sum(axis=axes)
    return gx, ggain, gbias
