"""Per-modality embedders and the mask-aware transformer encoder.

All forward operations accept either a single sequence (N × d) or a
batched stack (B × N × d); batching requires the samples to share one
SequenceLayout (same presence pattern and token counts).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .seqlayout import Combination, Modality, SequenceLayout, combination_name
from . import kernels
from .tensor import Tensor, concat, fused_mlp, layer_norm, masked_softmax, parameter, zeros_parameter


@dataclass
class EmbedderParams:
    """Projection, positional, and special-token parameters (all trainable)."""

    ts_proj: Tensor          # (F_t, d)
    ts_bias: Tensor          # (d,)
    img_proj: Tensor         # (P*P*C, d)
    img_bias: Tensor         # (d,)
    note_proj: Tensor        # (F_n, d)
    note_bias: Tensor        # (d,)
    pos: Dict[Modality, Tensor]          # per modality, (N^m_max, d)
    task_tokens: Dict[str, Tensor]       # task name -> (d,)
    comb_tokens: Dict[Combination, Tensor]  # combination -> (d,)
    patch_size: int = 4
    image_channels: int = 1


@dataclass
class EncoderLayerParams:
    wq: Tensor      # (d, d)
    wk: Tensor      # (d, d)
    wv: Tensor      # (d, d)
    ff_w1: Tensor   # (d, d_ff)
    ff_b1: Tensor   # (d_ff,)
    ff_w2: Tensor   # (d_ff, d)
    ff_b2: Tensor   # (d,)
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    n_heads: int = 2


@dataclass
class EncodedSample:
    """Encoder outputs sliced according to the layout."""

    z_task: Tensor                       # (B, d)
    z_comb: Tensor                       # (B, n_comb, d)
    modality_outputs: Dict[Modality, Tensor]  # modality -> (B, N^m, d)
    layout: SequenceLayout


def embed_timeseries(x: np.ndarray, params: EmbedderParams) -> Tensor:
    """Project each time step to a token and add positional embeddings."""
    x = np.asarray(x)
    batched = x.ndim == 3
    steps = x.shape[1] if batched else x.shape[0]
    if steps > params.pos[Modality.TIMESERIES].shape[0]:
        raise ValueError(
            f"{steps} steps exceed the positional table "
            f"({params.pos[Modality.TIMESERIES].shape[0]})")
    if x.shape[-1] != params.ts_proj.shape[0]:
        raise ValueError("time-series feature width mismatch")
    pos = params.pos[Modality.TIMESERIES][:steps]
    return Tensor(x) @ params.ts_proj + params.ts_bias + pos


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """Split (H, W, C) or (B, H, W, C) into flattened row-major patches."""
    x = np.asarray(x)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ValueError(f"image dims {h}x{w} not divisible by patch size {patch}")
    x = x.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), -1)
    return x if batched else x[0]


def embed_image(x: np.ndarray, params: EmbedderParams) -> Tensor:
    patches = patchify(x, params.patch_size)
    n_tok = patches.shape[-2]
    if n_tok > params.pos[Modality.IMAGE].shape[0]:
        raise ValueError("patch count exceeds the positional table")
    if patches.shape[-1] != params.img_proj.shape[0]:
        raise ValueError("flattened patch width mismatch")
    pos = params.pos[Modality.IMAGE][:n_tok]
    return Tensor(patches) @ params.img_proj + params.img_bias + pos


def embed_note(v: np.ndarray, params: EmbedderParams) -> Tensor:
    """Project precomputed note-embedding vectors (the text encoder is external)."""
    v = np.asarray(v)
    n_tok = v.shape[1] if v.ndim == 3 else v.shape[0]
    if v.shape[-1] != params.note_proj.shape[0]:
        raise ValueError("note embedding width mismatch")
    if n_tok > params.pos[Modality.NOTE].shape[0]:
        raise ValueError("note token count exceeds the positional table")
    pos = params.pos[Modality.NOTE][:n_tok]
    return Tensor(v) @ params.note_proj + params.note_bias + pos


_EMBED_FNS = {
    Modality.TIMESERIES: embed_timeseries,
    Modality.IMAGE: embed_image,
    Modality.NOTE: embed_note,
}


def embed_modality(m: Modality, x: np.ndarray, params: EmbedderParams) -> Tensor:
    return _EMBED_FNS[m](x, params)


def _tile_rows(vec: Tensor, batch: int) -> Tensor:
    # (d,) -> (batch, 1, d); multiplication by ones broadcasts with gradient
    return vec.reshape(1, 1, -1) * Tensor(np.ones((batch, 1, 1), dtype=vec.dtype))


def assemble_sequence(task_name: str, layout: SequenceLayout,
                      modality_tokens: Dict[Modality, Tensor],
                      params: EmbedderParams) -> Tensor:
    """Stack [task token, combination tokens, modality spans] as (B, N^h, d)."""
    some = next(iter(modality_tokens.values()))
    batch = some.shape[0] if some.ndim == 3 else 1
    rows: List[Tensor] = [_tile_rows(params.task_tokens[task_name], batch)]
    for c in layout.combinations:
        rows.append(_tile_rows(params.comb_tokens[c], batch))
    for m in layout.present_modalities:
        t = modality_tokens[m]
        if t.ndim == 2:
            t = t.reshape(1, *t.shape)
        start, length = layout.modality_spans[m]
        if t.shape[1] != length:
            raise ValueError(
                f"modality {m.value}: {t.shape[1]} tokens vs span length {length}")
        rows.append(t)
    h0 = concat(rows, axis=1)
    if h0.shape[1] != layout.total_len:
        raise ValueError("assembled sequence length disagrees with layout")
    return h0


def masked_mhsa(h: Tensor, mask: np.ndarray, lp: EncoderLayerParams) -> Tensor:
    """Multi-head self-attention with the additive layout mask.

    Runs as one graph node with a hand-derived backward pass; composing
    the elementary ops produces the same values but roughly ten extra
    intermediate tensors per layer.
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    b, n, d = h.shape
    if mask.shape[-2:] != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {n}")
    nh = lp.n_heads
    if d % nh:
        raise ValueError("width must be divisible by the head count")
    dh = d // nh
    scale = 1.0 / np.sqrt(dh)
    wq, wk, wv = lp.wq, lp.wk, lp.wv

    hf = np.ascontiguousarray(h.data).reshape(-1, d)

    def heads(flat: np.ndarray) -> np.ndarray:
        return flat.reshape(b, n, nh, dh).transpose(0, 2, 1, 3)  # (b, nh, n, dh)

    q, k, v = heads(hf @ wq.data), heads(hf @ wk.data), heads(hf @ wv.data)
    logits = q @ k.transpose(0, 1, 3, 2)
    logits *= scale
    if mask.ndim == 2:
        logits += mask.reshape(1, 1, n, n)
    else:
        logits += mask
    attn = kernels.softmax_fwd(logits)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)

    def backward(g):
        gh = heads(g.reshape(-1, d))                     # (b, nh, n, dh)
        g_attn = gh @ v.transpose(0, 1, 3, 2)
        g_v = attn.transpose(0, 1, 3, 2) @ gh
        g_logits = kernels.softmax_bwd(attn, g_attn)
        g_logits *= scale
        g_q = g_logits @ k
        g_k = g_logits.transpose(0, 1, 3, 2) @ q

        def flat(t4):
            return np.ascontiguousarray(t4.transpose(0, 2, 1, 3)).reshape(-1, d)

        g_qf, g_kf, g_vf = flat(g_q), flat(g_k), flat(g_v)
        g_hf = None
        if h.requires_grad:
            g_hf = g_qf @ wq.data.T
            g_hf += g_kf @ wk.data.T
            g_hf += g_vf @ wv.data.T
            g_hf = g_hf.reshape(h.data.shape)
        return g_hf, hf.T @ g_qf, hf.T @ g_kf, hf.T @ g_vf

    result = Tensor._make(out, (h, wq, wk, wv), backward)
    return result.reshape(n, d) if squeeze else result


def feed_forward(h: Tensor, lp: EncoderLayerParams) -> Tensor:
    return fused_mlp(h, lp.ff_w1, lp.ff_b1, lp.ff_w2, lp.ff_b2)


def encoder_layer(h: Tensor, mask: np.ndarray, lp: EncoderLayerParams) -> Tensor:
    """Post-norm residual block: LN(H + M-MHSA(H)), then LN(· + FFN(·))."""
    h1 = layer_norm(h + masked_mhsa(h, mask, lp), lp.ln1_gain, lp.ln1_bias)
    return layer_norm(h1 + feed_forward(h1, lp), lp.ln2_gain, lp.ln2_bias)


def encode(h0: Tensor, mask: np.ndarray, layers: Sequence[EncoderLayerParams],
           layout: SequenceLayout) -> EncodedSample:
    """Run the layer stack and slice outputs per the layout."""
    if not layers:
        raise ValueError("encoder needs at least one layer")
    squeeze = h0.ndim == 2
    h = h0.reshape(1, *h0.shape) if squeeze else h0
    for lp in layers:
        h = encoder_layer(h, mask, lp)
    n_comb = len(layout.comb_slots)
    z_task = h[:, 0, :]
    z_comb = h[:, 1:1 + n_comb, :]
    modality_outputs = {
        m: h[:, start:start + length, :]
        for m, (start, length) in layout.modality_spans.items()}
    return EncodedSample(z_task=z_task, z_comb=z_comb,
                         modality_outputs=modality_outputs, layout=layout)


def init_embedder_params(rng: np.random.Generator, d: int, *, ts_feat_dim: int,
                         ts_max_steps: int, image_size: int, patch_size: int,
                         image_channels: int, note_dim: int, note_max_tokens: int,
                         task_names: Sequence[str],
                         combinations: Sequence[Combination],
                         dtype=np.float32) -> EmbedderParams:
    n_patches = (image_size // patch_size) ** 2
    patch_dim = patch_size * patch_size * image_channels
    pos = {
        Modality.TIMESERIES: parameter(rng, (ts_max_steps, d), scale=0.02, dtype=dtype),
        Modality.IMAGE: parameter(rng, (n_patches, d), scale=0.02, dtype=dtype),
        Modality.NOTE: parameter(rng, (note_max_tokens, d), scale=0.02, dtype=dtype),
    }
    return EmbedderParams(
        ts_proj=parameter(rng, (ts_feat_dim, d), dtype=dtype),
        ts_bias=zeros_parameter((d,), dtype=dtype),
        img_proj=parameter(rng, (patch_dim, d), dtype=dtype),
        img_bias=zeros_parameter((d,), dtype=dtype),
        note_proj=parameter(rng, (note_dim, d), dtype=dtype),
        note_bias=zeros_parameter((d,), dtype=dtype),
        pos=pos,
        task_tokens={name: parameter(rng, (d,), scale=0.02, dtype=dtype)
                     for name in task_names},
        comb_tokens={c: parameter(rng, (d,), scale=0.02, dtype=dtype)
                     for c in combinations},
        patch_size=patch_size,
        image_channels=image_channels,
    )


def init_layer_params(rng: np.random.Generator, d: int, d_ff: int, n_heads: int,
                      dtype=np.float32) -> EncoderLayerParams:
    return EncoderLayerParams(
        wq=parameter(rng, (d, d), dtype=dtype),
        wk=parameter(rng, (d, d), dtype=dtype),
        wv=parameter(rng, (d, d), dtype=dtype),
        ff_w1=parameter(rng, (d, d_ff), dtype=dtype),
        ff_b1=zeros_parameter((d_ff,), dtype=dtype),
        ff_w2=parameter(rng, (d_ff, d), dtype=dtype),
        ff_b2=zeros_parameter((d,), dtype=dtype),
        ln1_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln1_bias=zeros_parameter((d,), dtype=dtype),
        ln2_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln2_bias=zeros_parameter((d,), dtype=dtype),
        n_heads=n_heads,
    )
