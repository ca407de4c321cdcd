"""Full model: embedders + masked encoder + decorrelation + MoE + fusion + heads.

The forward pass over a mini-batch groups samples by (presence pattern,
token counts); every group shares one SequenceLayout and attention mask,
so each group runs as a single batched tensor. Ablation switches:

  - use_comb_tokens=False removes combination tokens from the sequence and
    substitutes each combination representation with the mean-pooled
    encoder outputs of its member modalities (downstream shapes preserved)
  - use_decorrel=False drops the covariance penalty from the objective
  - use_moe=False passes combination representations to fusion unchanged
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import decorrel, encoder, fusion, moe, seqlayout, tasks as tasks_mod
from .data import PatientBatch
from .seqlayout import Combination, Modality, SequenceLayout, build_layout, build_mask
from .tensor import Tensor, concat, parameter
from .tasks import HeadKind, HeadParams, TaskSpec


@dataclass
class ModelConfig:
    d: int = 128
    layers: int = 4
    heads: int = 2
    d_ff: int = 0              # 0 -> 2d
    n_experts: int = 10
    k: int = 2
    epsilon: float = 1.0       # fusion temperature
    beta: float = 0.2          # covariance-penalty weight
    w_balance: float = 0.01
    router_noise_std: float = 0.0
    ts_feat_dim: int = 76
    ts_max_steps: int = 24
    image_size: int = 16
    patch_size: int = 4
    image_channels: int = 1
    note_dim: int = 32
    note_max_tokens: int = 8
    literal_cov_center: bool = False
    use_comb_tokens: bool = True
    use_decorrel: bool = True
    use_moe: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 2 * self.d
        if self.d % self.heads:
            raise ValueError("width must be divisible by the head count")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ForwardResult:
    loss: Tensor
    pred_loss: Tensor
    cov_loss: Tensor
    balance_loss: Tensor
    probs: np.ndarray                 # (B, label_dim), batch order
    alphas: List[np.ndarray]          # per sample: fusion weights over combinations
    combinations: List[List[Combination]]  # per sample: combination order
    gate_selections: List[np.ndarray]      # per sample: (n_comb, k) expert ids


class Model:
    """Parameter owner plus the grouped batched forward pass."""

    def __init__(self, config: ModelConfig, task_specs: List[TaskSpec], seed: int = 0):
        tasks_mod.validate_registry(task_specs)
        self.config = config
        self.tasks: List[TaskSpec] = list(task_specs)
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        dt = config.np_dtype
        all_combs = seqlayout.enumerate_combinations(seqlayout.CANONICAL_MODALITIES)
        self.embedder = encoder.init_embedder_params(
            self._rng, config.d, ts_feat_dim=config.ts_feat_dim,
            ts_max_steps=config.ts_max_steps, image_size=config.image_size,
            patch_size=config.patch_size, image_channels=config.image_channels,
            note_dim=config.note_dim, note_max_tokens=config.note_max_tokens,
            task_names=[t.name for t in task_specs], combinations=all_combs, dtype=dt)
        self.layers = [encoder.init_layer_params(self._rng, config.d, config.d_ff,
                                                 config.heads, dtype=dt)
                       for _ in range(config.layers)]
        self.moe = moe.init_moe_params(self._rng, config.d, config.d_ff,
                                       config.n_experts, config.k,
                                       noise_std=config.router_noise_std, dtype=dt)
        self.fusion = fusion.init_fusion_params(self._rng, config.d,
                                                epsilon=config.epsilon, dtype=dt)
        self.heads: Dict[str, HeadParams] = {
            t.name: tasks_mod.init_head_params(self._rng, config.d, t.label_dim, dtype=dt)
            for t in task_specs}
        self._mask_cache: Dict[tuple, Tuple[SequenceLayout, np.ndarray]] = {}

    # -- registry ---------------------------------------------------------
    def task_by_name(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}")

    def register_task(self, spec: TaskSpec) -> None:
        """Add a task token and head for a new task; existing tensors untouched."""
        if any(t.name == spec.name for t in self.tasks):
            raise ValueError(f"task name {spec.name!r} already registered")
        if spec.task_id != len(self.tasks):
            raise ValueError("new task_id must extend the dense id range")
        self.tasks.append(spec)
        dt = self.config.np_dtype
        self.embedder.task_tokens[spec.name] = parameter(
            self._rng, (self.config.d,), scale=0.02, dtype=dt)
        self.heads[spec.name] = tasks_mod.init_head_params(
            self._rng, self.config.d, spec.label_dim, dtype=dt)

    # -- parameter access ---------------------------------------------------
    def parameters(self) -> "OrderedDict[str, Tensor]":
        p: "OrderedDict[str, Tensor]" = OrderedDict()
        e = self.embedder
        p["embed.ts_proj"], p["embed.ts_bias"] = e.ts_proj, e.ts_bias
        p["embed.img_proj"], p["embed.img_bias"] = e.img_proj, e.img_bias
        p["embed.note_proj"], p["embed.note_bias"] = e.note_proj, e.note_bias
        for m in seqlayout.CANONICAL_MODALITIES:
            p[f"embed.pos.{m.value}"] = e.pos[m]
        for c in sorted(e.comb_tokens, key=seqlayout.combination_key):
            p[f"embed.comb_token.{seqlayout.combination_name(c)}"] = e.comb_tokens[c]
        for t in self.tasks:
            p[f"embed.task_token.{t.name}"] = e.task_tokens[t.name]
        for i, lp in enumerate(self.layers):
            for fname in ("wq", "wk", "wv", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
                          "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
                p[f"enc.{i}.{fname}"] = getattr(lp, fname)
        for i, ex in enumerate(self.moe.experts):
            for fname in ("w1", "b1", "w2", "b2"):
                p[f"moe.expert.{i}.{fname}"] = getattr(ex, fname)
        p["moe.router_w1"], p["moe.router_w2"] = self.moe.router_w1, self.moe.router_w2
        p["fusion.w1"], p["fusion.w2"] = self.fusion.w1, self.fusion.w2
        p["fusion.ln_gain"], p["fusion.ln_bias"] = self.fusion.ln_gain, self.fusion.ln_bias
        for t in self.tasks:
            p[f"head.{t.name}.w"], p[f"head.{t.name}.b"] = \
                self.heads[t.name].w, self.heads[t.name].b
        return p

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def astype(self, dtype) -> None:
        """Cast all parameters in place (float64 for gradient verification)."""
        for t in self.parameters().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        self.config.dtype = "float64" if dtype == np.float64 else "float32"

    # -- forward -----------------------------------------------------------
    def _layout_for(self, present: Tuple[bool, bool, bool],
                    counts: Tuple[int, int, int]) -> Tuple[SequenceLayout, np.ndarray]:
        key = (present, counts, self.config.use_comb_tokens)
        cached = self._mask_cache.get(key)
        if cached is not None:
            return cached
        mods = [m for m, flag in zip(seqlayout.CANONICAL_MODALITIES, present) if flag]
        token_counts = {m: c for m, c in zip(seqlayout.CANONICAL_MODALITIES, counts) if c}
        layout = build_layout(mods, token_counts,
                              include_combinations=self.config.use_comb_tokens)
        mask = build_mask(layout)
        self._mask_cache[key] = (layout, mask)
        return layout, mask

    def _group_indices(self, batch: PatientBatch) -> Dict[tuple, List[int]]:
        groups: Dict[tuple, List[int]] = {}
        n_patch = (self.config.image_size // self.config.patch_size) ** 2
        for i in range(len(batch)):
            pres = batch.presence(i)
            counts = (int(batch.ts_len[i]), n_patch if pres[1] else 0,
                      int(batch.note_len[i]))
            groups.setdefault((pres, counts), []).append(i)
        return groups

    def _encode_group(self, batch: PatientBatch, idx: List[int],
                      present: Tuple[bool, bool, bool], counts: Tuple[int, int, int],
                      task: TaskSpec):
        layout, mask = self._layout_for(present, counts)
        dt = self.config.np_dtype
        mod_tokens: Dict[Modality, Tensor] = {}
        if present[0]:
            ts = batch.timeseries[idx][:, :counts[0], :].astype(dt)
            mod_tokens[Modality.TIMESERIES] = encoder.embed_timeseries(ts, self.embedder)
        if present[1]:
            img = batch.image[idx].astype(dt)
            mod_tokens[Modality.IMAGE] = encoder.embed_image(img, self.embedder)
        if present[2]:
            note = batch.note_emb[idx][:, :counts[2], :].astype(dt)
            mod_tokens[Modality.NOTE] = encoder.embed_note(note, self.embedder)
        h0 = encoder.assemble_sequence(task.name, layout, mod_tokens, self.embedder)
        return encoder.encode(h0, mask, self.layers, layout), layout

    def _comb_representations(self, enc: encoder.EncodedSample,
                              layout: SequenceLayout) -> Tuple[Tensor, List[Combination]]:
        """Combination-token outputs, or pooled substitutes under ablation."""
        if self.config.use_comb_tokens:
            return enc.z_comb, layout.combinations
        combos = seqlayout.enumerate_combinations(layout.present_modalities)
        pooled = []
        for c in combos:
            member_means = [enc.modality_outputs[m].mean(axis=1) for m in
                            sorted(c, key=seqlayout.CANONICAL_MODALITIES.index)]
            s = member_means[0]
            for t in member_means[1:]:
                s = s + t
            pooled.append(s * (1.0 / len(member_means)))
        from .tensor import stack
        return stack(pooled, axis=1), combos

    def forward_batch(self, batch: PatientBatch,
                      rng: Optional[np.random.Generator] = None) -> ForwardResult:
        """Loss, probabilities, and per-sample diagnostics for one batch.

        When every sample shares the same per-modality token counts (the
        common case), the whole batch runs as one padded sequence with
        per-sample attention masks; otherwise samples are grouped by
        (presence pattern, token counts) and each group runs separately.
        Both paths produce the same losses up to float summation order.
        """
        task = self.task_by_name(batch.task)
        if self.config.use_comb_tokens and self._counts_uniform(batch):
            return self._forward_padded(batch, task, rng)
        return self._forward_grouped(batch, task, rng)

    def _counts_uniform(self, batch: PatientBatch) -> bool:
        for arr, flag_col in ((batch.ts_len, 0), (batch.note_len, 2)):
            vals = {int(v) for i, v in enumerate(arr) if batch.presence(i)[flag_col]}
            if len(vals) > 1:
                return False
        return True

    # -- padded path: one sequence layout for the whole batch ---------------
    def _padded_mask(self, layout: SequenceLayout, layout_key: tuple,
                     present: Tuple[bool, bool, bool]) -> np.ndarray:
        key = ("padded", layout_key, present)
        cached = self._mask_cache.get(key)
        if cached is None:
            mods = [m for m, f in zip(seqlayout.CANONICAL_MODALITIES, present) if f]
            cached = build_mask(layout, present=mods)
            self._mask_cache[key] = cached
        return cached

    def _forward_padded(self, batch: PatientBatch, task: TaskSpec,
                        rng: Optional[np.random.Generator]) -> ForwardResult:
        cfg = self.config
        dt = cfg.np_dtype
        n = len(batch)
        n_patch = (cfg.image_size // cfg.patch_size) ** 2
        pres = [batch.presence(i) for i in range(n)]
        has = [np.array([i for i in range(n) if pres[i][a]]) for a in range(3)]

        counts: Dict[Modality, int] = {}
        if len(has[0]):
            counts[Modality.TIMESERIES] = int(batch.ts_len[has[0][0]])
        if len(has[1]):
            counts[Modality.IMAGE] = n_patch
        if len(has[2]):
            counts[Modality.NOTE] = int(batch.note_len[has[2][0]])
        layout = build_layout(list(counts), counts)
        layout_key = tuple(sorted((m.value, c) for m, c in counts.items()))

        # per-sample additive masks, shared within each presence pattern
        groups: Dict[tuple, List[int]] = {}
        for i, p in enumerate(pres):
            groups.setdefault(p, []).append(i)
        big = layout.total_len
        mask = np.empty((n, 1, big, big), dtype=dt)
        for p, idx in groups.items():
            mask[idx, 0] = self._padded_mask(layout, layout_key, p)

        # assemble [task | combination tokens | modality spans] as (B, N, d)
        from .tensor import scatter_rows, stack
        ones_b = Tensor(np.ones((n, 1, 1), dtype=dt))
        blocks = [self.embedder.task_tokens[task.name].reshape(1, 1, -1) * ones_b]
        comb_stack = stack([self.embedder.comb_tokens[c]
                            for c in layout.combinations], axis=0)
        blocks.append(comb_stack.reshape(1, len(layout.combinations), -1) * ones_b)
        for m in layout.present_modalities:
            idx = has[seqlayout.CANONICAL_MODALITIES.index(m)]
            length = counts[m]
            if m is Modality.TIMESERIES:
                raw = batch.timeseries[idx][:, :length, :].astype(dt)
            elif m is Modality.IMAGE:
                raw = batch.image[idx].astype(dt)
            else:
                raw = batch.note_emb[idx][:, :length, :].astype(dt)
            emb = encoder.embed_modality(m, raw, self.embedder)
            if len(idx) == n:
                blocks.append(emb)
            else:   # pad absent samples with zero rows (masked out anyway)
                g = len(idx)
                blocks.append(scatter_rows(emb.reshape(g, length * cfg.d), idx, n)
                              .reshape(n, length, cfg.d))
        h0 = concat(blocks, axis=1)
        enc = encoder.encode(h0, mask, self.layers, layout)

        # per-pattern present-combination slots within z_comb
        slot_of = {c: layout.comb_slots[c] - 1 for c in layout.combinations}
        pattern_info = {}
        for p, idx in groups.items():
            combos = seqlayout.enumerate_combinations(
                [m for m, f in zip(seqlayout.CANONICAL_MODALITIES, p) if f])
            pattern_info[p] = (np.asarray([slot_of[c] for c in combos],
                                          dtype=np.intp), combos,
                               np.asarray(idx, dtype=np.intp))
        comb_lists: List[List[Combination]] = [None] * n
        for p, (_, combos, idx) in pattern_info.items():
            for i in idx:
                comb_lists[i] = combos
        rows = np.concatenate([np.repeat(idx, len(c))
                               for c, _, idx in pattern_info.values()])
        cols = np.concatenate([np.tile(c, len(idx))
                               for c, _, idx in pattern_info.values()])

        if cfg.use_decorrel:
            by_count: Dict[int, list] = {}
            for c, _, idx in pattern_info.values():
                by_count.setdefault(len(c), []).append((c, idx))
            cov_sum = None
            for n_comb, parts in by_count.items():
                if n_comb < 2:
                    continue
                r = np.concatenate([np.repeat(idx, n_comb) for _, idx in parts]
                                   ).reshape(-1, n_comb)
                c = np.concatenate([np.tile(cp, len(idx)) for cp, idx in parts]
                                   ).reshape(-1, n_comb)
                cov = decorrel.token_covariance(
                    enc.z_comb[(r, c)], literal_center=cfg.literal_cov_center)
                term = decorrel.comb_regularizer(cov, n_comb).sum()
                cov_sum = term if cov_sum is None else cov_sum + term
            l_cov = (cov_sum * (1.0 / n) if cov_sum is not None
                     else Tensor(np.zeros((), dtype=dt)))
        else:
            l_cov = Tensor(np.zeros((), dtype=dt))

        nc_all = len(layout.combinations)
        if cfg.use_moe:
            flat = enc.z_comb[(rows, cols)]
            refined, gates, sel = moe.moe_forward_batch(flat, enc.z_task[rows],
                                                        self.moe, rng)
            s_comb = scatter_rows(refined, rows * nc_all + cols, n * nc_all
                                  ).reshape(n, nc_all, cfg.d)
            bal = moe.balance_loss(gates, cfg.w_balance)
        else:
            s_comb = enc.z_comb
            sel = np.zeros((len(rows), 0), dtype=int)
            bal = Tensor(np.zeros((), dtype=dt))

        fmask = np.full((n, nc_all), seqlayout.NEG_INF, dtype=dt)
        for c, _, idx in pattern_info.values():
            fmask[np.ix_(idx, c)] = 0.0
        s_p, alpha = fusion.fuse_batch(enc.z_task, s_comb, self.fusion,
                                       present_mask=fmask)
        y_hat = tasks_mod.predict(s_p, task, self.heads[task.name])
        pred = tasks_mod.task_loss(batch.labels, y_hat, task)
        loss = tasks_mod.total_loss(pred, l_cov, bal, task, cfg.beta)

        alphas: List[np.ndarray] = [None] * n
        gate_sel: List[np.ndarray] = [None] * n
        start = 0
        for c, _, idx in pattern_info.values():
            nc = len(c)
            block = alpha[np.ix_(idx, c)]
            for j, i in enumerate(idx):
                alphas[i] = block[j]
                gate_sel[i] = sel[start + j * nc:start + (j + 1) * nc]
            start += nc * len(idx)
        return ForwardResult(loss=loss, pred_loss=pred, cov_loss=l_cov,
                             balance_loss=bal, probs=y_hat.data.astype(np.float64),
                             alphas=alphas, combinations=comb_lists,
                             gate_selections=gate_sel)

    # -- grouped path: one sub-batch per (presence, token counts) -----------
    def _forward_grouped(self, batch: PatientBatch, task: TaskSpec,
                         rng: Optional[np.random.Generator]) -> ForwardResult:
        n = len(batch)
        groups = self._group_indices(batch)
        pred_losses: List[Tuple[Tensor, int]] = []
        cov_terms: List[Tuple[Tensor, int]] = []
        gate_rows: List[Tensor] = []
        probs = np.zeros((n, task.label_dim), dtype=np.float64)
        alphas: List[np.ndarray] = [None] * n
        comb_lists: List[List[Combination]] = [None] * n
        gate_sel: List[np.ndarray] = [None] * n

        for (present, counts), idx in groups.items():
            enc, layout = self._encode_group(batch, idx, present, counts, task)
            z_comb, combos = self._comb_representations(enc, layout)
            g, n_comb, d = z_comb.shape

            if self.config.use_decorrel:
                cov = decorrel.token_covariance(
                    z_comb, literal_center=self.config.literal_cov_center)
                c_vals = decorrel.comb_regularizer(cov, n_comb)   # (g,)
                cov_terms.append((c_vals.sum(), g))
            if self.config.use_moe:
                flat = z_comb.reshape(g * n_comb, d)
                task_rows = (enc.z_task.reshape(g, 1, d)
                             * Tensor(np.ones((1, n_comb, 1), dtype=z_comb.dtype))
                             ).reshape(g * n_comb, d)
                refined, gates, sel = moe.moe_forward_batch(flat, task_rows,
                                                            self.moe, rng)
                s_comb = refined.reshape(g, n_comb, d)
                gate_rows.append(gates)
                sel = sel.reshape(g, n_comb, self.moe.k)
            else:
                s_comb = z_comb
                sel = np.zeros((g, n_comb, 0), dtype=int)

            s_p, alpha = fusion.fuse_batch(enc.z_task, s_comb, self.fusion)
            y_hat = tasks_mod.predict(s_p, task, self.heads[task.name])
            labels = batch.labels[idx]
            pred_losses.append((tasks_mod.task_loss(labels, y_hat, task) * len(idx),
                                len(idx)))
            probs[idx] = y_hat.data
            for row, i in enumerate(idx):
                alphas[i] = alpha[row]
                comb_lists[i] = combos
                gate_sel[i] = sel[row]

        pred = sum(t for t, _ in pred_losses) * (1.0 / n)
        if cov_terms:
            l_cov = sum(t for t, _ in cov_terms) * (1.0 / n)
        else:
            l_cov = Tensor(np.zeros((), dtype=self.config.np_dtype))
        if gate_rows:
            bal = moe.balance_loss(concat(gate_rows, axis=0), self.config.w_balance)
        else:
            bal = Tensor(np.zeros((), dtype=self.config.np_dtype))
        loss = tasks_mod.total_loss(pred, l_cov, bal, task, self.config.beta)
        return ForwardResult(loss=loss, pred_loss=pred, cov_loss=l_cov,
                             balance_loss=bal, probs=probs, alphas=alphas,
                             combinations=comb_lists, gate_selections=gate_sel)
