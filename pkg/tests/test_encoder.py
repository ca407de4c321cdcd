"""Embedders and the mask-aware encoder: information-flow guarantees."""

import numpy as np
import pytest

from mmcare.encoder import (EncodedSample, assemble_sequence, embed_image,
                            embed_modality, embed_note, embed_timeseries,
                            encode, encoder_layer, init_embedder_params,
                            init_layer_params, masked_mhsa, patchify)
from mmcare.seqlayout import (CANONICAL_MODALITIES, Modality, build_layout,
                              build_mask)
from mmcare.tensor import Tensor

T, I, N = CANONICAL_MODALITIES
D = 16


def make_setup(counts=(3, 4, 2), present=(T, I, N), d=D, layers=1, seed=0,
               tasks=("a", "b")):
    rng = np.random.default_rng(seed)
    layout = build_layout(present, dict(zip((T, I, N), counts)))
    emb = init_embedder_params(
        rng, d, ts_feat_dim=5, ts_max_steps=8, image_size=8, patch_size=4,
        image_channels=1, note_dim=6, note_max_tokens=4, task_names=list(tasks),
        combinations=layout.combinations, dtype=np.float64)
    lps = [init_layer_params(rng, d, 2 * d, 2, dtype=np.float64)
           for _ in range(layers)]
    return layout, emb, lps


def make_inputs(rng, counts):
    return {T: rng.normal(size=(counts[0], 5)),
            I: rng.normal(size=(8, 8, 1)),
            N: rng.normal(size=(counts[2], 6))}


def run(layout, emb, lps, inputs, task="a"):
    toks = {m: embed_modality(m, inputs[m], emb)
            for m in layout.present_modalities}
    h0 = assemble_sequence(task, layout, toks, emb)
    return encode(h0, build_mask(layout), lps, layout)


class TestEmbedders:
    def test_timeseries_shape_and_positions(self):
        _, emb, _ = make_setup()
        x = np.random.default_rng(1).normal(size=(3, 5))
        t = embed_timeseries(x, emb)
        assert t.shape == (3, D)
        want = x @ emb.ts_proj.data + emb.ts_bias.data \
            + emb.pos[Modality.TIMESERIES].data[:3]
        assert np.allclose(t.data, want, atol=1e-12)

    def test_timeseries_limits(self):
        _, emb, _ = make_setup()
        with pytest.raises(ValueError):
            embed_timeseries(np.zeros((9, 5)), emb)  # too many steps
        with pytest.raises(ValueError):
            embed_timeseries(np.zeros((3, 7)), emb)  # wrong width

    def test_patchify_row_major(self):
        x = np.arange(16, dtype=float).reshape(4, 4, 1)
        p = patchify(x, 2)
        assert p.shape == (4, 4)
        assert p[0].tolist() == [0, 1, 4, 5]
        assert p[1].tolist() == [2, 3, 6, 7]

    def test_patchify_rejects_nondivisible(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((5, 5, 1)), 2)

    def test_image_token_count(self):
        _, emb, _ = make_setup()
        t = embed_image(np.zeros((8, 8, 1)), emb)
        assert t.shape == (4, D)

    def test_note_projection(self):
        _, emb, _ = make_setup()
        v = np.random.default_rng(2).normal(size=(2, 6))
        t = embed_note(v, emb)
        want = v @ emb.note_proj.data + emb.note_bias.data \
            + emb.pos[Modality.NOTE].data[:2]
        assert np.allclose(t.data, want, atol=1e-12)


class TestMHSA:
    def test_matches_unfused_reference(self):
        layout, emb, lps = make_setup()
        rng = np.random.default_rng(3)
        h = rng.normal(size=(2, layout.total_len, D))
        mask = build_mask(layout)
        lp = lps[0]
        out = masked_mhsa(Tensor(h), mask, lp)

        def ref(h, mask, lp):
            b, n, d = h.shape
            nh = lp.n_heads
            dh = d // nh
            q = (h @ lp.wq.data).reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
            k = (h @ lp.wk.data).reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
            v = (h @ lp.wv.data).reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
            logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + mask
            e = np.exp(logits - logits.max(axis=-1, keepdims=True))
            attn = e / e.sum(axis=-1, keepdims=True)
            return (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)

        assert np.allclose(out.data, ref(h, mask, lp), atol=1e-10)

    def test_gradients_match_finite_differences(self):
        layout, emb, lps = make_setup(counts=(2, 4, 1), d=8)
        rng = np.random.default_rng(4)
        h = Tensor(rng.normal(size=(1, layout.total_len, 8)),
                   requires_grad=True)
        mask = build_mask(layout)
        lp = lps[0]
        out = masked_mhsa(h, mask, lp)
        w = rng.normal(size=out.shape)
        (out * Tensor(w)).sum().backward()
        eps = 1e-6
        flat = h.data.reshape(-1)
        for idx in rng.choice(flat.size, size=8, replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = float((masked_mhsa(Tensor(h.data), mask, lp).data * w).sum())
            flat[idx] = orig - eps
            lo = float((masked_mhsa(Tensor(h.data), mask, lp).data * w).sum())
            flat[idx] = orig
            num = (hi - lo) / (2 * eps)
            got = h.grad.reshape(-1)[idx]
            assert abs(num - got) < 1e-6 * max(1.0, abs(num))


class TestInformationFlow:
    def test_task_token_changes_only_z_task(self):
        layout, emb, lps = make_setup(layers=2)
        inputs = make_inputs(np.random.default_rng(5), (3, 4, 2))
        out_a = run(layout, emb, lps, inputs, task="a")
        out_b = run(layout, emb, lps, inputs, task="b")
        assert np.abs(out_a.z_comb.data - out_b.z_comb.data).max() < 1e-12
        for m in layout.present_modalities:
            assert np.abs(out_a.modality_outputs[m].data
                          - out_b.modality_outputs[m].data).max() < 1e-12
        assert np.abs(out_a.z_task.data - out_b.z_task.data).max() > 1e-3

    def test_combination_isolation(self):
        layout, emb, lps = make_setup(layers=2)
        rng = np.random.default_rng(6)
        inputs = make_inputs(rng, (3, 4, 2))
        base = run(layout, emb, lps, inputs)
        bumped = {k: v.copy() for k, v in inputs.items()}
        bumped[N] = bumped[N] + rng.normal(size=bumped[N].shape)
        out = run(layout, emb, lps, bumped)
        for j, c in enumerate(layout.combinations):
            delta = np.abs(out.z_comb.data[:, j] - base.z_comb.data[:, j]).max()
            if N in c:
                assert delta > 1e-6
            else:
                assert delta < 1e-12

    def test_partial_presence_layout(self):
        layout, emb, lps = make_setup(counts=(3, 4, 2), present=(T, N))
        rng = np.random.default_rng(7)
        inputs = {T: rng.normal(size=(3, 5)), N: rng.normal(size=(2, 6))}
        out = run(layout, emb, lps, inputs)
        assert out.z_comb.shape == (1, 3, D)  # t, n, tn
        assert set(out.modality_outputs) == {T, N}


class TestEncode:
    def test_batched_equals_per_sample(self):
        layout, emb, lps = make_setup(layers=2)
        rng = np.random.default_rng(8)
        h0 = rng.normal(size=(3, layout.total_len, D))
        mask = build_mask(layout)
        batched = encode(Tensor(h0), mask, lps, layout)
        for i in range(3):
            single = encode(Tensor(h0[i]), mask, lps, layout)
            assert np.allclose(batched.z_task.data[i], single.z_task.data[0],
                               atol=1e-10)
            assert np.allclose(batched.z_comb.data[i], single.z_comb.data[0],
                               atol=1e-10)

    def test_empty_layer_stack_rejected(self):
        layout, emb, _ = make_setup()
        h0 = Tensor(np.zeros((layout.total_len, D)))
        with pytest.raises(ValueError):
            encode(h0, build_mask(layout), [], layout)

    def test_slices_cover_layout(self):
        layout, emb, lps = make_setup()
        rng = np.random.default_rng(9)
        out = run(layout, emb, lps, make_inputs(rng, (3, 4, 2)))
        assert isinstance(out, EncodedSample)
        n_tokens = (1 + out.z_comb.shape[1]
                    + sum(v.shape[1] for v in out.modality_outputs.values()))
        assert n_tokens == layout.total_len
