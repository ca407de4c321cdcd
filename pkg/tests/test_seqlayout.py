"""Layout and attention-mask construction against a brute-force oracle."""

import itertools

import numpy as np
import pytest

from mmcare.seqlayout import (CANONICAL_MODALITIES, NEG_INF, Modality,
                              build_layout, build_mask, combination_key,
                              combination_name, enumerate_combinations)

T, I, N = CANONICAL_MODALITIES


def oracle_mask(layout, present=None):
    """Independent entry-by-entry reconstruction from the attention rules."""
    n = layout.total_len
    present = set(layout.present_modalities if present is None else present)

    def visible(j):
        owner = layout.owner_of(j)
        if owner == "task":
            return True
        members = {owner} if isinstance(owner, Modality) else set(owner)
        return members <= present

    out = np.full((n, n), NEG_INF)
    for r in range(n):
        r_owner = layout.owner_of(r)
        for c in range(n):
            c_owner = layout.owner_of(c)
            if not visible(r):
                allowed = r == c
            elif r_owner == "task":
                allowed = visible(c)
            elif c_owner == "task":
                allowed = False
            elif isinstance(r_owner, frozenset):
                allowed = (r == c) or (isinstance(c_owner, Modality)
                                       and c_owner in r_owner and visible(c))
            else:  # modality row: own span only
                allowed = c_owner == r_owner
            if allowed:
                out[r, c] = 0.0
    return out


def all_presence_patterns():
    pats = []
    for bits in range(1, 8):
        pats.append([m for i, m in enumerate(CANONICAL_MODALITIES)
                     if bits >> i & 1])
    return pats


class TestCombinations:
    def test_enumeration_order_and_count(self):
        combos = enumerate_combinations([T, I, N])
        assert len(combos) == 7
        names = [combination_name(c) for c in combos]
        assert names == ["t", "i", "n", "ti", "tn", "in", "tin"]

    def test_key_sorts_by_cardinality_then_canonical(self):
        assert combination_key(frozenset([N])) < combination_key(frozenset([T, I]))
        assert combination_key(frozenset([T, I])) < combination_key(frozenset([T, N]))

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            enumerate_combinations([])


class TestLayout:
    def test_slots_and_spans_contiguous(self):
        lay = build_layout([T, N], {T: 3, N: 2})
        assert lay.task_slot == 0
        assert len(lay.comb_slots) == 3
        assert lay.total_len == 1 + 3 + 3 + 2
        spans = sorted(lay.modality_spans.values())
        end = 1 + len(lay.comb_slots)
        for start, length in spans:
            assert start == end
            end += length
        assert end == lay.total_len

    def test_without_combination_tokens(self):
        lay = build_layout([T], {T: 4}, include_combinations=False)
        assert lay.comb_slots == {}
        assert lay.total_len == 5

    def test_absent_combination_never_instantiated(self):
        lay = build_layout([T, I], {T: 2, I: 2})
        assert frozenset([N]) not in lay.comb_slots
        assert all(c <= {T, I} for c in lay.comb_slots)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            build_layout([T], {T: 0})

    def test_owner_of_covers_every_index(self):
        lay = build_layout([T, I, N], {T: 2, I: 3, N: 1})
        owners = [lay.owner_of(j) for j in range(lay.total_len)]
        assert owners[0] == "task"
        assert sum(1 for o in owners if isinstance(o, frozenset)) == 7


class TestMaskOracle:
    @pytest.mark.parametrize("pattern", all_presence_patterns(),
                             ids=lambda p: "".join(m.value for m in p))
    def test_all_patterns_all_counts(self, pattern):
        counts_options = [1, 2, 3]
        for counts in itertools.product(counts_options, repeat=len(pattern)):
            lay = build_layout(pattern, dict(zip(pattern, counts)))
            assert np.array_equal(build_mask(lay), oracle_mask(lay))

    def test_task_row_all_zero_and_column_masked(self):
        lay = build_layout([T, I, N], {T: 2, I: 2, N: 2})
        mask = build_mask(lay)
        assert np.array_equal(mask[0], np.zeros(lay.total_len))
        assert np.array_equal(mask[1:, 0], np.full(lay.total_len - 1, NEG_INF))

    def test_every_row_can_attend_somewhere(self):
        for pattern in all_presence_patterns():
            lay = build_layout(pattern, {m: 2 for m in pattern})
            mask = build_mask(lay)
            assert (mask == 0.0).any(axis=1).all()


class TestPaddedMask:
    @pytest.mark.parametrize("pattern", all_presence_patterns(),
                             ids=lambda p: "".join(m.value for m in p))
    def test_subset_matches_oracle(self, pattern):
        lay = build_layout([T, I, N], {T: 2, I: 3, N: 1})
        assert np.array_equal(build_mask(lay, present=pattern),
                              oracle_mask(lay, present=pattern))

    def test_present_rows_match_reduced_layout(self):
        # visible-token rows of the padded mask must agree entry-wise with
        # the mask of the layout that drops absent tokens outright
        full = build_layout([T, I, N], {T: 2, I: 3, N: 1})
        padded = build_mask(full, present=[T, N])
        reduced_lay = build_layout([T, N], {T: 2, N: 1})
        reduced = build_mask(reduced_lay)
        keep = [j for j in range(full.total_len)
                if _visible(full, j, {T, N})]
        assert np.array_equal(padded[np.ix_(keep, keep)], reduced)

    def test_unknown_modality_rejected(self):
        lay = build_layout([T], {T: 2})
        with pytest.raises(ValueError):
            build_mask(lay, present=[T, I])


def _visible(layout, j, present):
    owner = layout.owner_of(j)
    if owner == "task":
        return True
    members = {owner} if isinstance(owner, Modality) else set(owner)
    return members <= present
