"""Token-sequence layout and attention-mask construction.

The multimodal sequence for one sample is ordered as:

    [task token | one token per present modality combination | per-modality spans]

A combination token exists only when every member modality is present in
the sample; absent combinations are dropped from the sequence entirely.
The additive attention mask restricts each combination token to its member
modalities (plus itself), each modality token to its own modality span,
and lets the task token read everything while writing to nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

import numpy as np

NEG_INF = -1e9  # finite stand-in for -inf; keeps softmax free of NaNs


class Modality(str, Enum):
    TIMESERIES = "t"
    IMAGE = "i"
    NOTE = "n"


#: canonical modality order (t, i, n)
CANONICAL_MODALITIES: Tuple[Modality, ...] = (
    Modality.TIMESERIES, Modality.IMAGE, Modality.NOTE)

Combination = FrozenSet[Modality]


def _canonical_index(m: Modality) -> int:
    return CANONICAL_MODALITIES.index(m)


def combination_key(c: Combination) -> tuple:
    """Sort key: ascending cardinality, then canonical modality order."""
    return (len(c), tuple(sorted(_canonical_index(m) for m in c)))


def combination_name(c: Combination) -> str:
    return "".join(m.value for m in sorted(c, key=_canonical_index))


def enumerate_combinations(modalities: Iterable[Modality]) -> List[Combination]:
    """All nonempty subsets of `modalities` in canonical order."""
    mods = sorted(set(modalities), key=_canonical_index)
    if not mods:
        raise ValueError("modality set must be nonempty")
    combos: List[Combination] = []
    for bits in range(1, 1 << len(mods)):
        combos.append(frozenset(m for i, m in enumerate(mods) if bits >> i & 1))
    combos.sort(key=combination_key)
    return combos


@dataclass(frozen=True)
class SequenceLayout:
    """Index map of one assembled token sequence."""

    comb_slots: Mapping[Combination, int]
    modality_spans: Mapping[Modality, Tuple[int, int]]  # modality -> (start, length)
    total_len: int
    task_slot: int = 0

    @property
    def combinations(self) -> List[Combination]:
        return sorted(self.comb_slots, key=combination_key)

    @property
    def present_modalities(self) -> List[Modality]:
        return sorted(self.modality_spans, key=_canonical_index)

    def owner_of(self, j: int):
        """Return what token index j is: 'task', a Combination, or a Modality."""
        if j == self.task_slot:
            return "task"
        for c, slot in self.comb_slots.items():
            if slot == j:
                return c
        for m, (start, length) in self.modality_spans.items():
            if start <= j < start + length:
                return m
        raise IndexError(f"index {j} outside layout of length {self.total_len}")


def build_layout(present: Iterable[Modality],
                 token_counts: Mapping[Modality, int],
                 include_combinations: bool = True) -> SequenceLayout:
    """Lay out (task, combinations ⊆ present, modality spans) contiguously."""
    present_set = set(present)
    if not present_set:
        raise ValueError("at least one modality must be present")
    for m in present_set:
        if token_counts.get(m, 0) <= 0:
            raise ValueError(f"token count for present modality {m.value} must be positive")

    idx = 1
    comb_slots: Dict[Combination, int] = {}
    if include_combinations:
        for c in enumerate_combinations(present_set):
            comb_slots[c] = idx
            idx += 1
    spans: Dict[Modality, Tuple[int, int]] = {}
    for m in sorted(present_set, key=_canonical_index):
        spans[m] = (idx, token_counts[m])
        idx += token_counts[m]
    return SequenceLayout(comb_slots=comb_slots, modality_spans=spans, total_len=idx)


def build_mask(layout: SequenceLayout, neg: float = NEG_INF,
               present: Optional[Iterable[Modality]] = None) -> np.ndarray:
    """Additive attention mask over {0, neg} for the given layout.

    Row semantics (row attends to column where the entry is 0):
      - task row: everything
      - combination row: member-modality spans and itself
      - modality row: its own span (a modality behaves as the singleton set)
      - column 0 is suppressed for every row > 0 (task token writes nothing)

    When `present` restricts the layout to a modality subset, tokens outside
    that subset (missing-modality spans and combinations with a missing
    member) are invisible: their columns are suppressed for every other row
    and their own rows attend only to themselves. This lets one padded
    layout serve samples with different presence patterns.
    """
    n = layout.total_len
    mask = np.full((n, n), neg, dtype=np.float64)
    present_set = (set(layout.present_modalities) if present is None
                   else set(present))
    unknown = present_set - set(layout.present_modalities)
    if unknown:
        raise ValueError(f"modalities {sorted(m.value for m in unknown)} "
                         f"not in the layout")

    mask[layout.task_slot, :] = 0.0
    for c, i in layout.comb_slots.items():
        mask[i, i] = 0.0
        if c <= present_set:
            for m in c:
                start, length = layout.modality_spans[m]
                mask[i, start:start + length] = 0.0

    for m, (start, length) in layout.modality_spans.items():
        mask[start:start + length, start:start + length] = 0.0

    # hide tokens whose modalities are missing from everyone else
    hidden = [i for c, i in layout.comb_slots.items() if not c <= present_set]
    for m, (start, length) in layout.modality_spans.items():
        if m not in present_set:
            hidden.extend(range(start, start + length))
    for j in hidden:
        mask[:, j] = neg
        mask[j, :] = neg
        mask[j, j] = 0.0
    mask[layout.task_slot, layout.task_slot] = 0.0

    mask[1:, layout.task_slot] = neg
    return mask
