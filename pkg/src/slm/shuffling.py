"""Sentence shuffling without moving tokens.

A permutation assigns each memory sentence s to a display slot perm[s].
Tokens stay where they are; the model perceives the rearrangement only
through its embeddings. In ``resequence`` mode each sentence receives
the consecutive position ids its slot occupies in the rearranged
sequence, so nothing reveals the original order. In ``travel`` mode the
original position ids stay with their sentences, which leaks the answer
through position embeddings (kept as a switch for studying exactly that
effect); the rearrangement is then conveyed by the sentence ids alone.

Reconstruction targets index the candidate matrix C, whose rows follow
the display order: row 0 is [CLS], row k+1 is the sentence shown in
slot k, the last row is [SEP]. The sentence originally at position i
sits in slot perm[i], hence target perm[i] + 1; the final step targets
[SEP]. Physically reordering the sentence blocks in memory and
numbering positions sequentially is the equivalent formulation, and the
two must produce identical losses.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .textpipe import PackedExample

POSITION_MODES = ("resequence", "travel")


@dataclass
class ShuffleRecord:
    perm: np.ndarray
    shuffled: bool
    order_targets: np.ndarray


def sample_permutation(n: int, rng) -> np.ndarray:
    """Uniform permutation of {0..n-1}; n=1 gives the identity."""
    if n < 1:
        raise ContractError("need at least one sentence to permute")
    return rng.permutation(n)


def order_targets(perm: np.ndarray, n: int) -> np.ndarray:
    """Pointer targets per reconstruction step, 1-based into C.

    targets[i] = slot of the sentence originally at position i, shifted
    past the leading [CLS] row; targets[n] points at the [SEP] row n+1.
    Pointing a step at row 0 ([CLS]) is never correct.
    """
    perm = np.asarray(perm)
    if perm.shape != (n,) or sorted(perm.tolist()) != list(range(n)):
        raise ContractError("perm must be a permutation of 0..n-1")
    targets = np.empty(n + 1, dtype=np.int64)
    targets[:n] = perm + 1
    targets[n] = n + 1
    return targets


def apply_shuffle(ex: PackedExample, perm: np.ndarray,
                  position_mode: str = "resequence",
                  shuffled: bool = True) -> PackedExample:
    """Re-identify an example's sentences according to ``perm``.

    Token memory (and MLM labels) never move. [CLS] keeps position 0
    and [SEP] its final position in both modes.
    """
    if position_mode not in POSITION_MODES:
        raise ContractError(f"unknown position_mode {position_mode!r}")
    n = ex.num_sentences
    perm = np.asarray(perm)
    if perm.shape != (n,) or sorted(perm.tolist()) != list(range(n)):
        raise ContractError("perm must be a permutation of the sentences")

    sentence_ids = ex.sentence_ids.copy()
    position_ids = ex.position_ids.copy()

    lengths = np.array(
        [(end - start) + (1 if sent_pos >= 0 else 0)
         for sent_pos, start, end in ex.sentence_spans], dtype=np.int64)
    slot_lengths = np.empty(n, dtype=np.int64)
    slot_lengths[perm] = lengths
    slot_starts = np.ones(n, dtype=np.int64)
    slot_starts[1:] += np.cumsum(slot_lengths)[:-1]

    for s, (sent_pos, start, end) in enumerate(ex.sentence_spans):
        first = sent_pos if sent_pos >= 0 else start
        if position_mode == "resequence":
            position_ids[first:end] = np.arange(
                slot_starts[perm[s]], slot_starts[perm[s]] + lengths[s])
        sentence_ids[first:end] = perm[s]

    return replace(
        ex,
        position_ids=position_ids,
        sentence_ids=sentence_ids,
        order_targets=order_targets(perm, n),
        shuffled=shuffled,
        perm=perm.copy(),
    )


def identity_record(ex: PackedExample) -> PackedExample:
    """Unshuffled view: identity permutation, targets still emitted."""
    return apply_shuffle(ex, np.arange(ex.num_sentences), shuffled=False)


def batch_shuffle_mask(batch_index: int, fraction: float, rng) -> bool:
    """Seeded Bernoulli(fraction) decision for one batch."""
    if not 0 <= fraction <= 1:
        raise ContractError("shuffle fraction must lie in [0, 1]")
    del batch_index  # the caller's rng stream already encodes it
    return bool(rng.random() < fraction)


def summary_positions(ex: PackedExample) -> np.ndarray:
    """Row positions of [CLS], slot-ordered [SENT] markers, and [SEP].

    Slot k's marker is the [SENT] of the sentence with perm[s] = k; an
    unshuffled example yields memory order.
    """
    n = ex.num_sentences
    perm = ex.perm if ex.perm is not None else np.arange(n)
    marker_of_sentence = np.array(
        [sp[0] for sp in ex.sentence_spans], dtype=np.int64)
    if np.any(marker_of_sentence < 0):
        raise ContractError("example was packed without sentence tokens")
    occupant = np.empty(n, dtype=np.int64)
    occupant[perm] = np.arange(n)
    rows = np.empty(n + 2, dtype=np.int64)
    rows[0] = 0
    rows[1:n + 1] = marker_of_sentence[occupant]
    rows[n + 1] = ex.attention_len - 1
    return rows
