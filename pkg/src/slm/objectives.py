"""Joint pretraining loss: masked words plus sentence reconstruction.

Word prediction projects encoder outputs at labeled positions through
the tied token embedding plus a bias; the reconstruction term averages
pointer cross-entropy over the N+1 steps of each example and then over
the batch. The two terms add with no weighting.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .encoder import encode_batch, extract_summary
from .errors import TrainingAbort
from .masking import IGNORE
from .reconstructor import decode_sequence, pointer_logits, pointer_nll
from .tensor import Tensor
from .textpipe import PackedExample

log = logging.getLogger(__name__)


@dataclass
class LossBundle:
    l_mlm: float
    l_slm: float
    total: float
    masked_count: int
    slm_steps: int
    loss: Tensor
    pointer_distributions: list[np.ndarray] = field(default_factory=list)


def mlm_loss(h: Tensor, params: dict, labels: np.ndarray) -> tuple[Tensor, int]:
    """Mean cross-entropy at labeled positions; zero when none exist."""
    bsz, length, hidden = h.shape
    flat_labels = labels.reshape(-1)
    sel = np.flatnonzero(flat_labels != IGNORE)
    if sel.size == 0:
        log.warning("mlm_loss: no labeled positions in this batch")
        zero = Tensor(np.asarray(0.0, dtype=h.data.dtype))
        return zero, 0
    rows = T.take(h.reshape(bsz * length, hidden), sel)
    logits = T.matmul(rows, params["emb.token"].swapaxes(0, 1)) + params["mlm.bias"]
    return T.cross_entropy(logits, flat_labels[sel]), int(sel.size)


def total_loss(l_mlm: Tensor, l_slm: Tensor) -> Tensor:
    """Unweighted sum of the two objectives."""
    return l_mlm + l_slm


def pretrain_bundle(params: dict, cfg: RunConfig,
                    examples: list[PackedExample], rng=None,
                    training: bool = False,
                    collect_pointers: bool = False) -> LossBundle:
    """Forward pass over one batch of masked (and possibly shuffled)
    examples, returning losses plus the scalar graph root."""
    h = encode_batch(params, cfg, examples, rng, training)

    labels = np.stack([
        ex.mlm_labels if ex.mlm_labels is not None
        else np.full_like(ex.token_ids, IGNORE)
        for ex in examples])
    l_mlm, masked_count = mlm_loss(h, params, labels)

    pointer_dists: list[np.ndarray] = []
    slm_steps = 0
    if cfg.sr_enabled:
        per_example = []
        for b, ex in enumerate(examples):
            if ex.order_targets is None:
                raise TrainingAbort(
                    "sr_enabled but example carries no order targets")
            c = extract_summary(h, ex, b)
            w = decode_sequence(params, cfg, c, ex.order_targets, rng, training)
            per_example.append(pointer_nll(w, c, ex.order_targets))
            slm_steps += len(ex.order_targets)
            if collect_pointers:
                logits = pointer_logits(w, c).data
                shifted = logits - logits.max(axis=-1, keepdims=True)
                e = np.exp(shifted)
                pointer_dists.append(e / e.sum(axis=-1, keepdims=True))
        acc = per_example[0]
        for term in per_example[1:]:
            acc = acc + term
        l_slm = T.mul(acc, 1.0 / len(per_example))
    else:
        l_slm = Tensor(np.asarray(0.0, dtype=h.data.dtype))

    loss = total_loss(l_mlm, l_slm)
    if not np.isfinite(loss.data):
        raise TrainingAbort("non-finite training loss")
    return LossBundle(
        l_mlm=float(l_mlm.data),
        l_slm=float(l_slm.data),
        total=float(loss.data),
        masked_count=masked_count,
        slm_steps=slm_steps,
        loss=loss,
        pointer_distributions=pointer_dists,
    )
