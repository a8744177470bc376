"""Pretraining loop and greedy-reordering evaluation.

One epoch is one pass over the packed examples in their packed order;
what changes between epochs is the sampling: masking positions, the
batch-level shuffle decisions, and the permutations are all drawn from
a counter-based stream seeded by (seed, purpose, epoch, step), so a run
is reproducible end to end and two runs with the same seed, config and
corpus write byte-identical metrics when timing is disabled.

Metrics are an append-only CSV (step,lr,l_mlm,l_slm,total,shuffled,
tokens_per_s) preceded by `# key=value` lines echoing the full config.
"""
from __future__ import annotations

import logging
import os
import time

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig, config_echo
from .encoder import encode_batch, extract_summary
from .errors import DataError
from .masking import MaskingConfig, apply_span_masking
from .model import init_params, param_shapes
from .objectives import pretrain_bundle
from .optim import AdamState, adam_update, clip_global_norm, lr_schedule, zero_grads
from .reconstructor import greedy_unshuffle
from .shuffling import (apply_shuffle, batch_shuffle_mask, identity_record,
                        sample_permutation)
from .tensor import backward, no_grad
from .textpipe import Document, PackedExample, Vocab, merge_to_max, pack_example

log = logging.getLogger(__name__)

# rng stream tags: keep the packing, sampling and dropout streams apart
_PACK, _SAMPLE, _DROPOUT, _EVAL = 1, 2, 3, 4

METRICS_COLUMNS = "step,lr,l_mlm,l_slm,total,shuffled,tokens_per_s"


def pack_corpus(docs: list[Document], cfg: RunConfig) -> list[PackedExample]:
    """Merge over-long documents and pack every doc that fits."""
    rng = np.random.default_rng([cfg.seed, _PACK])
    out = []
    for doc in docs:
        doc = merge_to_max(doc, cfg.max_sentences, rng)
        ex = pack_example(doc, cfg.seq_len, cfg.max_sentences, rng,
                          use_sentence_tokens=cfg.sentence_reps_enabled)
        if ex is not None:
            out.append(ex)
    if not out:
        raise DataError("no document in the corpus fits the sequence length")
    return out


def prepare_batch(packed: list[PackedExample], step: int, cfg: RunConfig,
                  mask_cfg: MaskingConfig) -> tuple[list[PackedExample], bool]:
    """Mask and (for a coin-flip fraction of batches) shuffle one batch.

    Examples cycle in packed order; the per-step rng is seeded with the
    epoch so every pass over the data redraws masks and permutations.
    """
    n = len(packed)
    start = (step * cfg.batch_size) % n
    epoch = (step * cfg.batch_size) // n
    rng = np.random.default_rng([cfg.seed, _SAMPLE, epoch, step])
    # shuffling needs the sentence markers, so without them the batch
    # coin is never flipped
    shuffle_batch = (cfg.sentence_reps_enabled
                     and batch_shuffle_mask(step, cfg.shuffle_fraction, rng))
    batch = []
    for k in range(cfg.batch_size):
        ex = packed[(start + k) % n]
        ex = apply_span_masking(ex, mask_cfg, rng, cfg.vocab_size)
        if cfg.sentence_reps_enabled:
            if shuffle_batch:
                perm = sample_permutation(ex.num_sentences, rng)
                ex = apply_shuffle(ex, perm, cfg.position_mode)
            else:
                ex = identity_record(ex)
        batch.append(ex)
    return batch, shuffle_batch


def masking_config(cfg: RunConfig) -> MaskingConfig:
    return MaskingConfig(p_geom=cfg.p_geom, max_span=cfg.max_span,
                         mask_rate=cfg.mask_rate, replace_mask=cfg.replace_mask,
                         replace_random=cfg.replace_random,
                         replace_keep=cfg.replace_keep).validate()


def train_loop(docs: list[Document], cfg: RunConfig, out_dir: str,
               params: dict | None = None) -> dict:
    """Run cfg.steps optimizer steps and return summary statistics."""
    os.makedirs(out_dir, exist_ok=True)
    packed = pack_corpus(docs, cfg)
    mask_cfg = masking_config(cfg)
    if params is None:
        params = init_params(cfg, np.random.default_rng(cfg.seed))
    for p in params.values():
        p.requires_grad = True
    state = AdamState()

    metrics_path = os.path.join(out_dir, "metrics.csv")
    last = {}
    shuffled_batches = 0
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as metrics:
        for key, value in config_echo(cfg):
            metrics.write(f"# {key}={value}\n")
        metrics.write(METRICS_COLUMNS + "\n")

        for step in range(cfg.steps):
            t0 = time.perf_counter() if cfg.timing_enabled else 0.0
            zero_grads(params)
            tokens = 0
            shuffled = False
            drop_rng = np.random.default_rng([cfg.seed, _DROPOUT, step])
            for micro in range(cfg.accum_steps):
                batch, shuffled = prepare_batch(
                    packed, step * cfg.accum_steps + micro, cfg, mask_cfg)
                bundle = pretrain_bundle(params, cfg, batch, drop_rng,
                                         training=True)
                backward(bundle.loss)
                tokens += sum(ex.attention_len for ex in batch)
            if cfg.accum_steps > 1:
                for p in params.values():
                    if p.grad is not None:
                        p.grad /= cfg.accum_steps
            clip_global_norm(params, cfg.grad_clip)
            lr = lr_schedule(step, cfg)
            adam_update(params, state, lr, cfg)
            shuffled_batches += int(shuffled)

            if cfg.timing_enabled:
                dt = max(time.perf_counter() - t0, 1e-9)
                tokens_per_s = tokens / dt
            else:
                tokens_per_s = 0.0
            metrics.write(f"{step},{lr:.10g},{bundle.l_mlm:.6f},"
                          f"{bundle.l_slm:.6f},{bundle.total:.6f},"
                          f"{int(shuffled)},{tokens_per_s:.6g}\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d lr %.3g mlm %.4f slm %.4f total %.4f",
                         step, lr, bundle.l_mlm, bundle.l_slm, bundle.total)
            last = {"step": step, "l_mlm": bundle.l_mlm,
                    "l_slm": bundle.l_slm, "total": bundle.total}
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt-{step + 1}.bin"),
                                cfg, params, step + 1, state)

    final_path = os.path.join(out_dir, "ckpt-final.bin")
    save_checkpoint(final_path, cfg, params, cfg.steps, state)
    last["checkpoint"] = final_path
    last["metrics"] = metrics_path
    last["shuffled_batches"] = shuffled_batches
    last["params"] = params
    return last


def kendall_tau(pred: np.ndarray, gold: np.ndarray) -> float:
    """Rank correlation between two same-length permutations.

    Single-element orders have no pairs to compare and count as perfect
    agreement.
    """
    n = len(pred)
    if n < 2:
        return 1.0
    concordant = 0
    total = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += 1
            agree = (pred[i] < pred[j]) == (gold[i] < gold[j])
            concordant += int(agree)
    return (2.0 * concordant - total) / total


def evaluate_unshuffle(params: dict, cfg: RunConfig,
                       packed: list[PackedExample], seed: int = 0) -> dict:
    """Shuffle each example, greedily reorder it, and score the result.

    Returns exact-match rate and mean Kendall tau of the predicted
    display-slot order of each original document against the truth.
    """
    rng = np.random.default_rng([seed, _EVAL])
    shuffled = []
    for ex in packed:
        perm = sample_permutation(ex.num_sentences, rng)
        shuffled.append(apply_shuffle(ex, perm, cfg.position_mode))

    em = 0
    taus = []
    with no_grad():
        for lo in range(0, len(shuffled), cfg.batch_size):
            chunk = shuffled[lo:lo + cfg.batch_size]
            h = encode_batch(params, cfg, chunk)
            for b, ex in enumerate(chunk):
                c = extract_summary(h, ex, b)
                pred = greedy_unshuffle(params, cfg, c)
                em += int(np.array_equal(pred, ex.perm))
                taus.append(kendall_tau(pred, ex.perm))
    n = len(shuffled)
    return {"n": n, "em": em / n, "tau": float(np.mean(taus))}
