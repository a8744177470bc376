import logging

import numpy as np

from slm.encoder import encode_batch
from slm.masking import IGNORE
from slm.objectives import mlm_loss, pretrain_bundle, total_loss
from slm.shuffling import apply_shuffle, identity_record, sample_permutation
from slm.tensor import Tensor, backward

from util import build_params, masked_example, small_config


def bundle_inputs(cfg, seed=0, n_examples=2, shuffle=True):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_examples):
        ex = masked_example(cfg, rng, n_sents=3)
        if shuffle:
            ex = apply_shuffle(ex, sample_permutation(3, rng))
        else:
            ex = identity_record(ex)
        out.append(ex)
    return out


def test_mlm_uniform_logits_give_log_vocab():
    # zeroed token table and bias make every logit 0, so the loss is
    # exactly log V no matter which rows are labeled
    cfg = small_config()
    params = build_params(cfg)
    params["emb.token"].data[:] = 0.0
    rng = np.random.default_rng(1)
    ex = masked_example(cfg, rng)
    h = encode_batch(params, cfg, [ex])
    loss, count = mlm_loss(h, params, np.stack([ex.mlm_labels]))
    assert count == int((ex.mlm_labels != IGNORE).sum()) > 0
    np.testing.assert_allclose(float(loss.data), np.log(cfg.vocab_size),
                               rtol=1e-6)


def test_mlm_single_label_equals_row_cross_entropy():
    from slm import tensor as T
    cfg = small_config()
    params = build_params(cfg, seed=2)
    rng = np.random.default_rng(3)
    ex = masked_example(cfg, rng)
    labels = np.full_like(ex.token_ids, IGNORE)
    pos = int(np.flatnonzero(ex.mlm_labels != IGNORE)[0])
    labels[pos] = ex.mlm_labels[pos]
    h = encode_batch(params, cfg, [ex])
    loss, count = mlm_loss(h, params, np.stack([labels]))
    assert count == 1
    row = Tensor(h.data[0, pos])
    logits = T.matmul(row.reshape(1, -1),
                      params["emb.token"].swapaxes(0, 1)) + params["mlm.bias"]
    expect = T.cross_entropy(logits.reshape(-1), int(labels[pos]))
    np.testing.assert_allclose(float(loss.data), float(expect.data), rtol=1e-6)


def test_mlm_no_labels_returns_zero_and_warns(caplog):
    cfg = small_config()
    params = build_params(cfg)
    rng = np.random.default_rng(4)
    ex = masked_example(cfg, rng)
    labels = np.full((1, cfg.seq_len), IGNORE)
    h = encode_batch(params, cfg, [ex])
    with caplog.at_level(logging.WARNING):
        loss, count = mlm_loss(h, params, labels)
    assert count == 0
    assert float(loss.data) == 0.0
    assert any("no labeled positions" in r.message for r in caplog.records)


def test_total_is_exact_float_sum():
    a = Tensor(np.asarray(1.25, dtype=np.float32))
    b = Tensor(np.asarray(0.5, dtype=np.float32))
    assert float(total_loss(a, b).data) == 1.75


def test_bundle_totals_are_consistent():
    cfg = small_config(sr_enabled=True)
    params = build_params(cfg, seed=5)
    bundle = pretrain_bundle(params, cfg, bundle_inputs(cfg, seed=6))
    assert bundle.total == np.float32(bundle.l_mlm) + np.float32(bundle.l_slm)
    assert bundle.l_slm > 0.0
    assert bundle.slm_steps == 8  # two examples, three sentences each
    assert float(bundle.loss.data) == bundle.total


def test_sr_disabled_total_is_mlm_and_decoder_gets_no_gradient():
    cfg = small_config(sr_enabled=False)
    params = build_params(cfg, seed=7)
    for p in params.values():
        p.requires_grad = True
    bundle = pretrain_bundle(params, cfg, bundle_inputs(cfg, seed=8))
    assert bundle.l_slm == 0.0
    assert bundle.total == bundle.l_mlm
    backward(bundle.loss)
    for name, p in params.items():
        if name.startswith("dec."):
            assert p.grad is None or not np.any(p.grad), name
        if name.startswith("emb.token"):
            assert p.grad is not None and np.any(p.grad)


def test_gradient_splits_additively_across_heads():
    # linearity of backward: grad(mlm + slm) equals grad(mlm alone) plus
    # grad(slm alone); the lone terms come from switching the
    # reconstructor off and from stripping the word labels
    import dataclasses

    cfg = small_config(sr_enabled=True)
    examples = bundle_inputs(cfg, seed=9, n_examples=1)
    no_labels = [dataclasses.replace(ex, mlm_labels=None) for ex in examples]

    def grads(run_cfg, batch, warn_ok=False):
        params = build_params(cfg, seed=10)
        for p in params.values():
            p.requires_grad = True
        bundle = pretrain_bundle(params, run_cfg, batch)
        backward(bundle.loss)
        return {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for n, p in params.items()}

    g_total = grads(cfg, examples)
    g_mlm = grads(small_config(sr_enabled=False), examples)
    g_slm = grads(cfg, no_labels)

    for n in g_total:
        np.testing.assert_allclose(g_total[n], g_mlm[n] + g_slm[n],
                                   rtol=1e-4, atol=1e-6, err_msg=n)
    # word prediction never reaches the decoder
    for n in g_mlm:
        if n.startswith("dec."):
            np.testing.assert_array_equal(g_mlm[n], 0.0)


def test_initial_mlm_loss_near_log_vocab():
    cfg = small_config(vocab_size=200, seq_len=64, max_sentences=8)
    params = build_params(cfg, seed=11)
    rng = np.random.default_rng(12)
    examples = []
    for _ in range(8):
        ex = masked_example(cfg, rng, n_sents=4)
        examples.append(identity_record(ex))
    bundle = pretrain_bundle(params, cfg, examples)
    assert abs(bundle.l_mlm - np.log(cfg.vocab_size)) < 0.1 * np.log(cfg.vocab_size)


def test_unshuffled_batch_still_trains_pointer():
    # identity permutations keep the reconstruction term active with
    # targets 1..N then SEP, so a fraction-0 run still defines l_slm
    cfg = small_config(sr_enabled=True)
    params = build_params(cfg, seed=13)
    bundle = pretrain_bundle(params, cfg, bundle_inputs(cfg, seed=14, shuffle=False))
    assert bundle.l_slm > 0.0
    for ex in bundle_inputs(cfg, seed=14, shuffle=False):
        np.testing.assert_array_equal(ex.order_targets, [1, 2, 3, 4])
