"""Shared test fixtures: tiny configs, random documents, and an
independent physical-shuffle constructor used as the equivalence oracle."""
import numpy as np

from slm.config import RunConfig
from slm.masking import MaskingConfig, apply_span_masking
from slm.model import init_params
from slm.shuffling import order_targets
from slm.textpipe import CLS, NUM_SPECIALS, PAD, SEP, Document, PackedExample, pack_example


def small_config(**kw) -> RunConfig:
    base = dict(encoder_layers=2, decoder_layers=1, heads=2, hidden=16,
                ffn=32, seq_len=32, max_sentences=6, vocab_size=40,
                dropout=0.0, attn_dropout=0.0)
    base.update(kw)
    return RunConfig(**base).validate()


def random_document(rng, n_sents=None, max_words=6, vocab_size=40) -> Document:
    n = int(n_sents if n_sents is not None else rng.integers(1, 5))
    return Document([
        [int(w) for w in rng.integers(NUM_SPECIALS, vocab_size,
                                      size=int(rng.integers(1, max_words + 1)))]
        for _ in range(n)])


def build_params(cfg: RunConfig, seed=0, dtype=np.float32):
    return init_params(cfg, np.random.default_rng(seed), dtype)


def masked_example(cfg: RunConfig, rng, n_sents=3):
    doc = random_document(rng, n_sents=n_sents, vocab_size=cfg.vocab_size)
    ex = pack_example(doc, cfg.seq_len, cfg.max_sentences, rng)
    mask_cfg = MaskingConfig(p_geom=cfg.p_geom, max_span=cfg.max_span,
                             mask_rate=cfg.mask_rate)
    return apply_span_masking(ex, mask_cfg, rng, cfg.vocab_size)


def physical_shuffle(ex: PackedExample, perm: np.ndarray) -> PackedExample:
    """Physically reorder sentence blocks in memory, the way a literal
    reading of "shuffle the sentences" would; built independently of
    apply_shuffle so the two can check each other.

    Tokens and labels move together; position ids are the natural
    sequence; sentence ids number the blocks in their new order; targets
    are the standard ones for ``perm``. The perm recorded on the result
    is the identity because display order now coincides with memory
    order.
    """
    n = ex.num_sentences
    seq_len = ex.token_ids.shape[0]
    token_ids = np.full(seq_len, PAD, dtype=np.int64)
    labels_src = ex.mlm_labels if ex.mlm_labels is not None else None
    labels = None if labels_src is None else np.full(seq_len, -1, dtype=np.int64)
    sentence_ids = np.full(seq_len, ex.sentence_ids.max(), dtype=np.int64)
    occupant = np.empty(n, dtype=np.int64)
    occupant[np.asarray(perm)] = np.arange(n)

    pos = 0
    token_ids[pos] = CLS
    pos += 1
    spans = []
    for slot in range(n):
        s = occupant[slot]
        sent_pos, start, end = ex.sentence_spans[s]
        block = list(range(sent_pos, end)) if sent_pos >= 0 else list(range(start, end))
        marker = pos if sent_pos >= 0 else -1
        for src in block:
            token_ids[pos] = ex.token_ids[src]
            sentence_ids[pos] = slot
            if labels is not None:
                labels[pos] = labels_src[src]
            pos += 1
        word_start = marker + 1 if marker >= 0 else marker
        spans.append((marker, word_start, pos))
    token_ids[pos] = SEP
    attention_len = pos + 1
    position_ids = np.zeros(seq_len, dtype=np.int64)
    position_ids[:attention_len] = np.arange(attention_len)

    # display order == memory order here, so spans are listed per slot;
    # remap them back to "per displayed sentence" which is what the
    # field means for a packed example
    return PackedExample(
        token_ids=token_ids,
        position_ids=position_ids,
        sentence_ids=sentence_ids,
        segment_ids=np.zeros(seq_len, dtype=np.int64),
        sentence_spans=spans,
        attention_len=attention_len,
        num_sentences=n,
        mlm_labels=labels,
        order_targets=order_targets(np.asarray(perm), n),
        shuffled=True,
        perm=np.arange(n),
    )
