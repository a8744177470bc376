"""Fine-tuning heads: sentence-pair classification/regression and
extractive QA with three pointer scores.

Classification builds its feature by concatenating the [CLS] output
with the first sentence representation of each provided text (so the
projection width is (1 + #texts) * hidden); with sentence
representations disabled the feature is the [CLS] row alone. QA scores
every context word twice (answer start, answer end) and every context
sentence once, each with its own learned vector, and the task loss is
the plain sum of the three cross-entropies.

Data formats: classification reads TSV lines `label<TAB>text_a` with an
optional third column for pair tasks; QA reads JSON lines with keys
context, question, answer_start_token, answer_end_token (token indices
into the tokenized context, end inclusive).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .encoder import encode_batch
from .errors import ContractError, DataError
from .model import INIT_STD, trunc_normal
from .optim import AdamState, adam_update, clip_global_norm, zero_grads
from .tensor import Tensor, backward, no_grad
from .textpipe import (CLS, SENT, SEP, PackedExample, Vocab,
                       document_from_text, segment_sentences, tokenize)


@dataclass
class ClsExample:
    packed: PackedExample
    markers: list[int]          # positions of the first [SENT] per text
    label: float                # class index or regression target
    num_texts: int


@dataclass
class QaExample:
    packed: PackedExample
    word_positions: np.ndarray  # packed positions of context words
    marker_positions: np.ndarray
    gold_start: int             # indices into word_positions
    gold_end: int
    gold_sentence: int


def _encode_sentences(text: str, vocab: Vocab) -> list[list[int]]:
    doc = document_from_text(text, vocab)
    return [s for s in doc.sentences if s]


def pack_pair(text_a: str, text_b: str | None, vocab: Vocab,
              cfg: RunConfig) -> ClsExample:
    """[CLS] a-sentences [SEP] (b-sentences [SEP]) with BERT segments."""
    texts = [t for t in (text_a, text_b) if t is not None]
    sent_groups = [_encode_sentences(t, vocab) for t in texts]
    if any(not g for g in sent_groups):
        raise DataError("classification text has no words")

    marker = 1 if cfg.sentence_reps_enabled else 0
    token_ids = np.full(cfg.seq_len, 0, dtype=np.int64)
    sentence_ids = np.full(cfg.seq_len, cfg.max_sentences, dtype=np.int64)
    segment_ids = np.zeros(cfg.seq_len, dtype=np.int64)
    markers: list[int] = []
    spans = []
    pos = 0
    token_ids[pos] = CLS
    pos += 1
    sent_slot = 0
    for seg, group in enumerate(sent_groups):
        first_of_text = True
        for words in group:
            if sent_slot >= cfg.max_sentences:
                break
            room = cfg.seq_len - pos - 1 - (len(sent_groups) - seg)
            take_n = min(len(words), room - marker)
            if take_n <= 0:
                break
            if marker:
                if first_of_text:
                    markers.append(pos)
                token_ids[pos] = SENT
                sentence_ids[pos] = sent_slot
                segment_ids[pos] = seg
                sent_pos = pos
                pos += 1
            else:
                sent_pos = -1
            start = pos
            for w in words[:take_n]:
                token_ids[pos] = w
                sentence_ids[pos] = sent_slot
                segment_ids[pos] = seg
                pos += 1
            spans.append((sent_pos, start, pos))
            sent_slot += 1
            first_of_text = False
        token_ids[pos] = SEP
        segment_ids[pos] = seg
        pos += 1
    if cfg.sentence_reps_enabled and len(markers) != len(texts):
        raise DataError("no room to pack every text in the pair")

    packed = PackedExample(
        token_ids=token_ids,
        position_ids=np.concatenate([np.arange(pos),
                                     np.zeros(cfg.seq_len - pos, np.int64)]),
        sentence_ids=sentence_ids,
        segment_ids=segment_ids,
        sentence_spans=spans,
        attention_len=pos,
        num_sentences=sent_slot,
    )
    return ClsExample(packed=packed, markers=markers, label=0.0,
                      num_texts=len(texts))


def read_cls_tsv(path: str, vocab: Vocab, cfg: RunConfig):
    """Returns (examples, label_names). Regression keeps label_names=None."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = []
    for ln, line in enumerate(lines, 1):
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise DataError(f"{path}:{ln}: expected 2 or 3 tab-separated columns")
        rows.append(cols)
    n_texts = {len(c) - 1 for c in rows}
    if len(n_texts) != 1:
        raise DataError(f"{path}: mixed single-text and pair rows")

    examples = []
    if cfg.task_type == "regression":
        label_names = None
        for cols in rows:
            ex = pack_pair(cols[1], cols[2] if len(cols) == 3 else None,
                           vocab, cfg)
            try:
                ex.label = float(cols[0])
            except ValueError as exc:
                raise DataError(f"{path}: bad regression target {cols[0]!r}") from exc
            examples.append(ex)
    else:
        label_names = sorted({c[0] for c in rows})
        index = {name: i for i, name in enumerate(label_names)}
        for cols in rows:
            ex = pack_pair(cols[1], cols[2] if len(cols) == 3 else None,
                           vocab, cfg)
            ex.label = float(index[cols[0]])
            examples.append(ex)
    return examples, label_names


def init_cls_head(cfg: RunConfig, n_outputs: int, num_texts: int,
                  rng) -> dict:
    width = cfg.hidden * (1 + (num_texts if cfg.sentence_reps_enabled else 0))
    return {
        "cls.w": Tensor(trunc_normal((width, n_outputs), INIT_STD, rng),
                        requires_grad=True),
        "cls.b": Tensor(np.zeros(n_outputs, dtype=np.float32), requires_grad=True),
    }


def cls_features(h: Tensor, examples: list[ClsExample],
                 cfg: RunConfig) -> Tensor:
    """Concatenate [CLS] and first-[SENT]-per-text rows, batchwise."""
    bsz, length, hidden = h.shape
    per = 1 + (examples[0].num_texts if cfg.sentence_reps_enabled else 0)
    flat = []
    for b, ex in enumerate(examples):
        if cfg.sentence_reps_enabled and len(ex.markers) != ex.num_texts:
            raise ContractError("example does not carry one marker per text")
        rows = [0] + (ex.markers if cfg.sentence_reps_enabled else [])
        if len(rows) != per:
            raise ContractError("inconsistent sentence-input count in batch")
        flat.extend(b * length + r for r in rows)
    gathered = T.take(h.reshape(bsz * length, hidden), np.asarray(flat))
    return gathered.reshape(bsz, per * hidden)


def classify(h: Tensor, examples: list[ClsExample], head: dict,
             cfg: RunConfig) -> tuple[Tensor, Tensor]:
    """Returns (outputs, loss). Outputs are logits [B, n_classes] for
    classification or scores [B, 1] for regression (squared error)."""
    feats = cls_features(h, examples, cfg)
    out = T.matmul(feats, head["cls.w"]) + head["cls.b"]
    if cfg.task_type == "regression":
        targets = np.asarray([[ex.label] for ex in examples],
                             dtype=out.data.dtype)
        diff = out - Tensor(targets)
        return out, T.tmean(T.mul(diff, diff))
    labels = np.asarray([int(ex.label) for ex in examples])
    return out, T.cross_entropy(out, labels)


def finetune_cls(params: dict, cfg: RunConfig, examples: list[ClsExample],
                 n_outputs: int, steps: int, seed: int = 0) -> dict:
    """Joint fine-tuning of the encoder and a fresh classifier head."""
    rng = np.random.default_rng([seed, 90])
    head = init_cls_head(cfg, n_outputs, examples[0].num_texts, rng)
    trained = dict(params)
    trained.update(head)
    for p in trained.values():
        p.requires_grad = True
    state = AdamState()
    n = len(examples)
    for step in range(steps):
        lo = (step * cfg.batch_size) % n
        batch = [examples[(lo + k) % n] for k in range(min(cfg.batch_size, n))]
        zero_grads(trained)
        h = encode_batch(params, cfg, [ex.packed for ex in batch],
                         rng, training=True)
        _, loss = classify(h, batch, head, cfg)
        backward(loss)
        clip_global_norm(trained, cfg.grad_clip)
        adam_update(trained, state, cfg.finetune_lr, cfg)
    return head


def cls_accuracy(params: dict, head: dict, cfg: RunConfig,
                 examples: list[ClsExample]) -> float:
    hits = 0
    with no_grad():
        for lo in range(0, len(examples), cfg.batch_size):
            batch = examples[lo:lo + cfg.batch_size]
            h = encode_batch(params, cfg, [ex.packed for ex in batch])
            out, _ = classify(h, batch, head, cfg)
            preds = np.argmax(out.data, axis=1)
            hits += int(sum(p == int(ex.label)
                            for p, ex in zip(preds, batch)))
    return hits / len(examples)


# -- extractive QA ------------------------------------------------------


def pack_qa(context: str, question: str, gold_start: int, gold_end: int,
            vocab: Vocab, cfg: RunConfig) -> QaExample:
    """[CLS] question [SEP] then marked context sentences, segment 1.

    Gold indices address the tokenized context words; an answer that
    falls outside the packed context (bad indices or truncation) is a
    data error.
    """
    if not cfg.sentence_reps_enabled:
        raise ContractError("QA needs sentence representations enabled")
    q_words = vocab.encode(tokenize(question))
    sents = _encode_sentences(context, vocab)
    if not sents or not q_words:
        raise DataError("QA example needs a non-empty question and context")
    n_context_words = sum(len(s) for s in sents)
    if not (0 <= gold_start <= gold_end < n_context_words):
        raise DataError(
            f"gold span [{gold_start},{gold_end}] outside context "
            f"of {n_context_words} words")

    token_ids = np.full(cfg.seq_len, 0, dtype=np.int64)
    sentence_ids = np.full(cfg.seq_len, cfg.max_sentences, dtype=np.int64)
    segment_ids = np.zeros(cfg.seq_len, dtype=np.int64)
    pos = 0
    token_ids[pos] = CLS
    pos += 1
    # leave room for [CLS], both [SEP]s and at least [SENT] + one word
    q_keep = q_words[:cfg.seq_len - 5]
    for w in q_keep:
        token_ids[pos] = w
        pos += 1
    token_ids[pos] = SEP
    pos += 1

    word_positions: list[int] = []
    marker_positions: list[int] = []
    sentence_of_word: list[int] = []
    spans = []
    slot = 0
    for words in sents:
        if slot >= cfg.max_sentences:
            break
        room = cfg.seq_len - pos - 1
        take_n = min(len(words), room - 1)
        if take_n <= 0:
            break
        token_ids[pos] = SENT
        sentence_ids[pos] = slot
        segment_ids[pos] = 1
        marker_positions.append(pos)
        sent_pos = pos
        pos += 1
        start = pos
        for w in words[:take_n]:
            token_ids[pos] = w
            sentence_ids[pos] = slot
            segment_ids[pos] = 1
            word_positions.append(pos)
            sentence_of_word.append(slot)
            pos += 1
        spans.append((sent_pos, start, pos))
        slot += 1
        if take_n < len(words):
            break
    token_ids[pos] = SEP
    segment_ids[pos] = 1
    pos += 1
    if gold_end >= len(word_positions):
        raise DataError("gold span truncated away while packing")

    packed = PackedExample(
        token_ids=token_ids,
        position_ids=np.concatenate([np.arange(pos),
                                     np.zeros(cfg.seq_len - pos, np.int64)]),
        sentence_ids=sentence_ids,
        segment_ids=segment_ids,
        sentence_spans=spans,
        attention_len=pos,
        num_sentences=slot,
    )
    return QaExample(
        packed=packed,
        word_positions=np.asarray(word_positions),
        marker_positions=np.asarray(marker_positions),
        gold_start=gold_start,
        gold_end=gold_end,
        gold_sentence=sentence_of_word[gold_start],
    )


def read_qa_jsonl(path: str, vocab: Vocab, cfg: RunConfig) -> list[QaExample]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out = []
    for ln, line in enumerate(lines, 1):
        try:
            rec = json.loads(line)
            ctx, q = rec["context"], rec["question"]
            s, e = int(rec["answer_start_token"]), int(rec["answer_end_token"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{ln}: malformed QA record: {exc}") from exc
        out.append(pack_qa(ctx, q, s, e, vocab, cfg))
    return out


def init_qa_head(cfg: RunConfig, rng) -> dict:
    return {name: Tensor(trunc_normal((cfg.hidden, 1), INIT_STD, rng),
                         requires_grad=True)
            for name in ("qa.start", "qa.end", "qa.sent")}


def qa_forward(h: Tensor, ex: QaExample, head: dict, cfg: RunConfig,
               batch_index: int = 0):
    """Loss (sum of three pointer cross-entropies) plus the predicted
    (start, end, sentence) triple under the max-answer-length pair
    search with start <= end."""
    bsz, length, hidden = h.shape
    flat = h.reshape(bsz * length, hidden)
    word_rows = T.take(flat, batch_index * length + ex.word_positions)
    sent_rows = T.take(flat, batch_index * length + ex.marker_positions)
    start_logits = T.matmul(word_rows, head["qa.start"]).reshape(-1)
    end_logits = T.matmul(word_rows, head["qa.end"]).reshape(-1)
    sent_logits = T.matmul(sent_rows, head["qa.sent"]).reshape(-1)

    loss = (T.cross_entropy(start_logits, ex.gold_start)
            + T.cross_entropy(end_logits, ex.gold_end)
            + T.cross_entropy(sent_logits, ex.gold_sentence))

    pred_start, pred_end = best_span(start_logits.data, end_logits.data,
                                     cfg.max_answer_len)
    pred_sentence = int(np.argmax(sent_logits.data))
    return loss, (pred_start, pred_end, pred_sentence)


def best_span(start_logits: np.ndarray, end_logits: np.ndarray,
              max_answer_len: int) -> tuple[int, int]:
    """Highest-scoring (start, end) with start <= end < start + window."""
    best, pair = -np.inf, (0, 0)
    for i in range(len(start_logits)):
        j_hi = min(len(end_logits), i + max_answer_len)
        for j in range(i, j_hi):
            score = start_logits[i] + end_logits[j]
            if score > best:
                best, pair = score, (i, j)
    return pair


def finetune_qa(params: dict, cfg: RunConfig, examples: list[QaExample],
                steps: int, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 91])
    head = init_qa_head(cfg, rng)
    trained = dict(params)
    trained.update(head)
    for p in trained.values():
        p.requires_grad = True
    state = AdamState()
    n = len(examples)
    for step in range(steps):
        lo = (step * cfg.batch_size) % n
        batch = [examples[(lo + k) % n] for k in range(min(cfg.batch_size, n))]
        zero_grads(trained)
        h = encode_batch(params, cfg, [ex.packed for ex in batch],
                         rng, training=True)
        acc = None
        for b, ex in enumerate(batch):
            loss, _ = qa_forward(h, ex, head, cfg, b)
            acc = loss if acc is None else acc + loss
        backward(T.mul(acc, 1.0 / len(batch)))
        clip_global_norm(trained, cfg.grad_clip)
        adam_update(trained, state, cfg.finetune_lr, cfg)
    return head


def qa_metrics(params: dict, head: dict, cfg: RunConfig,
               examples: list[QaExample]) -> dict:
    """Exact-match of the span, and how often the predicted sentence
    contains the predicted span (reported, not a training signal)."""
    em = 0
    consistent = 0
    with no_grad():
        for ex in examples:
            h = encode_batch(params, cfg, [ex.packed])
            _, (ps, pe, psent) = qa_forward(h, ex, head, cfg)
            em += int(ps == ex.gold_start and pe == ex.gold_end)
            span_sents = ex.packed.sentence_ids[ex.word_positions[ps]], \
                ex.packed.sentence_ids[ex.word_positions[pe]]
            consistent += int(span_sents[0] == psent == span_sents[1])
    n = len(examples)
    return {"n": n, "em": em / n, "sentence_consistency": consistent / n}
