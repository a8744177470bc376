"""Sentence-representation export and cosine nearest-neighbor search.

Exports the encoder output at every [SENT] position of an unshuffled,
unmasked corpus into a flat matrix with one JSON record per row (doc
id, sentence index, sentence text, previous sentence text). Retrieval
is an exact brute-force cosine scan done in double precision, self
excluded, ties broken by record order.

Index file layout: two little-endian u64 (n, hidden) followed by the
raw row-major float32 matrix; records live next to it in a .jsonl
sidecar.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .encoder import encode_batch
from .errors import ContractError, DataError, FormatError
from .tensor import no_grad
from .textpipe import Vocab, pack_example, tokenize, Document


@dataclass
class EmbeddingIndex:
    matrix: np.ndarray          # [n, hidden] float32
    records: list[dict]

    def __post_init__(self):
        if len(self.records) != self.matrix.shape[0]:
            raise ContractError("index records out of step with matrix rows")


def _merge_with_texts(token_sents, text_sents, max_sentences, rng):
    """Uniform adjacent-pair merging applied to tokens and texts alike."""
    tokens = list(token_sents)
    texts = list(text_sents)
    while len(tokens) > max_sentences:
        i = int(rng.integers(0, len(tokens) - 1))
        tokens[i] = tokens[i] + tokens[i + 1]
        texts[i] = texts[i] + " " + texts[i + 1]
        del tokens[i + 1]
        del texts[i + 1]
    return tokens, texts


def export_reps(params: dict, cfg: RunConfig,
                docs: list[list[str]], vocab: Vocab) -> EmbeddingIndex:
    """One row per packed sentence of every document, in corpus order."""
    if not cfg.sentence_reps_enabled:
        raise ContractError("export needs sentence representations enabled")
    rng = np.random.default_rng([cfg.seed, 5])
    rows = []
    records = []
    with no_grad():
        for doc_id, sent_texts in enumerate(docs):
            token_sents = [vocab.encode(tokenize(t)) for t in sent_texts]
            keep = [(tok, txt) for tok, txt in zip(token_sents, sent_texts)
                    if tok]
            if not keep:
                continue
            token_sents, sent_texts = zip(*keep)
            token_sents, sent_texts = _merge_with_texts(
                token_sents, sent_texts, cfg.max_sentences, rng)
            ex = pack_example(Document(list(token_sents)), cfg.seq_len,
                              cfg.max_sentences, rng)
            if ex is None:
                continue
            h = encode_batch(params, cfg, [ex])
            for k, (sent_pos, _, _) in enumerate(ex.sentence_spans):
                rows.append(h.data[0, sent_pos].astype(np.float32))
                records.append({
                    "doc": doc_id,
                    "sent": k,
                    "text": sent_texts[k],
                    "prev": sent_texts[k - 1] if k > 0 else "",
                })
    if not rows:
        raise DataError("corpus produced no sentence representations")
    return EmbeddingIndex(matrix=np.stack(rows), records=records)


def save_index(path: str, index: EmbeddingIndex) -> None:
    n, hidden = index.matrix.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", n, hidden))
        fh.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())
    with open(path + ".jsonl", "w", encoding="utf-8") as fh:
        for rec in index.records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_index(path: str) -> EmbeddingIndex:
    try:
        with open(path, "rb") as fh:
            head = fh.read(16)
            if len(head) != 16:
                raise FormatError(f"{path}: truncated index header")
            n, hidden = struct.unpack("<QQ", head)
            raw = fh.read(4 * n * hidden)
        if len(raw) != 4 * n * hidden:
            raise FormatError(f"{path}: truncated index payload")
        with open(path + ".jsonl", encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read index {path}: {exc}") from exc
    matrix = np.frombuffer(raw, dtype="<f4").reshape(n, hidden)
    return EmbeddingIndex(matrix=matrix.astype(np.float32), records=records)


def nearest_neighbors(index: EmbeddingIndex, query_row: int,
                      k: int) -> list[tuple[int, float]]:
    """Top-k rows by cosine similarity to the query row, best first."""
    n = index.matrix.shape[0]
    if not 0 <= query_row < n:
        raise ContractError(f"query row {query_row} outside [0, {n})")
    if k >= n:
        raise ContractError(f"k={k} must leave room to exclude self (n={n})")
    m = index.matrix.astype(np.float64)
    norms = np.maximum(np.linalg.norm(m, axis=1), 1e-300)
    unit = m / norms[:, None]
    sims = unit @ unit[query_row]
    sims[query_row] = -np.inf
    order = np.argsort(-sims, kind="stable")[:k]
    return [(int(i), float(sims[i])) for i in order]


def neighbor_report(index: EmbeddingIndex, query_row: int,
                    neighbors: list[tuple[int, float]]) -> str:
    """Ranked plain-text listing, each hit shown with its previous
    sentence for context."""
    q = index.records[query_row]
    lines = [f"query [doc {q['doc']} sent {q['sent']}]: {q['text']}"]
    if q["prev"]:
        lines.append(f"  (previous: {q['prev']})")
    for rank, (row, sim) in enumerate(neighbors, 1):
        r = index.records[row]
        lines.append(f"{rank}. sim={sim:.4f} [doc {r['doc']} sent {r['sent']}]"
                     f" {r['text']}")
        if r["prev"]:
            lines.append(f"   previous: {r['prev']}")
    return "\n".join(lines)
