"""Corpus handling: sentence segmentation, vocabulary, packing.

A corpus file is UTF-8 text with documents separated by blank lines.
Documents are segmented into sentences, tokenized into lowercased
word/punctuation tokens, merged down to at most M sentences, and packed
into fixed-length examples laid out as

    [CLS] [SENT] w w ... [SENT] w w ... [SEP] [PAD] ...

with one [SENT] marker in front of every sentence. Sentence ids address
a table of M+1 rows whose last row is reserved for [CLS], [SEP], [PAD]
and any other token that belongs to no sentence.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

PAD, UNK, CLS, SEP, MASK, SENT = 0, 1, 2, 3, 4, 5
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[SENT]"]
NUM_SPECIALS = len(SPECIAL_TOKENS)

# Common abbreviations that end with a period without ending a sentence.
_ABBREVIATIONS = {
    "dr", "mr", "mrs", "ms", "prof", "rev", "gen", "sen", "rep", "st",
    "jr", "sr", "co", "corp", "inc", "ltd", "dept", "univ", "assn",
    "bros", "etc", "vs", "fig", "al", "eg", "ie", "cf", "no", "vol",
    "pp", "ed", "eds", "approx", "est", "min", "max", "dist", "ave",
    "blvd", "rd", "jan", "feb", "mar", "apr", "jun", "jul", "aug",
    "sep", "sept", "oct", "nov", "dec", "mon", "tue", "wed", "thu",
    "fri", "sat", "sun",
}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation tokens; deterministic, no vocabulary."""
    return _TOKEN_RE.findall(text.lower())


def segment_sentences(text: str) -> list[str]:
    """Split a document into sentences on ., !, ? boundaries.

    A boundary needs terminal punctuation followed by whitespace and an
    uppercase letter or digit. Periods after known abbreviations or
    single-letter initials do not split. Joining the result restores the
    input up to the whitespace that separated sentences.
    """
    text = text.strip()
    if not text:
        return []
    sentences = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in ".!?":
            # absorb runs like "?!" or "..."
            j = i
            while j + 1 < n and text[j + 1] in ".!?":
                j += 1
            k = j + 1
            if k < n and text[k].isspace():
                nxt = k
                while nxt < n and text[nxt].isspace():
                    nxt += 1
                if nxt < n and (text[nxt].isupper() or text[nxt].isdigit()):
                    if ch == "." and i == j and _is_abbreviation(text, i):
                        i += 1
                        continue
                    sentences.append(text[start:k].strip())
                    start = nxt
                    i = nxt
                    continue
            i = j + 1
            continue
        i += 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _is_abbreviation(text: str, dot: int) -> bool:
    j = dot - 1
    while j >= 0 and (text[j].isalnum() or text[j] == "."):
        j -= 1
    word = text[j + 1:dot].rstrip(".")
    if not word:
        return False
    if len(word) == 1 and word.isalpha():
        return True  # initials like "J. Smith"
    return word.lower() in _ABBREVIATIONS


def read_corpus(path: str) -> list[str]:
    """Documents from a UTF-8 file, separated by blank lines."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    docs = [d.strip() for d in re.split(r"\n\s*\n", raw)]
    return [d for d in docs if d]


def write_corpus(path: str, docs: list[list[str]]) -> None:
    """One sentence per line, blank line between documents."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, doc in enumerate(docs):
            if i:
                fh.write("\n")
            for sent in doc:
                fh.write(sent + "\n")


def read_prepared(path: str) -> list[list[str]]:
    """Documents as sentence lists from a prepare-formatted file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    docs = []
    for block in re.split(r"\n\s*\n", raw):
        sents = [l.strip() for l in block.split("\n") if l.strip()]
        if sents:
            docs.append(sents)
    return docs


class Vocab:
    """Token <-> id mapping with the fixed special block at the front."""

    def __init__(self, tokens: list[str]):
        if tokens[:NUM_SPECIALS] != SPECIAL_TOKENS:
            raise ContractError("vocab must start with the special tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ContractError("vocab contains duplicate tokens")

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens: list[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.id_to_token:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        try:
            with open(path, encoding="utf-8") as fh:
                tokens = [line.rstrip("\n") for line in fh if line.strip()]
        except OSError as exc:
            raise DataError(f"cannot read vocab {path}: {exc}") from exc
        return cls(tokens)


def build_vocab(docs: list[str], size: int) -> Vocab:
    """Specials first, then the most frequent tokens up to ``size``.

    Frequency ties break lexicographically, so the same corpus always
    yields byte-identical vocab files.
    """
    if size <= NUM_SPECIALS:
        raise ContractError(f"vocab size must exceed {NUM_SPECIALS}")
    counts: dict[str, int] = {}
    for doc in docs:
        for tok in tokenize(doc):
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, _ in ranked[: size - NUM_SPECIALS]]
    return Vocab(SPECIAL_TOKENS + kept)


@dataclass
class Document:
    """Token ids per sentence, in original order."""
    sentences: list[list[int]]


def document_from_text(text: str, vocab: Vocab) -> Document:
    sents = segment_sentences(text)
    return Document([vocab.encode(tokenize(s)) for s in sents if tokenize(s)])


def document_from_sentences(sentences: list[str], vocab: Vocab) -> Document:
    return Document([vocab.encode(tokenize(s)) for s in sentences if tokenize(s)])


def merge_to_max(doc: Document, max_sentences: int, rng) -> Document:
    """Concatenate uniformly random adjacent pairs until at most M remain.

    Token order inside the document never changes, only sentence
    boundaries disappear.
    """
    if max_sentences < 1:
        raise ContractError("max_sentences must be >= 1")
    sents = [list(s) for s in doc.sentences]
    while len(sents) > max_sentences:
        i = int(rng.integers(0, len(sents) - 1))
        sents[i] = sents[i] + sents[i + 1]
        del sents[i + 1]
    return Document(sents)


@dataclass
class PackedExample:
    """One fixed-length model input.

    ``sentence_spans`` holds one (sent_pos, word_start, word_end) triple
    per sentence, end exclusive, covering exactly the non-special
    positions of the used region. ``attention_len`` counts the non-pad
    prefix. ``segment_ids`` stays all zeros for pretraining.
    """
    token_ids: np.ndarray
    position_ids: np.ndarray
    sentence_ids: np.ndarray
    segment_ids: np.ndarray
    sentence_spans: list[tuple[int, int, int]]
    attention_len: int
    num_sentences: int
    mlm_labels: np.ndarray | None = None
    order_targets: np.ndarray | None = None
    shuffled: bool = False
    perm: np.ndarray | None = None


def pack_example(doc: Document, seq_len: int, max_sentences: int, rng,
                 use_sentence_tokens: bool = True) -> PackedExample | None:
    """Lay out a document; returns None when nothing fits.

    Sentences beyond the length budget are dropped from the tail, and
    the last kept sentence is truncated to the remaining room (a
    sentence reduced to zero words is dropped entirely, reducing N).
    """
    if seq_len < 4:
        raise ContractError("seq_len must allow [CLS] [SENT] w [SEP]")
    merged = merge_to_max(doc, max_sentences, rng)
    sents = [s for s in merged.sentences if s]
    if not sents:
        return None

    marker = 1 if use_sentence_tokens else 0
    budget = seq_len - 2  # [CLS], [SEP]
    kept: list[list[int]] = []
    for words in sents:
        room = budget - (marker + 1)
        if room < 0:
            break
        take_n = min(len(words), budget - marker)
        if take_n <= 0:
            break
        kept.append(words[:take_n])
        budget -= marker + take_n
    if not kept:
        return None

    n = len(kept)
    token_ids = np.full(seq_len, PAD, dtype=np.int64)
    sentence_ids = np.full(seq_len, max_sentences, dtype=np.int64)
    position_ids = np.zeros(seq_len, dtype=np.int64)
    spans: list[tuple[int, int, int]] = []

    pos = 0
    token_ids[pos] = CLS
    pos += 1
    for k, words in enumerate(kept):
        if use_sentence_tokens:
            token_ids[pos] = SENT
            sentence_ids[pos] = k
            sent_pos = pos
            pos += 1
        else:
            sent_pos = -1
        start = pos
        for w in words:
            token_ids[pos] = w
            sentence_ids[pos] = k
            pos += 1
        spans.append((sent_pos, start, pos))
    token_ids[pos] = SEP
    attention_len = pos + 1
    position_ids[:attention_len] = np.arange(attention_len)

    return PackedExample(
        token_ids=token_ids,
        position_ids=position_ids,
        sentence_ids=sentence_ids,
        segment_ids=np.zeros(seq_len, dtype=np.int64),
        sentence_spans=spans,
        attention_len=attention_len,
        num_sentences=n,
    )


def unpack_words(ex: PackedExample) -> list[int]:
    """Word ids in memory order, specials and pads dropped."""
    out = []
    for _, start, end in ex.sentence_spans:
        out.extend(int(t) for t in ex.token_ids[start:end])
    return out
