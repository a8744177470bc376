"""Command-line entry point.

Subcommands: prepare, build-vocab, pretrain, eval-unshuffle,
finetune-cls, finetune-qa, probe, gradcheck. Exit codes: 0 success,
1 data problems (missing/bad files, aborted training), 2 contract or
format violations (argparse also exits 2 on bad flags).

Heavy imports happen inside main() so SLM_THREADS can cap the BLAS
thread pools before numpy loads.
"""
from __future__ import annotations

import argparse
import os
import sys

from .errors import ContractError, DataError, FormatError, TrainingAbort


def _cap_threads() -> None:
    cap = os.environ.get("SLM_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="key=value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     dest="overrides", help="override one config key")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", default="runs/latest", help="output directory")
    sub.add_argument("--profile", default="tiny", help="config profile name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slm",
        description="sentence-shuffling language model pretraining tools")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("prepare", help="segment raw text into sentences")
    p.add_argument("input")
    p.add_argument("output")

    p = subs.add_parser("build-vocab", help="frequency vocabulary from text")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--size", type=int, default=2000)

    for name in ("pretrain", "eval-unshuffle", "finetune-cls",
                 "finetune-qa", "probe", "gradcheck"):
        _add_common(subs.add_parser(name))
    return parser


def _resolve(args):
    from .config import resolve_config
    return resolve_config(args.profile, args.config, args.overrides, args.seed)


def _load_corpus_documents(path: str, vocab):
    from .textpipe import document_from_sentences, read_prepared
    docs = [document_from_sentences(sents, vocab)
            for sents in read_prepared(path)]
    return [d for d in docs if d.sentences]


def _require(cfg, field: str) -> str:
    value = getattr(cfg, field)
    if not value:
        raise ContractError(f"this command needs --set {field}=PATH")
    return value


def _load_checkpoint_and_config(args):
    """Model and config from the checkpoint, with CLI overrides on top.

    The checkpoint's embedded config defines the model; the command line
    only contributes keys it explicitly changed relative to what the
    profile/config file alone would give (paths, eval knobs, and so on).
    """
    from dataclasses import asdict

    from .checkpoint import load_checkpoint
    from .config import RunConfig, resolve_config
    from .model import param_shapes

    merged = resolve_config(args.profile, args.config, args.overrides,
                            args.seed)
    path = _require(merged, "checkpoint")
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    baseline = asdict(resolve_config(args.profile, args.config, [], None))
    explicit = {k: v for k, v in asdict(merged).items()
                if v != baseline.get(k)}
    stored = asdict(load_checkpoint(path).config)
    stored.update(explicit)
    cfg = RunConfig(**stored).validate()
    expected = [name for name, _ in param_shapes(cfg)]
    return load_checkpoint(path, expected_names=expected), cfg


def cmd_prepare(args) -> int:
    from .textpipe import read_corpus, segment_sentences, write_corpus
    docs = [segment_sentences(doc) for doc in read_corpus(args.input)]
    docs = [d for d in docs if d]
    if not docs:
        raise DataError(f"{args.input}: no documents found")
    write_corpus(args.output, docs)
    print(f"wrote {len(docs)} documents to {args.output}")
    return 0


def cmd_build_vocab(args) -> int:
    from .textpipe import build_vocab, read_corpus
    docs = read_corpus(args.input)
    vocab = build_vocab(docs, args.size)
    vocab.save(args.output)
    print(f"wrote {len(vocab.id_to_token)} tokens to {args.output}")
    return 0


def cmd_pretrain(args) -> int:
    from .textpipe import Vocab
    from .trainer import train_loop
    cfg = _resolve(args)
    vocab = Vocab.load(_require(cfg, "vocab"))
    docs = _load_corpus_documents(_require(cfg, "corpus"), vocab)
    result = train_loop(docs, cfg, args.out)
    print(f"finished {cfg.steps} steps; total {result['total']:.4f} "
          f"(mlm {result['l_mlm']:.4f}, slm {result['l_slm']:.4f})")
    print(f"metrics: {result['metrics']}")
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def cmd_eval_unshuffle(args) -> int:
    from .textpipe import Vocab
    from .trainer import evaluate_unshuffle, pack_corpus
    ck, cfg = _load_checkpoint_and_config(args)
    vocab = Vocab.load(_require(cfg, "vocab"))
    docs = _load_corpus_documents(_require(cfg, "eval_corpus"), vocab)
    packed = pack_corpus(docs, cfg)
    scores = evaluate_unshuffle(ck.params, cfg, packed, seed=cfg.seed)
    print(f"n={scores['n']} em={scores['em']:.4f} tau={scores['tau']:.4f}")
    return 0


def _finetune_steps(cfg, n_examples: int) -> int:
    per_epoch = max(1, -(-n_examples // cfg.batch_size))
    return cfg.finetune_epochs * per_epoch


def cmd_finetune_cls(args) -> int:
    from .heads import cls_accuracy, finetune_cls, read_cls_tsv
    from .textpipe import Vocab
    ck, cfg = _load_checkpoint_and_config(args)
    vocab = Vocab.load(_require(cfg, "vocab"))
    examples, label_names = read_cls_tsv(_require(cfg, "train_file"),
                                         vocab, cfg)
    n_outputs = 1 if cfg.task_type == "regression" else len(label_names)
    steps = _finetune_steps(cfg, len(examples))
    head = finetune_cls(ck.params, cfg, examples, n_outputs, steps,
                        seed=cfg.seed)
    if cfg.task_type == "regression":
        print(f"trained regression head for {steps} steps "
              f"on {len(examples)} examples")
    else:
        acc = cls_accuracy(ck.params, head, cfg, examples)
        print(f"train accuracy {acc:.4f} after {steps} steps "
              f"({len(examples)} examples, {n_outputs} classes)")
    return 0


def cmd_finetune_qa(args) -> int:
    from .heads import finetune_qa, qa_metrics, read_qa_jsonl
    from .textpipe import Vocab
    ck, cfg = _load_checkpoint_and_config(args)
    vocab = Vocab.load(_require(cfg, "vocab"))
    examples = read_qa_jsonl(_require(cfg, "train_file"), vocab, cfg)
    steps = _finetune_steps(cfg, len(examples))
    head = finetune_qa(ck.params, cfg, examples, steps, seed=cfg.seed)
    scores = qa_metrics(ck.params, head, cfg, examples)
    print(f"train em {scores['em']:.4f} sentence-consistency "
          f"{scores['sentence_consistency']:.4f} after {steps} steps")
    return 0


def cmd_probe(args) -> int:
    from .probe import (export_reps, load_index, neighbor_report,
                        nearest_neighbors, save_index)
    from .textpipe import Vocab, read_prepared
    ck, cfg = _load_checkpoint_and_config(args)
    index_path = _require(cfg, "index")
    if os.path.exists(index_path):
        index = load_index(index_path)
    else:
        vocab = Vocab.load(_require(cfg, "vocab"))
        docs = read_prepared(_require(cfg, "corpus"))
        index = export_reps(ck.params, cfg, docs, vocab)
        save_index(index_path, index)
        print(f"exported {index.matrix.shape[0]} sentence rows "
              f"to {index_path}")
    if cfg.query_row >= 0:
        hits = nearest_neighbors(index, cfg.query_row, cfg.top_k)
        print(neighbor_report(index, cfg.query_row, hits))
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .config import resolve_config
    from .masking import MaskingConfig, apply_span_masking
    from .model import init_params
    from .objectives import pretrain_bundle
    from .shuffling import apply_shuffle, sample_permutation
    from .tensor import grad_check
    from .textpipe import Document, pack_example

    # the check instance stays small so the finite-difference sweep over
    # every parameter finishes quickly; --set can resize it
    check_defaults = ["encoder_layers=2", "decoder_layers=1", "heads=2",
                      "hidden=16", "ffn=32", "seq_len=32", "max_sentences=4",
                      "vocab_size=32", "dropout=0", "attn_dropout=0"]
    cfg = resolve_config(args.profile, args.config,
                         check_defaults + list(args.overrides), args.seed)
    dtype = np.float64 if cfg.gradcheck_dtype == "float64" else np.float32
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng, dtype)

    from .textpipe import NUM_SPECIALS
    doc = Document([
        [int(w) for w in rng.integers(NUM_SPECIALS, cfg.vocab_size,
                                      size=int(rng.integers(3, 7)))]
        for _ in range(cfg.max_sentences)])
    ex = pack_example(doc, cfg.seq_len, cfg.max_sentences, rng)
    mask_cfg = MaskingConfig(p_geom=cfg.p_geom, max_span=cfg.max_span,
                             mask_rate=cfg.mask_rate).validate()
    ex = apply_span_masking(ex, mask_cfg, rng, cfg.vocab_size)
    ex = apply_shuffle(ex, sample_permutation(ex.num_sentences, rng))

    def f():
        return pretrain_bundle(params, cfg, [ex]).loss

    eps = 1e-4 if dtype == np.float64 else 1e-3
    err = grad_check(f, list(params.values()), eps=eps)
    print(f"gradcheck max rel err {err:.3e} "
          f"(tolerance {cfg.gradcheck_tol:g}, {cfg.gradcheck_dtype})")
    return 0 if err < cfg.gradcheck_tol else 1


_COMMANDS = {
    "prepare": cmd_prepare,
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "eval-unshuffle": cmd_eval_unshuffle,
    "finetune-cls": cmd_finetune_cls,
    "finetune-qa": cmd_finetune_qa,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DataError, TrainingAbort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
