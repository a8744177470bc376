"""Flat run configuration, profiles, and key=value parsing.

Every knob lives in one flat dataclass so a config file is just
``key = value`` lines and a CLI override is ``--set key=value``. The
``tiny`` profile is for desk experiments; ``paper`` mirrors the
published pretraining setup (12/3 layer encoder/decoder, hidden 768,
30522-token vocabulary, 256x512 batches, 1M steps with 10k warmup at
peak rate 1.5e-4).
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ContractError, DataError


@dataclass
class RunConfig:
    # model geometry
    encoder_layers: int = 2
    decoder_layers: int = 1
    heads: int = 2
    hidden: int = 64
    ffn: int = 256
    seq_len: int = 128
    max_sentences: int = 8
    vocab_size: int = 2000
    dropout: float = 0.1
    attn_dropout: float = 0.1
    layer_norm_eps: float = 1e-5

    # masking
    p_geom: float = 0.2
    max_span: int = 3
    mask_rate: float = 0.15
    replace_mask: float = 0.8
    replace_random: float = 0.1
    replace_keep: float = 0.1

    # objective switches
    shuffle_fraction: float = 0.5
    sr_enabled: bool = True
    sentence_reps_enabled: bool = True
    position_mode: str = "resequence"

    # optimization
    batch_size: int = 8
    steps: int = 5000
    warmup: int = 100
    peak_lr: float = 1.5e-4
    adam_eps: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    accum_steps: int = 1
    seed: int = 0

    # bookkeeping. timing is opt-in because throughput numbers make
    # otherwise identical runs produce different metrics files
    checkpoint_every: int = 1000
    log_every: int = 1
    timing_enabled: bool = False

    # paths (set per command)
    corpus: str = ""
    vocab: str = ""
    eval_corpus: str = ""
    checkpoint: str = ""
    train_file: str = ""
    dev_file: str = ""
    index: str = ""

    # fine-tuning
    task_type: str = "classification"
    finetune_lr: float = 5e-4
    finetune_epochs: int = 3
    max_answer_len: int = 30

    # probing / checking
    query_row: int = -1
    top_k: int = 5
    gradcheck_tol: float = 1e-3
    gradcheck_dtype: str = "float64"

    def validate(self) -> "RunConfig":
        if self.hidden % self.heads:
            raise ContractError("hidden size must divide evenly across heads")
        if self.seq_len < 4:
            raise ContractError("seq_len too small for [CLS] [SENT] w [SEP]")
        if self.max_sentences < 1:
            raise ContractError("max_sentences must be >= 1")
        if self.position_mode not in ("resequence", "travel"):
            raise ContractError(f"unknown position_mode {self.position_mode!r}")
        if not 0 <= self.shuffle_fraction <= 1:
            raise ContractError("shuffle_fraction must lie in [0, 1]")
        if self.warmup > self.steps:
            raise ContractError("warmup cannot exceed total steps")
        if self.sr_enabled and not self.sentence_reps_enabled:
            raise ContractError(
                "the reconstructor needs sentence representations enabled")
        return self


PROFILES = {
    "tiny": {},
    "paper": {
        "encoder_layers": 12,
        "decoder_layers": 3,
        "heads": 12,
        "hidden": 768,
        "ffn": 3072,
        "seq_len": 512,
        "max_sentences": 20,
        "vocab_size": 30522,
        "dropout": 0.1,
        "attn_dropout": 0.1,
        "batch_size": 256,
        "steps": 1_000_000,
        "warmup": 10_000,
        "peak_lr": 1.5e-4,
        "adam_eps": 1e-6,
    },
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ContractError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ContractError(f"cannot parse boolean for {key}: {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError as exc:
            raise ContractError(f"cannot parse int for {key}: {raw!r}") from exc
    if kind == "float":
        try:
            return float(raw)
        except ValueError as exc:
            raise ContractError(f"cannot parse float for {key}: {raw!r}") from exc
    return raw


def parse_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for ln, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ContractError(f"{path}:{ln}: expected key=value")
        key, _, value = stripped.partition("=")
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def resolve_config(profile: str = "tiny", config_path: str | None = None,
                   overrides: list[str] | None = None,
                   seed: int | None = None) -> RunConfig:
    """Profile defaults, then config file, then --set pairs, then --seed."""
    if profile not in PROFILES:
        raise ContractError(f"unknown profile {profile!r}")
    cfg = replace(RunConfig(), **PROFILES[profile])
    if config_path:
        cfg = replace(cfg, **parse_config_file(config_path))
    for pair in overrides or []:
        if "=" not in pair:
            raise ContractError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        cfg = replace(cfg, **{key.strip(): _coerce(key.strip(), value)})
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()


def config_echo(cfg: RunConfig) -> list[tuple[str, str]]:
    """Stable key/value listing of the resolved config.

    Values are printed so that feeding each pair back through the
    key=value parser reproduces the config exactly.
    """
    out = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        out.append((f.name, str(getattr(cfg, f.name))))
    return out


def config_from_echo(pairs) -> RunConfig:
    """Inverse of config_echo."""
    return replace(RunConfig(),
                   **{k: _coerce(k, v) for k, v in pairs}).validate()
