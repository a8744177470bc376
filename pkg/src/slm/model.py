"""Parameters and shared transformer blocks.

One flat dict maps parameter names to Tensors. Encoder-side names start
with ``emb.``, ``enc.`` or ``mlm.``; reconstructor names start with
``dec.``. The word-prediction projection is tied to the token embedding
table, so only a bias appears under ``mlm.``. Blocks follow the
post-norm arrangement: sublayer output is dropped out, added to the
residual, then layer-normalized.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import RunConfig
from .tensor import Tensor

INIT_STD = 0.02
NEG_INF = -1e9


def trunc_normal(shape, std: float, rng, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with draws outside 2 std resampled."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(dtype)


def _attn_shapes(prefix: str, h: int):
    out = []
    for name in ("wq", "wk", "wv", "wo"):
        out.append((f"{prefix}.{name}", (h, h)))
    for name in ("bq", "bk", "bv", "bo"):
        out.append((f"{prefix}.{name}", (h,)))
    return out


def _ln_shapes(prefix: str, h: int):
    return [(f"{prefix}.g", (h,)), (f"{prefix}.b", (h,))]


def param_shapes(cfg: RunConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) listing for the full model."""
    h, f = cfg.hidden, cfg.ffn
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("emb.token", (cfg.vocab_size, h)),
        ("emb.position", (cfg.seq_len, h)),
        ("emb.sentence", (cfg.max_sentences + 1, h)),
        ("emb.segment", (2, h)),
    ]
    shapes += _ln_shapes("emb.ln", h)
    for i in range(cfg.encoder_layers):
        shapes += _attn_shapes(f"enc.{i}.attn", h)
        shapes += _ln_shapes(f"enc.{i}.ln1", h)
        shapes += [(f"enc.{i}.ffn.w1", (h, f)), (f"enc.{i}.ffn.b1", (f,)),
                   (f"enc.{i}.ffn.w2", (f, h)), (f"enc.{i}.ffn.b2", (h,))]
        shapes += _ln_shapes(f"enc.{i}.ln2", h)
    shapes.append(("mlm.bias", (cfg.vocab_size,)))
    for i in range(cfg.decoder_layers):
        shapes += _attn_shapes(f"dec.{i}.self", h)
        shapes += _ln_shapes(f"dec.{i}.ln1", h)
        shapes += _attn_shapes(f"dec.{i}.cross", h)
        shapes += _ln_shapes(f"dec.{i}.ln2", h)
        shapes += [(f"dec.{i}.ffn.w1", (h, f)), (f"dec.{i}.ffn.b1", (f,)),
                   (f"dec.{i}.ffn.w2", (f, h)), (f"dec.{i}.ffn.b2", (h,))]
        shapes += _ln_shapes(f"dec.{i}.ln3", h)
    return shapes


def init_params(cfg: RunConfig, rng, dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".g"):
            data = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            data = np.zeros(shape, dtype=dtype)
        else:
            data = trunc_normal(shape, INIT_STD, rng, dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def parameter_counts(cfg: RunConfig) -> tuple[int, int]:
    """(encoder-side, reconstructor) parameter counts from shapes alone."""
    enc = dec = 0
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        if name.startswith("dec."):
            dec += n
        else:
            enc += n
    return enc, dec


def no_decay(name: str, shape) -> bool:
    """Weight decay skips layer-norm parameters and every bias."""
    return len(shape) == 1


def multi_head_attention(params: dict, prefix: str, x_q: Tensor, x_kv: Tensor,
                         bias, cfg: RunConfig, rng, training: bool) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``bias`` is an additive mask broadcast onto the [.., heads, L_q, L_k]
    score array; masked keys carry NEG_INF and receive zero weight.
    """
    nh = cfg.heads
    dh = cfg.hidden // nh

    def heads_split(x):
        b, l, h = x.shape
        return x.reshape(b, l, nh, dh).swapaxes(1, 2)

    q = heads_split(T.matmul(x_q, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"])
    k = heads_split(T.matmul(x_kv, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"])
    v = heads_split(T.matmul(x_kv, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"])

    scores = T.mul(T.matmul(q, k.swapaxes(-1, -2)), 1.0 / np.sqrt(dh))
    if bias is not None:
        scores = scores + bias
    probs = T.softmax_rows(scores)
    probs = T.dropout(probs, cfg.attn_dropout, rng, training)
    ctx = T.matmul(probs, v).swapaxes(1, 2)
    b, l, _, _ = ctx.shape
    ctx = ctx.reshape(b, l, cfg.hidden)
    return T.matmul(ctx, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def feed_forward(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return T.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def post_norm(params: dict, prefix: str, residual: Tensor, out: Tensor,
              cfg: RunConfig, rng, training: bool) -> Tensor:
    out = T.dropout(out, cfg.dropout, rng, training)
    return T.layer_norm(residual + out, params[f"{prefix}.g"],
                        params[f"{prefix}.b"], cfg.layer_norm_eps)
