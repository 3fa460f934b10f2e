"""Parameter initialisers and the transformer building blocks shared by the
sensor encoder, text encoder and caption generator.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names; every
block takes that dict plus its name prefix.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor, ops
from .numerics.tensor import ShapeError

# one switch for the feed-forward nonlinearity
ACTIVATION = ops.gelu

NEG_INF = -1e9

INIT_SCHEME = {
    "weights": "uniform(+-sqrt(6/(fan_in+fan_out)))",
    "biases": "zeros",
    "embeddings": "normal(0, 0.02)",
    "layernorm": "gamma=1, beta=0",
}


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def add_param(params: dict, name: str, value: np.ndarray) -> Tensor:
    if name in params:
        raise KeyError(f"duplicate parameter name {name!r}")
    t = Tensor(value, requires_grad=True, name=name)
    params[name] = t
    return t


def init_linear(params, prefix, d_in, d_out, rng, dtype, bias=True):
    add_param(params, f"{prefix}.w", xavier_uniform(rng, (d_in, d_out), d_in, d_out, dtype))
    if bias:
        add_param(params, f"{prefix}.b", np.zeros(d_out, dtype=dtype))


def linear(x, params, prefix):
    y = ops.matmul(x, params[f"{prefix}.w"])
    b = params.get(f"{prefix}.b")
    return y if b is None else ops.add(y, b)


def init_layernorm(params, prefix, d, dtype):
    add_param(params, f"{prefix}.gamma", np.ones(d, dtype=dtype))
    add_param(params, f"{prefix}.beta", np.zeros(d, dtype=dtype))


def layernorm(x, params, prefix):
    return ops.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def init_embedding(params, name, n, d, rng, dtype):
    add_param(params, name, rng.normal(0.0, 0.02, size=(n, d)).astype(dtype))


# -- attention ---------------------------------------------------------------

def init_attention(params, prefix, d, rng, dtype):
    # W^Q, W^K, W^V hold the per-head [d, d_k] projections side by side
    for name in ("wq", "wk", "wv"):
        init_linear(params, f"{prefix}.{name}", d, d, rng, dtype, bias=False)
    init_linear(params, f"{prefix}.wo", d, d, rng, dtype)


def attention(q_in, kv_in, params, prefix, n_heads, bias=None, return_weights=False):
    """Multi-head scaled dot-product attention.

    q_in: [B, Lq, d], kv_in: [B, Lk, d]. ``bias`` is a constant array
    broadcastable to [B, H, Lq, Lk] added to the scores (0 keep, -1e9 drop).
    Returns [B, Lq, d] (and the [B, H, Lq, Lk] weights when asked).
    """
    bsz, lq, d = q_in.shape
    if kv_in.shape[0] != bsz or kv_in.shape[2] != d:
        raise ShapeError(f"attention: query {q_in.shape} and key/value {kv_in.shape} disagree")
    if d % n_heads:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    lk = kv_in.shape[1]
    dk = d // n_heads
    q = ops.matmul(q_in, params[f"{prefix}.wq.w"]).reshape(bsz, lq, n_heads, dk).transpose(0, 2, 1, 3)
    k = ops.matmul(kv_in, params[f"{prefix}.wk.w"]).reshape(bsz, lk, n_heads, dk).transpose(0, 2, 3, 1)
    v = ops.matmul(kv_in, params[f"{prefix}.wv.w"]).reshape(bsz, lk, n_heads, dk).transpose(0, 2, 1, 3)
    scores = ops.mul(ops.matmul(q, k), 1.0 / math.sqrt(dk))
    if bias is not None:
        scores = ops.add(scores, np.asarray(bias, dtype=scores.dtype))
    weights = ops.softmax(scores, axis=-1)
    ctx = ops.matmul(weights, v).transpose(0, 2, 1, 3).reshape(bsz, lq, d)
    out = linear(ctx, params, f"{prefix}.wo")
    return (out, weights) if return_weights else out


def key_padding_bias(mask: np.ndarray) -> np.ndarray:
    """[B, Lk] boolean keep-mask -> additive bias of shape [B, 1, 1, Lk]."""
    return np.where(mask, 0.0, NEG_INF)[:, None, None, :]


def causal_bias(length: int) -> np.ndarray:
    """Position j may attend to positions <= j only."""
    return np.triu(np.full((length, length), NEG_INF), k=1)


# -- transformer encoder layer (post-norm) ----------------------------------

def init_ffn(params, prefix, d, width, rng, dtype):
    init_linear(params, f"{prefix}.fc1", d, width, rng, dtype)
    init_linear(params, f"{prefix}.fc2", width, d, rng, dtype)


def ffn(x, params, prefix):
    return linear(ACTIVATION(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def init_encoder_layer(params, prefix, d, ffn_width, rng, dtype):
    init_attention(params, f"{prefix}.attn", d, rng, dtype)
    init_layernorm(params, f"{prefix}.ln1", d, dtype)
    init_ffn(params, f"{prefix}.ffn", d, ffn_width, rng, dtype)
    init_layernorm(params, f"{prefix}.ln2", d, dtype)


def encoder_layer(x, params, prefix, n_heads, bias=None):
    """Self-attention and feed-forward, each wrapped as LayerNorm(x + sublayer(x))."""
    h = layernorm(ops.add(x, attention(x, x, params, f"{prefix}.attn", n_heads, bias)), params, f"{prefix}.ln1")
    return layernorm(ops.add(h, ffn(h, params, f"{prefix}.ffn")), params, f"{prefix}.ln2")
