"""Language generation network: cross-attention fusion, vocabulary MLP and
greedy autoregressive decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import layers
from .numerics import Tensor, no_grad, ops
from .numerics.tensor import ShapeError
from .text import EOS, SOS

T_MAX = 50


@dataclass(frozen=True)
class DecodeConfig:
    T_max: int = T_MAX
    start_id: int = SOS
    stop_id: int = EOS

    def __post_init__(self):
        if self.T_max < 1:
            raise ValueError(f"T_max must be >= 1, got {self.T_max}")


def init_generator(params: dict, d_model: int, vocab_size: int, rng, dtype=np.float32, prefix="gen"):
    layers.init_attention(params, f"{prefix}.xattn", d_model, rng, dtype)
    layers.init_layernorm(params, f"{prefix}.ln", d_model, dtype)
    layers.init_linear(params, f"{prefix}.mlp1", d_model, d_model, rng, dtype)
    layers.init_linear(params, f"{prefix}.mlp2", d_model, vocab_size, rng, dtype)


def cross_attend_batch(t, x, key_mask, params, n_heads, prefix="gen", return_weights=False):
    """Text features query sensor features: LayerNorm(t + MHA(t, x, x)).

    t: [B, L2, d], x: [B, L1, d], key_mask: [B, L1] bool or None.
    """
    if t.shape[-1] != x.shape[-1]:
        raise ShapeError(f"cross_attend: text width {t.shape[-1]} != sensor width {x.shape[-1]}")
    bias = None if key_mask is None else layers.key_padding_bias(np.asarray(key_mask))
    attended = layers.attention(t, x, params, f"{prefix}.xattn", n_heads, bias, return_weights)
    if return_weights:
        attended, weights = attended
    z = layers.layernorm(ops.add(t, attended), params, f"{prefix}.ln")
    return (z, weights) if return_weights else z


def cross_attend(t, x, params, n_heads=1, prefix="gen", return_weights=False):
    """Unbatched form: t [L2, d], x [L1, d] -> z [L2, d]."""
    t = t if isinstance(t, Tensor) else Tensor(t)
    x = x if isinstance(x, Tensor) else Tensor(x)
    out = cross_attend_batch(t.reshape(1, *t.shape), x.reshape(1, *x.shape), None, params, n_heads,
                             prefix, return_weights)
    if return_weights:
        return out[0][0], out[1].data[0]
    return out[0]


def project_logits(z, params, prefix="gen"):
    """Two-layer MLP d -> d -> vocab_size (unnormalised scores)."""
    return layers.linear(layers.ACTIVATION(layers.linear(z, params, f"{prefix}.mlp1")), params, f"{prefix}.mlp2")


def pick_next(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest id."""
    return np.argmax(logits, axis=-1)


def greedy_decode_batch(model, batch, cfg: Optional[DecodeConfig] = None):
    """Decode a padded sensor batch; returns one token list per sample (content only).

    Sensor features are computed once. At every step the whole prefix is
    re-encoded by the text encoder and the last position's scores pick the
    next token. ``cfg`` defaults to the model's own decode settings.
    """
    cfg = cfg or model.decode_cfg
    bsz = len(batch)
    with no_grad():
        feats, mask = model.encode_sensor(batch)
        prefix = np.full((bsz, 1), cfg.start_id, dtype=np.int64)
        done = np.zeros(bsz, dtype=bool)
        outputs = [[] for _ in range(bsz)]
        for _ in range(cfg.T_max):
            logits = model.next_token_logits(feats, mask, prefix)
            nxt = pick_next(logits)
            for i in range(bsz):
                if done[i]:
                    continue
                if nxt[i] == cfg.stop_id:
                    done[i] = True
                else:
                    outputs[i].append(int(nxt[i]))
            if done.all():
                break
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return outputs


def greedy_decode(seq, model, cfg: Optional[DecodeConfig] = None):
    """Caption one sensor sequence; returns ``(caption, token_ids)``."""
    from .sensor_encoder import collate_sensors

    ids = greedy_decode_batch(model, collate_sensors([seq], dtype=model.dtype), cfg)[0]
    return model.vocab_detokenize(ids), ids
