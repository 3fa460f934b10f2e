"""Unified IMU / Wi-Fi sensor encoder.

Pipeline per sample (each stage switchable for ablations)::

    placement embedding -> Conv-FFN blocks -> patching -> linear projection
    -> sinusoidal positions (base 1000) -> self-attention layers

Batches are padded along time. Padded timesteps are forced back to zero after
every stage that could leak into them, so a padded sample produces exactly
the features it would produce alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import layers
from .numerics import Tensor, ops
from .numerics.tensor import ShapeError
from .positional import SENSOR_PE_BASE, pe_table

IMU = "imu"
WIFI = "wifi"
MODALITIES = (IMU, WIFI)
IMU_CHANNELS = 6


@dataclass
class SensorSequence:
    """One multi-device recording, ``values`` shaped [D, C, L]."""

    modality: str
    values: np.ndarray
    sample_rate_hz: float
    placement_ids: list

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.placement_ids = [int(i) for i in self.placement_ids]
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.values.ndim != 3:
            raise ShapeError(f"sensor values must be [D, C, L], got shape {self.values.shape}")
        d, c, length = self.values.shape
        if min(d, c, length) < 1:
            raise ShapeError(f"empty sensor dimension in {self.values.shape}")
        if len(self.placement_ids) != d:
            raise ValueError(f"{len(self.placement_ids)} placement ids for {d} devices")
        if any(i < 0 for i in self.placement_ids):
            raise ValueError("placement ids must be nonnegative")
        if self.modality == IMU and c != IMU_CHANNELS:
            raise ShapeError(f"IMU devices carry {IMU_CHANNELS} channels, got {c}")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")

    @property
    def D(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    @property
    def L(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PatchConfig:
    P: int = 25
    S: int = 25

    def __post_init__(self):
        if not 1 <= self.S <= self.P:
            raise ValueError(f"patch config needs 1 <= S <= P, got P={self.P}, S={self.S}")

    def num_patches(self, length: int) -> int:
        if length < self.P:
            raise ShapeError(
                f"sequence length {length} is shorter than patch length {self.P}; "
                "pad the sequence or use a shorter patch"
            )
        return (length - self.P) // self.S + 1


@dataclass(frozen=True)
class EncoderConfig:
    D: int = 6
    C: int = IMU_CHANNELS
    num_placements: int = 6
    patch: PatchConfig = field(default_factory=PatchConfig)
    d_model: int = 128
    n_heads: int = 4
    n_sa_layers: int = 2
    ffn_width: int = 256
    n_convffn_blocks: int = 2
    dw_kernel: int = 15
    n_final_pwconv: int = 1
    pe_base: float = SENSOR_PE_BASE
    enable_patching: bool = True
    enable_pe: bool = True
    enable_placement: bool = True
    enable_convffn: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            raise ValueError(f"dw_kernel must be a positive odd number, got {self.dw_kernel}")
        if self.n_final_pwconv < 1:
            raise ValueError("n_final_pwconv must be >= 1")
        if min(self.D, self.C, self.num_placements) < 1:
            raise ValueError("D, C and num_placements must be >= 1")

    @property
    def channels(self) -> int:
        return self.D * self.C

    def num_tokens(self, length: int) -> int:
        return self.patch.num_patches(length) if self.enable_patching else length


# -- stand-alone operations -------------------------------------------------

def patchify(values, cfg: PatchConfig):
    """[..., M, L] -> [..., N, M * P] with patch i covering [i*S, i*S + P).

    Each patch is flattened channel-major, then time. Works on arrays and
    Tensors (differentiable).
    """
    length = values.shape[-1]
    cfg.num_patches(length)
    t = values if isinstance(values, Tensor) else Tensor(values)
    win = ops.unfold(t, cfg.P, cfg.S)  # [..., M, N, P]
    nd = win.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    lead = win.shape[:-3]
    m, n, p = win.shape[-3:]
    out = win.transpose(axes).reshape(*lead, n, m * p)
    return out if isinstance(values, Tensor) else out.data


def add_placement(values, placement_ids, rows):
    """values [B, D, C, L] + rows[placement_ids] broadcast over time."""
    placement_ids = np.asarray(placement_ids)
    rows = rows if isinstance(rows, Tensor) else Tensor(rows)
    if placement_ids.size and placement_ids.max() >= rows.shape[0]:
        raise IndexError(f"placement id {placement_ids.max()} outside table of {rows.shape[0]} rows")
    if rows.shape[1] != values.shape[-2]:
        raise ShapeError(f"placement width {rows.shape[1]} != channel count {values.shape[-2]}")
    offs = ops.embedding(rows, placement_ids)  # [B, D, C]
    return ops.add(values, offs.reshape(*offs.shape, 1))


def apply_placement(seq: SensorSequence, rows) -> SensorSequence:
    """Additively fuse each device's placement vector into its channels."""
    rows = rows.data if isinstance(rows, Tensor) else np.asarray(rows)
    out = add_placement(Tensor(seq.values[None]), [seq.placement_ids], Tensor(rows))
    return SensorSequence(seq.modality, out.data[0], seq.sample_rate_hz, list(seq.placement_ids))


def init_conv_ffn_block(params, prefix, D, C, cfg: EncoderConfig, rng, dtype):
    dc = D * C
    k = cfg.dw_kernel
    layers.add_param(params, f"{prefix}.dw.w", layers.xavier_uniform(rng, (dc, 1, k), k, k, dtype))
    layers.add_param(params, f"{prefix}.dw.b", np.zeros(dc, dtype=dtype))
    layers.add_param(params, f"{prefix}.pw_dev.w", layers.xavier_uniform(rng, (dc, C, 1), C, C, dtype))
    layers.add_param(params, f"{prefix}.pw_dev.b", np.zeros(dc, dtype=dtype))
    for j in range(cfg.n_final_pwconv):
        layers.add_param(params, f"{prefix}.pw{j}.w", layers.xavier_uniform(rng, (dc, dc, 1), dc, dc, dtype))
        layers.add_param(params, f"{prefix}.pw{j}.b", np.zeros(dc, dtype=dtype))


def conv_ffn_block(x, D, C, params, prefix, n_final_pwconv=1, activation=None, time_mask=None,
                   return_grouped=False):
    """Depthwise temporal conv, per-device pointwise mix, cross-device mix, residual.

    x: [B, D*C, L]. ``time_mask`` ([B, L] bool) zeroes padded steps of the
    output. With ``return_grouped`` the activation after the grouped pointwise
    stage is returned as well (used to check device isolation).
    """
    act = activation or layers.ACTIVATION
    if x.shape[1] != D * C:
        raise ShapeError(f"conv_ffn_block: got {x.shape[1]} channels, expected D*C = {D * C}")
    k = params[f"{prefix}.dw.w"].shape[-1]
    h = ops.conv1d(x, params[f"{prefix}.dw.w"], params[f"{prefix}.dw.b"], groups=D * C, padding=k // 2)
    h = act(h)
    h = act(ops.conv1d(h, params[f"{prefix}.pw_dev.w"], params[f"{prefix}.pw_dev.b"], groups=D))
    grouped = h
    for j in range(n_final_pwconv):
        if j:
            h = act(h)
        h = ops.conv1d(h, params[f"{prefix}.pw{j}.w"], params[f"{prefix}.pw{j}.b"], groups=1)
    out = ops.add(x, h)
    if time_mask is not None:
        out = ops.mul(out, np.asarray(time_mask, dtype=out.dtype)[:, None, :])
    return (out, grouped) if return_grouped else out


# -- full encoder -------------------------------------------------------------

def init_sensor_encoder(params: dict, cfg: EncoderConfig, rng, dtype=np.float32, prefix="sensor"):
    """Register every encoder parameter, whether or not an ablation uses it."""
    layers.init_embedding(params, f"{prefix}.placement", cfg.num_placements, cfg.C, rng, dtype)
    for i in range(cfg.n_convffn_blocks):
        init_conv_ffn_block(params, f"{prefix}.convffn{i}", cfg.D, cfg.C, cfg, rng, dtype)
    width = cfg.channels * cfg.patch.P if cfg.enable_patching else cfg.channels
    layers.init_linear(params, f"{prefix}.proj", width, cfg.d_model, rng, dtype)
    for i in range(cfg.n_sa_layers):
        layers.init_encoder_layer(params, f"{prefix}.sa{i}", cfg.d_model, cfg.ffn_width, rng, dtype)


@dataclass
class SensorBatch:
    """Time-padded batch: values [B, D, C, Lmax], lengths [B], placement_ids [B, D]."""

    values: np.ndarray
    lengths: np.ndarray
    placement_ids: np.ndarray

    @property
    def time_mask(self) -> np.ndarray:
        return np.arange(self.values.shape[-1])[None, :] < self.lengths[:, None]

    def __len__(self) -> int:
        return self.values.shape[0]


def collate_sensors(seqs: Sequence[SensorSequence], dtype=np.float32) -> SensorBatch:
    if not seqs:
        raise ValueError("cannot collate an empty batch")
    d, c = seqs[0].D, seqs[0].C
    for s in seqs:
        if (s.D, s.C) != (d, c):
            raise ShapeError(f"mixed device/channel layouts in batch: {(s.D, s.C)} vs {(d, c)}")
    lmax = max(s.L for s in seqs)
    values = np.zeros((len(seqs), d, c, lmax), dtype=dtype)
    for i, s in enumerate(seqs):
        values[i, :, :, : s.L] = s.values
    lengths = np.array([s.L for s in seqs])
    ids = np.array([s.placement_ids for s in seqs], dtype=np.int64)
    return SensorBatch(values, lengths, ids)


def _pe_rows(n: int, d: int, base: float) -> np.ndarray:
    cap = max(512, 1 << math.ceil(math.log2(max(n, 1))))
    return pe_table(d, base, cap).table[:n]


def encode_sensor_batch(batch: SensorBatch, params: dict, cfg: EncoderConfig, prefix="sensor"):
    """Return ``(features [B, L1, d_model] Tensor, token_mask [B, L1] bool)``."""
    bsz, d, c, lmax = batch.values.shape
    if (d, c) != (cfg.D, cfg.C):
        raise ShapeError(f"encoder configured for D={cfg.D}, C={cfg.C}; batch has D={d}, C={c}")
    if batch.placement_ids.size and batch.placement_ids.max() >= cfg.num_placements:
        raise IndexError(f"placement id {batch.placement_ids.max()} >= table size {cfg.num_placements}")
    dtype = params[f"{prefix}.proj.w"].dtype
    time_mask = batch.time_mask
    tm = time_mask.astype(dtype)
    x = Tensor(batch.values.astype(dtype, copy=False))

    if cfg.enable_placement:
        x = add_placement(x, batch.placement_ids, params[f"{prefix}.placement"])
        x = ops.mul(x, tm[:, None, None, :])
    x = x.reshape(bsz, d * c, lmax)

    if cfg.enable_convffn:
        for i in range(cfg.n_convffn_blocks):
            x = conv_ffn_block(x, d, c, params, f"{prefix}.convffn{i}", cfg.n_final_pwconv, time_mask=time_mask)

    if cfg.enable_patching:
        tokens = patchify(x, cfg.patch)  # [B, N, DC*P]
        n_tok = np.array([cfg.patch.num_patches(int(n)) for n in batch.lengths])
    else:
        tokens = x.transpose(0, 2, 1)  # [B, L, DC]
        n_tok = batch.lengths.copy()
    token_mask = np.arange(tokens.shape[1])[None, :] < n_tok[:, None]

    h = layers.linear(tokens, params, f"{prefix}.proj")
    if cfg.enable_pe:
        h = ops.add(h, _pe_rows(h.shape[1], cfg.d_model, cfg.pe_base).astype(dtype))
    bias = layers.key_padding_bias(token_mask)
    for i in range(cfg.n_sa_layers):
        h = layers.encoder_layer(h, params, f"{prefix}.sa{i}", cfg.n_heads, bias)
    return h, token_mask


def sensor_encode(seq: SensorSequence, cfg: EncoderConfig, params: dict, prefix="sensor"):
    """Single-sequence form: returns features [L1, d_model] as a Tensor."""
    dtype = params[f"{prefix}.proj.w"].dtype
    feats, _ = encode_sensor_batch(collate_sensors([seq], dtype=dtype), params, cfg, prefix)
    return feats[0]
