"""End-to-end caption model: sensor encoder + text encoder + generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import generator, sensor_encoder
from .numerics import Tensor
from .sensor_encoder import EncoderConfig, PatchConfig
from .text import TextEncoderConfig, Vocabulary, detokenize, encode_text_batch, init_text_encoder

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_text_layers: int = 2
    pe_base_text: float = 10000.0
    t_max: int = generator.T_MAX
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.n_text_layers < 1:
            raise ValueError("n_text_layers must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")

    @property
    def d_model(self) -> int:
        return self.encoder.d_model

    @property
    def n_heads(self) -> int:
        return self.encoder.n_heads

    def text_config(self, vocab_size: int) -> TextEncoderConfig:
        e = self.encoder
        return TextEncoderConfig(
            vocab_size=vocab_size,
            d_model=e.d_model,
            n_heads=e.n_heads,
            n_layers=self.n_text_layers,
            ffn_width=e.ffn_width,
            max_text_len=self.t_max + 2,
            pe_base=self.pe_base_text,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = dict(d.pop("encoder"))
        enc["patch"] = PatchConfig(**enc["patch"])
        return cls(encoder=EncoderConfig(**enc), **d)

    def with_ablation(self, **flags) -> "ModelConfig":
        return replace(self, encoder=replace(self.encoder, **flags))


def init_params(config: ModelConfig, vocab_size: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    dtype = DTYPES[config.dtype]
    params: dict = {}
    sensor_encoder.init_sensor_encoder(params, config.encoder, rng, dtype)
    init_text_encoder(params, config.text_config(vocab_size), rng, dtype)
    generator.init_generator(params, config.d_model, vocab_size, rng, dtype)
    return params


class CaptionModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.text_cfg = config.text_config(len(vocab))
        self.decode_cfg = generator.DecodeConfig(T_max=config.t_max)
        expected = init_params_shapes(config, len(vocab))
        got = {k: v.shape for k, v in params.items()}
        if got != expected:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(k for k in set(got) & set(expected) if got[k] != expected[k])
            raise ValueError(
                f"parameters do not match config: missing={missing} unexpected={extra} "
                + ", ".join(f"{k}: {got[k]} != {expected[k]}" for k in wrong)
            )

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> "CaptionModel":
        return cls(config, vocab, init_params(config, len(vocab), seed))

    @property
    def dtype(self):
        return DTYPES[self.config.dtype]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def encode_sensor(self, batch):
        return sensor_encoder.encode_sensor_batch(batch, self.params, self.config.encoder)

    def logits(self, feats, mask, ids) -> Tensor:
        """Scores [B, T, V] for every prefix position of ``ids``."""
        t = encode_text_batch(ids, self.params, self.text_cfg)
        z = generator.cross_attend_batch(t, feats, mask, self.params, self.config.n_heads)
        return generator.project_logits(z, self.params)

    def next_token_logits(self, feats, mask, prefix) -> np.ndarray:
        return self.logits(feats, mask, prefix).data[:, -1, :]

    def forward(self, batch, ids) -> Tensor:
        feats, mask = self.encode_sensor(batch)
        return self.logits(feats, mask, ids)

    def vocab_detokenize(self, ids) -> str:
        return detokenize(ids, self.vocab)

    def caption(self, seq):
        return generator.greedy_decode(seq, self, self.decode_cfg)


def init_params_shapes(config: ModelConfig, vocab_size: int) -> dict:
    key = (repr(config), vocab_size)
    if key not in _SHAPES:
        _SHAPES[key] = {k: v.shape for k, v in init_params(config, vocab_size, 0).items()}
    return _SHAPES[key]


_SHAPES: dict = {}
