"""Teacher-forced training, the loss log, and on-disk checkpoints.

Checkpoint layout (a directory)::

    index.txt      one line per tensor: name dtype shape byte_offset byte_count
    tensors.bin    all tensors back to back, little-endian, C order
    config.json    format version, model config, training state and metadata
    vocab.txt      content words, one per line (specials are implicit)
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import layers
from .model import DTYPES, CaptionModel, ModelConfig
from .numerics import AdamState, NumericError, ShapeError, Tensor, adam_step, clip_grad_norm, finite_checks, ops
from .sensor_encoder import collate_sensors
from .text import PAD, Vocabulary, build_vocab, encode_caption

CHECKPOINT_VERSION = 1
INDEX_FILE = "index.txt"
PAYLOAD_FILE = "tensors.bin"
CONFIG_FILE = "config.json"
VOCAB_FILE = "vocab.txt"

ABLATION_FLAGS = ("enable_patching", "enable_pe", "enable_placement", "enable_convffn")


class CheckpointError(ValueError):
    """Checkpoint directory is unreadable, truncated or from another version."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    max_grad_norm: Optional[float] = None
    max_steps: Optional[int] = None
    target_loss: Optional[float] = None
    eval_every: int = 0
    bucket_by_length: bool = True
    # None keeps the model config's setting
    enable_patching: Optional[bool] = None
    enable_pe: Optional[bool] = None
    enable_placement: Optional[bool] = None
    enable_convffn: Optional[bool] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be nonnegative")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive when set")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when set")
        if self.target_loss is not None and self.target_loss <= 0:
            raise ValueError("target_loss must be positive when set")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def ablation(self) -> dict:
        return {k: getattr(self, k) for k in ABLATION_FLAGS if getattr(self, k) is not None}


# -- batches -------------------------------------------------------------------

@dataclass
class TrainBatch:
    sensors: object
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


def pad_captions(token_lists: Sequence[Sequence[int]]) -> tuple:
    """[<SOS> w.. <EOS>] lists -> (inputs, targets, mask), right-padded with <PAD>."""
    width = max(len(t) for t in token_lists) - 1
    if width < 1:
        raise ValueError("captions need at least <SOS> and <EOS>")
    full = np.full((len(token_lists), width + 1), PAD, dtype=np.int64)
    for i, toks in enumerate(token_lists):
        full[i, : len(toks)] = toks
    inputs, targets = full[:, :-1], full[:, 1:]
    return inputs, targets, targets != PAD


def make_batch(samples, vocab: Vocabulary, dtype=np.float32) -> TrainBatch:
    if not samples:
        raise ValueError("empty batch")
    inputs, targets, mask = pad_captions([encode_caption(s.caption, vocab) for s in samples])
    return TrainBatch(collate_sensors([s.sequence for s in samples], dtype), inputs, targets, mask)


def teacher_forcing_loss(model: CaptionModel, batch: TrainBatch) -> Tensor:
    """Mean cross-entropy of each next ground-truth token over non-PAD targets."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits = model.forward(batch.sensors, batch.inputs)
    return ops.cross_entropy(logits, batch.targets, batch.mask)


def batch_order(lengths: Sequence[int], batch_size: int, rng: np.random.Generator, bucket: bool = True) -> list:
    """Index lists for one epoch.

    With bucketing, a shuffled permutation is cut into windows of 8 batches,
    each window is sorted by length and cut into batches, and the batch order
    is shuffled again. Similar lengths then share a batch, so little time is
    spent on padding.
    """
    perm = rng.permutation(len(lengths))
    if not bucket:
        return [perm[i : i + batch_size].tolist() for i in range(0, len(perm), batch_size)]
    window = batch_size * 8
    batches = []
    for w in range(0, len(perm), window):
        chunk = sorted(perm[w : w + window].tolist(), key=lambda i: (lengths[i], i))
        batches.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


# -- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CaptionModel
    optimizer: AdamState
    log: list = field(default_factory=list)  # (epoch, step, loss)
    seed: int = 0
    epoch: int = 0

    @property
    def step(self) -> int:
        return self.optimizer.step

    def checkpoint(self) -> "Checkpoint":
        return Checkpoint(self.model, self.optimizer, self.seed, self.epoch)


def train(
    samples,
    model_config: ModelConfig,
    cfg: TrainConfig,
    vocab: Optional[Vocabulary] = None,
    on_step: Optional[Callable[[int, int, float], None]] = None,
    on_epoch: Optional[Callable[[int, CaptionModel], None]] = None,
) -> TrainResult:
    """Train from scratch; fully determined by ``cfg.seed`` and the inputs.

    The vocabulary is built from ``samples`` unless one is supplied. Ablation
    flags set in ``cfg`` override those in ``model_config``. Training stops
    early after ``cfg.max_steps`` updates, or at the end of the first epoch
    whose mean batch loss is below ``cfg.target_loss``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    vocab = vocab or build_vocab(s.caption for s in samples)
    model_config = model_config.with_ablation(**cfg.ablation())
    model = CaptionModel.create(model_config, vocab, seed=cfg.seed)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(model, opt, seed=cfg.seed)
    for p in model.params.values():
        p.requires_grad = True

    rng = np.random.default_rng([cfg.seed, 1])
    lengths = [s.sequence.L for s in samples]
    # train_step checks the loss and gradients, so per-op checks are redundant here
    with finite_checks(False):
        for epoch in range(1, cfg.epochs + 1):
            for b_idx, idx in enumerate(batch_order(lengths, cfg.batch_size, rng, cfg.bucket_by_length)):
                batch = make_batch([samples[i] for i in idx], vocab, model.dtype)
                loss = train_step(model, batch, opt, cfg.max_grad_norm, where=f"epoch {epoch}, batch index {b_idx}")
                result.log.append((epoch, opt.step, loss))
                if on_step:
                    on_step(epoch, opt.step, loss)
                if cfg.max_steps is not None and opt.step >= cfg.max_steps:
                    result.epoch = epoch
                    return result
            result.epoch = epoch
            if on_epoch and cfg.eval_every and epoch % cfg.eval_every == 0:
                on_epoch(epoch, model)
            epoch_losses = [loss for e, _, loss in result.log if e == epoch]
            if cfg.target_loss is not None and sum(epoch_losses) / len(epoch_losses) < cfg.target_loss:
                break
    return result


def train_step(model: CaptionModel, batch: TrainBatch, opt: AdamState, max_grad_norm=None, where="batch") -> float:
    for p in model.params.values():
        p.grad = None
    loss = teacher_forcing_loss(model, batch)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at {where} (step {opt.step + 1})")
    loss.backward()
    grads = {k: p.grad for k, p in model.params.items()}
    for k, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k} at {where} (step {opt.step + 1})")
    if max_grad_norm is not None:
        clip_grad_norm(grads, max_grad_norm)
    adam_step(model.params, grads, opt)
    for p in model.params.values():
        p.grad = None
    return value


def write_loss_log(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in rows:
            w.writerow([epoch, step, repr(float(loss))])


# -- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    model: CaptionModel
    optimizer: AdamState
    seed: int = 0
    epoch: int = 0
    version: int = CHECKPOINT_VERSION

    @property
    def step(self) -> int:
        return self.optimizer.step

    def tensors(self) -> dict:
        out = {f"param/{k}": v.data for k, v in sorted(self.model.params.items())}
        for k in sorted(self.optimizer.m):
            out[f"adam.m/{k}"] = self.optimizer.m[k]
            out[f"adam.v/{k}"] = self.optimizer.v[k]
        return out


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` to directory ``path`` atomically (temp dir + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        lines, offset = [], 0
        with open(tmp / PAYLOAD_FILE, "wb") as fh:
            for name, arr in ckpt.tensors().items():
                raw = _le(arr).tobytes()
                shape = "x".join(str(s) for s in arr.shape) or "scalar"
                lines.append(f"{name} {arr.dtype.name} {shape} {offset} {len(raw)}")
                fh.write(raw)
                offset += len(raw)
        (tmp / INDEX_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
        opt = ckpt.optimizer
        meta = {
            "version": ckpt.version,
            "model": ckpt.model.config.to_dict(),
            "vocab_file": VOCAB_FILE,
            "seed": ckpt.seed,
            "epoch": ckpt.epoch,
            "step": opt.step,
            "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                          "weight_decay": opt.weight_decay},
            "init_scheme": layers.INIT_SCHEME,
        }
        (tmp / CONFIG_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        ckpt.model.vocab.save(tmp / VOCAB_FILE)
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _parse_index(text: str, where: Path) -> dict:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise CheckpointError(f"{where}:{lineno}: expected 'name dtype shape offset nbytes'")
        name, dtype, shape, offset, nbytes = parts
        try:
            dt = np.dtype(dtype)
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            entries[name] = (dt, dims, int(offset), int(nbytes))
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{where}:{lineno}: bad entry for {name!r}: {exc}") from exc
        if dt.itemsize * math.prod(dims) != int(nbytes):
            raise CheckpointError(f"{where}:{lineno}: byte count of {name!r} does not match its shape")
    return entries


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_dir():
        raise CheckpointError(f"checkpoint directory {path} does not exist")
    for f in (INDEX_FILE, PAYLOAD_FILE, CONFIG_FILE, VOCAB_FILE):
        if not (path / f).exists():
            raise CheckpointError(f"checkpoint {path} is missing {f}")
    try:
        meta = json.loads((path / CONFIG_FILE).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path / CONFIG_FILE}: malformed JSON ({exc.msg})") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {meta.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        config = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path / CONFIG_FILE}: invalid model config: {exc}") from exc
    vocab = Vocabulary.load(path / VOCAB_FILE)
    entries = _parse_index((path / INDEX_FILE).read_text(encoding="utf-8"), path / INDEX_FILE)
    payload = (path / PAYLOAD_FILE).read_bytes()

    def tensor(name):
        if name not in entries:
            raise CheckpointError(f"checkpoint {path} has no tensor {name!r}")
        dt, dims, offset, nbytes = entries[name]
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(f"payload truncated: tensor {name!r} needs bytes [{offset}, {offset + nbytes})"
                                  f" but {PAYLOAD_FILE} has {len(payload)}")
        arr = np.frombuffer(payload, dtype=dt.newbyteorder("<"), count=math.prod(dims), offset=offset)
        return arr.reshape(dims).astype(dt.newbyteorder("="), copy=True)

    names = sorted(k[len("param/"):] for k in entries if k.startswith("param/"))
    params = {k: Tensor(tensor(f"param/{k}"), name=k) for k in names}
    expected_dtype = np.dtype(DTYPES[config.dtype])
    for k, p in params.items():
        if p.dtype != expected_dtype:
            raise CheckpointError(f"tensor {k!r} has dtype {p.dtype}, config says {config.dtype}")
    try:
        model = CaptionModel(config, vocab, params)
    except ValueError as exc:
        raise ShapeError(f"checkpoint {path}: {exc}") from exc
    o = meta.get("optimizer", {})
    opt = AdamState(**{f.name: o[f.name] for f in fields(AdamState) if f.name in o})
    opt.step = int(meta.get("step", 0))
    for k in sorted(k[len("adam.m/"):] for k in entries if k.startswith("adam.m/")):
        opt.m[k] = tensor(f"adam.m/{k}")
        opt.v[k] = tensor(f"adam.v/{k}")
    return Checkpoint(model, opt, int(meta.get("seed", 0)), int(meta.get("epoch", 0)), meta["version"])


def payload_bytes(path) -> bytes:
    return (Path(path) / PAYLOAD_FILE).read_bytes()


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
