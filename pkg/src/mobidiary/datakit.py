"""Synthetic captioned sensor clips, QA sets, and the JSON-lines dataset format.

Each clip is a sequence of 3-6 actions drawn from a catalog of eight motifs.
An action shows up as a sinusoid (plus a second harmonic) whose frequency,
amplitude, channel weighting and per-device gain depend on the motif. Wi-Fi
clips mix six latent channels into 30 subcarriers per link through a fixed
random matrix and carry more noise.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .captions import ACTION_LABELS, MAX_ACTIONS, parse_caption, render_caption
from .metrics import QAItem
from .sensor_encoder import IMU, IMU_CHANNELS, MODALITIES, WIFI, SensorSequence

IMU_PLACEMENTS = ("glasses", "earbuds", "phone_left", "phone_right", "watch_left", "watch_right")
WIFI_LINKS = ("link0", "link1", "link2")
WIFI_SUBCARRIERS = 30
LATENT_CHANNELS = 6

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Unreadable, malformed or schema-violating dataset content."""


@dataclass(frozen=True)
class ActionMotif:
    label: str
    frequency_hz: float
    amplitude: float
    harmonic: float
    channel_weights: tuple
    placement_gains: tuple
    link_gains: tuple


MOTIFS = {
    m.label: m
    for m in (
        ActionMotif("sit", 0.70, 0.4, 0.20, (1.0, 0.3, 0.6, 0.2, 0.8, 0.4), (0.2, 0.2, 0.6, 0.6, 0.3, 0.3), (0.4, 0.6, 0.3)),
        ActionMotif("stand", 1.15, 0.6, 0.35, (0.4, 1.0, 0.3, 0.7, 0.2, 0.6), (0.3, 0.3, 0.5, 0.5, 0.4, 0.4), (0.6, 0.3, 0.5)),
        ActionMotif("drink", 1.85, 0.8, 0.25, (0.3, 0.5, 1.0, 0.6, 0.4, 0.2), (0.6, 0.3, 0.1, 0.1, 1.0, 0.4), (0.8, 0.5, 0.4)),
        ActionMotif("write", 2.90, 0.5, 0.40, (0.6, 0.2, 0.4, 1.0, 0.3, 0.5), (0.3, 0.2, 0.1, 0.1, 0.3, 1.0), (0.3, 0.8, 0.6)),
        ActionMotif("wave", 4.40, 1.2, 0.30, (0.2, 0.8, 0.5, 0.3, 1.0, 0.4), (0.2, 0.2, 0.1, 0.1, 1.0, 0.3), (0.9, 0.4, 0.7)),
        ActionMotif("walk", 6.40, 1.0, 0.25, (0.8, 0.6, 0.2, 0.5, 0.3, 1.0), (0.5, 0.5, 1.0, 1.0, 0.7, 0.7), (0.7, 0.9, 0.8)),
        ActionMotif("jump", 9.00, 1.6, 0.30, (1.0, 0.4, 0.8, 0.3, 0.6, 0.5), (1.0, 1.0, 1.0, 1.0, 1.0, 1.0), (1.0, 0.8, 1.0)),
        ActionMotif("run", 12.50, 1.4, 0.20, (0.5, 1.0, 0.7, 0.4, 0.2, 0.8), (0.8, 0.8, 1.0, 1.0, 0.9, 0.9), (0.9, 1.0, 0.9)),
    )
}
assert tuple(sorted(MOTIFS)) == tuple(sorted(ACTION_LABELS))


@dataclass(frozen=True)
class GenSpec:
    modality: str = IMU
    n_samples: int = 100
    seed: int = 0
    rate_hz: float = 50.0
    actions_per_sample: tuple = (3, 6)
    action_duration_s: tuple = (3.0, 8.0)
    noise_sigma: Optional[float] = None
    placement_gains: Optional[tuple] = None
    patch_length: int = 25
    sequence_question: bool = False

    def __post_init__(self):
        object.__setattr__(self, "actions_per_sample", tuple(int(v) for v in self.actions_per_sample))
        object.__setattr__(self, "action_duration_s", tuple(float(v) for v in self.action_duration_s))
        if self.placement_gains is not None:
            object.__setattr__(self, "placement_gains", tuple(float(g) for g in self.placement_gains))
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if not self.rate_hz > 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        lo, hi = self.actions_per_sample
        if not 1 <= lo <= hi <= MAX_ACTIONS:
            raise ValueError(f"actions_per_sample must satisfy 1 <= lo <= hi <= {MAX_ACTIONS}, got {(lo, hi)}")
        dlo, dhi = self.action_duration_s
        if not 0 < dlo <= dhi:
            raise ValueError(f"action_duration_s must satisfy 0 < lo <= hi, got {(dlo, dhi)}")
        if round(dlo * self.rate_hz) < 1:
            raise ValueError("shortest action is under one sample at this rate")
        if round(dlo * self.rate_hz) * lo < self.patch_length:
            raise ValueError(
                f"shortest clip ({lo} x {dlo}s at {self.rate_hz} Hz) is shorter than patch length {self.patch_length}"
            )
        top = max(m.frequency_hz for m in MOTIFS.values())
        if top >= 0.5 * self.rate_hz:
            raise ValueError(f"rate_hz {self.rate_hz} cannot represent the {top} Hz motif (Nyquist)")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.placement_gains is not None and len(self.placement_gains) != self.D:
            raise ValueError(f"placement_gains needs {self.D} entries, got {len(self.placement_gains)}")

    @property
    def D(self) -> int:
        return len(IMU_PLACEMENTS) if self.modality == IMU else len(WIFI_LINKS)

    @property
    def C(self) -> int:
        return IMU_CHANNELS if self.modality == IMU else WIFI_SUBCARRIERS

    @property
    def sigma(self) -> float:
        if self.noise_sigma is not None:
            return self.noise_sigma
        return 0.1 if self.modality == IMU else 0.3

    @property
    def device_gains(self) -> np.ndarray:
        return np.ones(self.D) if self.placement_gains is None else np.asarray(self.placement_gains)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actions_per_sample"] = list(self.actions_per_sample)
        d["action_duration_s"] = list(self.action_duration_s)
        if self.placement_gains is not None:
            d["placement_gains"] = list(self.placement_gains)
        return d


@dataclass(frozen=True)
class Action:
    label: str
    start_s: float
    end_s: float


@dataclass(eq=False)
class Sample:
    id: str
    sequence: SensorSequence
    caption: str
    actions: list
    qa: list

    @property
    def labels(self) -> list:
        return [a.label for a in self.actions]

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        a, b = self.sequence, other.sequence
        return (
            self.id == other.id
            and self.caption == other.caption
            and self.actions == other.actions
            and self.qa == other.qa
            and a.modality == b.modality
            and a.sample_rate_hz == b.sample_rate_hz
            and a.placement_ids == b.placement_ids
            and a.values.dtype == b.values.dtype
            and a.values.shape == b.values.shape
            and a.values.tobytes() == b.values.tobytes()
        )


# -- generation ----------------------------------------------------------------

def mixing_matrices(seed: int) -> np.ndarray:
    """Per-link [C_sub, 6] mixing from latent motion channels to subcarriers."""
    rng = np.random.default_rng([seed, 0x5715])
    return rng.standard_normal((len(WIFI_LINKS), WIFI_SUBCARRIERS, LATENT_CHANNELS)) / math.sqrt(LATENT_CHANNELS)


def synth_signal(actions: Sequence[Action], spec: GenSpec, rng: np.random.Generator) -> SensorSequence:
    """Render an action timeline into a [D, C, L] float32 recording."""
    length = round(actions[-1].end_s * spec.rate_hz)
    n_latent = IMU_CHANNELS if spec.modality == IMU else LATENT_CHANNELS
    latent = np.zeros((spec.D, n_latent, length))
    t = np.arange(length) / spec.rate_hz
    gains = spec.device_gains
    for act in actions:
        motif = MOTIFS[act.label]
        lo, hi = round(act.start_s * spec.rate_hz), round(act.end_s * spec.rate_hz)
        tt = t[lo:hi]
        profile = motif.placement_gains if spec.modality == IMU else motif.link_gains
        phase = rng.uniform(0, 2 * np.pi, size=(spec.D, n_latent, 2))
        wave = np.sin(2 * np.pi * motif.frequency_hz * tt + phase[..., :1])
        if 2 * motif.frequency_hz < 0.45 * spec.rate_hz:
            wave = wave + motif.harmonic * np.sin(4 * np.pi * motif.frequency_hz * tt + phase[..., 1:])
        scale = motif.amplitude * (gains * np.asarray(profile))[:, None, None] * np.asarray(motif.channel_weights)[None, :, None]
        latent[:, :, lo:hi] = scale * wave
    if spec.modality == WIFI:
        latent = np.einsum("dsk,dkl->dsl", mixing_matrices(spec.seed), latent)
    if spec.sigma > 0:
        latent = latent + rng.normal(0.0, spec.sigma, size=latent.shape)
    placement = list(range(spec.D))
    return SensorSequence(spec.modality, latent.astype(np.float32), spec.rate_hz, placement)


def sample_timeline(spec: GenSpec, rng: np.random.Generator) -> list:
    """Random labels (no immediate repeats) with whole-sample durations."""
    k = int(rng.integers(spec.actions_per_sample[0], spec.actions_per_sample[1] + 1))
    labels = []
    for _ in range(k):
        choices = [lab for lab in ACTION_LABELS if not labels or lab != labels[-1]]
        labels.append(choices[int(rng.integers(len(choices)))])
    actions, pos = [], 0
    for lab in labels:
        n = max(1, round(rng.uniform(*spec.action_duration_s) * spec.rate_hz))
        actions.append(Action(lab, pos / spec.rate_hz, (pos + n) / spec.rate_hz))
        pos += n
    return actions


def make_qa(labels: Sequence[str], rng: np.random.Generator, sequence_question: bool = False) -> list:
    """Count, first, last and one random k-th action.

    ``sequence_question`` adds "what actions did the user perform in order?",
    which makes a perfect score imply the whole label list is right.
    """
    k = int(rng.integers(1, len(labels) + 1))
    qa = [
        QAItem("how many actions did the user perform?", str(len(labels))),
        QAItem("what was the first action?", labels[0]),
        QAItem("what was the last action?", labels[-1]),
        QAItem(f"what was action number {k}?", labels[k - 1]),
    ]
    if sequence_question:
        qa.append(QAItem("what actions did the user perform in order?", " ".join(labels)))
    return qa


def sample_id(spec: GenSpec, index: int) -> str:
    return f"{spec.modality}-{spec.seed}-{index:06d}"


def gen_sample(spec: GenSpec, index: int) -> Sample:
    """Sample ``index`` depends only on (spec, index), never on its neighbours."""
    rng = np.random.default_rng([spec.seed, index])
    actions = sample_timeline(spec, rng)
    seq = synth_signal(actions, spec, rng)
    labels = [a.label for a in actions]
    return Sample(sample_id(spec, index), seq, render_caption(labels), actions, make_qa(labels, rng, spec.sequence_question))


def gen_samples(spec: GenSpec) -> list:
    return [gen_sample(spec, i) for i in range(spec.n_samples)]


def hash_order(ids: Iterable[str]) -> list:
    return sorted(ids, key=lambda s: (hashlib.sha256(s.encode("utf-8")).hexdigest(), s))


def split_by_hash(samples: Sequence[Sample], n_train: Optional[int] = None) -> tuple:
    """Deterministic split: ids ordered by SHA-256, first ``n_train`` go to train.

    The default is 80% (at least one sample on each side when n >= 2).
    """
    n = len(samples)
    if n_train is None:
        n_train = round(0.8 * n)
        if n >= 2:
            n_train = min(max(n_train, 1), n - 1)
    if not 0 <= n_train <= n:
        raise ValueError(f"n_train must lie in [0, {n}], got {n_train}")
    by_id = {s.id: s for s in samples}
    order = hash_order(by_id)
    train_ids = set(order[:n_train])
    train = [s for s in samples if s.id in train_ids]
    test = [s for s in samples if s.id not in train_ids]
    return train, test


@dataclass
class Dataset:
    train: list
    test: list
    manifest: dict = field(default_factory=dict)


def gen_dataset(spec: GenSpec, n_train: Optional[int] = None) -> Dataset:
    if spec.n_samples < 2:
        raise ValueError("a train/test split needs n_samples >= 2")
    train, test = split_by_hash(gen_samples(spec), n_train)
    manifest = {
        "format_version": FORMAT_VERSION,
        "genspec": spec.to_dict(),
        "train": [s.id for s in train],
        "test": [s.id for s in test],
    }
    return Dataset(train, test, manifest)


def select_devices(samples: Sequence[Sample], devices: Sequence[int]) -> list:
    """Keep only the listed device (or link) rows of every sample.

    Used to train on a subset of wearables, e.g. watches only.
    """
    devices = list(devices)
    if not devices or len(set(devices)) != len(devices):
        raise ValueError("devices must be a nonempty list without repeats")
    out = []
    for s in samples:
        seq = s.sequence
        if max(devices) >= seq.D or min(devices) < 0:
            raise ValueError(f"device index out of range for {s.id} with D={seq.D}")
        sub = SensorSequence(seq.modality, seq.values[devices], seq.sample_rate_hz,
                             [seq.placement_ids[d] for d in devices])
        out.append(Sample(s.id, sub, s.caption, list(s.actions), list(s.qa)))
    return out


# -- JSON lines ----------------------------------------------------------------

def _format_signal(values: np.ndarray) -> str:
    if not np.isfinite(values).all():
        raise DatasetError("signal contains non-finite values")
    rows = []
    for dev in values:
        chans = ["[" + ",".join(f"{v:.9g}" for v in ch.tolist()) + "]" for ch in dev]
        rows.append("[" + ",".join(chans) + "]")
    return "[" + ",".join(rows) + "]"


def sample_to_json(sample: Sample) -> str:
    seq = sample.sequence
    head = {
        "id": sample.id,
        "modality": seq.modality,
        "placement_ids": list(seq.placement_ids),
        "sample_rate_hz": float(seq.sample_rate_hz),
    }
    tail = {
        "caption": sample.caption,
        "actions": [{"label": a.label, "start_s": a.start_s, "end_s": a.end_s} for a in sample.actions],
        "qa": [{"q": item.question, "a": item.answer} for item in sample.qa],
    }
    values = np.asarray(seq.values, dtype=np.float32)
    return (
        json.dumps(head)[:-1]
        + ', "signal": '
        + _format_signal(values)
        + ", "
        + json.dumps(tail)[1:]
    )


_FIELDS = {
    "id": str,
    "modality": str,
    "placement_ids": list,
    "sample_rate_hz": (int, float),
    "signal": list,
    "caption": str,
    "actions": list,
    "qa": list,
}


def _field(rec: Mapping, name: str, kind, where: str):
    if name not in rec:
        raise DatasetError(f"{where}: missing field {name!r}")
    value = rec[name]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise DatasetError(f"{where}: field {name!r} has type {type(value).__name__}")
    return value


def sample_from_record(rec: Mapping, where: str = "record") -> Sample:
    if not isinstance(rec, Mapping):
        raise DatasetError(f"{where}: expected a JSON object")
    vals = {name: _field(rec, name, kind, where) for name, kind in _FIELDS.items()}
    try:
        signal = np.asarray(vals["signal"], dtype=np.float32)
    except (ValueError, TypeError) as exc:
        raise DatasetError(f"{where}: field 'signal' is not a rectangular [D][C][L] number array") from exc
    actions = []
    for i, a in enumerate(vals["actions"]):
        loc = f"{where}: actions[{i}]"
        if not isinstance(a, Mapping):
            raise DatasetError(f"{loc} must be an object")
        actions.append(Action(_field(a, "label", str, loc), float(_field(a, "start_s", (int, float), loc)),
                              float(_field(a, "end_s", (int, float), loc))))
    qa = []
    for i, item in enumerate(vals["qa"]):
        loc = f"{where}: qa[{i}]"
        if not isinstance(item, Mapping):
            raise DatasetError(f"{loc} must be an object")
        try:
            qa.append(QAItem(_field(item, "q", str, loc), _field(item, "a", str, loc)))
        except ValueError as exc:
            raise DatasetError(f"{loc}: {exc}") from exc
    try:
        seq = SensorSequence(vals["modality"], signal, float(vals["sample_rate_hz"]), vals["placement_ids"])
    except (ValueError, TypeError) as exc:
        raise DatasetError(f"{where}: field 'signal'/'placement_ids': {exc}") from exc
    return Sample(vals["id"], seq, vals["caption"], actions, qa)


def write_dataset(samples: Iterable[Sample], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for s in samples:
                fh.write(sample_to_json(s))
                fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path) -> list:
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    samples = []
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            samples.append(sample_from_record(rec, f"{path}:{lineno}"))
    return samples


TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"
MANIFEST_FILE = "manifest.json"


def write_dataset_dir(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc
    write_dataset(ds.train, out / TRAIN_FILE)
    write_dataset(ds.test, out / TEST_FILE)
    try:
        (out / MANIFEST_FILE).write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot write manifest in {out}: {exc}") from exc


def read_dataset_dir(data_dir) -> Dataset:
    d = Path(data_dir)
    if not d.is_dir():
        raise DatasetError(f"dataset directory {d} does not exist")
    manifest = {}
    if (d / MANIFEST_FILE).exists():
        try:
            manifest = json.loads((d / MANIFEST_FILE).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{d / MANIFEST_FILE}: malformed JSON ({exc.msg})") from exc
    test = read_dataset(d / TEST_FILE) if (d / TEST_FILE).exists() else []
    return Dataset(read_dataset(d / TRAIN_FILE), test, manifest)


# -- external data ---------------------------------------------------------------

RecordAdapter = Callable[[Mapping], Sample]
"""Maps one external record (e.g. a parsed annotation row plus its signal) to
a :class:`Sample`. The adapter owns unit conversion and label mapping; labels
outside the motif catalog are allowed but the builtin answerer only knows the
catalog verbs."""


def load_external(records: Iterable[Mapping], adapter: RecordAdapter) -> list:
    """Apply ``adapter`` to each record and check the timeline invariants."""
    out = []
    for i, rec in enumerate(records):
        s = adapter(rec)
        if not isinstance(s, Sample):
            raise DatasetError(f"adapter returned {type(s).__name__} for record {i}, expected Sample")
        problems = check_sample(s)
        if problems:
            raise DatasetError(f"record {i} ({s.id}): " + "; ".join(problems))
        out.append(s)
    return out


def check_sample(s: Sample, tol: float = 1e-9) -> list:
    """Invariant violations of a sample (empty list when it is consistent)."""
    problems = []
    if not s.actions:
        problems.append("no actions")
        return problems
    if abs(s.actions[0].start_s) > tol:
        problems.append("first action does not start at 0")
    for a, b in zip(s.actions, s.actions[1:]):
        if abs(a.end_s - b.start_s) > tol:
            problems.append(f"gap or overlap between {a.label} and {b.label}")
    for a in s.actions:
        if a.end_s <= a.start_s:
            problems.append(f"empty interval for {a.label}")
    duration = s.sequence.L / s.sequence.sample_rate_hz
    if abs(s.actions[-1].end_s - duration) > tol:
        problems.append(f"actions end at {s.actions[-1].end_s}s but the signal lasts {duration}s")
    if all(lab in MOTIFS for lab in s.labels) and len(s.labels) <= MAX_ACTIONS:
        if s.caption != render_caption(s.labels):
            problems.append("caption is not the template rendering of the labels")
        if parse_caption(s.caption) != s.labels:
            problems.append("caption does not parse back to the labels")
    return problems
