"""Caption a list of samples with a trained model and score the result."""

from __future__ import annotations

from typing import Optional, Sequence

from . import metrics
from .generator import greedy_decode_batch
from .numerics import finite_checks
from .sensor_encoder import collate_sensors


def decode_samples(model, samples: Sequence, batch_size: int = 16) -> list:
    """Greedy captions in input order. Samples are batched by length."""
    order = sorted(range(len(samples)), key=lambda i: (samples[i].sequence.L, i))
    out: list = [None] * len(samples)
    with finite_checks(False):
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            batch = collate_sensors([samples[i].sequence for i in idx], model.dtype)
            for i, ids in zip(idx, greedy_decode_batch(model, batch, model.decode_cfg)):
                out[i] = model.vocab_detokenize(ids)
    return out


def evaluate_model(model, samples: Sequence, answerer=None, batch_size: int = 16,
                   captions: Optional[list] = None) -> metrics.MetricReport:
    if not samples:
        raise ValueError("nothing to evaluate")
    captions = captions if captions is not None else decode_samples(model, samples, batch_size)
    refs = [s.caption for s in samples]
    return metrics.evaluate(captions, refs, [s.qa for s in samples], answerer)
