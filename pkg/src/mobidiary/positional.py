"""Sinusoidal positional encodings and their similarity-decay profile."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

SENSOR_PE_BASE = 1000.0
TEXT_PE_BASE = 10000.0


@dataclass(frozen=True)
class PositionalEncoding:
    d: int
    base: float
    max_len: int
    table: np.ndarray  # [max_len, d], float64

    def rows(self, n: int) -> np.ndarray:
        if n > self.max_len:
            raise ValueError(f"requested {n} positions, table holds {self.max_len}")
        return self.table[:n]


def frequencies(d: int, base: float) -> np.ndarray:
    """Angular rate of each sin/cos pair: ``base ** (-2i / d)``."""
    return base ** (-2.0 * np.arange(d // 2) / d)


def pe_table(d: int, base: float = SENSOR_PE_BASE, max_len: int = 512) -> PositionalEncoding:
    """Row k holds sin(k * theta_i) at column 2i and cos(k * theta_i) at 2i + 1."""
    if d <= 0 or d % 2:
        raise ValueError(f"positional encoding width must be a positive even number, got {d}")
    if base <= 0:
        raise ValueError(f"base must be positive, got {base}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    table = _cached_table(int(d), float(base), int(max_len))
    return PositionalEncoding(d=d, base=float(base), max_len=max_len, table=table)


@functools.lru_cache(maxsize=32)
def _cached_table(d: int, base: float, max_len: int) -> np.ndarray:
    angles = np.arange(max_len, dtype=np.float64)[:, None] * frequencies(d, base)[None, :]
    table = np.empty((max_len, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table.flags.writeable = False
    return table


def pe_decay_curve(d: int, base: float = SENSOR_PE_BASE, max_lag: int = 200, max_len: int | None = None):
    """Normalized similarity g(lag) = <p_0, p_lag> / (d / 2) for lag = 0..max_lag.

    Returns a list of ``(lag, similarity)`` pairs with g(0) == 1.
    """
    max_len = max_len if max_len is not None else max_lag + 1
    if max_lag < 0 or max_lag >= max_len:
        raise ValueError(f"max_lag must satisfy 0 <= max_lag < max_len ({max_len}), got {max_lag}")
    enc = pe_table(d, base, max_len)
    sims = enc.table[: max_lag + 1] @ enc.table[0] / (d / 2)
    return [(lag, float(s)) for lag, s in enumerate(sims)]


def write_decay_csv(curve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("lag,similarity\n")
        for lag, sim in curve:
            fh.write(f"{lag},{sim!r}\n")
