"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .tensor import NumericError, Tensor, no_grad


def _scalar(y: Tensor, where: str) -> float:
    if y.size != 1:
        raise ValueError(f"{where}: function must return a scalar, got shape {y.shape}")
    val = float(y.data.reshape(-1)[0])
    if not np.isfinite(val):
        raise NumericError(f"{where}: non-finite function value {val}")
    return val


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    epsilon: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """Max over components of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` maps a Tensor to a scalar Tensor. Everything is evaluated in float64.
    ``indices`` restricts the numeric probe to a subset of flat positions.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    y = f(probe)
    _scalar(y, "finite_diff_check")
    if y.requires_grad:
        y.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = _scalar(f(Tensor(base.copy())), "finite_diff_check(+eps)")
            flat[i] = orig - epsilon
            fm = _scalar(f(Tensor(base.copy())), "finite_diff_check(-eps)")
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def check_params(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Run :func:`finite_diff_check` for every named parameter of ``loss_fn``.

    Other parameters are held fixed (cast to float64). With ``max_entries`` a
    random subset of each tensor's entries is probed.
    """
    rng = rng or np.random.default_rng(0)
    fixed = {k: Tensor(np.asarray(v.data, dtype=np.float64)) for k, v in params.items()}
    report = {}
    for name, p in params.items():
        def f(w, name=name):
            return loss_fn({**fixed, name: w})

        idx = None
        if max_entries is not None and p.size > max_entries:
            idx = rng.choice(p.size, size=max_entries, replace=False).tolist()
        report[name] = finite_diff_check(f, p.data, epsilon, indices=idx)
    return report
