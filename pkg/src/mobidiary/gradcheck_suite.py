"""Randomized finite-difference verification of every primitive and of the
end-to-end caption loss on a micro model (the ``gradcheck`` command)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, Iterator

import numpy as np

from .numerics import Tensor, check_params, finite_diff_check, ops

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tol


def _weighted(rng, shape):
    """Fixed random projection turning any output into a scalar."""
    w = Tensor(rng.standard_normal(shape))
    return lambda y: ops.sum(ops.mul(y, w))


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _cases(rng) -> Iterator[tuple]:
    """Yields (name, f, x) forever, cycling through the primitives."""

    def unary(name, op, x, out_shape=None):
        proj = _weighted(rng, out_shape or x.shape)
        return name, (lambda t: proj(op(t))), x

    while True:
        m, n, k = (int(v) for v in rng.integers(2, 5, size=3))
        c = rng.standard_normal((n,))
        yield unary("add", lambda t: ops.add(t, c), rng.standard_normal((m, n)))
        big = rng.standard_normal((m, n))
        yield unary("add[broadcast]", lambda t: ops.add(big, t), rng.standard_normal((n,)), (m, n))
        yield unary("sub", lambda t: ops.sub(c, t), rng.standard_normal((m, n)))
        yield unary("mul", lambda t: ops.mul(t, t), rng.standard_normal((m, n)))
        denom = _away_from_zero(rng, (m, n), 0.5)
        yield unary("div[numerator]", lambda t: ops.div(t, denom), rng.standard_normal((m, n)))
        yield unary("div[denominator]", lambda t: ops.div(1.5, t), _away_from_zero(rng, (m, n), 0.5))
        yield unary("neg", ops.neg, rng.standard_normal((m, n)))
        yield unary("exp", ops.exp, rng.standard_normal((m, n)))
        yield unary("log", ops.log, rng.uniform(0.5, 2.0, (m, n)))
        right = rng.standard_normal((n, k))
        yield unary("matmul[left]", lambda t: ops.matmul(t, right), rng.standard_normal((m, n)), (m, k))
        left = rng.standard_normal((2, m, n))
        yield unary("matmul[batched right]", lambda t: ops.matmul(left, t), rng.standard_normal((n, k)), (2, m, k))
        yield unary("sum[axis]", lambda t: ops.sum(t, axis=1), rng.standard_normal((m, n, k)), (m, k))
        yield unary("mean[keepdims]", lambda t: ops.mean(t, axis=0, keepdims=True), rng.standard_normal((m, n)),
                    (1, n))
        yield unary("reshape", lambda t: ops.reshape(t, (n, m)), rng.standard_normal((m, n)), (n, m))
        yield unary("transpose", lambda t: ops.transpose(t, (2, 0, 1)), rng.standard_normal((m, n, k)), (k, m, n))
        yield unary("getitem[slice]", lambda t: ops.getitem(t, (slice(1, None), slice(None, None, 2))),
                    rng.standard_normal((m, n)), (m - 1, (n + 1) // 2))
        rows = np.array([0, m - 1, 0])
        yield unary("getitem[repeated index]", lambda t: ops.getitem(t, rows), rng.standard_normal((m, n)), (3, n))
        other = Tensor(rng.standard_normal((m, k)))
        yield unary("concat", lambda t: ops.concat([t, other, t], axis=1), rng.standard_normal((m, n)),
                    (m, 2 * n + k))
        size, step = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        length = size + step * int(rng.integers(1, 4))
        nwin = (length - size) // step + 1
        yield unary("unfold", lambda t: ops.unfold(t, size, step), rng.standard_normal((m, length)), (m, nwin, size))
        yield unary("softmax", lambda t: ops.softmax(t, axis=-1), rng.standard_normal((m, n)))
        yield unary("log_softmax", lambda t: ops.log_softmax(t, axis=0), rng.standard_normal((m, n)))
        yield unary("layer_norm[x]", ops.layer_norm, rng.standard_normal((m, n + 2)))
        xs = Tensor(rng.standard_normal((m, n + 2)))
        beta = Tensor(rng.standard_normal(n + 2))
        yield unary("layer_norm[gamma]", lambda t: ops.layer_norm(xs, t, beta), rng.standard_normal(n + 2), (m, n + 2))
        yield unary("gelu", ops.gelu, 2 * rng.standard_normal((m, n)))
        yield unary("relu", ops.relu, _away_from_zero(rng, (m, n)))
        ids = rng.integers(0, m, size=(2, 3))
        ids[0, 0] = ids[1, 2]
        yield unary("embedding", lambda t: ops.embedding(t, ids), rng.standard_normal((m, n)), (2, 3, n))
        groups = int(rng.choice([1, 2]))
        cin, cout, kw, L = 2 * groups, 2 * groups, int(rng.choice([1, 3])), int(rng.integers(4, 8))
        w = Tensor(rng.standard_normal((cout, cin // groups, kw)))
        b = Tensor(rng.standard_normal(cout))
        yield unary(f"conv1d[x, groups={groups}]", lambda t: ops.conv1d(t, w, b, groups=groups, padding=kw // 2),
                    rng.standard_normal((2, cin, L)), (2, cout, L))
        xc = Tensor(rng.standard_normal((2, cin, L)))
        yield unary(f"conv1d[w, groups={groups}]", lambda t: ops.conv1d(xc, t, b, groups=groups, padding=(kw - 1, 0)),
                    rng.standard_normal((cout, cin // groups, kw)), (2, cout, L))
        dc = 3
        xd = Tensor(rng.standard_normal((2, dc, L)))
        yield unary("conv1d[depthwise w]", lambda t: ops.conv1d(xd, t, None, groups=dc, padding=1),
                    rng.standard_normal((dc, 1, 3)), (2, dc, L))
        targets = rng.integers(0, n, size=(m,))
        mask = np.ones(m, dtype=bool)
        mask[-1] = False
        yield "nll_loss", (lambda t: ops.nll_loss(ops.log_softmax(t), targets, mask)), rng.standard_normal((m, n))
        yield "cross_entropy", (lambda t: ops.cross_entropy(t, targets)), 3 * rng.standard_normal((m, n))


def primitive_checks(n_cases: int = 120, seed: int = 0, tol: float = TOLERANCE) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for i, (name, f, x) in zip(range(n_cases), _cases(rng)):
        results.append(CheckResult(f"{name} #{i}", finite_diff_check(f, x), tol))
    return results


def micro_model_check(seed: int = 0, tol: float = TOLERANCE) -> list:
    """End-to-end caption loss of a d_model=8, 1-head, 1-layer model on a 2-word caption."""
    from .model import CaptionModel, ModelConfig
    from .sensor_encoder import EncoderConfig, PatchConfig, SensorSequence
    from .text import Vocabulary
    from .trainer import make_batch, teacher_forcing_loss

    enc = EncoderConfig(D=2, C=6, num_placements=2, patch=PatchConfig(4, 4), d_model=8, n_heads=1,
                        n_sa_layers=1, ffn_width=8, n_convffn_blocks=1, dw_kernel=3)
    config = ModelConfig(encoder=enc, n_text_layers=1, t_max=4, dtype="float64")
    vocab = Vocabulary(["user", "walks"])
    model = CaptionModel.create(config, vocab, seed)
    rng = np.random.default_rng(seed)

    sample = SimpleNamespace(sequence=SensorSequence("imu", rng.standard_normal((2, 6, 12)), 50.0, [0, 1]),
                             caption="user walks")
    batch = make_batch([sample], vocab, np.float64)

    def loss_fn(params):
        model.params = params
        return teacher_forcing_loss(model, batch)

    report = check_params(loss_fn, model.params)
    return [CheckResult(f"micro-model d/d[{k}]", err, tol) for k, err in sorted(report.items())]


def run_suite(n_cases: int = 120, seed: int = 0, tol: float = TOLERANCE,
              report: Callable[[CheckResult], None] = lambda r: None) -> list:
    results = []
    for r in primitive_checks(n_cases, seed, tol) + micro_model_check(seed, tol):
        report(r)
        results.append(r)
    return results


def main_report(n_cases: int = 120, seed: int = 0, out=None) -> bool:
    import sys

    out = out or sys.stdout
    start = time.perf_counter()
    results = run_suite(n_cases, seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.error:.3e}  {r.name}", file=out)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s "
          f"(tolerance {TOLERANCE:g})", file=out)
    return not failed
