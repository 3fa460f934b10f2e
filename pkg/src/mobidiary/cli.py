"""Command-line interface.

Exit codes: 0 success, 1 usage or config error, 2 data or schema error,
3 numeric failure. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
from contextlib import nullcontext
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

ABLATION_VARIANTS = {
    "full": {},
    "w/o patch": {"ablation.patch": False},
    "w/o PE": {"ablation.pe": False},
    "w/o Conv-FFN": {"ablation.convffn": False},
}
PLACEMENT_VARIANT = {"w/o placement": {"ablation.placement": False}}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _thread_limit():
    raw = os.environ.get("MOBIDIARY_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"MOBIDIARY_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _samples_layout(samples):
    first = samples[0].sequence
    for s in samples:
        if (s.sequence.modality, s.sequence.D, s.sequence.C) != (first.modality, first.D, first.C):
            from .datakit import DatasetError

            raise DatasetError(f"sample {s.id} has a different modality or layout than {samples[0].id}")
    n_place = max(max(s.sequence.placement_ids) for s in samples) + 1
    return first.D, first.C, max(n_place, first.D)


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .datakit import GenSpec, gen_dataset, write_dataset_dir

    kw = {}
    if args.rate is not None:
        kw["rate_hz"] = args.rate
    if args.noise is not None:
        kw["noise_sigma"] = args.noise
    if args.patch_length is not None:
        kw["patch_length"] = args.patch_length
    try:
        spec = GenSpec(modality=args.modality, n_samples=args.n, seed=args.seed, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = gen_dataset(spec)
    if args.devices:
        from .datakit import select_devices

        try:
            keep = [int(d) for d in args.devices.split(",")]
            ds.train, ds.test = select_devices(ds.train, keep), select_devices(ds.test, keep)
        except ValueError as exc:
            raise UsageError(f"--devices: {exc}") from exc
        ds.manifest["devices"] = keep
    write_dataset_dir(ds, args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test samples to {args.out}")
    return EXIT_OK


def _train_one(run_cfg, train_samples, log_every=0):
    from .trainer import train

    D, C, n_place = _samples_layout(train_samples)
    model_cfg = run_cfg.model_config(D, C, n_place)

    def progress(epoch, step, loss):
        if log_every and step % log_every == 0:
            print(f"epoch {epoch} step {step} loss {loss:.4f}", file=sys.stderr, flush=True)

    return train(train_samples, model_cfg, run_cfg.train_config(), on_step=progress)


def cmd_train(args) -> int:
    from .config import RunConfig
    from .datakit import read_dataset_dir
    from .trainer import save_checkpoint, write_loss_log

    run_cfg = RunConfig.load(args.config)
    ds = read_dataset_dir(args.data)
    if not ds.train:
        from .datakit import DatasetError

        raise DatasetError(f"{args.data}: training split is empty")
    result = _train_one(run_cfg, ds.train, args.log_every)
    save_checkpoint(result.checkpoint(), args.out)
    log_path = Path(args.log) if args.log else Path(args.out) / "loss_log.csv"
    write_loss_log(result.log, log_path)
    print(f"trained {result.step} steps, final loss {result.log[-1][2]:.4f}; checkpoint at {args.out}")
    return EXIT_OK


def cmd_caption(args) -> int:
    from .datakit import DatasetError, read_dataset
    from .evaluation import decode_samples
    from .trainer import load_checkpoint

    model = load_checkpoint(args.ckpt).model
    samples = read_dataset(args.input)
    if not 0 <= args.index < len(samples):
        raise DatasetError(f"{args.input} has {len(samples)} samples; index {args.index} is out of range")
    print(decode_samples(model, [samples[args.index]])[0])
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import metrics
    from .datakit import DatasetError, read_dataset_dir
    from .evaluation import evaluate_model
    from .trainer import load_checkpoint

    answerer = metrics.make_answerer(args.answerer)
    model = load_checkpoint(args.ckpt).model
    ds = read_dataset_dir(args.data)
    samples = ds.train if args.split == "train" else ds.test
    if not samples:
        raise DatasetError(f"{args.data}: {args.split} split is empty")
    try:
        report = evaluate_model(model, samples, answerer)
    finally:
        if hasattr(answerer, "close"):
            answerer.close()
    print(metrics.format_table({Path(args.ckpt).name or "model": report}))
    out = Path(args.out) if args.out else Path(args.ckpt) / f"eval_{args.split}.csv"
    report.write_csv(out)
    print(f"metrics written to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import metrics
    from .config import RunConfig
    from .datakit import DatasetError, read_dataset_dir
    from .evaluation import evaluate_model

    base = RunConfig.load(args.config)
    ds = read_dataset_dir(args.data)
    if not ds.train or not ds.test:
        raise DatasetError(f"{args.data}: ablation needs nonempty train and test splits")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    variants = dict(ABLATION_VARIANTS)
    if args.with_placement:
        variants.update(PLACEMENT_VARIANT)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    per_seed = {}
    for name, overrides in variants.items():
        for seed in seeds:
            cfg = base.with_values(**overrides, **{"train.seed": seed})
            result = _train_one(cfg, ds.train, args.log_every)
            report = evaluate_model(result.model, ds.test)
            per_seed[(name, seed)] = report
            print(f"{name} seed {seed}: S-Avg {report.s_avg:.4f}", file=sys.stderr, flush=True)

    medians = {}
    for name in variants:
        reps = [per_seed[(name, s)] for s in seeds]
        medians[name] = metrics.MetricReport(
            **{k: statistics.median(getattr(r, k) for r in reps) for k in metrics.METRIC_COLUMNS},
            n_samples=reps[0].n_samples,
        )
    with open(out / "ablation_runs.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", *metrics.METRIC_COLUMNS])
        for (name, seed), rep in per_seed.items():
            w.writerow([name, seed, *(repr(float(getattr(rep, k))) for k in metrics.METRIC_COLUMNS)])
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", *metrics.METRIC_COLUMNS])
        for name, rep in medians.items():
            w.writerow([name, *(repr(float(getattr(rep, k))) for k in metrics.METRIC_COLUMNS)])
    print(f"median over seeds {seeds}")
    print(metrics.format_table(medians))
    return EXIT_OK


def cmd_pe_probe(args) -> int:
    from .positional import pe_decay_curve, write_decay_csv

    try:
        curve = pe_decay_curve(args.d, args.base, args.max_lag)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_decay_csv(curve, args.out)
    print(f"wrote {len(curve)} rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import main_report

    return EXIT_OK if main_report(args.cases, args.seed) else EXIT_NUMERIC


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mobidiary", description="Caption IMU / Wi-Fi sensor clips.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--modality", choices=("imu", "wifi"), required=True)
    g.add_argument("--n", type=int, required=True, help="number of samples (split 80/20)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--rate", type=float, help="sample rate in Hz (default 50)")
    g.add_argument("--noise", type=float, help="noise sigma (default 0.1 imu, 0.3 wifi)")
    g.add_argument("--patch-length", type=int, help="shortest clip must cover this many samples")
    g.add_argument("--devices", help="comma-separated device indices to keep, e.g. 4,5 for both watches")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a caption model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--log", help="loss log CSV (default CKPT/loss_log.csv)")
    t.add_argument("--log-every", type=int, default=0, help="print progress every N steps")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("caption", help="caption one sample")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--input", required=True, help="JSON-lines sample file")
    c.add_argument("--index", type=int, default=0)
    c.set_defaults(func=cmd_caption)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--answerer", default="builtin", help="builtin or proto:COMMAND")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", help="metrics CSV (default CKPT/eval_SPLIT.csv)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare the ablation variants")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0", help="comma-separated seeds; the table reports medians")
    a.add_argument("--with-placement", action="store_true", help="also train without placement embedding")
    a.add_argument("--log-every", type=int, default=0)
    a.set_defaults(func=cmd_ablate)

    pe = sub.add_parser("pe-probe", help="write the positional-encoding similarity decay curve")
    pe.add_argument("--d", type=int, default=128)
    pe.add_argument("--base", type=float, default=1000.0)
    pe.add_argument("--max-lag", type=int, default=200)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_pe_probe)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every primitive and a micro model")
    gc.add_argument("--cases", type=int, default=120)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .datakit import DatasetError
    from .numerics import NumericError, ShapeError
    from .trainer import CheckpointError

    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
