"""``cocnn`` command line: analyze, verify, train, bench.

Exit codes: 0 success, 1 a verification failed or training diverged,
2 bad usage, configuration or data. Reports go to ``--out`` (default: the
``COCNN_OUT`` environment variable, else ``./cocnn_out``).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import arch, train as tr
from .coconv import SpecError
from .tensor import GeometryError, ShapeError

OUT_ENV = "COCNN_OUT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("cocnn")


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "cocnn_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _si(x: float) -> str:
    for unit, scale in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(x) >= scale:
            return f"{x / scale:.2f}{unit}"
    return str(x)


def _config_from_args(args, default_preset=None) -> tuple[str, arch.ArchConfig]:
    preset = getattr(args, "target", None) or args.preset
    if args.config and preset:
        raise UsageError("give a preset or --config, not both")
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
        cfg, label = arch.parse_arch_config(text), Path(args.config).stem
    else:
        label = preset or default_preset
        if label is None:
            raise UsageError("a preset name or --config is required")
        cfg = arch.get_preset(label)
    if args.resolution is not None:
        cfg = arch.validate_config(replace(cfg, input_resolution=args.resolution))
    return label, cfg


# -------------------------------------------------------------------- analyze

def cmd_analyze(args) -> int:
    label, cfg = _config_from_args(args)
    net = arch.build(cfg, init=False)
    report = arch.network_cost(net)
    text = arch.write_cost_csv(report)
    path = _out_dir(args) / f"{label}_cost.csv"
    path.write_text(text)
    if args.csv:
        sys.stdout.write(text)
    else:
        width = max(len(e.label) for e in report.breakdown)
        print(f"{'layer':<{width}}  {'params':>12}  {'flops (MAC)':>16}")
        for e in report.breakdown:
            print(f"{e.label:<{width}}  {e.params:>12,}  {e.flops:>16,}")
        print(f"{label}: params={_si(report.params)} ({report.params}), "
              f"flops={_si(report.flops)} ({report.flops} {report.unit})")
    print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------- verify

def cmd_verify(args) -> int:
    from .verify import run_suite

    checks = run_suite(args.scope, seed=args.seed)
    for c in checks:
        print(f"[{'PASS' if c.ok else 'FAIL'}] {c.name}: {c.detail}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "ok", "detail"])
    for c in checks:
        w.writerow([c.name, int(c.ok), c.detail])
    path = _out_dir(args) / f"verify_{args.scope}.csv"
    path.write_text(buf.getvalue())
    ok = all(c.ok for c in checks)
    print(f"{'all checks passed' if ok else 'VERIFICATION FAILED'} ({len(checks)} lines, wrote {path})")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------- train

def _training_data(args, cfg):
    if args.overfit8:
        return tr.random_batch(8, cfg.num_classes, (3, cfg.input_resolution, cfg.input_resolution), seed=args.seed)
    if args.data:
        try:
            ds = tr.load_cifar10_batch(args.data, limit=args.limit)
        except OSError as e:
            raise tr.DataError(f"cannot read {args.data}: {e.strerror or e}") from None
        if cfg.num_classes != ds.num_classes:
            raise UsageError(f"model has {cfg.num_classes} classes, data has {ds.num_classes}")
        return ds
    if args.synthetic:
        return tr.synthetic_blobs(args.limit or 200, cfg.num_classes,
                                  (3, cfg.input_resolution, cfg.input_resolution), seed=args.seed)
    raise UsageError("training needs --data PATH, --synthetic or --overfit8")


def cmd_train(args) -> int:
    label, cfg = _config_from_args(args, default_preset="coresnet-tiny")
    if cfg.is_generator:
        raise UsageError("training drives classifiers only")
    ds = _training_data(args, cfg)
    epochs, lr, milestones = args.epochs, args.lr, tuple(args.milestones)
    batch = args.batch
    target = None
    if args.overfit8:
        # memorization run: full batch, constant lr, stop once the loss is small
        epochs = args.steps or 500
        lr = 0.01 if args.lr is None else args.lr
        milestones, batch, target = (), 8, 0.01
    schedule = tr.Schedule(0.1 if lr is None else lr, milestones)
    net = arch.build(cfg, seed=args.seed)
    t0 = time.perf_counter()
    try:
        state, history = tr.train(net, ds, epochs, schedule, seed=args.seed, batch_size=batch,
                                  augment=args.augment, max_steps=args.steps, target_loss=target)
    except tr.TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_FAIL
    elapsed = time.perf_counter() - t0
    out = _out_dir(args)
    hist_path = out / f"{label}_history.csv"
    tr.write_history_csv(history, hist_path)
    ckpt = out / f"{label}.ckpt.npz"
    meta = {"seed": args.seed, "steps": state.step, "epochs": len(history), "augment": "flip+crop4" if args.augment
            else "none", "data": "overfit8" if args.overfit8 else (args.data or "synthetic"), "lr": schedule.base_lr,
            "milestones": list(schedule.milestones)}
    tr.save_checkpoint(net, ckpt, extra=meta)
    if history:
        last = history[-1]
        final_loss, final_acc = last["train_loss"], last["train_acc"]
        if args.overfit8:
            final_loss, final_acc = tr.evaluate(net, ds, train_mode=True)
        print(f"{label}: {len(history)} epochs, {state.step} steps, final loss {final_loss:.4f}, "
              f"accuracy {final_acc:.3f}")
    else:
        print(f"{label}: no epochs run")
    print(f"wrote {hist_path} and {ckpt} ({elapsed:.1f}s)", file=sys.stderr)
    if args.overfit8 and history and final_loss >= 0.01:
        print(f"overfit check failed: loss {final_loss:.4f} >= 0.01", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------- bench

BENCH_FIELDS = ["preset", "batch", "repeats", "warmup_s", "mean_s", "min_s", "flops", "macs_per_s"]


def cmd_bench(args) -> int:
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if args.batch < 1:
        raise UsageError("--batch must be >= 1")
    label, cfg = _config_from_args(args)
    net = arch.build(cfg, seed=args.seed)
    flops = arch.network_cost(net).flops * args.batch
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch, *net.input_shape)).astype(net.dtype)
    from .layers import inference_mode

    with inference_mode():
        t0 = time.perf_counter()
        net.forward(x, train=False)
        warm = time.perf_counter() - t0
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            net.forward(x, train=False)
            times.append(time.perf_counter() - t0)
    mean = sum(times) / len(times)
    row = {"preset": label, "batch": args.batch, "repeats": args.repeats, "warmup_s": f"{warm:.6f}",
           "mean_s": f"{mean:.6f}", "min_s": f"{min(times):.6f}", "flops": flops,
           "macs_per_s": f"{flops / mean:.4e}"}
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    path = _out_dir(args) / f"{label}_bench.csv"
    path.write_text(buf.getvalue())
    if args.csv:
        sys.stdout.write(buf.getvalue())
    else:
        print(f"{label} batch {args.batch}: mean {mean * 1e3:.1f} ms, min {min(times) * 1e3:.1f} ms over "
              f"{args.repeats} runs (warmup {warm * 1e3:.1f} ms); {_si(flops)} MAC, {_si(flops / mean)} MAC/s")
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = deterministic)")
    common.add_argument("--out", help=f"report directory (default ${OUT_ENV} or ./cocnn_out)")
    common.add_argument("--csv", action="store_true", help="print CSV instead of a table")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--preset", help=f"one of: {', '.join(arch.PRESETS)}")
    model.add_argument("--config", help="JSON architecture config")
    model.add_argument("--resolution", type=int, help="input resolution override")

    p = argparse.ArgumentParser(prog="cocnn", description="Contextual convolution cost analysis and experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", parents=[common, model], help="per-layer params/FLOPs")
    a.add_argument("target", nargs="?", help="preset name")
    a.set_defaults(fn=cmd_analyze)

    v = sub.add_parser("verify", parents=[common], help="run property suites")
    v.add_argument("scope", nargs="?", default="all", choices=["parity", "oracle", "gradcheck", "all"])
    v.set_defaults(fn=cmd_verify)

    t = sub.add_parser("train", parents=[common, model], help="desk-scale training")
    t.add_argument("--data", help="CIFAR-10 binary batch file")
    t.add_argument("--synthetic", action="store_true", help="train on synthetic blobs")
    t.add_argument("--overfit8", action="store_true", help="memorize 8 fixed samples")
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--steps", type=int, help="cap on SGD steps")
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float)
    t.add_argument("--milestones", type=int, nargs="*", default=[30, 60, 80])
    t.add_argument("--limit", type=int, help="use only the first N samples")
    t.add_argument("--augment", action="store_true", help="random flip + pad-4 crop")
    t.set_defaults(fn=cmd_train, target=None)

    b = sub.add_parser("bench", parents=[common, model], help="forward latency")
    b.add_argument("target", nargs="?", help="preset name")
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--repeats", type=int, default=10)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limiter = tr.set_threads(args.threads)
    try:
        return args.fn(args)
    except (UsageError, arch.ConfigError, SpecError, GeometryError, ShapeError, tr.DataError,
            json.JSONDecodeError) as e:
        print(f"cocnn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
