"""Command-line interface: gen | train | detect | eval | bench.

Every command honors --seed, --threads and --json, resolves options from
an optional JSON config file (explicit flags win), and writes a
run_manifest.json next to its outputs recording the resolved
configuration and wall-clock timings.  Run manifests contain timings and
are the one output excluded from byte-reproducibility comparisons.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dataset, detect, fht, metrics, model, train

DEFAULT_SEED = 7


def _data_dir(args, attr="out"):
    val = getattr(args, attr, None)
    if val:
        return Path(val)
    env = os.environ.get("LNET_DATA_DIR")
    if env:
        return Path(env)
    raise SystemExit(f"--{attr} not given and LNET_DATA_DIR unset")


def _apply_config_file(args, parser):
    """Fill non-explicit options from a JSON config file; flags win."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as f:
        file_opts = json.load(f)
    explicit = {a.split("=")[0].lstrip("-").replace("-", "_")
                for a in sys.argv if a.startswith("--")}
    for key, val in file_opts.items():
        key = key.replace("-", "_")
        if hasattr(args, key) and key not in explicit:
            setattr(args, key, val)
    return args


def _set_threads(n):
    if n and n > 0:
        try:
            import numba
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
        except Exception:
            pass


def _write_run_manifest(out_dir, command, args, t0, outputs):
    payload = {
        "command": command,
        "version": __version__,
        "config": {k: (str(v) if isinstance(v, Path) else v)
                   for k, v in sorted(vars(args).items()) if k != "func"},
        "outputs": sorted(str(o) for o in outputs),
        "wall_seconds": round(time.perf_counter() - t0, 3),
    }
    path = Path(out_dir) / "run_manifest.json"
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)


def _emit(args, payload, human):
    print(json.dumps(payload, sort_keys=True) if args.json else human)


# -------------------------------------------------------------- commands


def cmd_gen(args):
    t0 = time.perf_counter()
    out = _data_dir(args)
    n_train = args.train_count
    n_test = args.count - n_train
    if n_test < 0:
        raise SystemExit(f"--train-count {n_train} exceeds --count {args.count}")
    manifest = dataset.generate_dataset(args.seed, out, count=args.count,
                                        split=(n_train, n_test))
    _write_run_manifest(out, "gen", args, t0, [out / "manifest.json"])
    _emit(args, {"out": str(out), "count": args.count,
                 "train": n_train, "test": n_test, "seed": args.seed},
          f"wrote {args.count} samples ({n_train} train / {n_test} test) to {out}")
    return 0


def cmd_train(args):
    t0 = time.perf_counter()
    manifest = dataset.load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = train.TrainConfig(variant=args.variant, epochs=args.epochs,
                            batch_size=args.batch_size, lr0=args.lr,
                            weight_decay=args.weight_decay, seed=args.seed)
    ckpt = out / f"lnet_{args.variant}_seed{args.seed}.ckpt"
    log = None if args.json else lambda msg: print(msg, flush=True)
    result = train.train(cfg, manifest, checkpoint_path=ckpt, log=log)
    csv_path = out / f"metrics_{args.variant}_seed{args.seed}.csv"
    with open(csv_path, "w") as f:
        for row in train.history_csv_rows(result.history):
            f.write(",".join(str(v) for v in row) + "\n")
    _write_run_manifest(out, "train", args, t0, [ckpt, csv_path])
    final_loss = result.history[-1][2]
    _emit(args, {"checkpoint": str(ckpt), "metrics": str(csv_path),
                 "final_train_loss": final_loss},
          f"checkpoint {ckpt} (final train loss {final_loss:.6f})")
    return 0


def _detector_for(args):
    if args.method == "baseline":
        window = detect.BASELINE_WINDOW if args.window is None else args.window
        min_conf = (detect.BASELINE_MIN_CONF if args.min_conf is None
                    else args.min_conf)
        return lambda img: detect.baseline_detect(
            img, window, min_conf,
            length_normalize=not args.no_length_norm,
            subtract_background=not args.no_bg_subtract)
    ckpt = args.model
    if not ckpt:
        raise SystemExit("--model is required for --method lnet")
    net = model.load_model(ckpt)
    window = detect.DEFAULT_WINDOW if args.window is None else args.window
    min_conf = detect.DEFAULT_MIN_CONF if args.min_conf is None else args.min_conf
    return lambda img: detect.lnet_detect(net, img, window, min_conf)


def _dump_hough_png(path, hmap):
    from PIL import Image
    planes = [p / m if (m := p.max()) > 0 else p for p in hmap]
    stack = np.vstack([np.vstack([p, np.ones((2, p.shape[1]))]) for p in planes])
    Image.fromarray((stack * 255).astype(np.uint8), mode="L").save(path)


def cmd_detect(args):
    t0 = time.perf_counter()
    manifest = dataset.load_manifest(args.data)
    records = dataset.split_records(manifest, args.split)
    if not records:
        raise SystemExit(f"no records in split {args.split!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    detector = _detector_for(args)
    outputs = []
    for rec in records:
        sample = dataset.load_sample(manifest, rec)
        dets = detector(sample.image)
        path = out / f"{rec.id}.detections.json"
        with open(path, "w") as f:
            json.dump([d.to_json() for d in dets], f, sort_keys=True, indent=1)
        outputs.append(path)
        if args.dump_hough:
            Path(args.dump_hough).mkdir(parents=True, exist_ok=True)
            _dump_hough_png(Path(args.dump_hough) / f"{rec.id}.hough.png",
                            fht.fht_forward(sample.image))
    _write_run_manifest(out, "detect", args, t0, outputs)
    _emit(args, {"out": str(out), "images": len(records)},
          f"wrote detections for {len(records)} images to {out}")
    return 0


def _load_detections(det_dir, record, n):
    path = Path(det_dir) / f"{record.id}.detections.json"
    if not path.exists():
        raise SystemExit(f"missing detections for sample id {record.id}: {path}")
    with open(path) as f:
        rows = json.load(f)
    from .geometry import BoundaryLine
    out = []
    for r in rows:
        cell = fht.DyadicLine(r["quadrant"], r["offset_x"], r["shift_s"], n)
        line = BoundaryLine((r["x0"], r["y0"]), (r["x1"], r["y1"]), n)
        out.append(detect.Detection(line, r["confidence"], cell))
    return out


def cmd_eval(args):
    t0 = time.perf_counter()
    manifest = dataset.load_manifest(args.data)
    records = dataset.split_records(manifest, args.split)
    if not records:
        raise SystemExit(f"no records in split {args.split!r}")
    n = manifest.image_size
    cfg = metrics.MatchConfig(distance_threshold=args.distance_threshold)
    pairs = []
    for rec in records:
        gt = [dataset.BoundaryLine.from_list(v, n) for v in rec.lines]
        pairs.append((gt, _load_detections(args.detections, rec, n)))
    curve = metrics.pr_curve(pairs, cfg)
    summary = metrics.summarize(curve)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = out / "report.json"
    extra = {"distance_threshold": args.distance_threshold,
             "n_samples": len(records), "split": args.split}
    metrics.write_report(report, summary, extra)
    pr_csv = out / "pr_curve.csv"
    metrics.write_pr_csv(pr_csv, curve)
    outputs = [report, pr_csv]
    if args.plot:
        metrics.plot_pr(args.plot, curve)
        outputs.append(Path(args.plot))
    _write_run_manifest(out, "eval", args, t0, outputs)
    _emit(args, dict(summary, **extra),
          "AP {ap:.2f}  precision@90recall {precision_at_90recall:.2f}  "
          "recall@90precision {recall_at_90precision:.2f}".format(**summary))
    return 0


def cmd_bench(args):
    t0 = time.perf_counter()
    sizes = [int(s) for s in args.sizes.split(",")]
    rng = np.random.default_rng(args.seed)
    timings = {}
    for n in sizes:
        img = rng.random((n, n))
        fht.fht_forward(img)  # warm the JIT
        best = min(_timed(fht.fht_forward, img) for _ in range(3))
        timings[n] = best
    rows = []
    for variant in model.VARIANTS:
        table = model.flop_count(model.build(variant), 256)
        rows.append({"variant": variant,
                     "total_mflop": round(table["total_mflop"], 1),
                     "fht_mflop": round(table["fht_mflop"], 1)})
    payload = {"fht_seconds": {str(k): round(v, 4) for k, v in timings.items()},
               "analytic_mflop_256": rows}
    if 1024 in timings and 256 in timings:
        payload["scaling_ratio_1024_over_256"] = round(
            timings[1024] / timings[256], 2)
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for n, s in timings.items():
            print(f"fht n={n}: {s * 1e3:.2f} ms")
        for r in rows:
            print(f"{r['variant']}: {r['total_mflop']} MFLOP "
                  f"(HT row {r['fht_mflop']})")
        if "scaling_ratio_1024_over_256" in payload:
            print(f"time ratio 1024/256: {payload['scaling_ratio_1024_over_256']}")
    return 0


def _timed(fn, *a):
    t = time.perf_counter()
    fn(*a)
    return time.perf_counter() - t


# ------------------------------------------------------------ entry point


def _add_common(p):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--threads", type=int, default=0,
                   help="compute threads; results are identical for any value")
    p.add_argument("--json", action="store_true", help="JSON summary on stdout")
    p.add_argument("--config", help="JSON file with option defaults")


def build_parser():
    ap = argparse.ArgumentParser(prog="lnet",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic dataset")
    g.add_argument("--out", help="output directory (or LNET_DATA_DIR)")
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--train-count", type=int, default=None)
    _add_common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network variant")
    t.add_argument("--variant", choices=model.VARIANTS, default="fast")
    t.add_argument("--data", required=True, help="dataset dir or manifest.json")
    t.add_argument("--out", default=".", help="checkpoint/metrics directory")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=1e-5)
    _add_common(t)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run a detector over a dataset split")
    d.add_argument("--method", choices=("baseline", "lnet"), required=True)
    d.add_argument("--model", help="checkpoint path (lnet method)")
    d.add_argument("--data", required=True)
    d.add_argument("--split", choices=("train", "test"), default="test")
    d.add_argument("--out", required=True)
    d.add_argument("--window", type=int, default=None,
                   help="NMS window (default: 17 baseline, 5 lnet)")
    d.add_argument("--min-conf", type=float, default=None,
                   help="NMS floor (default: 0.02 baseline, 0.05 lnet)")
    d.add_argument("--no-length-norm", action="store_true",
                   help="baseline: keep raw vote sums")
    d.add_argument("--no-bg-subtract", action="store_true",
                   help="baseline: keep the per-image intensity pedestal")
    d.add_argument("--dump-hough", help="also dump raw Hough maps as PNGs here")
    _add_common(d)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--detections", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--distance-threshold", type=float, default=5.0)
    e.add_argument("--plot", help="write a PR-curve PNG to this path")
    _add_common(e)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="FHT timings and analytic FLOP table")
    b.add_argument("--sizes", default="256,512,1024")
    _add_common(b)
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _apply_config_file(args, parser)
    if args.command == "gen" and args.train_count is None:
        args.train_count = round(args.count * 0.8)
    _set_threads(args.threads)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
