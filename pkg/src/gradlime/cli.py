"""Command-line entry point: ``gradlime <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every output file is
written to a temporary name and renamed into place, so a failed command never
leaves a partial file behind.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import evaluation as ev
from . import micronet as mn
from .limex import LimeConfig, lime_explain
from .saliency import METHODS, pixel_scores
from .segmentation import QuickShiftParams, SegmentMap, SlicParams, load_segmap, preview, quickshift_2d, save_segmap, slic_2d, slic_3d
from .spscore import aggregate, render_explanation
from .tensor import atomic_write_bytes, read_ppm, read_tensor, write_ppm, write_tensor

log = logging.getLogger("gradlime")

KINDS = {"shapes2d": ("net2d", dg.gen_shapes_2d), "moving3d": ("net3d", dg.gen_moving_shapes_3d)}
GRADIENT_METHODS = list(METHODS)
REQUIRED: set = set()  # (subcommand prog, dest) pairs checked after config files are applied


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config and output helpers ---------------------------------------------------------

def read_config(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_table(path, header, rows, as_json: bool) -> None:
    """CSV file plus, with ``--json``, a ``.json`` mirror next to it."""
    rows = [list(r) for r in rows]
    atomic_write_bytes(path, _csv_text(header, rows).encode())
    if as_json:
        doc = [dict(zip(header, map(_json_value, r))) for r in rows]
        atomic_write_bytes(Path(str(path) + ".json"), (json.dumps(doc, indent=1) + "\n").encode())


def _json_value(v):
    if isinstance(v, str):
        try:
            return int(v)
        except ValueError:
            try:
                return float(v)
            except ValueError:
                return v
    return v


def _csv_list(text, cast=str):
    return [cast(s.strip()) for s in str(text).split(",") if s.strip()]


def load_input(path) -> np.ndarray:
    """A single input tensor from ``.ppm`` ([3,H,W]) or ``.stf`` ([3,H,W] or [3,T,H,W])."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    x = read_tensor(path)
    if x.ndim not in (3, 4) or x.shape[0] != 3:
        raise ValueError(f"{path}: expected a [3,H,W] or [3,T,H,W] tensor, got {x.shape}")
    return x


def load_dataset(directory):
    """(inputs, labels, masks, manifest) as written by ``datagen``."""
    directory = Path(directory)
    manifest = read_config(directory / "manifest.txt")
    inputs = read_tensor(directory / "inputs.stf")
    masks = read_tensor(directory / "masks.stf")
    with open(directory / "labels.csv", newline="") as fh:
        labels = np.array([int(r["label"]) for r in csv.DictReader(fh)], np.int64)
    if len(labels) != len(inputs):
        raise ValueError(f"{directory}: {len(inputs)} inputs but {len(labels)} labels")
    return inputs, labels, masks, manifest


def _frame(x):
    """Middle frame of a clip; images pass through."""
    return x[:, x.shape[1] // 2] if x.ndim == 4 else x


def _heatmap(sal):
    """Grayscale [3, ...] map scaled so the largest score is white."""
    peak = float(sal.max())
    s = sal / peak if peak > 0 else sal
    return np.repeat(s[None], 3, axis=0).astype(np.float32)


def _seg_params(args):
    if args.algo == "slic":
        return SlicParams(k=args.k, compactness=args.compactness, max_iters=args.max_iters, seed=args.seed)
    return QuickShiftParams(ratio=args.ratio, kernel_size=args.kernel_size, max_dist=args.max_dist,
                            min_size=args.min_size, seed=args.seed)


def segment_input(x, args) -> SegmentMap:
    p = _seg_params(args)
    if x.ndim == 4:
        if args.algo != "slic":
            raise UsageError("clips need --algo slic")
        return slic_3d(x, p)
    return slic_2d(x, p) if args.algo == "slic" else quickshift_2d(x, p)


def _seg_for(x, args):
    return load_segmap(args.seg) if getattr(args, "seg", None) else segment_input(x, args)


# -- commands ----------------------------------------------------------------------------------

def cmd_datagen(args):
    net_kind, gen = KINDS[args.kind]
    samples = gen(args.n, args.seed)
    inputs, labels = dg.stack(samples)
    masks = np.stack([s.truth_mask for s in samples]).astype(np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "inputs.stf", inputs)
    write_tensor(out / "masks.stf", masks)
    atomic_write_bytes(out / "labels.csv", _csv_text(["index", "label"], enumerate(labels.tolist())).encode())
    manifest = f"kind = {args.kind}\nnet = {net_kind}\nsplit = {args.split}\nn = {args.n}\nseed = {args.seed}\n"
    atomic_write_bytes(out / "manifest.txt", manifest.encode())
    print(f"wrote {args.n} {args.kind} samples to {out}")


def cmd_train(args):
    x, y, _, manifest = load_dataset(args.data)
    val = load_dataset(args.val)[:2] if args.val else None
    kind = args.net or manifest["net"]
    net = mn.init_weights(mn.NetworkSpec(kind, args.num_classes), args.seed)
    cfg = mn.TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, momentum=args.momentum, seed=args.seed,
                         stop_at=args.stop_at)
    t0 = time.perf_counter()
    net, history = mn.train_sgd(net, x, y, cfg, val=val,
                                progress=lambda m: print(f"epoch {m.epoch} loss {m.loss:.4f} "
                                                         f"train {m.train_accuracy:.4f} val {m.val_accuracy}", flush=True))
    mn.save_network(net, args.out)
    rows = [(m.epoch, f"{m.loss:.6f}", f"{m.train_accuracy:.4f}", "" if m.val_accuracy is None else f"{m.val_accuracy:.4f}")
            for m in history]
    write_table(Path(args.out) / "metrics.csv", ["epoch", "loss", "train_accuracy", "val_accuracy"], rows, args.json)
    print(f"trained {kind} in {time.perf_counter() - t0:.1f}s; saved to {args.out}")


def cmd_segment(args):
    x = load_input(args.input)
    seg = segment_input(x, args)
    save_segmap(args.out, seg)
    write_ppm(str(args.out) + ".preview.ppm", _frame(preview(x, seg)))
    print(f"{seg.n_segments} segments -> {args.out}")


def _target(net, x, cls):
    if cls is None:
        return mn.predict(net, x)[0]
    return cls


def cmd_explain(args):
    net = mn.load_network(args.net)
    x = load_input(args.input)
    seg = _seg_for(x, args)
    cls = _target(net, x, args.cls)
    sal = pixel_scores(net, x, cls, args.method, args.source)
    ranking = aggregate(sal, seg, args.reduce)
    prefix = args.out
    write_table(prefix + ".ranking.csv", ["segment_id", "weight", "rank"], ranking.rows(), args.json)
    write_tensor(prefix + ".saliency.stf", sal)
    heat = _heatmap(sal)
    write_ppm(prefix + ".heatmap.ppm", _frame(heat))
    write_ppm(prefix + ".overlay.ppm", _frame(0.5 * heat + 0.5 * x))
    kept = render_explanation(x, seg, ranking, min(args.top_k, seg.n_segments))
    write_ppm(prefix + ".topk.ppm", _frame(kept))
    print(f"class {cls}; top segments {ranking.top(args.top_k).tolist()}")


def _lime_cfg(args, n=None):
    return LimeConfig(n_samples=n or args.samples, kernel_width=args.kernel_width, ridge_lambda=args.ridge_lambda,
                      seed=args.lime_seed, batch_size=args.batch_size, fill=args.fill, rank_by=args.rank_by,
                      threads=args.threads)


def cmd_lime(args):
    net = mn.load_network(args.net)
    x = load_input(args.input)
    seg = _seg_for(x, args)
    cls = _target(net, x, args.cls)
    res = lime_explain(net, x, seg, cls, _lime_cfg(args))
    rank_of = {int(s): r for s, _, r in res.ranking.rows()}
    rows = [(i, repr(float(c)), rank_of[i]) for i, c in enumerate(res.coefficients)]
    rows.sort(key=lambda r: r[2])
    write_table(args.out, ["segment_id", "coefficient", "rank"], rows, args.json)
    print(f"class {cls}; intercept {res.intercept:.6f}; top segment {int(res.ranking.ids[0])}")


def build_corpus(args):
    inputs, labels, _, _ = load_dataset(args.data)
    n = len(inputs) if args.limit is None else min(args.limit, len(inputs))
    corpus = []
    for i in range(n):
        corpus.append(ev.CorpusItem(inputs[i], segment_input(inputs[i], args), int(labels[i])))
    return corpus


def _methods(args):
    methods = _csv_list(args.methods)
    for m in methods:
        if m not in METHODS and m != ev.RANDOM and not (m.startswith("lime_") and m[5:].isdigit()):
            raise UsageError(f"unknown method {m!r}")
    return methods


def _exp_cfg(args):
    return ev.ExperimentConfig(
        orders=tuple(_csv_list(getattr(args, "orders", "best,worst"))),
        ks=tuple(_csv_list(getattr(args, "ks", "1,5"), int)),
        baseline_samples=getattr(args, "baseline_samples", 1000),
        lime=_lime_cfg(args, 1000),
        random_seed=args.seed,
        reference=args.reference,
        skip_misclassified=args.skip_misclassified,
        fill=args.fill,
        threads=args.threads,
        checkpoint=args.checkpoint,
    )


def _progress(rec):
    log.info("input %d done (prediction %s, label %s)", rec["index"], rec["prediction"], rec["label"])


def cmd_eval_deletion(args):
    net = mn.load_network(args.net)
    methods = _methods(args)
    res = ev.run_experiment(net, build_corpus(args), methods, ("deletion",), _exp_cfg(args), _progress)
    rows = [(r["method"], r["order"], f"{r['mean_fraction']:.6f}", r["n"]) for r in res.deletion]
    write_table(args.out, ["method", "order", "mean_fraction", "n"], rows, args.json)
    flagged = sum(rec["misclassified"] for rec in res.records)
    print(res.deletion_csv(), end="")
    print(f"{flagged} of {len(res.records)} inputs misclassified against ground truth")


def cmd_eval_topk(args):
    net = mn.load_network(args.net)
    methods = _methods(args)
    res = ev.run_experiment(net, build_corpus(args), methods, ("topk",), _exp_cfg(args), _progress)
    rows = [(r["method"], r["k"], f"{r['agreement']:.6f}", r["n"]) for r in res.topk]
    write_table(args.out, ["method", "k", "agreement", "n"], rows, args.json)
    print(res.topk_csv(), end="")


def cmd_bench(args):
    net = mn.load_network(args.net)
    corpus = build_corpus(args)
    results = ev.bench_timing(net, corpus, _csv_list(args.methods), _csv_list(args.lime_samples, int),
                              args.warmup, _lime_cfg(args, 100))
    rows = [(r.method, r.n_inputs, f"{r.mean_seconds:.6f}") for r in results]
    write_table(args.out, ["method", "n_inputs", "mean_seconds"], rows, args.json)
    print(ev.timing_csv(results), end="")


# -- parser ------------------------------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--config", help="key = value file; explicit flags take precedence")
    p.add_argument("--json", action="store_true", help="also write a JSON mirror of every CSV")
    p.add_argument("--threads", type=int, default=1, help="worker threads for corpus-parallel work")
    p.add_argument("-v", "--verbose", action="store_true")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="main seed")


def _seg_flags(p):
    p.add_argument("--algo", choices=("quickshift", "slic"), default="quickshift",
                   help="segmenter (clips always need slic)")
    p.add_argument("--k", type=int, default=50, help="SLIC target segment count")
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--ratio", type=float, default=0.5, help="QuickShift colour/space ratio")
    p.add_argument("--kernel-size", type=float, default=3.0)
    p.add_argument("--max-dist", type=float, default=6.0)
    p.add_argument("--min-size", type=int, default=8, help="QuickShift fragment floor in pixels")


def _lime_flags(p, samples=1000):
    p.add_argument("--samples", type=int, default=samples, help="LIME perturbation count")
    p.add_argument("--kernel-width", type=float, default=0.25, help="use inf for a uniform kernel")
    p.add_argument("--ridge-lambda", type=float, default=1.0)
    p.add_argument("--lime-seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--fill", choices=("median", "zero"), default="median")
    p.add_argument("--rank-by", choices=("signed", "absolute"), default="signed")


def _eval_flags(p):
    p.add_argument("--net", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory from datagen")
    p.add_argument("--limit", type=int, default=None, help="use only the first N inputs")
    p.add_argument("--methods", default=",".join(GRADIENT_METHODS + [ev.RANDOM]),
                   help="comma list of methods; also 'random' and 'lime_<n>'")
    p.add_argument("--reference", choices=("prediction", "truth"), default="prediction")
    p.add_argument("--skip-misclassified", action="store_true")
    p.add_argument("--checkpoint", default=None, help="JSONL file for resumable runs")
    p.add_argument("--out", required=True)
    _seg_flags(p)
    _lime_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradlime", description="Superpixel explanations from single-pass gradients, with a LIME baseline.",
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("datagen", help="generate a synthetic dataset split", formatter_class=fmt)
    _common(p)
    p.add_argument("--kind", choices=sorted(KINDS), default="shapes2d")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a network with SGD", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--net", choices=("net2d", "net3d"), default=None, help="defaults to the dataset's network")
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--stop-at", type=float, default=None, help="stop once validation accuracy reaches this")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment an image or clip", formatter_class=fmt)
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _seg_flags(p)
    p.set_defaults(func=cmd_segment)

    for name, func in (("explain", cmd_explain), ("lime", cmd_lime)):
        p = sub.add_parser(name, help=f"{name} one input", formatter_class=fmt)
        _common(p)
        p.add_argument("--net", required=True)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--seg", default=None, help="precomputed segment map (else segment now)")
        p.add_argument("--class", dest="cls", type=int, default=None, help="target class (default: prediction)")
        _seg_flags(p)
        if name == "explain":
            p.add_argument("--method", choices=METHODS, default="guided_vanilla")
            p.add_argument("--source", choices=("logit", "softmax"), default="logit")
            p.add_argument("--reduce", choices=("sum", "mean", "max"), default="sum")
            p.add_argument("--top-k", type=int, default=5)
            p.add_argument("--out", required=True, help="output prefix")
        else:
            _lime_flags(p)
            p.add_argument("--out", required=True, help="coefficient CSV path")
        p.set_defaults(func=func)

    p = sub.add_parser("eval-deletion", help="superpixel deletion experiment", formatter_class=fmt)
    _common(p)
    _eval_flags(p)
    p.add_argument("--orders", default="best,worst")
    p.set_defaults(func=cmd_eval_deletion)

    p = sub.add_parser("eval-topk", help="top-k agreement with a LIME baseline", formatter_class=fmt)
    _common(p)
    _eval_flags(p)
    p.add_argument("--ks", default="1,5")
    p.add_argument("--baseline-samples", type=int, default=1000)
    p.set_defaults(func=cmd_eval_topk)

    p = sub.add_parser("bench", help="time segment weighting per method", formatter_class=fmt)
    _common(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_bench, methods="guided_vanilla,grad_cam")
    p.add_argument("--lime-samples", default="50,100")
    p.add_argument("--warmup", type=int, default=3)
    # required paths may come from --config, so they are checked after parsing
    for sub in parser._subparsers._group_actions[0].choices.values():
        for action in sub._actions:
            if action.help is None:  # the defaults formatter only annotates options that have help text
                action.help = action.dest.replace("_", " ")
            if action.required and action.option_strings:
                action.required = False
                REQUIRED.add((sub.prog, action.dest))
                # "%(default).0s" renders as nothing and stops the "(default: None)" suffix
                action.help = action.help + " (required)%(default).0s"
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for a in sub._actions:
            for opt in a.option_strings:
                if opt.startswith("--"):
                    known.setdefault(opt[2:].replace("-", "_"), a)
        values = {known[k].dest if k in known else k: v for k, v in values.items()}
        for key in values:
            if key not in known or key in ("help", "config", "func"):
                raise UsageError(f"{args.config}: unknown key {key!r}")
        # flags > config file > defaults: config values become defaults, then re-parse
        converted = {}
        for key, raw in values.items():
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                converted[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    converted[key] = action.type(raw) if action.type else raw
                except ValueError as exc:
                    raise UsageError(f"{args.config}: bad value for {key!r}: {exc}") from exc
        for key, value in converted.items():
            if known[key].choices and value not in known[key].choices:
                raise UsageError(f"{args.config}: {key} must be one of {list(known[key].choices)}")
        sub.set_defaults(**converted)
        args = parser.parse_args(argv)
    return args


def _missing_required(args, parser):
    sub = parser._subparsers._group_actions[0].choices[args.command]
    for action in sub._actions:
        if (sub.prog, action.dest) in REQUIRED and getattr(args, action.dest, None) is None:
            raise UsageError(f"{sub.prog}: missing {action.option_strings[0]}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        _missing_required(args, parser)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except OSError as exc:  # unreadable --config file
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    seeds = {k: v for k, v in vars(args).items() if k.endswith("seed")}
    print("seeds: " + " ".join(f"{k}={v}" for k, v in sorted(seeds.items())), file=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError, RuntimeError, IndexError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
