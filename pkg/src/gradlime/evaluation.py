"""Evaluation protocols: segment deletion, top-k agreement with a LIME
baseline, and scoring-time benchmarks."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import micronet as mn
from .limex import LimeConfig, _scorer, lime_explain, perturb_batch
from .saliency import METHODS, pixel_scores
from .segmentation import SegmentMap
from .spscore import SegmentRanking, aggregate
from .tensor import Prng, atomic_write_bytes, derive_seed

log = logging.getLogger(__name__)

BEST_FIRST = "best"
WORST_FIRST = "worst"
RANDOM = "random"


@dataclass
class CorpusItem:
    image: np.ndarray
    segments: SegmentMap
    label: int | None = None


@dataclass
class DeletionResult:
    order: str
    fraction_removed: float
    n_segments: int
    removed: int
    flipped: bool


@dataclass
class TimingResult:
    method: str
    n_inputs: int
    mean_seconds: float
    forward_passes: float = 0.0
    backward_passes: float = 0.0


def _check_ranking(ranking: SegmentRanking, seg: SegmentMap):
    if len(ranking) != seg.n_segments or not np.array_equal(np.sort(ranking.ids), np.arange(seg.n_segments)):
        raise ValueError("ranking does not cover the segment map exactly once")


def removal_order(ranking: SegmentRanking, order: str) -> np.ndarray:
    """Segment ids in removal order: descending weight for best-first,
    ascending for worst-first (ties by ascending id either way)."""
    if order == BEST_FIRST:
        return ranking.ids
    if order == WORST_FIRST:
        return ranking.ids[np.lexsort((ranking.ids, ranking.weights))]
    raise ValueError(f"order must be {BEST_FIRST!r} or {WORST_FIRST!r}")


def deletion_run(model, image, seg: SegmentMap, ranking: SegmentRanking, order: str = BEST_FIRST,
                 fill: str = "median", reference_class: int | None = None, batch_size: int = 32) -> DeletionResult:
    """Remove segments one at a time until the prediction leaves the reference class.

    The reference class defaults to the model's prediction on the untouched
    image. ``fraction_removed`` is 1.0 if the prediction never changes.
    """
    _check_ranking(ranking, seg)
    score = _scorer(model)
    if reference_class is None:
        reference_class = int(np.argmax(score(image[None])[0]))
    seq = removal_order(ranking, order)
    n = seg.n_segments
    for start in range(0, n, batch_size):
        steps = np.arange(start + 1, min(n, start + batch_size) + 1)
        masks = np.ones((len(steps), n), np.uint8)
        for row, i in enumerate(steps):
            masks[row, seq[:i]] = 0
        preds = np.argmax(score(perturb_batch(image, seg, masks, fill)), axis=1)
        flips = np.flatnonzero(preds != reference_class)
        if len(flips):
            removed = int(steps[flips[0]])
            return DeletionResult(order, removed / n, n, removed, True)
    return DeletionResult(order, 1.0, n, n, False)


def random_ranking(seg: SegmentMap, rng: Prng) -> SegmentRanking:
    """Uniformly random order; weights are the descending ranks n..1."""
    perm = rng.permutation(seg.n_segments)
    return SegmentRanking(perm, np.arange(seg.n_segments, 0, -1, dtype=np.float64))


def topk_agreement(candidate: SegmentRanking, baseline: SegmentRanking, k: int) -> bool:
    """True iff the candidate's best segment is among the baseline's top k."""
    return bool(int(candidate.ids[0]) in set(int(i) for i in baseline.top(k)))


# -- experiments -------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    orders: tuple = (BEST_FIRST, WORST_FIRST)
    ks: tuple = (1, 5)
    baseline_samples: int = 1000
    lime: LimeConfig = field(default_factory=LimeConfig)
    random_seed: int = 0
    reference: str = "prediction"  # or "truth"
    skip_misclassified: bool = False
    fill: str = "median"
    batch_size: int = 32
    threads: int = 1
    checkpoint: str | None = None


@dataclass
class ExperimentResult:
    deletion: list
    topk: list
    records: list

    def deletion_csv(self) -> str:
        return _csv(["method", "order", "mean_fraction", "n"], self.deletion)

    def topk_csv(self) -> str:
        return _csv(["method", "k", "agreement", "n"], self.topk)


def _csv(header, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in header})
    return buf.getvalue()


def _lime_samples(method):
    if method.startswith("lime_"):
        return int(method.split("_", 1)[1])
    return None


def method_ranking(net, item: CorpusItem, index: int, method: str, target: int, cfg: ExperimentConfig):
    """Segment ranking produced by one method on one corpus item."""
    if method == RANDOM:
        return random_ranking(item.segments, Prng(derive_seed(cfg.random_seed, index)))
    n = _lime_samples(method)
    if n is not None:
        # independent streams per sample count: with one shared seed the smaller
        # run's masks would be a prefix of the baseline's and agree with it by construction
        seed = derive_seed(derive_seed(cfg.lime.seed, index), n)
        lime_cfg = LimeConfig(**{**asdict(cfg.lime), "n_samples": n, "seed": seed})
        return lime_explain(net, item.image, item.segments, target, lime_cfg).ranking
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    return aggregate(pixel_scores(net, item.image, target, method), item.segments)


def _evaluate_item(net, index, item, methods, protocols, cfg):
    pred, _ = mn.predict(net, item.image)
    misclassified = item.label is not None and pred != item.label
    reference = item.label if cfg.reference == "truth" and item.label is not None else pred
    out = {"index": index, "prediction": pred, "label": item.label, "misclassified": bool(misclassified),
           "skipped": False, "results": []}
    if misclassified and cfg.skip_misclassified:
        out["skipped"] = True
        return out
    cache = {}
    baseline = None
    for pos, method in enumerate(methods):
        if method not in cache:
            cache[method] = method_ranking(net, item, index, method, reference, cfg)
        ranking = cache[method]
        if "deletion" in protocols:
            for order in cfg.orders:
                res = deletion_run(net, item.image, item.segments, ranking, order, cfg.fill, reference, cfg.batch_size)
                out["results"].append({"pos": pos, "method": method, "protocol": "deletion", "order": order,
                                       "value": res.fraction_removed})
        if "topk" in protocols:
            if baseline is None:
                baseline = method_ranking(net, item, index, f"lime_{cfg.baseline_samples}", reference, cfg)
            for k in cfg.ks:
                out["results"].append({"pos": pos, "method": method, "protocol": "topk", "k": k,
                                       "value": float(topk_agreement(ranking, baseline, k))})
    return out


def _load_checkpoint(path):
    """Finished records by input index. A torn final line left by an
    interrupted run is cut off so later appends start on a fresh line."""
    done = {}
    if path and Path(path).exists():
        text = Path(path).read_text()
        if text and not text.endswith("\n"):
            text = text[: text.rfind("\n") + 1]
            Path(path).write_text(text)
        for line in text.splitlines():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                log.warning("skipping unreadable checkpoint line")
                continue
            done[rec["index"]] = rec
    return done


def run_experiment(net, corpus, methods, protocols=("deletion", "topk"), cfg: ExperimentConfig = ExperimentConfig(),
                   progress=None) -> ExperimentResult:
    """Run the protocols for every method over the corpus and average per method.

    With ``cfg.checkpoint`` set, each finished input is appended to a JSONL
    file and inputs already present there are not recomputed.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    methods = list(methods)
    done = _load_checkpoint(cfg.checkpoint)
    todo = [i for i in range(len(corpus)) if i not in done]
    sink = open(cfg.checkpoint, "a") if cfg.checkpoint else None

    def work(i):
        return _evaluate_item(net, i, corpus[i], methods, protocols, cfg)

    try:
        if cfg.threads > 1:
            with ThreadPoolExecutor(cfg.threads) as pool:
                results = pool.map(work, todo)
                for rec in results:
                    done[rec["index"]] = rec
                    if sink:
                        sink.write(json.dumps(rec) + "\n")
                        sink.flush()
                    if progress:
                        progress(rec)
        else:
            for i in todo:
                rec = work(i)
                done[i] = rec
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                    sink.flush()
                if progress:
                    progress(rec)
    finally:
        if sink:
            sink.close()

    records = [done[i] for i in sorted(done)]
    deletion, topk = [], []
    for pos, method in enumerate(methods):
        if "deletion" in protocols:
            for order in cfg.orders:
                vals = [r["value"] for rec in records for r in rec["results"]
                        if r["pos"] == pos and r["protocol"] == "deletion" and r["order"] == order]
                deletion.append({"method": method, "order": order, "mean_fraction": _mean(vals), "n": len(vals)})
        if "topk" in protocols:
            for k in cfg.ks:
                vals = [r["value"] for rec in records for r in rec["results"]
                        if r["pos"] == pos and r["protocol"] == "topk" and r["k"] == k]
                topk.append({"method": method, "k": k, "agreement": _mean(vals), "n": len(vals)})
    return ExperimentResult(deletion, topk, records)


def _mean(vals):
    return float(np.mean(vals)) if vals else float("nan")


# -- timing ----------------------------------------------------------------------------------

def bench_timing(net, corpus, methods=("guided_vanilla",), lime_samples=(50, 100), warmup: int = 3,
                 lime_cfg: LimeConfig = LimeConfig()) -> list[TimingResult]:
    """Mean wall-clock seconds to produce segment weights for one input.

    Segment maps come precomputed with the corpus, so segmentation is not
    timed. The first ``warmup`` inputs run once untimed per method.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    targets = [mn.predict(net, item.image)[0] for item in corpus]
    timed = list(range(warmup, len(corpus))) if len(corpus) > warmup else list(range(len(corpus)))
    jobs = [(m, None) for m in methods] + [(f"lime_{n}", n) for n in lime_samples]
    out = []
    for label, n in jobs:
        def run(i):
            item = corpus[i]
            if n is None:
                return aggregate(pixel_scores(net, item.image, targets[i], label), item.segments)
            cfg = LimeConfig(**{**asdict(lime_cfg), "n_samples": n})
            return lime_explain(net, item.image, item.segments, targets[i], cfg).ranking

        for i in range(min(warmup, len(corpus))):
            run(i)
        total = 0.0
        with mn.count_passes() as counts:
            for i in timed:
                t0 = time.perf_counter()
                run(i)
                total += time.perf_counter() - t0
        out.append(TimingResult(label, len(timed), total / len(timed),
                                counts.forward / len(timed), counts.backward / len(timed)))
    return out


def timing_csv(results) -> str:
    return _csv(["method", "n_inputs", "mean_seconds"], [asdict(r) for r in results])


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())
