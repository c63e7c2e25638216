"""Detection quality: end-to-end line distance, greedy matching, the
precision-recall curve, and its scalar summaries (AP, precision@90recall,
recall@90precision, all in percent)."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundaryLine


@dataclass(frozen=True)
class MatchConfig:
    distance_threshold: float = 5.0

    def __post_init__(self):
        if self.distance_threshold <= 0:
            raise ValueError("distance_threshold must be > 0")


def line_distance(a: BoundaryLine, b: BoundaryLine) -> float:
    """Mean distance between matched frame endpoints, minimized over the
    two possible end pairings."""
    a0, a1 = a.endpoints()
    b0, b1 = b.endpoints()
    straight = math.dist(a0, b0) + math.dist(a1, b1)
    crossed = math.dist(a0, b1) + math.dist(a1, b0)
    return 0.5 * min(straight, crossed)


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)  # (gt_index, detection_index)


def match(gt_lines, detections, cfg: MatchConfig = MatchConfig(),
          conf_threshold: float = -math.inf) -> MatchResult:
    """Greedy matching in ground-truth order: each gt line takes the
    highest-confidence unmatched detection within the distance threshold
    (ties: smaller distance, then input order); leftovers are FP / FN."""
    dets = [(i, d) for i, d in enumerate(detections)
            if d.confidence >= conf_threshold]
    used = set()
    pairs = []
    for gi, g in enumerate(gt_lines):
        best = None
        best_key = None
        for di, d in dets:
            if di in used:
                continue
            dist = line_distance(g, d.line)
            if dist > cfg.distance_threshold:
                continue
            key = (-d.confidence, dist, di)
            if best_key is None or key < best_key:
                best, best_key = di, key
        if best is not None:
            used.add(best)
            pairs.append((gi, best))
    tp = len(pairs)
    return MatchResult(tp, len(dets) - tp, len(gt_lines) - tp, pairs)


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


@dataclass
class PRCurve:
    points: list  # threshold-descending, starting at +inf


def _sample_steps(gt_lines, detections, cfg):
    """Per-sample TP/FP at every distinct own confidence threshold
    (descending).  Index k in the returned arrays corresponds to admitting
    detections with confidence >= confs[k-1]; index 0 is the empty set.

    Implements exactly the `match` rule, with the gt-detection distances
    computed once instead of per threshold.
    """
    confs = np.array(sorted({d.confidence for d in detections}, reverse=True))
    n_det = len(detections)
    conf = np.array([d.confidence for d in detections])
    dist = np.array([[line_distance(g, d.line) for d in detections]
                     for g in gt_lines]) if gt_lines and n_det else \
        np.zeros((len(gt_lines), n_det))
    within = dist <= cfg.distance_threshold
    idx = np.arange(n_det)
    tps, fps = [0], [0]
    for c in confs:
        admitted = conf >= c
        used = np.zeros(n_det, dtype=bool)
        tp = 0
        for gi in range(len(gt_lines)):
            mask = admitted & ~used & within[gi]
            cand = np.flatnonzero(mask)
            if cand.size:
                order = np.lexsort((cand, dist[gi, cand], -conf[cand]))
                best = cand[order[0]]
                used[best] = True
                tp += 1
        tps.append(tp)
        fps.append(int(admitted.sum()) - tp)
    return confs, np.array(tps, dtype=np.int64), np.array(fps, dtype=np.int64)


def pr_curve(samples, cfg: MatchConfig = MatchConfig()) -> PRCurve:
    """Dataset-level curve: sweep the confidence threshold over every
    distinct detection confidence (plus +inf), aggregating TP/FP/FN over
    samples at each threshold.

    `samples` is an iterable of (gt_lines, detections) pairs.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    total_gt = sum(len(gt) for gt, _ in samples)
    if total_gt == 0:
        raise ValueError("no ground-truth lines in dataset")
    steps = [_sample_steps(gt, dets, cfg) for gt, dets in samples]

    all_confs = np.unique(np.concatenate(
        [s[0] for s in steps] + [np.empty(0)]))[::-1]
    thresholds = np.concatenate([[math.inf], all_confs])
    agg_tp = np.zeros(thresholds.size, dtype=np.int64)
    agg_fp = np.zeros(thresholds.size, dtype=np.int64)
    for confs, tps, fps in steps:
        # number of this sample's own confidences >= each global threshold
        idx = np.searchsorted(-confs, -thresholds, side="right")
        agg_tp += tps[idx]
        agg_fp += fps[idx]

    points = []
    for t, tp, fp in zip(thresholds, agg_tp, agg_fp):
        det = tp + fp
        precision = 1.0 if det == 0 else tp / det
        recall = tp / total_gt
        points.append(PRPoint(float(t), precision, recall,
                              int(tp), int(fp), int(total_gt - tp)))
    return PRCurve(points)


def summarize(curve: PRCurve) -> dict:
    """AP is the area under the precision envelope (max precision at
    recall >= r) over recall in [0, 1], all-points interpolation; the
    operating-point metrics take the best value on the qualifying side,
    or 0 when no point qualifies.  All values in percent."""
    if not curve.points:
        raise ValueError("empty curve")
    pts = sorted(curve.points, key=lambda p: p.recall)
    recalls = np.array([p.recall for p in pts])
    precis = np.array([p.precision for p in pts])
    env = np.maximum.accumulate(precis[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, e in zip(recalls, env):
        ap += (r - prev_r) * e
        prev_r = r
    p90r = max((p.precision for p in pts if p.recall >= 0.90), default=0.0)
    r90p = max((p.recall for p in pts if p.precision >= 0.90), default=0.0)
    return {"ap": 100.0 * ap,
            "precision_at_90recall": 100.0 * p90r,
            "recall_at_90precision": 100.0 * r90p}


# -------------------------------------------------------------- reporting


def write_pr_csv(path, curve: PRCurve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "precision", "recall", "tp", "fp", "fn"])
        for p in curve.points:
            w.writerow([f"{p.threshold:.10g}", f"{p.precision:.10g}",
                        f"{p.recall:.10g}", p.tp, p.fp, p.fn])


def write_report(path, summary: dict, extra: dict = None):
    payload = dict(summary)
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)


def plot_pr(path, curve: PRCurve, title: str = "precision-recall"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rs = [p.recall for p in curve.points]
    ps = [p.precision for p in curve.points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(rs, ps, marker=".", lw=1)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
