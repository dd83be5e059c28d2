"""Detection / end-to-end / VPR metrics and FPS benchmarking."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .font import CHARSET
from .geometry import polygon_iou, validate_polygon

RECALL_LEVELS = (0.2, 0.4, 0.6, 0.8, 0.9)
INTERPOLATION = "max-precision"


def hmean(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass(frozen=True)
class DetectionReport:
    precision: float
    recall: float
    hmean: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp, fp, fn):
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return cls(p, r, hmean(p, r), tp, fp, fn)

    def to_dict(self):
        return asdict(self)


def normalize_transcription(s):
    """Case-fold and drop symbols outside the charset."""
    return "".join(c for c in s.upper() if c in CHARSET)


def _valid(inst):
    try:
        validate_polygon(inst.polygon.vertices)
    except ValueError:
        return False
    return True


def match_frame(preds, truths, iou_threshold=0.5, optimal=False):
    """One-to-one prediction/truth pairs for one frame.

    Greedy: predictions in descending confidence (ties by input order) take
    the unmatched truth of highest IoU >= threshold. ``optimal`` switches to
    a maximum-cardinality assignment, tie-broken by total IoU.
    Returns (pairs [(pred idx, truth idx)], n_valid_preds_unmatched, n_truth_unmatched).
    """
    pv = [i for i, p in enumerate(preds) if _valid(p)]
    tv = [j for j, t in enumerate(truths) if _valid(t)]
    iou = np.zeros((len(preds), len(truths)))
    for i in pv:
        for j in tv:
            iou[i, j] = polygon_iou(preds[i].polygon.vertices, truths[j].polygon.vertices)
    ok = iou >= iou_threshold
    if optimal and pv and tv:
        from scipy.optimize import linear_sum_assignment
        w = np.where(ok, 1.0 + iou, 0.0)
        r, c = linear_sum_assignment(-w)
        pairs = [(int(i), int(j)) for i, j in zip(r, c) if ok[i, j]]
    else:
        order = sorted(pv, key=lambda i: -preds[i].confidence)
        used = set()
        pairs = []
        for i in order:
            cand = [j for j in tv if j not in used and ok[i, j]]
            if cand:
                j = max(cand, key=lambda j: (iou[i, j], -j))
                used.add(j)
                pairs.append((i, j))
    return pairs


def _per_frame(preds, truths):
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} prediction frames vs {len(truths)} truth frames")
    return zip(preds, truths)


def eval_detection(preds, truths, iou_threshold=0.5, optimal=False):
    """``preds``/``truths``: per-frame lists of TextInstance."""
    tp = fp = fn = 0
    for p, t in _per_frame(preds, truths):
        pairs = match_frame(p, t, iou_threshold, optimal)
        tp += len(pairs)
        fp += len(p) - len(pairs)
        fn += len(t) - len(pairs)
    return DetectionReport.from_counts(tp, fp, fn)


def eval_end2end(preds, truths, iou_threshold=0.5, optimal=False):
    """Detection pairs count only when transcriptions agree; returns a DetectionReport (hmean = F)."""
    tp = fp = fn = 0
    for p, t in _per_frame(preds, truths):
        pairs = match_frame(p, t, iou_threshold, optimal)
        good = sum(normalize_transcription(p[i].text) == normalize_transcription(t[j].text)
                   for i, j in pairs)
        tp += good
        fp += len(p) - good
        fn += len(t) - good
    return DetectionReport.from_counts(tp, fp, fn)


# ------------------------------------------------------------------ VPR

@dataclass
class PRCurve:
    points: list  # (threshold, precision, recall), descending threshold
    precision_at_recall: dict
    frame_tolerance: int = 3
    interpolation: str = INTERPOLATION

    def interpolated(self):
        """Max-precision envelope: for each point, best precision at >= its recall."""
        out = []
        for _, _, r in self.points:
            out.append(max(p for _, p, rr in self.points if rr >= r))
        return out

    def summary(self):
        return {
            "interpolation": self.interpolation,
            "frame_tolerance": self.frame_tolerance,
            "precision_at_recall": {f"{r:g}": v for r, v in self.precision_at_recall.items()},
            "n_points": len(self.points),
        }


def _truth_for(results, truth):
    if isinstance(truth, dict):
        return [truth.get(r.query_id) for r in results]
    truth = list(truth)
    if len(truth) != len(results):
        raise ValueError(f"{len(results)} results vs {len(truth)} truth entries")
    return truth


def precision_at_recall(points, levels=RECALL_LEVELS):
    out = {}
    for r in levels:
        cands = [p for _, p, rr in points if rr >= r - 1e-12]
        out[r] = max(cands) if cands else 0.0
    return out


def eval_vpr(results, truth, frame_tolerance=3):
    """Sweep the decision threshold over all observed scores -> PRCurve.

    A result is correct when its proposed map index lies within
    ``frame_tolerance`` of the true index; queries without a true place
    only ever contribute false positives.
    """
    results = list(results)
    gt = _truth_for(results, truth)
    scores = []
    for r in results:
        if r.score is None or not math.isfinite(r.score):
            raise ValueError(f"query {r.query_id!r} has no score")
        scores.append(r.score)
    correct = [g is not None and r.best_index is not None and abs(r.best_index - g) <= frame_tolerance
               for r, g in zip(results, gt)]
    n_pos = sum(g is not None for g in gt)
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    points = []
    for t in sorted(set(scores.tolist()), reverse=True):
        acc = scores >= t
        n_acc = int(acc.sum())
        n_ok = int((acc & correct).sum())
        points.append((t, n_ok / n_acc, n_ok / n_pos if n_pos else 0.0))
    return PRCurve(points, precision_at_recall(points), frame_tolerance)


# ------------------------------------------------------------------ FPS

@dataclass
class FPSReport:
    fps: float
    trials: list = field(default_factory=list)
    n_frames: int = 0
    warmup: int = 3


def measure_fps(runner, frames, warmup=3, trials=3, clock=time.perf_counter):
    """Median frames-per-second of ``runner`` over ``trials`` passes after warm-up calls."""
    frames = list(frames)
    if not frames:
        raise ValueError("measure_fps needs at least one frame")
    for i in range(warmup):
        runner(frames[i % len(frames)])
    rates = []
    for _ in range(trials):
        t0 = clock()
        for f in frames:
            runner(f)
        elapsed = clock() - t0
        rates.append(len(frames) / elapsed if elapsed > 0 else math.inf)
    return FPSReport(statistics.median(rates), rates, len(frames), warmup)


# ------------------------------------------------------------------ reports

def pr_csv(curve):
    lines = ["threshold,precision,recall"]
    lines += [f"{t!r},{p!r},{r!r}" for t, p, r in curve.points]
    return "\n".join(lines) + "\n"


def summary_json(curve, config=None):
    doc = {"config": config or {}, **curve.summary()}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def pr_svg(curve, width=320, height=240, pad=32):
    """Standalone SVG line plot of the (interpolated) PR curve."""
    pts = sorted((r, p) for (_, _, r), p in zip(curve.points, curve.interpolated()))
    w, h = width - 2 * pad, height - 2 * pad

    def xy(r, p):
        return f"{pad + r * w:.2f},{pad + (1 - p) * h:.2f}"

    path = " ".join(xy(r, p) for r, p in pts)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect x="{pad}" y="{pad}" width="{w}" height="{h}" fill="none" stroke="#888"/>\n'
        f'<polyline points="{path}" fill="none" stroke="#1f77b4" stroke-width="2"/>\n'
        f'<text x="{width / 2}" y="{height - 6}" text-anchor="middle" font-size="11">recall</text>\n'
        f'<text x="10" y="{height / 2}" font-size="11" transform="rotate(-90 10 {height / 2})">precision</text>\n'
        "</svg>\n"
    )
