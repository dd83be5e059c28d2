"""Set-prediction training: bipartite matching, multi-task loss, Adam loop."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import spotter as S
from . import tensor as T
from .frames import normalize_text
from .geometry import resample_polygon

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 1000
    batch_size: int = 16
    lambda_cls: float = 2.0
    lambda_poly: float = 5.0
    lambda_char: float = 1.0
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = None
    log_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if min(self.lambda_cls, self.lambda_poly, self.lambda_char) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def weights(self):
        return (self.lambda_cls, self.lambda_poly, self.lambda_char)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class MatchAssignment:
    pairs: list  # (query index, truth index), sorted by truth index
    unmatched_queries: list

    def query_for_truth(self):
        return {j: q for q, j in self.pairs}


# ------------------------------------------------------------------ matching

def _lex_refine(ct, known, total, tol):
    """Among optimal assignments pick the lexicographically smallest.

    ``ct`` is truths x queries, ``known`` one optimal query per truth. Truth
    j takes the smallest query that still admits an optimal completion.
    """
    m, n = ct.shape
    used = np.zeros(n, dtype=bool)
    chosen = []
    acc = 0.0
    for j in range(m):
        rest = np.arange(j + 1, m)
        # valid lower bound: remaining rows at their unconstrained minima
        bound = acc + ct[j] + (ct[rest].min(axis=1).sum() if len(rest) else 0.0)
        for q in np.flatnonzero(~used & (bound <= total + tol)):
            if q == known[j]:
                break
            free = ~used
            free[q] = False
            cols = np.flatnonzero(free)
            value = acc + ct[j, q]
            if len(rest):
                sub = ct[np.ix_(rest, cols)]
                r, c = linear_sum_assignment(sub)
                value += math.fsum(sub[r, c])
            if value <= total + tol:
                if len(rest):
                    known = list(known[:j]) + [q] + [int(cols[ci]) for ci in c]
                break
        else:
            q = known[j]
        q = int(q)
        chosen.append(q)
        used[q] = True
        acc += ct[j, q]
    return [(q, j) for j, q in enumerate(chosen)]


def hungarian_match(cost):
    """Minimum-cost assignment of every truth (column) to a distinct query (row).

    ``cost`` is ``[n_queries, n_truth]`` with ``n_queries >= n_truth``. Ties
    are broken towards the lexicographically smallest sequence of query
    indices taken in truth order.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-d, got shape {cost.shape}")
    nq, nt = cost.shape
    if nt > nq:
        raise ValueError(f"need n_queries >= n_truth, got {nq} < {nt}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains NaN or Inf")
    if nt == 0:
        return MatchAssignment([], list(range(nq)))
    ct = cost.T  # truths x queries
    rows, cols = linear_sum_assignment(ct)
    total = math.fsum(ct[rows, cols])
    tol = 1e-12 * max(1.0, abs(total))
    known = [int(c) for c in cols]  # rows come back sorted 0..nt-1
    pairs = _lex_refine(ct, known, total, tol)
    used = {q for q, _ in pairs}
    return MatchAssignment(pairs, [q for q in range(nq) if q not in used])


def assignment_cost(cost, assignment):
    return math.fsum(cost[q, j] for q, j in assignment.pairs)


def brute_force_min_cost(cost):
    """Exhaustive minimum over all injections truths -> queries (oracle)."""
    cost = np.asarray(cost, dtype=np.float64)
    nq, nt = cost.shape
    best = math.inf
    for perm in itertools.permutations(range(nq), nt):
        best = min(best, math.fsum(cost[q, j] for j, q in enumerate(perm)))
    return best


# ------------------------------------------------------------------ targets

@dataclass
class FrameTargets:
    polygons: np.ndarray  # [m, 2n] normalised
    chars: np.ndarray  # [m, max_word_len] class ids, EOW padded
    lengths: np.ndarray  # [m]
    texts: list = field(default_factory=list)


def frame_targets(instances, config):
    """Resample, normalise and encode truth instances for one frame."""
    n, Tn, size = config.n_polygon_points, config.max_word_len, config.image_size
    polys, chars, lengths, texts = [], [], [], []
    for inst in instances:
        text = normalize_text(inst.text)
        if len(text) > Tn:
            raise ValueError(f"word {text!r} longer than max_word_len {Tn}")
        pts = resample_polygon(inst.polygon.vertices, n) / size
        polys.append(np.clip(pts, 0.0, 1.0).reshape(-1))
        ids = [config.charset.index(c) for c in text] + [S.EOW] * (Tn - len(text))
        chars.append(ids)
        lengths.append(len(text))
        texts.append(text)
    m = len(polys)
    return FrameTargets(np.asarray(polys, dtype=np.float64).reshape(m, 2 * n),
                        np.asarray(chars, dtype=np.intp).reshape(m, Tn),
                        np.asarray(lengths, dtype=np.intp), texts)


def _log_softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cost_matrix(cls_logits, poly, chars, targets, weights):
    """[Q, m] matching costs for one frame (numpy, no gradient)."""
    lc, lp, lch = weights
    p_text = np.exp(_log_softmax_np(cls_logits.astype(np.float64))[:, 1])
    m = len(targets.lengths)
    if m == 0:
        return np.zeros((len(p_text), 0))
    l1 = np.abs(poly.astype(np.float64)[:, None, :] - targets.polygons[None]).mean(-1)
    lp_chars = _log_softmax_np(chars.astype(np.float64))  # [Q, T, C]
    ce = np.empty((len(p_text), m))
    for j in range(m):
        L = targets.lengths[j]
        ids = targets.chars[j, :L]
        ce[:, j] = -lp_chars[:, np.arange(L), ids].mean(axis=1) if L else 0.0
    return lc * (1 - p_text)[:, None] + lp * l1 + lch * ce


def match_cost(pred, truth_targets, j, weights):
    """Cost of assigning one QueryPrediction to truth ``j``."""
    c = cost_matrix(pred.objectness[None], pred.polygon_coords[None], pred.char_logits[None],
                    truth_targets, weights)
    return float(c[0, j])


def match_batch(heads, targets, weights):
    cls_logits, poly, chars = (h.data for h in heads)
    return [hungarian_match(cost_matrix(cls_logits[b], poly[b], chars[b], targets[b], weights))
            for b in range(len(targets))]


# ------------------------------------------------------------------ loss

def spotting_loss(heads, targets, assignments, weights):
    """Mean-over-queries set loss -> (total Tensor, {"cls", "poly", "char"} floats).

    Matched queries pay text cross-entropy, polygon L1 and per-position
    character cross-entropy (EOW-padded); unmatched queries pay only the
    no-text cross-entropy.
    """
    lc, lp, lch = weights
    cls_logits, poly, chars = heads
    B, Q, _ = cls_logits.shape
    Tn, C = chars.shape[2], chars.shape[3]
    n2 = poly.shape[2]
    dtype = cls_logits.data.dtype
    norm = 1.0 / (B * Q)

    labels = np.zeros((B, Q), dtype=np.intp)
    rows, poly_t, char_t = [], [], []
    for b, (tg, asg) in enumerate(zip(targets, assignments)):
        for q, j in asg.pairs:
            labels[b, q] = 1
            rows.append(b * Q + q)
            poly_t.append(tg.polygons[j])
            char_t.append(tg.chars[j])

    cls_lp = T.reshape(T.log_softmax(cls_logits, -1), (B * Q * 2,))
    cls_idx = np.arange(B * Q) * 2 + labels.reshape(-1)
    cls_term = T.scale(T.sum_(T.take(cls_lp, cls_idx)), -lc * norm)
    terms = [cls_term]
    breakdown = {"cls": cls_term.item(), "poly": 0.0, "char": 0.0}
    if rows:
        rows = np.asarray(rows)
        pred_poly = T.take(T.reshape(poly, (B * Q, n2)), rows, 0)
        diff = T.sub(pred_poly, T.Tensor(np.asarray(poly_t), dtype=dtype, checked=False))
        poly_term = T.scale(T.sum_(T.abs_(diff)), lp * norm / n2)
        char_lp = T.reshape(T.log_softmax(chars, -1), (B * Q * Tn * C,))
        ct = np.asarray(char_t)
        idx = ((rows[:, None] * Tn + np.arange(Tn)[None]) * C + ct).reshape(-1)
        char_term = T.scale(T.sum_(T.take(char_lp, idx)), -lch * norm / Tn)
        terms += [poly_term, char_term]
        breakdown["poly"] = poly_term.item()
        breakdown["char"] = char_term.item()
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total, breakdown


def batch_loss(model, images, targets, weights, assignments=None):
    heads = S.forward(model, images)
    if assignments is None:
        assignments = match_batch(heads, targets, weights)
    total, parts = spotting_loss(heads, targets, assignments, weights)
    return total, parts, assignments


# ------------------------------------------------------------------ optimiser

class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, clip_norm=None):
        self.t += 1
        grads = [p.grad for p in self.params]
        if clip_norm is not None:
            total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
            if total > clip_norm:
                grads = [None if g is None else g * (clip_norm / total) for g in grads]
        if self.lr == 0:
            return
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def _batches(rng, n, batch_size):
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def fit(model, frames, config, callback=None):
    """Train ``model`` in place on frames carrying truth instances.

    Returns (model, trace) where trace rows are (step, total, cls, poly, char).
    """
    if not frames:
        raise ValueError("training set is empty")
    cfg = model.config
    images = np.stack([f.image for f in frames])
    targets = [frame_targets(f.instances, cfg) for f in frames]
    weights = config.weights()
    params = [p for k, p in model.named_parameters() if not k.startswith("mae.")]
    opt = Adam(params, config.learning_rate, config.betas, config.eps)
    rng = np.random.default_rng(config.seed)
    batches = _batches(rng, len(frames), config.batch_size)
    trace = []
    for step in range(config.steps):
        idx = next(batches)
        model.zero_grad()
        batch_targets = [targets[i] for i in idx]
        with T.Tape():
            heads = S.forward(model, images[idx])
            bad = next((h.data for h in heads if not np.all(np.isfinite(h.data))), None)
            if bad is not None:  # matching cannot run on NaN/Inf predictions
                raise TrainingDiverged(step, float(bad[~np.isfinite(bad)].flat[0]))
            total, parts = spotting_loss(heads, batch_targets, match_batch(heads, batch_targets, weights), weights)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        T.backward(total)
        opt.step(config.clip_norm)
        trace.append((step, value, parts["cls"], parts["poly"], parts["char"]))
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.5f (cls %.4f poly %.4f char %.4f)", step, value,
                     parts["cls"], parts["poly"], parts["char"])
        if callback is not None:
            callback(step, model, trace)
    model.train_config = config.to_dict()
    return model, trace


# ------------------------------------------------------------------ MAE stage

def pretrain_mae(model, images, steps=1000, learning_rate=1e-3, batch_size=16, seed=0,
                 callback=None):
    """Masked-reconstruction pretraining of the encoder (plus its decoder).

    Every image gets ``round(mask_ratio * P)`` masked patches drawn fresh per
    step. Returns the per-step masked-patch MSE trace.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("no images to pretrain on")
    cfg = model.config
    keys = [k for k in model.params if k.startswith(("patch_embed", "pos_embed", "encoder.", "mae."))]
    opt = Adam([model[k] for k in keys], learning_rate)
    rng = np.random.default_rng(seed)
    batches = _batches(rng, len(images), batch_size)
    dummy = np.zeros((cfg.n_patches, 1))
    trace = []
    for step in range(steps):
        idx = next(batches)
        masks = [mask_indices(dummy, cfg.mask_ratio, int(s)) for s in rng.integers(0, 2**63 - 1, len(idx))]
        model.zero_grad()
        with T.Tape():
            _, loss = S.mae_reconstruct(model, images[idx], masks)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        T.backward(loss)
        opt.step()
        trace.append(value)
        if callback is not None:
            callback(step, model, trace)
    return trace


def mask_indices(tokens, ratio, seed):
    return S.mask_patches(tokens, ratio, seed)[1]


def mae_eval_loss(model, images, seed=0):
    """Masked MSE on ``images`` with fixed masks (for before/after comparison)."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    dummy = np.zeros((cfg.n_patches, 1))
    masks = [mask_indices(dummy, cfg.mask_ratio, int(s)) for s in rng.integers(0, 2**63 - 1, len(images))]
    _, loss = S.mae_reconstruct(model, np.asarray(images), masks)
    return loss.item()
