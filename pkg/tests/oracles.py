"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import functools
import itertools
import math

import numpy as np
from scipy.spatial import ConvexHull

from textvpr import tensor as T


# ------------------------------------------------------------------ gradients

def analytic_grads(fn, arrays, dtype):
    leaves = [T.Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    with T.Tape():
        loss = fn(*leaves)
    T.backward(loss)
    return [np.zeros_like(l.data, dtype=np.float64) if l.grad is None else l.grad.astype(np.float64)
            for l in leaves]


def numeric_grad(fn, arrays, dtype, which, coords, eps):
    out = []
    for c in coords:
        vals = []
        for sign in (1, -1):
            pert = [np.array(a, dtype=np.float64) for a in arrays]
            pert[which].reshape(-1)[c] += sign * eps
            leaves = [T.Tensor(p, dtype=dtype) for p in pert]
            vals.append(fn(*leaves).item())
        out.append((vals[0] - vals[1]) / (2 * eps))
    return np.asarray(out)


def gradcheck(fn, arrays, dtype=np.float64, eps=None, n_coords=None, seed=0):
    """Worst relative error ||analytic - numeric|| / max(norms) across inputs."""
    eps = eps if eps is not None else (1e-6 if dtype == np.float64 else 1e-3)
    rng = np.random.default_rng(seed)
    ana = analytic_grads(fn, arrays, dtype)
    worst = 0.0
    for k, a in enumerate(arrays):
        size = np.asarray(a).size
        coords = np.arange(size) if n_coords is None or size <= n_coords else rng.choice(size, n_coords, replace=False)
        num = numeric_grad(fn, arrays, dtype, k, coords, eps)
        an = ana[k].reshape(-1)[coords]
        denom = max(np.linalg.norm(an), np.linalg.norm(num), 1e-10)
        worst = max(worst, float(np.linalg.norm(an - num) / denom))
    return worst


def model_gradcheck(model, loss_fn, n_coords=50, eps=1e-6, seed=0, skip=("mae.",), fd_model=None):
    """Central differences at randomly chosen scalar parameters of a model.

    ``loss_fn(model)`` must return a scalar Tensor. The analytic gradient
    comes from ``model``; the differences are taken on ``fd_model`` (default:
    the same model). Passing a float64 copy of a float32 model checks the
    32-bit gradients against differences free of 32-bit round-off, which
    would otherwise force steps wide enough to straddle the kinks of ReLU and
    bilinear sampling. Returns the norm-relative error.
    """
    fd_model = model if fd_model is None else fd_model
    rng = np.random.default_rng(seed)
    names = [k for k in model.params if not k.startswith(skip)]
    sizes = np.array([model[k].data.size for k in names])
    flat = rng.choice(sizes.sum(), n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = [(names[i], int(f - offsets[i])) for f in flat for i in [np.searchsorted(offsets, f, "right") - 1]]
    model.zero_grad()
    with T.Tape():
        loss = loss_fn(model)
    T.backward(loss)
    ana = np.array([0.0 if model[k].grad is None else float(model[k].grad.reshape(-1)[i]) for k, i in picks])
    num = []
    for k, i in picks:
        cell = fd_model[k].data.reshape(-1)
        keep = cell[i].copy()
        vals = []
        for sign in (1, -1):
            cell[i] = keep + sign * eps
            vals.append(loss_fn(fd_model).item())
        cell[i] = keep
        num.append((vals[0] - vals[1]) / (2 * eps))
    num = np.asarray(num)
    return float(np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12))


def as_float64(model):
    from textvpr.spotter import SpotterModel
    params = {k: T.parameter(p.data.astype(np.float64), name=k, dtype=np.float64) for k, p in model.params.items()}
    return SpotterModel(model.config, params, model.train_config)


# ------------------------------------------------------------------ geometry

def random_convex(rng, n_points=8, centre=(0.0, 0.0), radius=1.0):
    pts = np.asarray(centre) + rng.uniform(-radius, radius, (n_points, 2))
    hull = ConvexHull(pts)
    return pts[hull.vertices]  # counter-clockwise


def points_in_polygon(pts, poly):
    """Even-odd ray casting."""
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xi)
    return inside


def _box(*polys):
    allp = np.vstack(polys)
    return allp.min(axis=0), allp.max(axis=0)


def mc_area(poly, n=10**6, seed=0):
    lo, hi = _box(poly)
    pts = np.random.default_rng(seed).uniform(lo, hi, (n, 2))
    return points_in_polygon(pts, poly).mean() * np.prod(hi - lo)


def mc_iou(a, b, n=10**6, seed=0):
    lo, hi = _box(a, b)
    pts = np.random.default_rng(seed).uniform(lo, hi, (n, 2))
    ia, ib = points_in_polygon(pts, a), points_in_polygon(pts, b)
    union = (ia | ib).sum()
    return (ia & ib).sum() / union if union else 0.0


# ------------------------------------------------------------------ matching

def brute_force_assignment(cost):
    """Minimum total over every injective map truth -> query."""
    nq, nt = cost.shape
    best = math.inf
    for perm in itertools.permutations(range(nq), nt):
        best = min(best, math.fsum(cost[q, j] for j, q in enumerate(perm)))
    return best if nt else 0.0


def brute_force_lex_assignment(cost):
    """Lexicographically smallest (q for truth 0, q for truth 1, ...) among optimal injections."""
    nq, nt = cost.shape
    best, arg = math.inf, None
    for perm in itertools.permutations(range(nq), nt):  # generated in lexicographic order
        total = math.fsum(cost[q, j] for j, q in enumerate(perm))
        if total < best:
            best, arg = total, perm
    return list(arg)


def recursive_levenshtein(a, b):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def brute_force_pairing(sim):
    """Max-sum one-to-one pairing by enumeration (rows <= cols or transposed)."""
    if sim.shape[0] > sim.shape[1]:
        sim = sim.T
    r, c = sim.shape
    best = 0.0
    for perm in itertools.permutations(range(c), r):
        best = max(best, math.fsum(sim[i, perm[i]] for i in range(r)))
    return best


# ------------------------------------------------------------------ PR sweep

def enumerate_sweep(scores, correct, n_positive):
    """Hand-rolled sweep: one operating point per distinct score, high to low."""
    pts = []
    for t in sorted(set(scores), reverse=True):
        acc = [i for i, s in enumerate(scores) if s >= t]
        ok = [i for i in acc if correct[i]]
        pts.append((t, len(ok) / len(acc), len(ok) / n_positive if n_positive else 0.0))
    return pts
