"""Acceptance gate: one PASS/FAIL line per criterion, printed even under output capture.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from generators import random_image, random_model, random_place_map, random_records
from oracles import (as_float64, brute_force_assignment, brute_force_pairing, enumerate_sweep, gradcheck,
                     mc_iou, model_gradcheck, random_convex)
from primitives import PRIMITIVES
from textvpr import evalkit as E
from textvpr import formats as F
from textvpr import spotter as S
from textvpr import tensor as T
from textvpr import training as TR
from textvpr import vpr as V
from textvpr.cli import dispatch
from textvpr.frames import TextInstance
from textvpr.geometry import polygon_iou
from textvpr.synthgen import TraversalConfig, generate_traversal

RESULTS = {}


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        RESULTS[n] = ok
        with capsys.disabled():
            print(f"\nCRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


# ------------------------------------------------------------------ 1

def test_criterion_01_metric_arithmetic(report):
    rows = []
    for p, r, h in [(902, 831, 865), (878, 785, 829)]:  # per-mille P, R and expected H
        tp = p * r
        rep = E.DetectionReport.from_counts(tp, r * 1000 - tp, p * 1000 - tp)
        rows.append((rep.precision, rep.recall, rep.hmean, h / 1000))
    ok = all(abs(P - p / 1000) < 1e-12 and abs(R - r / 1000) < 1e-12 and abs(H - want) <= 0.0005
             for (P, R, H, want), (p, r, _) in zip(rows, [(902, 831, 0), (878, 785, 0)]))
    report(1, ok, "H = " + ", ".join(f"{H:.4f} (want {w:.3f})" for _, _, H, w in rows))


# ------------------------------------------------------------------ 2

def test_criterion_02_assignment_oracle(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(200):
        nq = int(rng.integers(1, 8))
        nt = int(rng.integers(0, nq + 1))
        cost = rng.uniform(0, 10, (nq, nt))
        if TR.assignment_cost(cost, TR.hungarian_match(cost)) != brute_force_assignment(cost):
            bad += 1
    elapsed = time.perf_counter() - t0
    # the brute-force oracle dominates the timing; the matcher alone is a fraction of it
    t1 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(200):
        nq = int(rng.integers(1, 8))
        TR.hungarian_match(rng.uniform(0, 10, (nq, int(rng.integers(0, nq + 1)))))
    matcher = time.perf_counter() - t1
    report(2, bad == 0 and elapsed < 5.0,
           f"{200 - bad}/200 exact, {elapsed:.2f} s with oracle ({matcher:.3f} s matcher only)")


# ------------------------------------------------------------------ 3

def test_criterion_03_geometry_oracle(report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(50):
        a = random_convex(rng, int(rng.integers(3, 10)))
        b = random_convex(rng, int(rng.integers(3, 10)), centre=rng.uniform(-0.8, 0.8, 2))
        worst = max(worst, abs(polygon_iou(a, b) - mc_iou(a, b, n=10**6, seed=k)))
    elapsed = time.perf_counter() - t0
    report(3, worst <= 2e-3 and elapsed < 60, f"max |IoU - MC| = {worst:.2e} over 50 pairs, {elapsed:.1f} s")


# ------------------------------------------------------------------ 4

def test_criterion_04_gradient_integrity(report):
    t0 = time.perf_counter()
    prim64 = max(gradcheck(fn, xs, np.float64) for fn, xs in PRIMITIVES.values())
    prim32 = max(gradcheck(fn, xs, np.float32, eps=2e-3) for fn, xs in PRIMITIVES.values())

    frames = generate_traversal(TraversalConfig(n_places=2), seed=4).map_frames
    images = np.stack([f.image for f in frames])
    w = TR.TrainConfig().weights()
    model = S.SpotterModel.init(seed=4)
    targets = [TR.frame_targets(f.instances, model.config) for f in frames]
    asg = TR.batch_loss(model, images, targets, w)[2]

    def loss(m):
        width = "float64" if m["pos_embed"].data.dtype == np.float64 else "float32"
        with T.precision(width):
            return TR.batch_loss(m, images, targets, w, asg)[0]

    m64 = as_float64(model)
    full64 = model_gradcheck(m64, loss, n_coords=50, eps=1e-6, seed=4)
    full32 = model_gradcheck(model, loss, n_coords=50, eps=1e-6, seed=4, fd_model=as_float64(model))
    elapsed = time.perf_counter() - t0
    ok = prim64 < 1e-3 and prim32 < 1e-2 and full64 < 1e-3 and full32 < 1e-2 and elapsed < 120
    report(4, ok, f"{len(PRIMITIVES)} primitives: worst {prim64:.1e} (64-bit), {prim32:.1e} (32-bit); "
                  f"full loss at 50 parameters: {full64:.1e} (64-bit), {full32:.1e} (32-bit); {elapsed:.0f} s")


# ------------------------------------------------------------------ 5

def test_criterion_05_toy_overfit(report):
    frames = generate_traversal(TraversalConfig(n_places=16), seed=0).map_frames
    truths = [f.instances for f in frames]
    model = S.SpotterModel.init(seed=0)
    state = {"steps": 0, "det": None, "e2e": None}

    class Done(Exception):
        pass

    def check(step, m, trace):
        state["steps"] = step + 1
        if (step + 1) % 100:
            return
        preds = [S.spot(f.image, m, 0.5) for f in frames]
        state["det"] = E.eval_detection(preds, truths)
        state["e2e"] = E.eval_end2end(preds, truths)
        state["loss"] = (trace[0][1], trace[-1][1])
        if state["det"].hmean >= 0.95 and state["e2e"].hmean >= 0.90:
            raise Done

    t0 = time.perf_counter()
    try:
        TR.fit(model, frames, TR.TrainConfig(steps=5000, batch_size=16, learning_rate=1e-3), check)
    except Done:
        pass
    elapsed = time.perf_counter() - t0
    det, e2e = state["det"], state["e2e"]
    ok = det is not None and det.hmean >= 0.95 and e2e.hmean >= 0.90 and elapsed <= 900
    report(5, ok, f"after {state['steps']} steps: H = {det.hmean:.3f}, F = {e2e.hmean:.3f}, "
                  f"loss {state['loss'][0]:.3f} -> {state['loss'][1]:.4f}, {elapsed:.0f} s")


# ------------------------------------------------------------------ 6

def test_criterion_06_mae(report):
    pair = generate_traversal(TraversalConfig(n_places=16), seed=6)
    images = np.stack([f.image for f in pair.map_frames + pair.query_frames])
    model = S.SpotterModel.init(seed=6)
    P = model.config.n_patches
    counts = {len(TR.mask_indices(np.zeros((P, 1)), model.config.mask_ratio, s)) for s in range(200)}
    t0 = time.perf_counter()
    before = TR.mae_eval_loss(model, images, seed=1)
    TR.pretrain_mae(model, images, steps=1000, learning_rate=1e-3, batch_size=16, seed=6)
    after = TR.mae_eval_loss(model, images, seed=1)
    elapsed = time.perf_counter() - t0
    drop = 1 - after / before
    ok = counts == {round(0.75 * P)} and drop >= 0.5 and elapsed <= 300
    report(6, ok, f"masked {sorted(counts)} of {P}; MSE {before:.4f} -> {after:.4f} ({drop:.0%} lower), {elapsed:.0f} s")


# ------------------------------------------------------------------ 7

def _oracle_results(map_frames, queries):
    """Exhaustive matcher: brute-force word pairing, first maximum wins."""
    out = []
    for qid, q in queries:
        scores = []
        for _, r in map_frames:
            if q and r:
                sim = V.similarity_matrix([i.text for i in q], [i.text for i in r])
                scores.append(brute_force_pairing(sim) / max(len(q), len(r)))
            else:
                scores.append(0.0)
        best = int(np.argmax(scores))
        out.append(V.MatchResult(qid, map_frames[best][0], best, scores[best], scores[best] >= 0.5))
    return out


def _corrupt(rng, text):
    chars = list(text)
    for _ in range(int(rng.integers(1, 3))):
        chars[int(rng.integers(len(chars)))] = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"[int(rng.integers(26))]
    return "".join(chars)


def test_criterion_07_vpr_oracle(report):
    t0 = time.perf_counter()
    pair = generate_traversal(TraversalConfig(n_places=100), seed=7)
    pm = V.build_place_map(pair.map_frames)
    results = [V.query_place(pm, q.frame_id, q.instances) for q in pair.query_frames]
    hits = sum(r.best_index == c for r, c in zip(results, pair.correspondence))
    curve = E.eval_vpr(results, pair.correspondence)
    correct = [abs(r.best_index - c) <= 3 for r, c in zip(results, pair.correspondence)]
    clean_sweep = curve.points == enumerate_sweep([r.score for r in results], correct, 100)

    rng = np.random.default_rng(7)
    noisy = generate_traversal(TraversalConfig(n_places=100, drop_rate=0.1), seed=8)
    pm = V.build_place_map(noisy.map_frames)
    queries = []
    for q in noisy.query_frames:
        insts = [TextInstance(i.polygon, _corrupt(rng, i.text) if rng.uniform() < 0.2 else i.text, i.confidence)
                 for i in q.instances]
        queries.append((q.frame_id, V.filter_instances(insts, pm.policy)))
    ours = [V.query_place(pm, qid, insts) for qid, insts in queries]
    theirs = _oracle_results(pm.frames, queries)
    same_results = [(r.best_index, r.score) for r in ours] == [(r.best_index, r.score) for r in theirs]
    a, b = E.eval_vpr(ours, noisy.correspondence), E.eval_vpr(theirs, noisy.correspondence)
    elapsed = time.perf_counter() - t0
    ok = hits == 100 and clean_sweep and same_results and a.points == b.points and elapsed < 60
    report(7, ok, f"clean: {hits}/100 correct, sweep == enumeration: {clean_sweep}; "
                  f"20% corrupted: results identical {same_results}, curves identical {a.points == b.points} "
                  f"({len(a.points)} points, P@R0.8 = {a.precision_at_recall[0.8]:.3f}); {elapsed:.0f} s")


# ------------------------------------------------------------------ 8

def test_criterion_08_round_trips(report, tmp_path):
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    recs = random_records(rng, 1000)
    F.write_annotations(recs, tmp_path / "a.jsonl")
    ann = F.read_annotations(tmp_path / "a.jsonl") == recs
    pgm = all(np.array_equal(F.decode_pgm(F.encode_pgm(img)), img) for img in (random_image(rng) for _ in range(1000)))
    ck_ok = 0
    for _ in range(1000):
        m = random_model(rng)
        F.save_checkpoint(m, tmp_path / "ck")
        back = F.load_checkpoint(tmp_path / "ck")
        ck_ok += (back.config == m.config and back.train_config == m.train_config
                  and all(back[k].data.tobytes() == p.data.tobytes() for k, p in m.params.items()))
    maps = 0
    for _ in range(1000):
        pm = random_place_map(rng)
        F.save_place_map(pm, tmp_path / "m.json")
        maps += F.load_place_map(tmp_path / "m.json") == pm
    elapsed = time.perf_counter() - t0
    ok = ann and pgm and ck_ok == 1000 and maps == 1000 and elapsed < 60
    report(8, ok, f"annotations {1000 if ann else 'FAILED'}/1000, PGM {1000 if pgm else 'FAILED'}/1000, "
                  f"checkpoints {ck_ok}/1000, place maps {maps}/1000; {elapsed:.0f} s")


# ------------------------------------------------------------------ 9 and 10

PIPELINE_CONFIG = {"batch_size": 16, "lr": 1e-3}


def _pipeline(root):
    """Full CLI pipeline with relative paths under ``root``; returns the exit codes."""
    (root / "cfg.json").write_text(json.dumps(PIPELINE_CONFIG))
    steps = [
        ["synth", "--places", "16", "--drop-rate", "0.25", "--seed", "5", "--out", "syn"],
        ["pretrain", "--config", "cfg.json", "--data", "syn/map.jsonl", "syn/query.jsonl",
         "--steps", "50", "--out", "pre"],
        ["train", "--config", "cfg.json", "--data", "syn/map.jsonl", "--init", "pre/checkpoint",
         "--steps", "400", "--out", "trn"],
        ["spot", "--checkpoint", "trn/checkpoint", "--data", "syn/map.jsonl", "--out", "spot/map.jsonl"],
        ["spot", "--checkpoint", "trn/checkpoint", "--data", "syn/query.jsonl", "--out", "spot/query.jsonl"],
        ["map", "--pred", "spot/map.jsonl", "--out", "vpr/map.json"],
        ["query", "--map", "vpr/map.json", "--pred", "spot/query.jsonl", "--out", "vpr/results.jsonl"],
        ["eval", "vpr", "--pred", "vpr/results.jsonl", "--truth", "syn/truth.json", "--out", "eval/vpr"],
        ["eval", "detection", "--pred", "spot/map.jsonl", "--truth", "syn/map.jsonl", "--out", "eval/det"],
        ["eval", "e2e", "--pred", "spot/map.jsonl", "--truth", "syn/map.jsonl", "--out", "eval/e2e"],
    ]
    return [(s[0], dispatch(s)) for s in steps]


def _digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    import os
    runs = []
    here = os.getcwd()
    for name in ("run_a", "run_b"):
        root = tmp_path_factory.mktemp(name)
        os.chdir(root)
        try:
            t0 = time.perf_counter()
            codes = _pipeline(root)
            runs.append((root, codes, time.perf_counter() - t0))
        finally:
            os.chdir(here)
    return runs


def test_criterion_09_determinism(report, pipeline_runs):
    (a, _, _), (b, _, _) = pipeline_runs
    da, db = _digest(a), _digest(b)
    differ = sorted(k for k in set(da) | set(db) if da.get(k) != db.get(k))
    kinds = {"images": sum(k.endswith(".pgm") for k in da), "checkpoints": sum(k.endswith("weights.bin") for k in da),
             "reports": sum(k.startswith("eval/") for k in da)}
    ok = not differ and all(kinds.values())
    report(9, ok, f"{len(da)} files byte-identical across two runs ({kinds})" if ok else f"differ: {differ[:5]}")


def test_criterion_10_integration(report, pipeline_runs, tmp_path):
    root, codes, elapsed = pipeline_runs[0]
    pr = (root / "eval/vpr/pr.csv").read_text().splitlines() if (root / "eval/vpr/pr.csv").exists() else []
    summary = json.loads((root / "eval/vpr/summary.json").read_text()) if pr else {}
    pipeline_ok = all(c == 0 for _, c in codes) and pr[:1] == ["threshold,precision,recall"] \
        and set(summary.get("precision_at_recall", {})) == {"0.2", "0.4", "0.6", "0.8", "0.9"}

    model = F.load_checkpoint(root / "trn/checkpoint")
    frames = [F.read_pgm(p) for p in sorted((root / "syn/images").glob("m*.pgm"))][:8]
    fast = E.measure_fps(lambda img: S.spot(img, model, 0.5), frames)
    slow = E.measure_fps(lambda img: (S.spot(img, model, 0.5), time.sleep(0.01)), frames)
    ok = pipeline_ok and fast.fps > 0 and slow.fps < fast.fps
    report(10, ok, f"exit codes {[c for _, c in codes]} in {elapsed:.0f} s, PR report {len(pr) - 1} points; "
                   f"FPS {fast.fps:.1f} -> {slow.fps:.1f} with 10 ms sleep")
