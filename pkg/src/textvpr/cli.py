"""Command-line entry point: ``textvpr <subcommand> [flags]``.

Every run writes a ``run.json`` (or ``<file>.run.json``) sidecar echoing the
resolved parameters, seed, model config and format versions. Outputs are
written to a scratch location and renamed into place on success.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import evalkit as E
from . import formats as F
from . import spotter as S
from . import training as TR
from .frames import Frame, TextInstance
from .geometry import Polygon
from .synthgen import TraversalConfig, generate_traversal
from .vpr import FilterPolicy, build_place_map, query_place

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ helpers

def _echo(args, params, **extra):
    doc = {"tool": "textvpr", "version": __version__, "subcommand": args.command,
           "seed": args.seed, "params": params,
           "formats": {"checkpoint": F.CHECKPOINT_VERSION, "place_map": F.MAP_VERSION}}
    doc.update(extra)
    return doc


def _require_out(args):
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def _load_frames(path, with_images=True):
    """Annotation file -> list of Frame (images resolved next to the file)."""
    base = Path(path).parent
    frames = []
    for rec in F.read_annotations(path):
        image = None
        if with_images:
            if not rec.image_path:
                raise F.ValidationError(f"frame {rec.frame_id!r} has no image_path")
            image = F.read_pgm(base / rec.image_path)
        frames.append(Frame(rec.frame_id, image, rec.instances))
    return frames


def _fit_to_model(frames, size):
    """Letterbox frames (and their truth polygons) to the model's input size."""
    out = []
    for f in frames:
        if f.image.shape == (size, size):
            out.append(f)
            continue
        img, s, (px, py) = S.letterbox(f.image, size)
        insts = [TextInstance(Polygon(i.polygon.vertices * s + (px, py)), i.text, i.confidence) for i in f.instances]
        out.append(Frame(f.frame_id, np.rint(img).astype(np.uint8), insts))
    return out


def _load_records(path):
    return F.read_annotations(path)


def _model_config(params):
    return S.SpotterConfig(**params.get("model", {}))


# ------------------------------------------------------------------ subcommands

def cmd_synth(args, p):
    out = _require_out(args)
    cfg = TraversalConfig(n_places=p["places"], words_per_place=p["words_per_place"],
                          query_perturbation=p["perturbation"], drop_rate=p["drop_rate"],
                          noise_sigma=p["noise"])
    pair = generate_traversal(cfg, args.seed)
    with F.atomic_dir(out) as tmp:
        (tmp / "images").mkdir()
        for name, frames in (("map", pair.map_frames), ("query", pair.query_frames)):
            records = []
            for f in frames:
                rel = f"images/{f.frame_id}.pgm"
                F.write_pgm(f.image, tmp / rel)
                records.append(F.AnnotationRecord(f.frame_id, rel, f.instances))
            F.write_annotations(records, tmp / f"{name}.jsonl")
        F.write_json(tmp / "truth.json", F.truth_to_json(pair))
        F.write_json(tmp / "run.json", _echo(args, p))
    return EXIT_OK


def cmd_pretrain(args, p):
    out = _require_out(args)
    model = F.load_checkpoint(p["init"]) if p.get("init") else S.SpotterModel.init(_model_config(p), seed=args.seed)
    frames = [f for path in p["data"] for f in _load_frames(path)]
    images = np.stack([f.image for f in _fit_to_model(frames, model.config.image_size)])
    before = TR.mae_eval_loss(model, images[:16], seed=args.seed)
    trace = TR.pretrain_mae(model, images, steps=p["steps"], learning_rate=p["lr"],
                            batch_size=p["batch_size"], seed=args.seed)
    after = TR.mae_eval_loss(model, images[:16], seed=args.seed)
    with F.atomic_dir(out) as tmp:
        F.save_checkpoint(model, tmp / "checkpoint")
        F.write_text(tmp / "mae_trace.csv", "step,mse\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(trace)))
        F.write_json(tmp / "run.json", _echo(args, p, model=model.config.to_dict(),
                                             masked_mse={"before": before, "after": after}))
    return EXIT_OK


def cmd_train(args, p):
    out = _require_out(args)
    model = F.load_checkpoint(p["init"]) if p.get("init") else S.SpotterModel.init(_model_config(p), seed=args.seed)
    frames = _fit_to_model(_load_frames(p["data"]), model.config.image_size)
    tc = TR.TrainConfig(learning_rate=p["lr"], steps=p["steps"], batch_size=p["batch_size"],
                        lambda_cls=p["lambda_cls"], lambda_poly=p["lambda_poly"],
                        lambda_char=p["lambda_char"], seed=args.seed, clip_norm=p.get("clip_norm"))
    model, trace = TR.fit(model, frames, tc)
    with F.atomic_dir(out) as tmp:
        F.save_checkpoint(model, tmp / "checkpoint")
        F.write_text(tmp / "loss_trace.csv", F.loss_trace_csv(trace))
        F.write_json(tmp / "run.json", _echo(args, p, model=model.config.to_dict(), train=tc.to_dict()))
    return EXIT_OK


def cmd_spot(args, p):
    out = _require_out(args)
    model = F.load_checkpoint(p["checkpoint"])
    src = Path(p["data"]).parent
    records = []
    for f, rec in zip(_load_frames(p["data"]), _load_records(p["data"])):
        insts = S.spot(f.image, model, p["threshold"], resize=True)
        # image paths are rebased so they resolve next to the output file
        rel = os.path.relpath(src / rec.image_path, out.parent)
        records.append(F.AnnotationRecord(f.frame_id, Path(rel).as_posix(), insts))
    F.write_annotations(records, out)
    F.write_json(str(out) + ".run.json", _echo(args, p, model=model.config.to_dict()))
    return EXIT_OK


def cmd_map(args, p):
    out = _require_out(args)
    policy = FilterPolicy(p["min_confidence"], p["min_length"], p["min_alnum_fraction"])
    frames = [(r.frame_id, r.instances) for r in _load_records(p["pred"])]
    pm = build_place_map(frames, policy, p["sim_floor"])
    F.save_place_map(pm, out)
    F.write_json(str(out) + ".run.json", _echo(args, p))
    return EXIT_OK


def cmd_query(args, p):
    out = _require_out(args)
    pm = F.load_place_map(p["map"])
    results = [query_place(pm, r.frame_id, r.instances, p["threshold"]) for r in _load_records(p["pred"])]
    F.write_match_results(results, out)
    F.write_json(str(out) + ".run.json", _echo(args, p))
    return EXIT_OK


def _paired_instances(pred_path, truth_path):
    preds = {r.frame_id: r.instances for r in _load_records(pred_path)}
    truths = _load_records(truth_path)
    missing = [r.frame_id for r in truths if r.frame_id not in preds]
    if missing:
        raise F.ValidationError(f"no predictions for frames {missing[:3]}")
    return [preds[r.frame_id] for r in truths], [r.instances for r in truths]


def cmd_eval(args, p):
    out = _require_out(args)
    if args.kind == "vpr":
        results = F.read_match_results(p["pred"])
        curve = E.eval_vpr(results, F.read_truth(p["truth"]), p["tolerance"])
        with F.atomic_dir(out) as tmp:
            F.write_text(tmp / "pr.csv", E.pr_csv(curve))
            F.write_text(tmp / "pr.svg", E.pr_svg(curve))
            F.write_text(tmp / "summary.json", E.summary_json(curve, _echo(args, p)))
        return EXIT_OK
    preds, truths = _paired_instances(p["pred"], p["truth"])
    fn = E.eval_detection if args.kind == "detection" else E.eval_end2end
    report = fn(preds, truths, p["iou"], optimal=p["optimal"])
    with F.atomic_dir(out) as tmp:
        F.write_json(tmp / "summary.json", {"config": _echo(args, p), "report": report.to_dict()})
    return EXIT_OK


def cmd_bench(args, p):
    out = _require_out(args)
    model = F.load_checkpoint(p["checkpoint"])
    frames = _load_frames(p["data"])
    delay = p["sleep"]

    def runner(frame):
        res = S.spot(frame.image, model, 0.5, resize=True)
        if delay > 0:
            time.sleep(delay)
        return res

    rep = E.measure_fps(runner, frames, warmup=p["warmup"], trials=p["trials"])
    with F.atomic_dir(out) as tmp:
        F.write_json(tmp / "summary.json", {"config": _echo(args, p),
                                            "fps": rep.fps, "trials": rep.trials, "n_frames": rep.n_frames})
    return EXIT_OK


# ------------------------------------------------------------------ parser

# dest -> (flag kwargs, default); defaults live here so a --config file can sit between them and flags
SPEC = {
    "synth": {
        "places": (dict(type=int, help="number of places in the traversal"), 16),
        "words_per_place": (dict(type=int, help="signs rendered per place"), 2),
        "perturbation": (dict(type=float, help="query appearance perturbation strength (0 = identical)"), 1.0),
        "drop_rate": (dict(type=float, help="fraction of queries replaced by unmatched distractors"), 0.0),
        "noise": (dict(type=float, help="Gaussian pixel noise sigma in grey levels"), 3.0),
    },
    "pretrain": {
        "data": (dict(nargs="+", help="annotation JSONL file(s) whose images form the corpus"), None),
        "init": (dict(help="checkpoint to start from (default: fresh model)"), None),
        "steps": (dict(type=int, help="masked-reconstruction steps"), 1000),
        "lr": (dict(type=float, help="Adam learning rate"), 1e-3),
        "batch_size": (dict(type=int, help="images per step"), 16),
    },
    "train": {
        "data": (dict(help="annotation JSONL with truth instances"), None),
        "init": (dict(help="checkpoint to start from, e.g. a pretrain output"), None),
        "steps": (dict(type=int, help="optimisation steps"), 1000),
        "lr": (dict(type=float, help="Adam learning rate"), 1e-3),
        "batch_size": (dict(type=int, help="frames per step"), 16),
        "lambda_cls": (dict(type=float, help="text/no-text loss weight"), 2.0),
        "lambda_poly": (dict(type=float, help="polygon L1 loss weight"), 5.0),
        "lambda_char": (dict(type=float, help="character loss weight"), 1.0),
        "clip_norm": (dict(type=float, help="global gradient-norm clip (default: off)"), None),
    },
    "spot": {
        "checkpoint": (dict(help="trained checkpoint directory"), None),
        "data": (dict(help="annotation JSONL listing the frames to read"), None),
        "threshold": (dict(type=float, help="text-probability threshold"), 0.5),
    },
    "map": {
        "pred": (dict(help="spotted map-frame annotations (JSONL)"), None),
        "min_confidence": (dict(type=float, help="drop words below this confidence"), 0.7),
        "min_length": (dict(type=int, help="drop words shorter than this"), 3),
        "min_alnum_fraction": (dict(type=float, help="drop words with fewer alphanumerics"), 1.0),
        "sim_floor": (dict(type=float, help="word similarities below this count as 0"), 0.6),
    },
    "query": {
        "map": (dict(help="place map JSON"), None),
        "pred": (dict(help="spotted query-frame annotations (JSONL)"), None),
        "threshold": (dict(type=float, help="decision threshold for accepting a match"), 0.5),
    },
    "eval": {
        "pred": (dict(help="predictions: annotations JSONL, or match results JSONL for vpr"), None),
        "truth": (dict(help="truth: annotations JSONL, or truth.json for vpr"), None),
        "iou": (dict(type=float, help="IoU threshold for detection matches"), 0.5),
        "optimal": (dict(action="store_true", default=None, help="optimal instead of greedy matching"), False),
        "tolerance": (dict(type=int, help="vpr: frames of slack around the true index"), 3),
    },
    "bench": {
        "checkpoint": (dict(help="trained checkpoint directory"), None),
        "data": (dict(help="annotation JSONL listing frames to time"), None),
        "warmup": (dict(type=int, help="untimed warm-up calls"), 3),
        "trials": (dict(type=int, help="timed passes; the median is reported"), 3),
        "sleep": (dict(type=float, help="artificial per-frame delay in seconds"), 0.0),
    },
}
REQUIRED = {"pretrain": ["data"], "train": ["data"], "spot": ["checkpoint", "data"], "map": ["pred"],
            "query": ["map", "pred"], "eval": ["pred", "truth"], "bench": ["checkpoint", "data"]}
HANDLERS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "spot": cmd_spot,
            "map": cmd_map, "query": cmd_query, "eval": cmd_eval, "bench": cmd_bench}
HELP = {
    "synth": "generate a map/query traversal with annotations",
    "pretrain": "masked-autoencoder pretraining of the backbone",
    "train": "train the spotter on annotated frames",
    "spot": "run the spotter over frames and write annotations",
    "map": "build a place map from spotted map frames",
    "query": "match spotted query frames against a place map",
    "eval": "detection, end-to-end or VPR metrics",
    "bench": "measure spotter frames per second",
}


def _globals(default=None):
    # subcommands repeat the global flags with SUPPRESS so they never clobber values given before them
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=default, help="master random seed (default 0)")
    g.add_argument("--out", default=default, help="output file or directory")
    g.add_argument("--config", default=default, help="JSON file of parameters; flags override it")
    return g


def build_parser():
    g = _globals()
    parser = _Parser(prog="textvpr", description="Scene-text spotting and text-based place recognition toolkit.",
                     parents=[g])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, opts in SPEC.items():
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name], parents=[_globals(argparse.SUPPRESS)])
        if name == "eval":
            sp.add_argument("kind", choices=["detection", "e2e", "vpr"], help="which metric family")
        for dest, (kw, default) in opts.items():
            kw = dict(kw)
            kw.setdefault("default", None)
            if default is not None and "help" in kw:
                kw["help"] += f" (default {default})"
            sp.add_argument("--" + dest.replace("_", "-"), dest=dest, **kw)
    return parser


def resolve(args):
    """Defaults, then the --config file, then explicit flags."""
    params = {k: d for k, (_, d) in SPEC[args.command].items()}
    seed = 0
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise F.ParseError(f"config is not JSON: {exc.msg}", exc.lineno) from None
        if not isinstance(doc, dict):
            raise F.ValidationError("config must be a JSON object")
        doc = dict(doc)
        seed = doc.pop("seed", seed)
        if args.out is None and "out" in doc:
            args.out = doc.pop("out")
        doc.pop("out", None)
        unknown = set(doc) - set(params) - {"model"}
        if unknown:
            raise F.ValidationError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        params.update(doc)
    for k in SPEC[args.command]:
        v = getattr(args, k)
        if v is not None:
            params[k] = v
    if args.seed is None:
        args.seed = seed
    missing = [k for k in REQUIRED.get(args.command, []) if params.get(k) is None]
    if missing:
        raise UsageError(f"{args.command} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return params


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "exit": code, "message": str(message)}), file=sys.stderr)
    return code


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_VALIDATION, "usage", exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_VALIDATION, "usage", "no subcommand given")
    try:
        params = resolve(args)
        return HANDLERS[args.command](args, params)
    except UsageError as exc:
        return _fail(EXIT_VALIDATION, "usage", exc)
    except (F.ParseError, OSError, UnicodeDecodeError) as exc:
        return _fail(EXIT_IO, type(exc).__name__, exc)
    except (ValueError, TypeError, KeyError) as exc:
        return _fail(EXIT_VALIDATION, type(exc).__name__, exc)


def main():
    sys.exit(dispatch())
