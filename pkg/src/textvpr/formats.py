"""Persistence: JSONL annotations, binary PGM, checkpoints, place maps, reports."""

from __future__ import annotations

import contextlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .frames import TextInstance
from .geometry import Polygon

CHECKPOINT_FORMAT = "textvpr-checkpoint"
CHECKPOINT_VERSION = 1
MAP_FORMAT = "tvpr-map"
MAP_VERSION = 1
TRUTH_FORMAT = "tvpr-truth"


class ParseError(ValueError):
    """Malformed input; ``location`` is a line number or byte offset."""

    def __init__(self, message, location=None):
        where = f" (at {location})" if location is not None else ""
        super().__init__(message + where)
        self.location = location


class ValidationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


# ------------------------------------------------------------------ atomic writes

def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text):
    _atomic_write(path, text.encode("utf-8"))


def write_json(path, doc):
    write_text(path, json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


@contextlib.contextmanager
def atomic_dir(path):
    """Yield a scratch directory that replaces ``path`` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix="." + path.name + "."))
    try:
        yield tmp
        if path.exists():
            old = Path(tempfile.mkdtemp(dir=path.parent, prefix="." + path.name + ".old."))
            os.replace(path, old / "x")
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


# ------------------------------------------------------------------ annotations

@dataclass
class AnnotationRecord:
    frame_id: str
    image_path: str = ""
    instances: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _instance_to_json(inst):
    if inst.polygon.normalized:
        raise ValueError("serialise pixel-space polygons; scale normalised ones first")
    return {"polygon": inst.polygon.vertices.tolist(), "text": inst.text,
            "confidence": float(inst.confidence)}


def _instance_from_json(obj, where):
    try:
        poly = np.asarray(obj["polygon"], dtype=np.float64)
        text = obj["text"]
        conf = float(obj.get("confidence", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad instance: {exc}", where) from None
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise ValidationError(f"polygon needs >= 3 [x, y] points (line {where})")
    if not isinstance(text, str):
        raise ParseError("instance text must be a string", where)
    if not 0 <= conf <= 1:
        raise ValidationError(f"confidence {conf} outside [0, 1] (line {where})")
    return TextInstance(Polygon(poly), text, conf)


def record_to_json(rec):
    doc = dict(rec.extra)
    doc.update({"frame_id": rec.frame_id, "image_path": rec.image_path,
                "instances": [_instance_to_json(i) for i in rec.instances]})
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, allow_nan=False)


def dumps_annotations(records):
    seen = set()
    lines = []
    for rec in records:
        if rec.frame_id in seen:
            raise ValidationError(f"duplicate frame_id {rec.frame_id!r}")
        seen.add(rec.frame_id)
        lines.append(record_to_json(rec))
    return "".join(line + "\n" for line in lines)


def loads_annotations(text):
    records = []
    seen = set()
    for n, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", n) from None
        if not isinstance(obj, dict) or "frame_id" not in obj:
            raise ParseError("record must be an object with a frame_id", n)
        fid = obj.pop("frame_id")
        if fid in seen:
            raise ValidationError(f"duplicate frame_id {fid!r} (line {n})")
        seen.add(fid)
        image_path = obj.pop("image_path", "")
        insts = [_instance_from_json(o, n) for o in obj.pop("instances", [])]
        records.append(AnnotationRecord(fid, image_path, insts, obj))
    return records


def write_annotations(records, path):
    write_text(path, dumps_annotations(records))


def read_annotations(path):
    data = Path(path).read_bytes()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("file is not UTF-8", exc.start) from None
    return loads_annotations(text)


# ------------------------------------------------------------------ PGM

def encode_pgm(image):
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-d uint8 image")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(data):
    pos = 0
    tokens = []
    n = len(data)
    while len(tokens) < 4:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", pos)
        tokens.append((data[start:pos], start))
    magic, _ = tokens[0]
    if magic != b"P5":
        raise ParseError(f"not a binary PGM (magic {magic!r})", 0)
    vals = []
    for tok, off in tokens[1:]:
        try:
            vals.append(int(tok))
        except ValueError:
            raise ParseError(f"bad header field {tok!r}", off) from None
    w, h, maxval = vals
    if w <= 0 or h <= 0:
        raise ParseError(f"bad image size {w}x{h}", tokens[1][1])
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", tokens[3][1])
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after header", pos)
    pos += 1
    need = w * h
    if n - pos < need:
        raise ParseError(f"truncated payload: {n - pos} of {need} bytes", n)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def write_pgm(image, path):
    _atomic_write(path, encode_pgm(image))


def read_pgm(path):
    return decode_pgm(Path(path).read_bytes())


# ------------------------------------------------------------------ checkpoints

def checkpoint_manifest(model):
    inventory = []
    offset = 0
    for name, p in model.named_parameters():
        inventory.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += int(np.prod(p.shape)) * 4
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "train_config": model.train_config,
        "parameters": inventory,
    }


def checkpoint_blob(model):
    return b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.parameters())


def save_checkpoint(model, path):
    """Write ``path/manifest.json`` and ``path/weights.bin`` (little-endian float32)."""
    with atomic_dir(path) as tmp:
        (tmp / "manifest.json").write_text(json.dumps(checkpoint_manifest(model), indent=2, sort_keys=True) + "\n")
        (tmp / "weights.bin").write_bytes(checkpoint_blob(model))


def load_checkpoint(path):
    from .spotter import SpotterConfig, SpotterModel

    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not JSON: {exc.msg}", exc.lineno) from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = (path / "weights.bin").read_bytes()
    inventory = manifest["parameters"]
    expected = sum(int(np.prod(e["shape"])) * 4 for e in inventory)
    if len(blob) != expected:
        raise CheckpointLengthError(f"weights.bin has {len(blob)} bytes, inventory needs {expected}")
    config = SpotterConfig(**manifest["config"])
    reference = SpotterModel.init(config, seed=0)
    want = {k: list(v.shape) for k, v in reference.named_parameters()}
    names = [e["name"] for e in inventory]
    if set(names) != set(want):
        missing = sorted(set(want) - set(names)) or sorted(set(names) - set(want))
        raise CheckpointShapeError(f"parameter inventory mismatch: {missing[:3]}")
    params = {}
    for e in inventory:
        if list(e["shape"]) != want[e["name"]]:
            raise CheckpointShapeError(f"parameter {e['name']!r}: shape {e['shape']} != expected {want[e['name']]}")
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = T.parameter(arr.astype(np.float32), name=e["name"], dtype=np.float32)
    ordered = {k: params[k] for k in want}
    return SpotterModel(config, ordered, manifest.get("train_config") or {})


# ------------------------------------------------------------------ place maps

def place_map_to_json(place_map):
    from dataclasses import asdict

    return {
        "format": MAP_FORMAT,
        "version": MAP_VERSION,
        "policy": asdict(place_map.policy),
        "sim_floor": place_map.sim_floor,
        "frames": [{"frame_id": fid, "instances": [_instance_to_json(i) for i in insts]}
                   for fid, insts in place_map.frames],
    }


def place_map_from_json(doc):
    from .vpr import FilterPolicy, PlaceMap

    if doc.get("format") != MAP_FORMAT:
        raise ParseError(f"not a place map (format {doc.get('format')!r})")
    if doc.get("version") != MAP_VERSION:
        raise ParseError(f"unsupported place map version {doc.get('version')!r}")
    frames = []
    seen = set()
    for k, f in enumerate(doc.get("frames", [])):
        fid = f["frame_id"]
        if fid in seen:
            raise ValidationError(f"duplicate frame_id {fid!r} (frame {k})")
        seen.add(fid)
        frames.append((fid, [_instance_from_json(i, k) for i in f.get("instances", [])]))
    return PlaceMap(frames, FilterPolicy(**doc.get("policy", {})), doc.get("sim_floor", 0.6))


def save_place_map(place_map, path):
    write_json(path, place_map_to_json(place_map))


def load_place_map(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return place_map_from_json(doc)


# ------------------------------------------------------------------ match results / truth / traces

def write_match_results(results, path):
    lines = [json.dumps({"query_id": r.query_id, "best_frame_id": r.best_frame_id,
                         "best_index": r.best_index, "score": r.score, "accepted": r.accepted},
                        sort_keys=True) for r in results]
    write_text(path, "".join(line + "\n" for line in lines))


def read_match_results(path):
    from .vpr import MatchResult

    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(MatchResult(obj["query_id"], obj.get("best_frame_id"), obj.get("best_index"),
                                   obj["score"], bool(obj.get("accepted", False))))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad match result: {exc}", n) from None
    return out


def truth_to_json(pair):
    return {
        "format": TRUTH_FORMAT,
        "version": 1,
        "map_frame_ids": [f.frame_id for f in pair.map_frames],
        "query_frame_ids": [f.frame_id for f in pair.query_frames],
        "correspondence": list(pair.correspondence),
    }


def read_truth(path):
    """-> {query_id: map index or None}"""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    if doc.get("format") != TRUTH_FORMAT:
        raise ParseError(f"not a truth file (format {doc.get('format')!r})")
    return dict(zip(doc["query_frame_ids"], doc["correspondence"]))


def loss_trace_csv(trace):
    lines = ["step,total,cls,poly,char"]
    lines += [f"{s},{t!r},{c!r},{p!r},{ch!r}" for s, t, c, p, ch in trace]
    return "\n".join(lines) + "\n"
