"""Text-based place recognition: filter spotted words, score frames, query a map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .frames import normalize_text
from .training import hungarian_match


@dataclass(frozen=True)
class FilterPolicy:
    min_confidence: float = 0.7
    min_length: int = 3
    min_alnum_fraction: float = 1.0

    def __post_init__(self):
        if not 0 <= self.min_confidence <= 1:
            raise ValueError("min_confidence must lie in [0, 1]")
        if self.min_length < 0:
            raise ValueError("min_length must be >= 0")
        if not 0 <= self.min_alnum_fraction <= 1:
            raise ValueError("min_alnum_fraction must lie in [0, 1]")

    def keeps(self, inst):
        text = inst.text
        if inst.confidence < self.min_confidence or len(text) < self.min_length:
            return False
        alnum = sum(c.isascii() and c.isalnum() for c in text) / len(text) if text else 0.0
        return alnum >= self.min_alnum_fraction


def filter_instances(instances, policy=FilterPolicy()):
    return [inst for inst in instances if policy.keeps(inst)]


def levenshtein(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_similarity(a, b):
    """1 - levenshtein / max length, case-folded; two empty strings score 1."""
    a, b = normalize_text(a), normalize_text(b)
    n = max(len(a), len(b))
    if n == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / n


def _texts(instances):
    return [i if isinstance(i, str) else i.text for i in instances]


def similarity_matrix(q_words, r_words, sim_floor=0.6):
    s = np.array([[edit_similarity(a, b) for b in r_words] for a in q_words], dtype=np.float64)
    s = s.reshape(len(q_words), len(r_words))
    s[s < sim_floor] = 0.0
    return s


def paired_sum(q, r, sim_floor=0.6):
    """Maximal one-to-one sum of floored word similarities."""
    qw = sorted(normalize_text(w) for w in _texts(q))
    rw = sorted(normalize_text(w) for w in _texts(r))
    if not qw or not rw:
        return 0.0
    # canonical orientation (larger side as rows) keeps the result symmetric bit for bit
    if (len(qw), qw) < (len(rw), rw):
        qw, rw = rw, qw
    s = similarity_matrix(qw, rw, sim_floor)
    asg = hungarian_match(1.0 - s)
    return math.fsum(s[i, j] for i, j in asg.pairs)


def frame_similarity(q, r, sim_floor=0.6):
    """Paired similarity normalised by the larger word count; empty frames score 0."""
    qw, rw = _texts(q), _texts(r)
    if not qw or not rw:
        return 0.0
    return paired_sum(qw, rw, sim_floor) / max(len(qw), len(rw))


@dataclass
class PlaceMap:
    frames: list  # [(frame_id, [TextInstance])]
    policy: FilterPolicy = field(default_factory=FilterPolicy)
    sim_floor: float = 0.6

    def __post_init__(self):
        ids = [fid for fid, _ in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate frame_id in place map")

    @property
    def frame_ids(self):
        return [fid for fid, _ in self.frames]

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class MatchResult:
    query_id: str
    best_frame_id: str | None
    best_index: int | None
    score: float
    accepted: bool

    def __post_init__(self):
        if self.accepted and self.best_frame_id is None:
            raise ValueError("an accepted match needs a best frame")


def build_place_map(frames, policy=FilterPolicy(), sim_floor=0.6):
    """``frames`` is an iterable of Frame (or (frame_id, instances) pairs)."""
    entries = []
    seen = set()
    for f in frames:
        fid, insts = (f.frame_id, f.instances) if hasattr(f, "frame_id") else f
        if fid in seen:
            raise ValueError(f"duplicate frame_id {fid!r}")
        seen.add(fid)
        entries.append((fid, filter_instances(insts, policy)))
    return PlaceMap(entries, policy, sim_floor)


def score_frames(place_map, query_instances):
    q = filter_instances(query_instances, place_map.policy)
    return [frame_similarity(q, insts, place_map.sim_floor) for _, insts in place_map.frames]


def query_place(place_map, query_id, query_instances, decision_threshold=0.5):
    """Best-scoring map frame (ties -> smallest index); accepted iff score >= threshold."""
    if len(place_map) == 0:
        raise ValueError("place map is empty")
    scores = score_frames(place_map, query_instances)
    best = int(np.argmax(scores))  # first maximum
    score = scores[best]
    return MatchResult(query_id, place_map.frames[best][0], best, score, score >= decision_threshold)
