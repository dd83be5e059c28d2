"""Seeded synthetic signage frames and map/query traversals with exact truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .font import CHARSET, GLYPH_H, GLYPH_W, glyph
from .frames import Frame, TextInstance
from .geometry import Polygon, canonicalize, clip_to_rect, signed_area

MAX_WORD_LEN = 25
BACKGROUND = 0.85
INK = 0.12
OCCLUDER = 0.45
SUPERSAMPLE = 2


@dataclass(frozen=True)
class WordSpec:
    text: str
    anchor: tuple  # centre of the word box, pixels
    scale: float  # glyph height in pixels
    rotation: float = 0.0  # radians
    occlusion_fraction: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple = (128, 128)  # (width, height)
    words: tuple = ()
    illumination_gain: float = 1.0
    noise_sigma: float = 0.0  # grey levels
    seed: int = 0

    def validate(self):
        w, h = self.canvas
        if w <= 0 or h <= 0:
            raise ValueError(f"canvas must have positive area, got {self.canvas}")
        if self.illumination_gain <= 0 or self.noise_sigma < 0:
            raise ValueError("illumination_gain must be > 0 and noise_sigma >= 0")
        for word in self.words:
            if not word.text or len(word.text) > MAX_WORD_LEN:
                raise ValueError(f"word length must be 1..{MAX_WORD_LEN}: {word.text!r}")
            if any(c not in CHARSET for c in word.text):
                raise ValueError(f"word {word.text!r} has characters outside the charset")
            if not 0 <= word.occlusion_fraction < 1:
                raise ValueError("occlusion_fraction must lie in [0, 1)")
            if word.scale <= 0:
                raise ValueError("word scale must be positive")


def glyph_raster(c, scale):
    """Nearest-neighbour raster of glyph ``c``, ``scale`` pixels tall."""
    g = glyph(c)
    scale = int(scale)
    if scale < 1:
        raise ValueError("scale must be >= 1")
    width = max(1, round(scale * GLYPH_W / GLYPH_H))
    rows = np.arange(scale) * GLYPH_H // scale
    cols = np.arange(width) * GLYPH_W // width
    return g[np.ix_(rows, cols)]


def word_size(text, scale):
    """(width, height) in pixels of a word's box; one dot of spacing between glyphs."""
    dot = scale / GLYPH_H
    return (len(text) * (GLYPH_W + 1) - 1) * dot, scale


def word_quad(word):
    """Corner points (TL, TR, BR, BL) of the rotated word box."""
    w, h = word_size(word.text, word.scale)
    local = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    c, s = math.cos(word.rotation), math.sin(word.rotation)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(word.anchor, dtype=np.float64)


def _word_ink(word, xs, ys):
    """Boolean ink coverage of one word at sample positions (xs, ys)."""
    w, h = word_size(word.text, word.scale)
    dot = word.scale / GLYPH_H
    c, s = math.cos(word.rotation), math.sin(word.rotation)
    dx = xs - word.anchor[0]
    dy = ys - word.anchor[1]
    u = c * dx + s * dy + w / 2
    v = -s * dx + c * dy + h / 2
    col = np.floor(u / dot).astype(np.int64)
    row = np.floor(v / dot).astype(np.int64)
    ok = (u >= 0) & (v >= 0) & (col < len(word.text) * (GLYPH_W + 1) - 1) & (row < GLYPH_H)
    table = np.stack([np.pad(glyph(ch), ((0, 0), (0, 1))) for ch in word.text], axis=1)
    table = table.reshape(GLYPH_H, -1)
    ink = np.zeros(xs.shape, dtype=bool)
    ink[ok] = table[row[ok], col[ok]]
    return ink


def render_frame(spec):
    """Render ``spec`` -> (uint8 image [H, W], list of truth TextInstance)."""
    spec.validate()
    width, height = spec.canvas
    ss = SUPERSAMPLE
    off = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(width)[None, :, None, None] + off[None, None, None, :])
    ys = (np.arange(height)[:, None, None, None] + off[None, None, :, None])
    xs, ys = np.broadcast_arrays(xs, ys)
    canvas = np.full((height, width), BACKGROUND)
    truths = []
    for word in spec.words:
        ink = _word_ink(word, xs, ys).mean(axis=(2, 3))
        canvas = canvas * (1 - ink) + INK * ink
        quad = word_quad(word)
        if word.occlusion_fraction > 0:
            x0, x1 = quad[:, 0].min(), quad[:, 0].max()
            y0, y1 = quad[:, 1].min(), quad[:, 1].max()
            ox0 = x1 - word.occlusion_fraction * (x1 - x0)
            cols = slice(max(0, math.floor(ox0)), max(0, min(width, math.ceil(x1))))
            rows = slice(max(0, math.floor(y0)), max(0, min(height, math.ceil(y1))))
            canvas[rows, cols] = OCCLUDER
        clipped = clip_to_rect(quad, width, height)
        if len(clipped) < 3 or signed_area(clipped) == 0:
            continue
        truths.append(TextInstance(Polygon(canonicalize(clipped)), word.text, 1.0))
    img = canvas * 255.0 * spec.illumination_gain
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), truths


# ------------------------------------------------------------------ traversals

@dataclass(frozen=True)
class TraversalConfig:
    n_places: int = 16
    words_per_place: int = 2
    query_perturbation: float = 1.0
    drop_rate: float = 0.0
    canvas: tuple = (128, 128)
    noise_sigma: float = 3.0
    word_len: tuple = (3, 8)
    scale_range: tuple = (11.0, 14.0)
    max_rotation: float = 0.15
    anchor_jitter: float = 3.0  # px, times query_perturbation
    rotation_jitter: float = 0.05
    gain_jitter: float = 0.25
    max_occlusion: float = 0.3

    def validate(self):
        if self.n_places < 1:
            raise ValueError("n_places must be >= 1")
        if self.words_per_place < 1:
            raise ValueError("words_per_place must be >= 1")
        if not 0 <= self.drop_rate <= 1:
            raise ValueError("drop_rate must lie in [0, 1]")
        if self.query_perturbation < 0:
            raise ValueError("query_perturbation must be >= 0")
        lo, hi = self.word_len
        if not 1 <= lo <= hi <= MAX_WORD_LEN:
            raise ValueError(f"bad word_len range {self.word_len}")


@dataclass
class TraversalPair:
    map_frames: list
    query_frames: list
    correspondence: list  # per query: map index or None
    config: TraversalConfig = field(default_factory=TraversalConfig)
    seed: int = 0


def random_words(rng, n, word_len=(3, 8), exclude=()):
    """``n`` distinct random words, lengths uniform in ``word_len``."""
    seen = set(exclude)
    out = []
    lo, hi = word_len
    while len(out) < n:
        length = int(rng.integers(lo, hi + 1))
        w = "".join(CHARSET[i] for i in rng.integers(0, len(CHARSET), length))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def _fit_anchor(text, scale, rotation, centre, canvas, band):
    """Clamp a word centre so the rotated box stays on the canvas and in its band."""
    w, h = word_size(text, scale)
    c, s = abs(math.cos(rotation)), abs(math.sin(rotation))
    half_w = (w * c + h * s) / 2
    half_h = (w * s + h * c) / 2
    width, height = canvas
    x = min(max(centre[0], half_w + 1), width - half_w - 1)
    y_lo, y_hi = max(band[0], 0) + half_h, min(band[1], height) - half_h
    y = min(max(centre[1], y_lo), y_hi) if y_lo <= y_hi else (band[0] + band[1]) / 2
    return (float(x), float(y))


def _layout(rng, words, cfg):
    width, height = cfg.canvas
    band_h = height / len(words)
    specs = []
    for k, text in enumerate(words):
        scale = float(rng.uniform(*cfg.scale_range))
        w, _ = word_size(text, scale)
        if w > width - 4:
            scale *= (width - 4) / w
        rot = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
        band = (k * band_h, (k + 1) * band_h)
        centre = (rng.uniform(0, width), rng.uniform(*band))
        anchor = _fit_anchor(text, scale, rot, centre, cfg.canvas, band)
        specs.append(WordSpec(text, anchor, scale, rot, 0.0))
    return specs


def _perturb(rng, words, cfg):
    p = cfg.query_perturbation
    height = cfg.canvas[1]
    band_h = height / len(words)
    out = []
    for k, word in enumerate(words):
        jx, jy = rng.normal(0, cfg.anchor_jitter, 2) * p
        rot = word.rotation + float(rng.normal(0, cfg.rotation_jitter)) * p
        occ = float(rng.uniform(0, cfg.max_occlusion)) * min(p, 1.0)
        band = (k * band_h, (k + 1) * band_h)
        centre = (word.anchor[0] + jx, word.anchor[1] + jy)
        anchor = _fit_anchor(word.text, word.scale, rot, centre, cfg.canvas, band) if p else word.anchor
        out.append(replace(word, anchor=anchor, rotation=rot, occlusion_fraction=occ))
    return out


def generate_traversal(config, seed):
    """Map and query sequences sharing word strings; ``drop_rate`` of queries are distractors."""
    config.validate()
    rng = np.random.default_rng(seed)
    n, k = config.n_places, config.words_per_place
    n_drop = int(round(config.drop_rate * n))
    place_words = random_words(rng, n * k, config.word_len)
    distractor_words = random_words(rng, n_drop * k, config.word_len, exclude=place_words)
    dropped = set(rng.choice(n, size=n_drop, replace=False).tolist()) if n_drop else set()
    frame_seeds = rng.integers(0, 2**63 - 1, size=2 * n)

    map_frames, query_frames, correspondence = [], [], []
    distractors = iter(range(n_drop))
    for i in range(n):
        words = _layout(rng, place_words[i * k:(i + 1) * k], config)
        gain_map = 1.0
        spec = SceneSpec(config.canvas, tuple(words), gain_map, config.noise_sigma, int(frame_seeds[2 * i]))
        img, truth = render_frame(spec)
        map_frames.append(Frame(f"m{i:05d}", img, truth))

        if i in dropped:
            d = next(distractors)
            qwords = _layout(rng, distractor_words[d * k:(d + 1) * k], config)
            correspondence.append(None)
        else:
            qwords = words
            correspondence.append(i)
        qwords = _perturb(rng, qwords, config)
        gain = gain_map + float(rng.uniform(-1, 1)) * config.gain_jitter * config.query_perturbation
        qspec = SceneSpec(config.canvas, tuple(qwords), max(gain, 0.05), config.noise_sigma,
                          int(frame_seeds[2 * i + 1]))
        img, truth = render_frame(qspec)
        query_frames.append(Frame(f"q{i:05d}", img, truth))
    return TraversalPair(map_frames, query_frames, correspondence, config, seed)
