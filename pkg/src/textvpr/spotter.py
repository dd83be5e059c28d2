"""Toy end-to-end transformer text spotter.

Pipeline: patchify -> ViT encoder (MAE-pretrainable) -> multi-scale adapter
-> query decoder with deformable sampling -> multi-task heads (objectness,
polygon, per-position characters). There are no anchors and no NMS; each
object query proposes at most one word.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .font import CHARSET
from .frames import TextInstance, normalize_text
from .geometry import Polygon

EOW = len(CHARSET)  # end-of-word class index


@dataclass(frozen=True)
class SpotterConfig:
    image_size: int = 128
    patch_size: int = 16
    embed_dim: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_queries: int = 25
    mask_ratio: float = 0.75
    charset: str = CHARSET
    max_word_len: int = 25
    n_polygon_points: int = 16
    n_sample_points: int = 4
    pyramid_strides: tuple = (4, 8, 16, 32)
    ffn_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "pyramid_strides", tuple(self.pyramid_strides))
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.image_size % max(self.pyramid_strides):
            raise ValueError("image_size must be divisible by the largest pyramid stride")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if set(self.pyramid_strides) - {4, 8, 16, 32} or self.patch_size != 16:
            # adapter levels are defined relative to a stride-16 backbone
            raise ValueError("pyramid strides must be a subset of {4, 8, 16, 32} with patch_size 16")
        if self.n_polygon_points < 4 or self.n_polygon_points % 2:
            raise ValueError("n_polygon_points must be even and >= 4")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid ** 2

    @property
    def n_classes(self):
        return len(self.charset) + 1

    def to_dict(self):
        d = asdict(self)
        d["pyramid_strides"] = list(self.pyramid_strides)
        return d


@dataclass
class QueryPrediction:
    objectness: np.ndarray  # [2] logits: (no-text, text)
    polygon_coords: np.ndarray  # [2 * n_polygon_points] in [0, 1]
    char_logits: np.ndarray  # [max_word_len, n_classes]


# ------------------------------------------------------------------ parameters

class SpotterModel:
    """Parameter store plus architecture configuration."""

    def __init__(self, config=None, params=None, train_config=None):
        self.config = config or SpotterConfig()
        self.params = params if params is not None else {}
        self.train_config = train_config or {}

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def group(self, prefix):
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    @classmethod
    def init(cls, config=None, seed=0, dtype=None):
        config = config or SpotterConfig()
        rng = np.random.default_rng(seed)
        P = {}
        d, f = config.embed_dim, config.ffn_dim
        ps2 = config.patch_size ** 2

        def dense(name, n_in, n_out, std=None, bias=0.0):
            std = std if std is not None else math.sqrt(2.0 / (n_in + n_out))
            P[name + ".w"] = rng.normal(0.0, std, (n_in, n_out))
            P[name + ".b"] = np.full(n_out, bias, dtype=np.float64)

        def norm(name):
            P[name + ".g"] = np.ones(d)
            P[name + ".b"] = np.zeros(d)

        def attention(name):
            for part in ("q", "k", "v", "o"):
                dense(f"{name}.{part}", d, d)

        def ffn(name):
            dense(name + ".fc1", d, f)
            dense(name + ".fc2", f, d)

        def encoder_layer(name):
            attention(name + ".attn")
            norm(name + ".ln1")
            ffn(name + ".ffn")
            norm(name + ".ln2")

        dense("patch_embed", ps2, d)
        P["pos_embed"] = rng.normal(0.0, 0.02, (config.n_patches, d))
        for i in range(config.n_encoder_layers):
            encoder_layer(f"encoder.{i}")

        P["mae.mask_token"] = rng.normal(0.0, 0.02, (1, d))
        P["mae.pos_embed"] = rng.normal(0.0, 0.02, (config.n_patches, d))
        encoder_layer("mae.decoder")
        dense("mae.head", d, ps2)

        for s in config.pyramid_strides:
            if s != 16:
                dense(f"adapter.s{s}", d, d)

        L, K = len(config.pyramid_strides), config.n_sample_points
        P["queries.embed"] = rng.normal(0.0, 1.0, (config.n_queries, d))
        # reference points spread on a grid, stored as logits
        side = math.ceil(math.sqrt(config.n_queries))
        g = (np.arange(side) + 0.5) / side
        grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)[:config.n_queries]
        P["queries.ref"] = np.log(grid / (1 - grid))
        spread = np.zeros((L, K, 2))
        spread[:, :, 0] = np.linspace(-0.15, 0.15, K)[None, :]
        for i in range(config.n_decoder_layers):
            name = f"decoder.{i}"
            attention(name + ".self_attn")
            norm(name + ".ln1")
            dense(name + ".deform.offsets", d, L * K * 2, std=0.01)
            P[name + ".deform.offsets.b"] = spread.reshape(-1).copy()
            dense(name + ".deform.weights", d, L * K, std=0.01)
            dense(name + ".deform.value", d, d)
            dense(name + ".deform.out", d, d)
            norm(name + ".ln2")
            ffn(name + ".ffn")
            norm(name + ".ln3")

        dense("head.cls", d, 2, std=0.01)
        dense("head.poly", d, 2 * config.n_polygon_points, std=0.01)
        dense("head.char", d, config.max_word_len * config.n_classes, std=0.05)

        params = {k: T.parameter(v, name=k, dtype=dtype) for k, v in P.items()}
        return cls(config, params)

    def clone(self):
        params = {k: T.parameter(v.data.copy(), name=k, dtype=v.data.dtype) for k, v in self.params.items()}
        return SpotterModel(self.config, params, dict(self.train_config))


# ------------------------------------------------------------------ building blocks

def linear(model, name, x):
    return T.add(T.matmul(x, model[name + ".w"]), model[name + ".b"])


def _norm(model, name, x):
    return T.layer_norm(x, model[name + ".g"], model[name + ".b"], 1e-5)


def multi_head_attention(model, name, x, n_heads, kv=None, trace=None):
    """Scaled dot-product attention over ``x`` [B, N, d] (keys/values from ``kv``)."""
    kv = x if kv is None else kv
    B, N, d = x.shape
    M = kv.shape[1]
    dh = d // n_heads

    def heads(t, n):
        return T.transpose(T.reshape(t, (B, n, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(model, name + ".q", x), N)
    k = heads(linear(model, name + ".k", kv), M)
    v = heads(linear(model, name + ".v", kv), M)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if trace is not None:
        trace.setdefault(name, []).append(attn.data)
    out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, N, d))
    return linear(model, name + ".o", out)


def feed_forward(model, name, x):
    return linear(model, name + ".fc2", T.relu(linear(model, name + ".fc1", x)))


def encoder_layer(model, name, x, n_heads, trace=None):
    x = _norm(model, name + ".ln1", T.add(x, multi_head_attention(model, name + ".attn", x, n_heads, trace=trace)))
    return _norm(model, name + ".ln2", T.add(x, feed_forward(model, name + ".ffn", x)))


# ------------------------------------------------------------------ backbone

def _as_batch(images):
    arr = np.asarray(images)
    return arr[None] if arr.ndim == 2 else arr


def patchify(image, patch_size):
    """[H, W] (or [B, H, W]) -> [P, ps^2] tokens in row-major patch order."""
    arr = np.asarray(image)
    single = arr.ndim == 2
    arr = arr[None] if single else arr
    B, H, W = arr.shape
    if H % patch_size or W % patch_size:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    tok = arr.reshape(B, gh, patch_size, gw, patch_size).transpose(0, 1, 3, 2, 4)
    tok = tok.reshape(B, gh * gw, patch_size * patch_size)
    return tok[0] if single else tok


def unpatchify(tokens, patch_size, height, width):
    arr = np.asarray(tokens)
    single = arr.ndim == 2
    arr = arr[None] if single else arr
    B = arr.shape[0]
    gh, gw = height // patch_size, width // patch_size
    img = arr.reshape(B, gh, gw, patch_size, patch_size).transpose(0, 1, 3, 2, 4)
    img = img.reshape(B, height, width)
    return img[0] if single else img


def mask_patches(tokens, mask_ratio, seed):
    """Hide ``round(mask_ratio * P)`` patches chosen by a seeded shuffle.

    Returns (visible tokens in original order, sorted masked indices).
    """
    if not 0 < mask_ratio < 1:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    tokens = np.asarray(tokens)
    P = tokens.shape[0]
    n_mask = int(round(mask_ratio * P))
    perm = np.random.default_rng(seed).permutation(P)
    masked = np.sort(perm[:n_mask])
    keep = np.sort(perm[n_mask:])
    return tokens[keep], masked


def _pixels(images, dtype):
    return (np.asarray(images, dtype=np.float64) / 255.0).astype(dtype)


def embed_patches(model, images):
    cfg = model.config
    dtype = model["pos_embed"].data.dtype
    tok = patchify(_pixels(_as_batch(images), dtype), cfg.patch_size)
    x = linear(model, "patch_embed", T.Tensor(tok, dtype=dtype, checked=False))
    return x


def encode_tokens(model, x, trace=None):
    cfg = model.config
    for i in range(cfg.n_encoder_layers):
        x = encoder_layer(model, f"encoder.{i}", x, cfg.n_heads, trace)
    return x


def encode_backbone(model, images, trace=None):
    """Full (unmasked) encoding -> single-scale map [B, h, w, d] at the patch stride."""
    cfg = model.config
    x = embed_patches(model, images)
    if x.shape[1] != model["pos_embed"].shape[0]:
        raise ValueError(f"{x.shape[1]} tokens but {model['pos_embed'].shape[0]} position embeddings")
    x = encode_tokens(model, T.add(x, model["pos_embed"]), trace)
    B = x.shape[0]
    return T.reshape(x, (B, cfg.grid, cfg.grid, cfg.embed_dim))


def mae_reconstruct(model, images, masked, trace=None):
    """Masked-autoencoder pass.

    ``masked`` holds one index array per image (all the same length). The
    encoder only sees visible patches; a one-layer decoder fills mask tokens
    and a linear head predicts pixels. Returns (reconstruction [B, P, ps^2],
    mean squared error over masked patches only).
    """
    cfg = model.config
    images = _as_batch(images)
    masked = [np.asarray(m, dtype=np.intp) for m in masked]
    if any(m.size == 0 for m in masked):
        raise ValueError("mae_reconstruct needs at least one masked patch per image")
    B, P, d = images.shape[0], cfg.n_patches, cfg.embed_dim
    dtype = model["pos_embed"].data.dtype
    target = patchify(_pixels(images, dtype), cfg.patch_size)

    vis = []
    for m in masked:
        keep = np.ones(P, bool)
        keep[m] = False
        vis.append(np.flatnonzero(keep))
    n_vis = len(vis[0])
    x = T.add(embed_patches(model, images), model["pos_embed"])
    flat = T.reshape(x, (B * P, d))
    vis_idx = np.concatenate([b * P + v for b, v in enumerate(vis)])
    enc = encode_tokens(model, T.reshape(T.take(flat, vis_idx, 0), (B, n_vis, d)), trace)

    # scatter encodings back, mask token everywhere else
    table = T.concat([T.reshape(enc, (B * n_vis, d)), model["mae.mask_token"]], axis=0)
    where = np.full((B, P), B * n_vis, dtype=np.intp)
    for b, v in enumerate(vis):
        where[b, v] = b * n_vis + np.arange(n_vis)
    full = T.reshape(T.take(table, where.reshape(-1), 0), (B, P, d))
    full = T.add(full, model["mae.pos_embed"])
    full = encoder_layer(model, "mae.decoder", full, cfg.n_heads, trace)
    recon = linear(model, "mae.head", full)

    n_mask = len(masked[0])
    m_idx = np.concatenate([b * P + m for b, m in enumerate(masked)])
    pred = T.take(T.reshape(recon, (B * P, -1)), m_idx, 0)
    diff = T.sub(pred, T.Tensor(target.reshape(B * P, -1)[m_idx], dtype=dtype, checked=False))
    loss = T.mean(T.mul(diff, diff))
    return recon, loss


# ------------------------------------------------------------------ adapter

def multi_scale_adapt(model, feat16):
    """Stride-16 map [B, h, w, d] -> {stride: map} by up/down-sampling."""
    cfg = model.config
    pyramid = {}
    for s in cfg.pyramid_strides:
        if s == 16:
            pyramid[s] = feat16
        # a per-position projection commutes with nearest upsampling, so
        # project first at the coarse grid
        elif s == 8:
            pyramid[s] = T.upsample2x(linear(model, "adapter.s8", feat16))
        elif s == 4:
            pyramid[s] = T.upsample2x(T.upsample2x(linear(model, "adapter.s4", feat16)))
        elif s == 32:
            pyramid[s] = linear(model, "adapter.s32", T.avgpool2x(feat16))
    return pyramid


# ------------------------------------------------------------------ decoder

def _ref_points(model):
    return T.sigmoid(model["queries.ref"])  # [Q, 2]


def deformable_cross_attention(model, name, q, pyramid, ref, trace=None):
    """Each query samples ``K`` offset points per level around its reference point."""
    cfg = model.config
    B, Q, d = q.shape
    L, K = len(cfg.pyramid_strides), cfg.n_sample_points
    offsets = T.reshape(linear(model, name + ".offsets", q), (B, Q, L, K, 2))
    weights = T.softmax(T.reshape(linear(model, name + ".weights", q), (B, Q, L * K)), axis=-1)
    if trace is not None:
        trace.setdefault(name + ".weights", []).append(weights.data)
    ref_rep = T.reshape(T.take(ref, np.repeat(np.arange(Q), L * K), 0), (Q, L, K, 2))
    ref_b = T.add(offsets, ref_rep)
    sampled = []
    for li, s in enumerate(cfg.pyramid_strides):
        pts = T.reshape(T.index(ref_b, (slice(None), slice(None), li)), (B, Q * K, 2))
        if trace is not None:
            trace.setdefault(name + ".points", []).append(pts.data)
        sampled.append(T.reshape(T.bilinear_sample(pyramid[s], pts), (B, Q, K, d)))
    feats = T.reshape(T.concat(sampled, axis=2), (B, Q, L * K, d))
    mixed = T.reshape(T.matmul(T.reshape(weights, (B, Q, 1, L * K)), feats), (B, Q, d))
    return linear(model, name + ".out", linear(model, name + ".value", mixed))


def decode_queries(model, pyramid, trace=None):
    """Object queries -> embeddings [B, Q, d]."""
    cfg = model.config
    B = next(iter(pyramid.values())).shape[0]
    ref = _ref_points(model)
    embed = model["queries.embed"]
    q = T.add(T.Tensor(np.zeros((B,) + embed.shape, dtype=embed.dtype), checked=False), embed)
    for i in range(cfg.n_decoder_layers):
        name = f"decoder.{i}"
        q = _norm(model, name + ".ln1", T.add(q, multi_head_attention(model, name + ".self_attn", q, cfg.n_heads, trace=trace)))
        q = _norm(model, name + ".ln2", T.add(q, deformable_cross_attention(model, name + ".deform", q, pyramid, ref, trace)))
        q = _norm(model, name + ".ln3", T.add(q, feed_forward(model, name + ".ffn", q)))
    return q


def predict_heads(model, emb):
    """Embeddings [B, Q, d] -> (objectness [B,Q,2], polygon [B,Q,2n], chars [B,Q,T,C])."""
    cfg = model.config
    B, Q, _ = emb.shape
    cls_logits = linear(model, "head.cls", emb)
    # polygon offsets are added to the reference point in logit space, then squashed
    n = cfg.n_polygon_points
    ref_logit = T.reshape(T.take(model["queries.ref"], np.repeat(np.arange(Q), n), 0), (Q, n, 2))
    delta = T.reshape(linear(model, "head.poly", emb), (B, Q, cfg.n_polygon_points, 2))
    poly = T.reshape(T.sigmoid(T.add(delta, ref_logit)), (B, Q, 2 * cfg.n_polygon_points))
    chars = T.reshape(linear(model, "head.char", emb), (B, Q, cfg.max_word_len, cfg.n_classes))
    return cls_logits, poly, chars


def forward(model, images, trace=None):
    feat = encode_backbone(model, images, trace)
    pyramid = multi_scale_adapt(model, feat)
    emb = decode_queries(model, pyramid, trace)
    return predict_heads(model, emb)


def to_predictions(heads, b=0):
    cls_logits, poly, chars = (h.data for h in heads)
    return [QueryPrediction(cls_logits[b, q], poly[b, q], chars[b, q]) for q in range(cls_logits.shape[1])]


# ------------------------------------------------------------------ inference

def _softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def decode_chars(char_logits, charset=CHARSET):
    """Greedy per-position decode up to the first end-of-word -> (text, mean max prob)."""
    probs = _softmax_np(np.asarray(char_logits, dtype=np.float64))
    best = probs.argmax(-1)
    out, conf = [], []
    for t, c in enumerate(best):
        if c == len(charset):
            break
        out.append(charset[c])
        conf.append(probs[t, c])
    return "".join(out), (float(np.mean(conf)) if conf else 0.0)


def letterbox(image, size):
    """Resize preserving aspect into a ``size`` square; returns (image, scale, (pad_x, pad_y))."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    s = min(size / H, size / W)
    nh, nw = max(1, round(H * s)), max(1, round(W * s))
    ys = np.clip(((np.arange(nh) + 0.5) / s - 0.5).round().astype(int), 0, H - 1)
    xs = np.clip(((np.arange(nw) + 0.5) / s - 0.5).round().astype(int), 0, W - 1)
    resized = img[np.ix_(ys, xs)]
    out = np.full((size, size), 255.0 * 0.85)
    px, py = (size - nw) // 2, (size - nh) // 2
    out[py:py + nh, px:px + nw] = resized
    return out, s, (px, py)


def spot(image, model, score_threshold=0.5, resize=False):
    """Detect and read words in one grayscale frame -> list of TextInstance (pixel space)."""
    cfg = model.config
    img = np.asarray(image)
    scale, pad = 1.0, (0, 0)
    if img.shape != (cfg.image_size, cfg.image_size):
        if not resize:
            raise ValueError(f"image shape {img.shape} != ({cfg.image_size}, {cfg.image_size}); pass resize=True")
        img, scale, pad = letterbox(img, cfg.image_size)
    heads = forward(model, img[None])
    return _instances(model, heads, 0, score_threshold, scale, pad)


def spot_batch(images, model, score_threshold=0.5):
    heads = forward(model, np.asarray(images))
    return [_instances(model, heads, b, score_threshold, 1.0, (0, 0)) for b in range(len(images))]


def _instances(model, heads, b, score_threshold, scale, pad):
    cfg = model.config
    cls_logits, poly, chars = (h.data for h in heads)
    p_text = _softmax_np(cls_logits[b].astype(np.float64))[:, 1]
    out = []
    for q in range(cfg.n_queries):
        # a finite softmax never truly reaches 1, so threshold 1 keeps nothing
        if score_threshold >= 1.0 or p_text[q] < score_threshold:
            continue
        text, char_conf = decode_chars(chars[b, q], cfg.charset)
        pts = poly[b, q].astype(np.float64).reshape(-1, 2) * cfg.image_size
        pts = (pts - np.asarray(pad)) / scale
        conf = float(np.clip(p_text[q] * char_conf, 0.0, 1.0))
        out.append(TextInstance(Polygon(pts), normalize_text(text), conf))
    return out
