import math
from collections import Counter

import numpy as np
import pytest

from oracles import points_in_polygon
from textvpr.font import CHARSET, GLYPH_H, GLYPH_W, glyph
from textvpr.geometry import canonicalize, polygon_area
from textvpr.synthgen import (SceneSpec, TraversalConfig, WordSpec, generate_traversal,
                              glyph_raster, render_frame, word_quad, word_size)


def test_glyph_I_has_full_centre_column():
    bitmap = glyph_raster("I", 7)
    assert bitmap.shape == (7, 5)
    assert bitmap[:, 2].all()


def test_zero_and_O_differ():
    assert not np.array_equal(glyph("0"), glyph("O"))


@pytest.mark.parametrize("c", list(CHARSET))
def test_every_glyph_has_ink_and_fits(c):
    g = glyph(c)
    assert g.shape == (GLYPH_H, GLYPH_W)
    assert g.any()
    assert set(np.unique(g)) <= {0, 1}


def test_all_glyphs_distinct():
    assert len({glyph(c).tobytes() for c in CHARSET}) == len(CHARSET)


def test_glyph_outside_charset():
    with pytest.raises(ValueError):
        glyph_raster("a", 7)
    with pytest.raises(ValueError):
        glyph_raster("#", 7)


def test_glyph_raster_is_deterministic():
    assert glyph_raster("Q", 13).tobytes() == glyph_raster("Q", 13).tobytes()


def test_horizontal_word_truth_is_analytic_box():
    word = WordSpec("SIGN", anchor=(64.0, 40.0), scale=14.0)
    _, truth = render_frame(SceneSpec(words=(word,)))
    w, h = word_size("SIGN", 14.0)
    box = np.array([[64 - w / 2, 40 - h / 2], [64 + w / 2, 40 - h / 2],
                    [64 + w / 2, 40 + h / 2], [64 - w / 2, 40 + h / 2]])
    assert len(truth) == 1
    assert truth[0].text == "SIGN" and truth[0].confidence == 1.0
    assert np.allclose(truth[0].polygon.vertices, canonicalize(box))


def test_rotated_truth_matches_rotation_oracle():
    theta = math.pi / 6
    word = WordSpec("ROT", anchor=(64.0, 64.0), scale=12.0, rotation=theta)
    _, truth = render_frame(SceneSpec(words=(word,)))
    w, h = word_size("ROT", 12.0)
    local = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    want = canonicalize(local @ rot.T + 64.0)
    assert np.abs(truth[0].polygon.vertices - want).max() < 0.5


def test_ink_lies_inside_truth_polygon():
    word = WordSpec("HELLO", anchor=(64.0, 64.0), scale=14.0, rotation=0.1)
    img, truth = render_frame(SceneSpec(words=(word,)))
    ys, xs = np.nonzero(img < 128)
    assert len(xs) > 0
    pts = np.c_[xs + 0.5, ys + 0.5]
    grown = truth[0].polygon.vertices + 1.5 * np.sign(truth[0].polygon.vertices - [64, 64])
    assert points_in_polygon(pts, grown).all()


def test_render_is_bitwise_deterministic():
    spec = SceneSpec(words=(WordSpec("AB12", (60.0, 60.0), 12.0, 0.2, 0.25),),
                     illumination_gain=0.8, noise_sigma=5.0, seed=99)
    a, _ = render_frame(spec)
    b, _ = render_frame(spec)
    assert a.tobytes() == b.tobytes()


def test_occlusion_and_gain():
    clean, _ = render_frame(SceneSpec(words=(WordSpec("OCCLUDE", (64.0, 64.0), 14.0),)))
    occ, _ = render_frame(SceneSpec(words=(WordSpec("OCCLUDE", (64.0, 64.0), 14.0, 0.0, 0.5),)))
    quad = word_quad(WordSpec("OCCLUDE", (64.0, 64.0), 14.0))
    right = slice(int(np.ceil(quad[:, 0].max() - 0.5 * np.ptp(quad[:, 0]))) + 1, int(quad[:, 0].max()))
    assert (occ[58:70, right] == occ[64, right.start]).all()  # flat occluder
    assert not (clean[58:70, right] == clean[64, right.start]).all()
    dark, _ = render_frame(SceneSpec(words=(), illumination_gain=0.5))
    assert dark[0, 0] == round(0.85 * 255 * 0.5)


def test_truth_clipped_to_canvas():
    word = WordSpec("EDGE", anchor=(120.0, 64.0), scale=14.0)
    _, truth = render_frame(SceneSpec(words=(word,)))
    v = truth[0].polygon.vertices
    assert v[:, 0].max() <= 128 and v[:, 0].min() >= 0
    w, h = word_size("EDGE", 14.0)
    assert polygon_area(v) < w * h


def test_scene_validation():
    with pytest.raises(ValueError):
        render_frame(SceneSpec(canvas=(0, 10)))
    with pytest.raises(ValueError):
        render_frame(SceneSpec(words=(WordSpec("", (1.0, 1.0), 7.0),)))
    with pytest.raises(ValueError):
        render_frame(SceneSpec(words=(WordSpec("A" * 26, (1.0, 1.0), 7.0),)))
    with pytest.raises(ValueError):
        render_frame(SceneSpec(words=(WordSpec("AB", (1.0, 1.0), 7.0, 0.0, 1.0),)))


# ------------------------------------------------------------------ traversals

def test_traversal_no_drop_all_correspond():
    pair = generate_traversal(TraversalConfig(n_places=6), seed=1)
    assert pair.correspondence == list(range(6))
    assert len({f.frame_id for f in pair.map_frames}) == 6
    assert len({f.frame_id for f in pair.query_frames}) == 6


def test_traversal_drop_rate_count():
    pair = generate_traversal(TraversalConfig(n_places=100, drop_rate=0.2), seed=3)
    assert sum(c is not None for c in pair.correspondence) == 80
    assert all(c is None or 0 <= c < 100 for c in pair.correspondence)


def test_traversal_transcriptions_shared():
    pair = generate_traversal(TraversalConfig(n_places=10, drop_rate=0.3), seed=4)
    map_words = {w.text for f in pair.map_frames for w in f.instances}
    for q, c in zip(pair.query_frames, pair.correspondence):
        words = Counter(w.text for w in q.instances)
        if c is None:
            assert not set(words) & map_words  # disjoint distractor pool
        else:
            assert words == Counter(w.text for w in pair.map_frames[c].instances)


def test_zero_perturbation_queries_equal_maps():
    pair = generate_traversal(TraversalConfig(n_places=5, query_perturbation=0.0, noise_sigma=0.0), seed=5)
    for m, q in zip(pair.map_frames, pair.query_frames):
        assert np.array_equal(m.image, q.image)


def test_traversal_seed_determinism():
    cfg = TraversalConfig(n_places=4, drop_rate=0.25)
    a, b = generate_traversal(cfg, 11), generate_traversal(cfg, 11)
    assert a.correspondence == b.correspondence
    for fa, fb in zip(a.map_frames + a.query_frames, b.map_frames + b.query_frames):
        assert fa == fb
    c = generate_traversal(cfg, 12)
    assert not all(np.array_equal(x.image, y.image) for x, y in zip(a.map_frames, c.map_frames))


def test_traversal_truth_within_canvas_and_filterable():
    pair = generate_traversal(TraversalConfig(n_places=20), seed=6)
    for f in pair.map_frames + pair.query_frames:
        for inst in f.instances:
            v = inst.polygon.vertices
            assert v.min() >= 0 and v[:, 0].max() <= 128 and v[:, 1].max() <= 128
            assert 3 <= len(inst.text) <= 8


def test_traversal_config_validation():
    with pytest.raises(ValueError):
        generate_traversal(TraversalConfig(n_places=0), 0)
    with pytest.raises(ValueError):
        generate_traversal(TraversalConfig(drop_rate=1.5), 0)
