import collections
import io
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcgra2seq.data import (CANVAS, PATCH, MaskSpec, StrokeSequence, apply_masks, center_indices,
                            crop_patches, from_stroke5, generate_synthetic, load_dataset, normalize,
                            parse_quickdraw_ndjson, prepare_patches, rasterize, read_cache,
                            select_patch_centers, synthetic_corpus, to_ndjson_line, to_stroke5,
                            write_cache)

FIXTURE = Path(__file__).parent / "fixtures" / "corpus_100.ndjson"


def line(*strokes):
    return json.dumps({"word": "w", "key_id": "k", "drawing": [[list(xs), list(ys)] for xs, ys in strokes]})


def seq_from_points(points, pens=None):
    points = np.asarray(points, float)
    pens = np.zeros(len(points)) if pens is None else np.asarray(pens, float)
    deltas = np.diff(points, axis=0, prepend=np.zeros((1, 2)))
    return StrokeSequence(np.column_stack([deltas, pens]))


# -- parsing -------------------------------------------------------------------

def test_single_segment_stroke3():
    (seq,) = parse_quickdraw_ndjson([line(([0, 10], [0, 0]))])
    np.testing.assert_array_equal(seq.points, [[0, 0, 0], [10, 0, 1]])


def test_two_strokes_lift_exactly_at_boundary():
    (seq,) = parse_quickdraw_ndjson([line(([0, 5, 9], [0, 0, 0]), ([20, 30], [7, 7]))])
    assert seq.points[:, 2].tolist() == [0, 0, 1, 0, 1]
    np.testing.assert_array_equal(seq.absolute(), [[0, 0], [5, 0], [9, 0], [20, 7], [30, 7]])


def test_bundled_corpus_count_and_order():
    with open(FIXTURE) as fh:
        seqs = parse_quickdraw_ndjson(fh)
    assert len(seqs) == 100
    assert [s.key for s in seqs] == [f"{i:04d}" for i in range(100)]


def test_malformed_and_empty_lines_are_counted():
    counter = collections.Counter()
    lines = [line(([0, 1], [0, 1])), "{not json", json.dumps({"drawing": []}), json.dumps({"x": 1}), ""]
    seqs = parse_quickdraw_ndjson(lines, counter)
    assert len(seqs) == 1
    assert counter["malformed"] == 2 and counter["empty"] == 1


def test_ndjson_round_trip():
    (seq,) = parse_quickdraw_ndjson([line(([0, 5, 9], [1, 2, 3]), ([20, 30], [7, 7]))])
    (back,) = parse_quickdraw_ndjson([to_ndjson_line(seq)])
    assert back == seq


def test_parse_rasterize_is_deterministic():
    with open(FIXTURE) as fh:
        first = fh.readline()
    a = rasterize(normalize(parse_quickdraw_ndjson([first])[0]))
    b = rasterize(normalize(parse_quickdraw_ndjson([first])[0]))
    assert a.tobytes() == b.tobytes()


# -- normalisation and raster -----------------------------------------------------

def test_normalize_fits_ninety_percent_of_canvas():
    seq = seq_from_points([[3, 4], [50, 4], [50, 30]])
    xy = normalize(seq).absolute()
    extent = xy.max(0) - xy.min(0)
    assert extent.max() == pytest.approx(0.9 * CANVAS, abs=1)
    centre = (xy.max(0) + xy.min(0)) / 2
    np.testing.assert_allclose(centre, [CANVAS / 2, CANVAS / 2], atol=1)


def test_rasterize_empty_is_blank():
    img = rasterize(StrokeSequence(np.zeros((0, 3))))
    assert img.shape == (CANVAS, CANVAS) and not img.any()


def test_rasterize_horizontal_scanline():
    img = rasterize(seq_from_points([[100, 320], [540, 320]], [0, 1]))
    expected = np.zeros((CANVAS, CANVAS), bool)
    expected[320, 100:541] = True
    np.testing.assert_array_equal(img > 0, expected)


def test_pen_lift_draws_nothing_between_dots():
    img = rasterize(seq_from_points([[100, 100], [300, 100]], [1, 1]))
    assert img[100, 100] > 0 and img[100, 300] > 0
    assert not img[100, 101:300].any()


# -- patch centres ------------------------------------------------------------------

def test_centers_one_to_one():
    pts = np.column_stack([np.arange(20) * 10 + 5, np.full(20, 50)])
    centers = select_patch_centers(seq_from_points(pts), 20)
    np.testing.assert_array_equal(centers, pts)


def test_centers_every_second_point():
    pts = np.column_stack([np.arange(40) * 10 + 5, np.full(40, 50)])
    centers = select_patch_centers(seq_from_points(pts), 20)
    np.testing.assert_array_equal(centers, pts[::2])


def test_centers_repeat_short_sequences_in_order():
    idx = center_indices(5, 20)
    assert idx.tolist() == sorted(idx.tolist())
    assert collections.Counter(idx.tolist()) == {i: 4 for i in range(5)}


@given(st.lists(st.integers(1, 6), min_size=1, max_size=6), st.integers(1, 25), st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_centers_follow_drawing_order(stroke_lengths, m, seed):
    rng = np.random.default_rng(seed)
    strokes = [rng.integers(0, CANVAS, (k, 2)) for k in stroke_lengths]
    seq = StrokeSequence.from_strokes(strokes)
    idx = center_indices(len(seq), m)
    owners = seq.stroke_ids()[idx]
    assert len(idx) == m
    assert np.all(np.diff(owners) >= 0)
    assert np.all(np.diff(idx) >= 0)


# -- cropping -----------------------------------------------------------------------

def test_blank_canvas_gives_blank_patches():
    ps = crop_patches(np.zeros((CANVAS, CANVAS), np.float32), np.array([[10, 10], [320, 320]]))
    assert ps.patches.shape == (2, PATCH, PATCH) and ps.full.shape == (PATCH, PATCH)
    assert not ps.patches.any() and not ps.full.any()


def test_corner_center_is_zero_padded():
    canvas = np.ones((CANVAS, CANVAS), np.float32)
    (patch,) = crop_patches(canvas, np.array([[0, 0]])).patches
    assert not patch[:128, :].any() and not patch[:, :128].any()
    assert patch[128:, 128:].all()


def test_centered_square_patch_is_pixel_identical():
    rng = np.random.default_rng(0)
    canvas = np.zeros((CANVAS, CANVAS), np.float32)
    canvas[192:448, 192:448] = rng.random((256, 256))
    (patch,) = crop_patches(canvas, np.array([[320, 320]])).patches
    np.testing.assert_array_equal(patch, canvas[192:448, 192:448])


# -- masking --------------------------------------------------------------------------

def _masking_fixture():
    seq = synthetic_corpus(["zigzag"], 1)[0]
    return rasterize(seq, thickness=3), select_patch_centers(seq, 8)


def test_mask_probability_zero_is_identity():
    canvas, centers = _masking_fixture()
    masking = MaskSpec(0.0, 5)
    np.testing.assert_array_equal(apply_masks(canvas, centers, masking), canvas)
    assert masking.applied == []


def test_mask_probability_one_zeroes_every_region():
    canvas, centers = _masking_fixture()
    out = apply_masks(canvas, centers, MaskSpec(1.0, 5))
    for x, y in centers:
        assert not out[max(0, y - 128):y + 128, max(0, x - 128):x + 128].any()


def test_masking_is_bit_reproducible():
    canvas, centers = _masking_fixture()
    a = apply_masks(canvas, centers, MaskSpec(0.3, 11))
    b = apply_masks(canvas, centers, MaskSpec(0.3, 11))
    assert a.tobytes() == b.tobytes()


@given(st.sampled_from([0.1, 0.3, 0.5]), st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_mask_changes_only_inside_applied_regions(p, seed):
    canvas, centers = _masking_fixture()
    masking = MaskSpec(p, seed)
    out = apply_masks(canvas, centers, masking)
    inside = np.zeros_like(canvas, dtype=bool)
    for i in masking.applied:
        x, y = centers[i]
        inside[max(0, y - 128):y + 128, max(0, x - 128):x + 128] = True
    np.testing.assert_array_equal(out[~inside], canvas[~inside])


def test_prepare_patches_masks_before_cropping():
    seq = synthetic_corpus(["circle"], 1)[0]
    ps, canvas, masking = prepare_patches(seq, 8, 1.0, 3)
    assert masking.applied == list(range(8))
    assert not ps.patches.any()
    np.testing.assert_array_equal(ps.full, crop_patches(canvas, ps.centers).full)
    assert canvas.sum() < rasterize(seq).sum()


# -- stroke-5 ---------------------------------------------------------------------------

def test_stroke5_round_trip_and_end_padding():
    seq = synthetic_corpus(["two_strokes"], 1)[0]
    s5 = to_stroke5(seq, 30)
    assert s5.shape == (31, 5)
    assert (s5[len(seq):, 4] == 1).all() and (s5[:len(seq), 4] == 0).all()
    assert from_stroke5(s5) == seq


def test_stroke5_rejects_overlong():
    with pytest.raises(ValueError, match="exceeds max_len"):
        to_stroke5(synthetic_corpus(["circle"], 1)[0], 3)


# -- synthetic corpus ---------------------------------------------------------------------

@pytest.mark.parametrize("shape", ["circle", "square", "zigzag", "two_strokes"])
def test_synthetic_shapes_are_drawable_and_deterministic(shape):
    a = generate_synthetic(shape, np.random.default_rng(0))
    b = generate_synthetic(shape, np.random.default_rng(0))
    assert a == b
    assert len(a) >= 8
    xy = a.absolute()
    assert xy.min() >= 0 and xy.max() <= CANVAS - 1


def test_square_has_four_sides_and_closes():
    seq = generate_synthetic("square", np.random.default_rng(3))
    xy = seq.absolute()
    assert seq.points[:, 2].tolist() == [0] * (len(seq) - 1) + [1]
    np.testing.assert_allclose(xy[-1], xy[0])
    d = np.diff(xy, axis=0)
    directions = {tuple(np.sign(np.round(v, 6))) for v in d}
    assert len(directions) == 4


def test_zigzag_seed_sweep_is_pairwise_distinct():
    seqs = [generate_synthetic("zigzag", np.random.default_rng(s)) for s in range(32)]
    for i in range(32):
        for j in range(i + 1, 32):
            assert seqs[i] != seqs[j]


def test_unknown_shape_rejected():
    with pytest.raises(ValueError, match="unknown synthetic shape"):
        generate_synthetic("star", np.random.default_rng(0))


# -- binary cache -----------------------------------------------------------------------------

def test_dcs_cache_round_trip(tmp_path):
    seqs = synthetic_corpus(["circle", "zigzag"], 3)
    buf = io.BytesIO()
    write_cache(buf, seqs)
    raw = buf.getvalue()
    assert raw[:4] == b"DCS1" and int.from_bytes(raw[4:8], "little") == 6
    back = read_cache(io.BytesIO(raw))
    assert back == seqs


def test_cache_rejects_bad_magic():
    with pytest.raises(ValueError, match="DCS1"):
        read_cache(io.BytesIO(b"XXXX\x00\x00\x00\x00"))


def test_load_dataset_uses_file_stem_as_category(tmp_path):
    seqs = synthetic_corpus(["circle"], 2)
    (tmp_path / "circle.ndjson").write_text("".join(to_ndjson_line(s) + "\n" for s in seqs))
    loaded = load_dataset(tmp_path)
    assert [s.category for s in loaded] == ["circle", "circle"]
    assert loaded == seqs
