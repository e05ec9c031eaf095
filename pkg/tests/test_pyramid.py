import numpy as np
import pytest

from oracles import ref_anchors, ref_decode
from stadhead.pyramid import (
    MAX_DIST,
    DimensionError,
    PredictionSet,
    build_grid,
    decode_dfl,
    encode_ltrb,
    encode_ltrb_unchecked,
    expected_distance,
    two_bin_logits,
)


@pytest.mark.parametrize("h,w,counts", [(64, 64, (64, 16, 4)), (224, 224, (784, 196, 49)), (32, 32, (16, 4, 1))])
def test_grid_counts(h, w, counts):
    g = build_grid(h, w)
    assert g.counts == counts
    assert len(g) == sum(counts)


def test_grid_centres_and_order():
    g = build_grid(32, 32)
    lv3 = g.points[g.level_slice(2)]
    assert tuple(lv3[0]) == (16.0, 16.0)
    assert [tuple(p) + (s,) for p, s in zip(g.points.tolist(), g.strides.tolist())] == ref_anchors(32, 32)
    assert list(g.levels) == [0] * 16 + [1] * 4 + [2]


def test_grid_count_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h, w = 32 * rng.integers(1, 12, size=2)
        assert len(build_grid(int(h), int(w))) == sum((h // s) * (w // s) for s in (8, 16, 32))


@pytest.mark.parametrize("h,w", [(30, 32), (32, 48), (0, 32), (-32, 32)])
def test_grid_rejects_bad_dims(h, w):
    with pytest.raises(DimensionError):
        build_grid(h, w)


def test_decode_examples():
    onehot = np.full((4, 16), -1e4)
    onehot[:, 5] = 0.0
    box = decode_dfl(onehot[None], np.array([[100.0, 100.0]]), np.array([8.0]))
    np.testing.assert_allclose(box[0], [60, 60, 140, 140])
    d, _ = expected_distance(np.zeros((4, 16)))
    np.testing.assert_allclose(d, 7.5)
    half = np.full(16, -np.inf)
    half[3] = half[4] = 0.0
    d, _ = expected_distance(half)
    assert d == pytest.approx(3.5)


def test_decode_matches_reference_and_is_valid():
    rng = np.random.default_rng(1)
    g = build_grid(64, 64)
    reg = rng.normal(0, 5, size=(len(g), 4, 16))
    boxes = decode_dfl(reg, g.points, g.strides)
    assert np.all(boxes[:, 2] >= boxes[:, 0]) and np.all(boxes[:, 3] >= boxes[:, 1])
    anchors = ref_anchors(64, 64)
    for a in range(0, len(g), 7):
        np.testing.assert_allclose(boxes[a], ref_decode(reg[a].tolist(), anchors[a]), atol=1e-10)


def test_encode_examples():
    np.testing.assert_allclose(encode_ltrb([0, 0, 32, 32], (16, 16), 8), [2, 2, 2, 2])
    np.testing.assert_allclose(encode_ltrb([0, 0, 200, 200], (16, 16), 8), [2, 2, MAX_DIST, MAX_DIST])
    assert MAX_DIST == pytest.approx(14.999)
    with pytest.raises(ValueError):
        encode_ltrb([0, 0, 10, 10], (16, 16), 8)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(300):
        s = float(rng.choice([8, 16, 32]))
        c = rng.uniform(20, 200, size=2)
        truth = np.array([c[0] - rng.uniform(0.1, 300), c[1] - rng.uniform(0.1, 300),
                          c[0] + rng.uniform(0.1, 300), c[1] + rng.uniform(0.1, 300)])
        d = encode_ltrb(truth, c, s)
        box = decode_dfl(two_bin_logits(d)[None], c[None], np.array([s]))[0]
        clamped = np.array([c[0] - d[0] * s, c[1] - d[1] * s, c[0] + d[2] * s, c[1] + d[3] * s])
        np.testing.assert_allclose(box, clamped, atol=1e-6)


def test_encode_unchecked_clamps_outside_points():
    d = encode_ltrb_unchecked(np.array([0, 0, 10, 10.0]), np.array([[20.0, 5.0]]), np.array([8.0]))
    assert np.all(d >= 0) and np.all(d <= MAX_DIST)


def test_prediction_set_shapes():
    p = PredictionSet(np.zeros((5, 3)), np.zeros((5, 64)))
    assert p.reg_logits.shape == (5, 4, 16)
    assert p.num_classes == 3 and len(p) == 5
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((5, 3)), np.zeros((4, 64)))
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((5, 3)), np.zeros((5, 4, 15)))
