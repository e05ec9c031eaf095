import numpy as np
import pytest

from oracles import ref_iou, ref_nms
from stadhead.geom import BoxXYXY
from stadhead.postprocess import (
    Detection,
    decode_predictions,
    nms,
    postprocess,
    read_detections_csv,
    write_detections_csv,
)
from stadhead.pyramid import PredictionSet, build_grid, sigmoid


def random_dets(rng, n=None):
    n = int(rng.integers(0, 40)) if n is None else n
    dets = []
    centres = rng.uniform(10, 50, size=(3, 2))
    for i in range(n):
        c = centres[rng.integers(3)] + rng.normal(0, 3, 2)
        wh = rng.uniform(4, 16, 2)
        score = float(np.round(rng.uniform(0, 1), 1))  # coarse scores force ties
        dets.append(Detection(BoxXYXY(c[0] - wh[0] / 2, c[1] - wh[1] / 2, c[0] + wh[0] / 2, c[1] + wh[1] / 2),
                              int(rng.integers(3)), score, int(rng.integers(2)), int(rng.integers(0, 20))))
    return dets


def as_tuples(dets):
    return [(d.frame_id, d.class_id, d.score, d.anchor, tuple(d.box)) for d in dets]


def test_nms_examples():
    box = BoxXYXY(0, 0, 10, 10)
    out = nms([Detection(box, 0, 0.8, 0, 1), Detection(box, 0, 0.9, 0, 2)])
    assert [d.score for d in out] == [0.9]
    out = nms([Detection(box, 0, 0.8), Detection(box, 1, 0.9)])
    assert len(out) == 2


def test_nms_matches_quadratic_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        dets = random_dets(rng)
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        ours = nms(dets, thr)
        expected = ref_nms(as_tuples(dets), thr)
        assert sorted(id(d) for d in ours) == sorted(id(dets[i]) for i in expected)


def test_nms_properties():
    rng = np.random.default_rng(1)
    for _ in range(200):
        dets = random_dets(rng)
        once = nms(dets)
        assert nms(once) == once
        assert {id(d) for d in once} <= {id(d) for d in dets}
        for i, a in enumerate(once):
            for b in once[i + 1:]:
                if (a.frame_id, a.class_id) == (b.frame_id, b.class_id):
                    assert ref_iou(a.box, b.box) <= 0.5


def test_nms_tie_break_prefers_lower_anchor():
    box = BoxXYXY(0, 0, 10, 10)
    out = nms([Detection(box, 0, 0.5, 0, 7), Detection(box, 0, 0.5, 0, 3)])
    assert [d.anchor for d in out] == [3]


def test_decode_examples():
    grid = build_grid(64, 64)
    preds = PredictionSet(np.full((84, 6), -20.0), np.zeros((84, 64)))
    assert decode_predictions(preds, grid) == []
    preds.cls_logits[10, 3] = 10.0
    dets = decode_predictions(preds, grid)
    assert len(dets) == 1 and dets[0].class_id == 3 and dets[0].anchor == 10
    assert dets[0].score == pytest.approx(1.0, abs=1e-4)


def test_decode_count_matches_enumeration():
    rng = np.random.default_rng(2)
    grid = build_grid(64, 96)
    for _ in range(20):
        preds = PredictionSet(rng.normal(-4, 2, (len(grid), 4)), rng.normal(0, 1, (len(grid), 64)))
        thr = float(rng.uniform(0.001, 0.2))
        count = sum(1 for a in range(len(grid)) for c in range(4) if sigmoid(preds.cls_logits[a, c]) >= thr)
        dets = decode_predictions(preds, grid, thr)
        assert len(dets) == count
        assert all(d.score >= thr for d in dets)
        assert len(postprocess(preds, grid, score_thresh=thr)) <= count


def test_detections_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    dets = random_dets(rng, 10)
    path = tmp_path / "d.csv"
    write_detections_csv(path, dets)
    lines = path.read_text().splitlines()
    assert lines[0] == "frame_id,class_id,score,x1,y1,x2,y2"
    assert all(len(v.split(".")[1]) == 6 for v in lines[1].split(",")[2:])
    back = read_detections_csv(path)
    assert [(d.frame_id, d.class_id) for d in back] == [(d.frame_id, d.class_id) for d in dets]
    np.testing.assert_allclose([d.box for d in back], [d.box for d in dets], atol=1e-6)
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_detections_csv(bad)
