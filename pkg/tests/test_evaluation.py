import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyqdetr.evaluation import (Detection, EvalReport, class_ap, evaluate, forgetting_report,
                                read_detections, write_detections, write_table_csv)
from helpers import brute_force_ap, perfect_detections, random_boxes

B = (10.0, 10.0, 30.0, 30.0)
C = (40.0, 40.0, 60.0, 56.0)
NEAR = (12.0, 10.0, 32.0, 30.0)      # IoU with B = 360 / 440 = 0.818...
HALF = (20.0, 10.0, 40.0, 30.0)      # IoU with B = 200 / 600 = 1/3
FAR = (0.0, 50.0, 8.0, 60.0)

# (detections as (image, score, box), ground truth image -> boxes)
HAND_CASES = {
    "single-hit": ([(0, 0.9, B)], {0: [B]}),
    "single-miss": ([(0, 0.9, FAR)], {0: [B]}),
    "no-detections": ([], {0: [B], 1: [C]}),
    "duplicate": ([(0, 0.9, B), (0, 0.8, NEAR)], {0: [B]}),
    "fp-ranked-first": ([(0, 0.95, FAR), (0, 0.9, B)], {0: [B]}),
    "half-recall": ([(0, 0.9, B)], {0: [B], 1: [C]}),
    "two-images": ([(0, 0.7, B), (1, 0.9, C), (1, 0.3, FAR)], {0: [B], 1: [C]}),
    "loose-box": ([(0, 0.9, NEAR), (1, 0.8, C)], {0: [B], 1: [C]}),
    "low-iou": ([(0, 0.9, HALF)], {0: [B]}),
    "tied-scores": ([(0, 0.5, FAR), (0, 0.5, B), (1, 0.5, C)], {0: [B], 1: [C]}),
    "image-without-gt": ([(2, 0.99, B), (0, 0.5, B)], {0: [B]}),
    "two-gts-one-image": ([(0, 0.9, NEAR), (0, 0.6, C), (0, 0.4, B)], {0: [B, C]}),
}


@pytest.mark.parametrize("name", list(HAND_CASES))
@pytest.mark.parametrize("thr", [0.5, 0.75, 0.85])
def test_class_ap_matches_brute_force(name, thr):
    dets, gts = HAND_CASES[name]
    got = class_ap([Detection(i, 0, s, b) for i, s, b in dets], {k: np.array(v) for k, v in gts.items()}, thr)
    assert got == brute_force_ap(dets, gts, thr)


def test_hand_values():
    # frozen from the brute-force oracle and by hand
    dets, gts = HAND_CASES["half-recall"]
    assert brute_force_ap(dets, gts, 0.5) == pytest.approx(51 / 101)
    dets, gts = HAND_CASES["fp-ranked-first"]
    assert brute_force_ap(dets, gts, 0.5) == pytest.approx(0.5)
    assert brute_force_ap(*HAND_CASES["single-hit"], 0.5) == 1.0
    assert brute_force_ap(*HAND_CASES["single-miss"], 0.5) == 0.0


def test_perfect_predictions_score_one():
    gt = {0: [(1, B), (2, C)], 1: [(1, C)], 2: []}
    rep = evaluate(perfect_detections(gt), gt, [1, 2])
    assert rep.ap == rep.ap50 == rep.ap75 == 1.0


def test_classes_without_ground_truth_are_excluded():
    gt = {0: [(1, B)]}
    rep = evaluate([Detection(0, 1, 0.9, B), Detection(0, 2, 0.9, C)], gt, [1, 2, 3], old_classes=[1],
                   new_classes=[2, 3])
    assert set(rep.per_class) == {1}
    assert rep.ap == 1.0 and rep.ap_old == 1.0 and rep.ap_new is None


def test_unknown_classes_raise():
    with pytest.raises(ValueError):
        evaluate([Detection(0, 9, 0.5, B)], {0: [(1, B)]}, [1])
    with pytest.raises(ValueError):
        evaluate([], {0: [(9, B)]}, [1])


def test_at_most_hundred_detections_per_image():
    gts = {0: [B]}
    dets = [(0, 1.0 - k * 1e-3, FAR) for k in range(100)] + [(0, 0.01, B)]
    got = class_ap([Detection(i, 0, s, b) for i, s, b in dets], {0: np.array([B])}, 0.5)
    assert got == 0.0 == brute_force_ap(dets, gts, 0.5)


def test_detection_dump_round_trip(tmp_path):
    dets = [Detection(3, 1, 0.25, (1.0, 2.0, 3.5, 4.0)), Detection(4, 0, 0.125, (0.0, 0.0, 1.0, 1.0))]
    write_detections(tmp_path / "d.jsonl", dets)
    assert read_detections(tmp_path / "d.jsonl") == dets


def test_report_table(tmp_path):
    rep = EvalReport(0.5, 0.75, 0.25, {0: 0.5}, {0: 0.75}, ap_old=0.5, ap_new=None)
    table = forgetting_report([{"method": "m", "step": 2, "classes_seen": 4, "report": rep,
                                "class_sets": [(0,), (1,)]}])
    assert table[0]["AP_C1"] == 0.5 and table[0]["AP_C2"] is None
    write_table_csv(tmp_path / "t.csv", table)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",")[:8] == ["method", "step", "classes_seen", "AP", "AP50", "AP75", "AP_old", "AP_new"]
    assert lines[1].startswith("m,2,4,0.500000,0.750000,0.250000,0.500000,,")


@st.composite
def detection_sets(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2 ** 31)))
    n_img, n_cls = draw(st.integers(1, 4)), draw(st.integers(1, 3))
    gt = {i: [(int(c), tuple(b)) for c, b in zip(rng.integers(0, n_cls, k), random_boxes(rng, k, 64.0))]
          for i, k in enumerate(rng.integers(0, 4, n_img))}
    dets = []
    for i, anns in gt.items():
        for c, b in anns:                       # jittered copies of the truth
            if rng.random() < 0.7:
                dets.append(Detection(i, c, float(rng.random()), tuple(np.array(b) + rng.normal(0, 2, 4))))
        for b in random_boxes(rng, int(rng.integers(0, 3)), 64.0):
            dets.append(Detection(i, int(rng.integers(0, n_cls)), float(rng.random()), tuple(b)))
    return dets, gt, list(range(n_cls))


@given(detection_sets())
def test_report_values_are_bounded_and_ordered(case):
    dets, gt, classes = case
    rep = evaluate(dets, gt, classes)
    for v in (rep.ap, rep.ap50, rep.ap75, *rep.per_class.values()):
        assert 0.0 <= v <= 1.0
    assert rep.ap <= rep.ap50 + 1e-12
    assert rep.ap75 <= rep.ap50 + 1e-12


@given(detection_sets())
def test_class_ap_matches_brute_force_on_random_sets(case):
    dets, gt, classes = case
    for c in classes:
        mine = [(d.image_id, d.score, d.box) for d in dets if d.class_id == c]
        gts = {i: [b for k, b in anns if k == c] for i, anns in gt.items()}
        gts = {i: v for i, v in gts.items() if v}
        got = class_ap([Detection(i, c, s, b) for i, s, b in mine], {i: np.array(v) for i, v in gts.items()}, 0.5)
        assert got == brute_force_ap(mine, gts, 0.5)
