import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vpg.ann import ExactIndex, build_ann
from vpg.core import BoundingBox, category
from vpg.errors import EmptyEvaluationError
from vpg.evaluation import (
    DetectionEvalCase,
    RelevanceRating as R,
    TapRateAnomaly,
    TruthTable,
    ann_recall,
    detection_cases,
    detection_report,
    mean_average_precision,
    module_tap_rate,
    precision_at_k,
    precision_report,
    recall_at_precision,
    retrieval_report,
    tap_rate_flagged,
)
from vpg.triplets import MATCH, NO_MATCH
from vpg.vision import Corruption

TOP, BAG = category("top"), category("bag")
GT = BoundingBox(0, 0, 100, 100)


def shifted(iou):
    """Box of the same size as GT with the requested IoU (horizontal shift)."""
    # iou = (100 - s) / (100 + s)  =>  s = 100 (1 - iou) / (1 + iou)
    return BoundingBox(100 * (1 - iou) / (1 + iou), 0, 100, 100)


# -- P@k ---------------------------------------------------------------------------


def test_precision_examples():
    top1 = [[R.EXTREMELY_SIMILAR], [R.SIMILAR], [R.EXTREMELY_SIMILAR], [R.NOT_SIMILAR], [R.EXTREMELY_SIMILAR]]
    assert precision_at_k(top1, 1, R.EXTREMELY_SIMILAR) == pytest.approx(0.6, abs=1e-9)
    assert precision_at_k([[R.EXTREMELY_SIMILAR]] * 4, 1) == 1.0
    assert precision_at_k(top1, 1, "similar") == pytest.approx(0.8, abs=1e-9)


def test_precision_denominator_and_exclusion():
    ratings = {"a": [R.EXTREMELY_SIMILAR, R.NOT_SIMILAR], "b": [R.DID_NOT_LOAD], "c": [R.DID_NOT_LOAD, R.SIMILAR, R.SIMILAR]}
    rep = precision_report(ratings, 5, R.SIMILAR)
    assert rep.value == pytest.approx((0.5 + 1.0) / 2) and rep.queries == 2 and rep.excluded == 1
    with pytest.raises(EmptyEvaluationError):
        precision_at_k([[R.DID_NOT_LOAD]], 1)
    with pytest.raises(KeyError):
        R.parse("great")


@given(st.lists(st.lists(st.sampled_from(list(R)), min_size=1, max_size=6), min_size=1, max_size=10), st.integers(1, 6))
def test_not_similar_threshold_is_one(lists, k):
    loadable = [lst for lst in lists if any(r != R.DID_NOT_LOAD for r in lst)]
    if not loadable:
        return
    assert precision_at_k(lists, k, R.NOT_SIMILAR) == 1.0
    assert precision_at_k(list(reversed(lists)), k) == pytest.approx(precision_at_k(lists, k), abs=1e-12)


# -- mAP -------------------------------------------------------------------------------


def test_map_examples():
    assert shifted(0.6).iou(GT) == pytest.approx(0.6)
    one = DetectionEvalCase(((GT, TOP),), ((shifted(0.6), TOP, 0.9),))
    assert mean_average_precision([one]) == pytest.approx(1.0, abs=1e-9)
    miss = DetectionEvalCase(((GT, TOP),), ((shifted(0.3), TOP, 0.9),))
    assert mean_average_precision([miss]) == 0.0


def test_map_duplicate_prediction_costs_precision():
    gt2 = BoundingBox(300, 300, 50, 50)
    case = DetectionEvalCase(
        ((GT, TOP), (gt2, TOP)),
        ((GT, TOP, 0.9), (shifted(0.8), TOP, 0.8), (gt2, TOP, 0.7)),
    )
    assert mean_average_precision([case]) == pytest.approx(5 / 6, abs=1e-9)


def test_map_lone_gt_duplicate_after_full_recall():
    case = DetectionEvalCase(((GT, TOP),), ((GT, TOP, 0.9), (shifted(0.8), TOP, 0.8)))
    # all-point AP: the extra FP arrives after recall 1.0 and leaves AP at 1
    assert mean_average_precision([case]) == 1.0


def test_map_mean_over_gt_categories_and_class_match():
    case = DetectionEvalCase(((GT, TOP), (BoundingBox(300, 0, 50, 50), BAG)), ((GT, BAG, 0.9), (BoundingBox(300, 0, 50, 50), BAG, 0.8)))
    assert mean_average_precision([case]) == pytest.approx((0.0 + 0.5) / 2, abs=1e-9)


case_st = st.lists(
    st.tuples(st.integers(0, 3), st.integers(0, 3), st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]), st.booleans()),
    max_size=12,
)


def build_cases(rows):
    gts = tuple((BoundingBox(200 * i, 0, 100, 100), TOP) for i in range(4))
    preds = tuple((BoundingBox(200 * g + 10 * j, 0, 100, 100), TOP if ok else BAG, conf) for g, j, conf, ok in rows)
    return [DetectionEvalCase(gts, preds)]


@given(case_st, st.sampled_from([0.5, 0.25, 0.1]))
def test_map_scale_invariant(rows, scale):
    cases = build_cases(rows)
    scaled = [DetectionEvalCase(c.ground_truth, tuple((b, k, s * scale) for b, k, s in c.predictions)) for c in cases]
    assert mean_average_precision(scaled) == pytest.approx(mean_average_precision(cases), abs=1e-12)


@given(case_st)
def test_rap_floor_zero_is_overall_recall(rows):
    cases = build_cases(rows)
    if not cases[0].predictions:
        return
    assert recall_at_precision(cases, 0.0) == recall_at_precision(cases, 0.0)
    from vpg.evaluation import operating_points

    assert recall_at_precision(cases, 0.0) == operating_points(cases)[-1][2]


# -- R@P90 -------------------------------------------------------------------------------


def test_rap_examples():
    gts = tuple((BoundingBox(200 * i, 0, 100, 100), TOP) for i in range(10))
    perfect = DetectionEvalCase(gts, tuple((b, c, 0.9) for b, c in gts))
    assert recall_at_precision([perfect]) == 1.0
    wrong = DetectionEvalCase(gts, tuple((b, BAG, 0.9) for b, _ in gts))
    assert recall_at_precision([wrong]) == 0.0
    tp = [0.95, 0.93, 0.91, 0.89, 0.87, 0.85, 0.83, 0.75, 0.7]
    preds = [(gts[i][0], TOP, c) for i, c in enumerate(tp)]
    preds += [(BoundingBox(0, 500, 10, 10), TOP, 0.8), (BoundingBox(0, 600, 10, 10), TOP, 0.65), (BoundingBox(0, 700, 10, 10), TOP, 0.62)]
    preds.append((gts[9][0], TOP, 0.6))
    assert recall_at_precision([DetectionEvalCase(gts, tuple(preds))], 0.9) == pytest.approx(0.9, abs=1e-9)


def test_detection_case_json_and_validation():
    c = DetectionEvalCase(((GT, TOP),), ((GT, TOP, 0.5),))
    assert DetectionEvalCase.from_json(json.loads(json.dumps(c.to_json()))) == c
    with pytest.raises(ValueError):
        DetectionEvalCase((), ((GT, TOP, 1.5),))


def test_world_detection_cases_are_perfect(small_world):
    rep = detection_report(detection_cases(small_world, Corruption(), limit=50))
    assert rep["map"] == 1.0 and rep["r@p90"] == 1.0


# -- ANN recall ---------------------------------------------------------------------------


def test_ann_recall_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 8)).astype(np.float32)
    q = rng.standard_normal((20, 8)).astype(np.float32)
    exact = ExactIndex(list(range(500)), x)
    assert ann_recall(exact, q, 10) == 1.0
    idx = build_ann(enumerate(x), M=4, ef_construction=16)
    assert ann_recall(idx, q, 10, ef_search=500) == 1.0
    with pytest.raises(EmptyEvaluationError):
        ann_recall(idx, np.zeros((0, 8)), 10)


# -- tap rate --------------------------------------------------------------------------------


def test_tap_rate_examples():
    assert module_tap_rate(6, 100) == 0.06
    assert module_tap_rate(0, 100) == 0.0
    with pytest.warns(TapRateAnomaly):
        rate = module_tap_rate(101, 100)
    assert rate == 1.01 and tap_rate_flagged(rate)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not tap_rate_flagged(module_tap_rate(5, 10))
    with pytest.raises(ZeroDivisionError):
        module_tap_rate(1, 0)


# -- truth-based ratings -----------------------------------------------------------------------


def test_truth_ratings(small_world):
    w = small_world
    truth = TruthTable.from_world(w, similar_tau=10.0)
    s = w.scenes[0]
    pid, box, cat = s.objects[0]
    p = w.product(pid)
    assert truth.rate_scene(p.signature, s.signature, box) == R.EXTREMELY_SIMILAR
    same_cat = next(q for q in w.product_info if q.category == cat and q.pid != pid)
    assert truth.rate_pair(pid, same_cat.pid) == R.SIMILAR
    assert TruthTable.from_world(w, similar_tau=0.0).rate_pair(pid, same_cat.pid) == R.MARGINALLY_SIMILAR
    other_cat = next(q for q in w.product_info if q.category != cat)
    assert truth.rate_pair(pid, other_cat.pid) == R.NOT_SIMILAR
    assert truth.is_match((s.signature, box), p.signature) == MATCH
    assert truth.is_match((s.signature, box), same_cat.signature) == NO_MATCH


def test_retrieval_report_rows(small_world):
    w = small_world
    truth = TruthTable.from_world(w)
    s = w.scenes[0]
    p = w.product(s.objects[0][0])
    rows = [{"product": p.signature.hex(), "scenes": [{"scene": s.signature.hex()}]}]
    rep = retrieval_report(rows, truth, [1])
    assert rep["es@1"] == 1.0
