"""Retrieval and detection metrics plus ground-truth relevance ratings."""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import BoundingBox, Category, ImageSignature, category
from .errors import EmptyEvaluationError, UnknownEntityError


class RelevanceRating(IntEnum):
    """Ordered so that a higher value is a better match; ``DID_NOT_LOAD`` is unrated."""

    DID_NOT_LOAD = -1
    NOT_SIMILAR = 0
    MARGINALLY_SIMILAR = 1
    SIMILAR = 2
    EXTREMELY_SIMILAR = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | RelevanceRating") -> "RelevanceRating":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(value)


class TapRateAnomaly(UserWarning):
    """More closeups than impressions: the logging pipeline is suspect."""


@dataclass(frozen=True)
class PrecisionReport:
    value: float
    queries: int
    excluded: int


def precision_report(
    ratings: Mapping[object, Sequence] | Sequence[Sequence], k: int, threshold: "RelevanceRating | str" = RelevanceRating.EXTREMELY_SIMILAR
) -> PrecisionReport:
    """Mean over queries of (top-k results at or above ``threshold``) / min(k, results).

    Results that did not load are removed first; queries left with nothing
    are excluded from the mean and counted.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    threshold = RelevanceRating.parse(threshold)
    lists = ratings.values() if isinstance(ratings, Mapping) else ratings
    per_query = []
    excluded = 0
    for results in lists:
        loaded = [r for r in map(RelevanceRating.parse, results) if r != RelevanceRating.DID_NOT_LOAD]
        if not loaded:
            excluded += 1
            continue
        top = loaded[:k]
        per_query.append(sum(r >= threshold for r in top) / len(top))
    if not per_query:
        raise EmptyEvaluationError("no query has a loadable rated result")
    return PrecisionReport(math.fsum(per_query) / len(per_query), len(per_query), excluded)


def precision_at_k(ratings, k: int, threshold: "RelevanceRating | str" = RelevanceRating.EXTREMELY_SIMILAR) -> float:
    return precision_report(ratings, k, threshold).value


# -- detection ------------------------------------------------------------


@dataclass(frozen=True)
class DetectionEvalCase:
    ground_truth: tuple[tuple[BoundingBox, Category], ...]
    predictions: tuple[tuple[BoundingBox, Category, float], ...]

    def __post_init__(self):
        for _, _, conf in self.predictions:
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"confidence {conf} outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "ground_truth": [{"box": b.as_list(), "category": c.name} for b, c in self.ground_truth],
            "predictions": [{"box": b.as_list(), "category": c.name, "confidence": s} for b, c, s in self.predictions],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DetectionEvalCase":
        return cls(
            tuple((BoundingBox.from_list(g["box"]), category(g["category"])) for g in d.get("ground_truth", [])),
            tuple((BoundingBox.from_list(p["box"]), category(p["category"]), float(p["confidence"])) for p in d.get("predictions", [])),
        )


def read_cases_jsonl(path: str | os.PathLike) -> list[DetectionEvalCase]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(DetectionEvalCase.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed detection case ({exc})") from exc
    return out


def _match(cases: Sequence[DetectionEvalCase], iou_threshold: float) -> tuple[dict[str, list[tuple[float, bool]]], dict[str, int]]:
    """Per category: (confidence, is_true_positive) per prediction, and the GT count.

    Predictions are matched greedily in descending confidence (ties by case,
    then prediction order) to the unmatched same-category GT box of highest
    IoU in the same case.
    """
    n_gt: dict[str, int] = {}
    for case in cases:
        for _, cat in case.ground_truth:
            n_gt[cat.name] = n_gt.get(cat.name, 0) + 1
    preds = []
    for ci, case in enumerate(cases):
        for pi, (box, cat, conf) in enumerate(case.predictions):
            preds.append((-conf, ci, pi, box, cat, conf))
    preds.sort(key=lambda p: p[:3])
    taken: set[tuple[int, int]] = set()
    out: dict[str, list[tuple[float, bool]]] = {}
    for _, ci, _, box, cat, conf in preds:
        best, best_iou = -1, iou_threshold
        for gi, (gbox, gcat) in enumerate(cases[ci].ground_truth):
            if gcat.name != cat.name or (ci, gi) in taken:
                continue
            iou = box.iou(gbox)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = gi, iou
        if best >= 0:
            taken.add((ci, best))
        out.setdefault(cat.name, []).append((conf, best >= 0))
    return out, n_gt


def average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP for predictions already in descending confidence."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    if tp.size == 0:
        return 0.0
    precision = tp / np.arange(1, tp.size + 1)
    recall = tp / n_gt
    # monotone precision envelope, integrated over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * envelope))


def per_category_ap(cases: Sequence[DetectionEvalCase], iou_threshold: float = 0.5) -> dict[str, float]:
    matched, n_gt = _match(cases, iou_threshold)
    return {cat: average_precision([tp for _, tp in matched.get(cat, [])], n) for cat, n in sorted(n_gt.items())}


def mean_average_precision(cases: Sequence[DetectionEvalCase], iou_threshold: float = 0.5) -> float:
    """Mean AP over categories that occur in the ground truth (0.0 when none do)."""
    aps = per_category_ap(cases, iou_threshold)
    return math.fsum(aps.values()) / len(aps) if aps else 0.0


def operating_points(cases: Sequence[DetectionEvalCase], iou_threshold: float = 0.5) -> list[tuple[float, float, float]]:
    """``(confidence threshold, precision, recall)`` at each distinct confidence."""
    matched, n_gt = _match(cases, iou_threshold)
    total = sum(n_gt.values())
    flat = sorted((conf, tp) for lst in matched.values() for conf, tp in lst)[::-1]
    points = []
    tp = n = 0
    for i, (conf, is_tp) in enumerate(flat):
        n += 1
        tp += is_tp
        if i + 1 == len(flat) or flat[i + 1][0] != conf:
            points.append((conf, tp / n, tp / total if total else 0.0))
    return points


def recall_at_precision(cases: Sequence[DetectionEvalCase], precision_floor: float = 0.90, iou_threshold: float = 0.5) -> float:
    """Best recall over confidence thresholds whose precision reaches the floor; 0 if none do."""
    ok = [r for _, p, r in operating_points(cases, iou_threshold) if p >= precision_floor]
    return max(ok, default=0.0)


# -- ann / engagement -----------------------------------------------------


def ann_recall(index, queries, k: int, exact=None, ef_search: int | None = None) -> float:
    """Mean fraction of the exact top-k that the index also returns."""
    from .ann import ExactIndex

    if exact is None:
        exact = ExactIndex(index.keys, index.vectors)
    q = np.asarray(queries, dtype=np.float32)
    if q.ndim == 1:
        q = q[None, :]
    if len(q) == 0:
        raise EmptyEvaluationError("no queries")
    got = index.search_batch(q, k, ef_search)
    want = exact.search_batch(q, k)
    return math.fsum(len({key for key, _ in g} & {key for key, _ in w}) / k for g, w in zip(got, want)) / len(q)


def module_tap_rate(closeups: int, impressions: int) -> float:
    """Closeups per impression; rates above 1 raise a :class:`TapRateAnomaly` warning."""
    if impressions == 0:
        raise ZeroDivisionError("module tap rate needs at least one impression")
    if closeups < 0 or impressions < 0:
        raise ValueError("counts must be non-negative")
    rate = closeups / impressions
    if rate > 1.0:
        warnings.warn(f"tap rate {rate:.3f} exceeds 1", TapRateAnomaly, stacklevel=2)
    return rate


def tap_rate_flagged(rate: float) -> bool:
    return rate > 1.0


# -- ground-truth ratings -------------------------------------------------


class TruthTable:
    """Ground-truth product identity and latents, read from world truth records."""

    def __init__(self, records: Iterable[dict], similar_tau: float = 1.0):
        self.similar_tau = similar_tau
        self.product_id: dict[ImageSignature, int] = {}
        self.product_category: dict[int, str] = {}
        self.latent: dict[int, np.ndarray] = {}
        self.scene_objects: dict[ImageSignature, list[tuple[int, BoundingBox, str]]] = {}
        for rec in records:
            sig = ImageSignature.from_hex(rec["signature"])
            if rec["kind"] == "product":
                pid = int(rec["product_id"])
                self.product_id[sig] = pid
                self.product_category[pid] = rec["category"]
                if "latent" in rec:
                    self.latent[pid] = np.asarray(rec["latent"], dtype=np.float64)
            elif rec["kind"] == "scene":
                self.scene_objects[sig] = [(int(o["product_id"]), BoundingBox.from_list(o["box"]), o["category"]) for o in rec["objects"]]

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike, similar_tau: float = 1.0) -> "TruthTable":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rows.append(json.loads(line))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed truth record ({exc})") from exc
        return cls(rows, similar_tau)

    @classmethod
    def from_world(cls, world, similar_tau: float = 1.0) -> "TruthTable":
        return cls(world.truth_records(), similar_tau)

    def object_product(self, scene: ImageSignature, box: BoundingBox) -> int:
        objs = self.scene_objects.get(scene)
        if objs is None:
            raise UnknownEntityError(f"{scene} is not a known scene")
        best, best_iou = -1, 0.5
        for pid, gbox, _ in objs:
            iou = gbox.iou(box)
            if iou >= best_iou:
                best, best_iou = pid, iou
        if best < 0:
            raise UnknownEntityError(f"no ground-truth object of {scene} overlaps {box.as_list()}")
        return best

    def rate_pair(self, query_pid: int, result_pid: int) -> RelevanceRating:
        if query_pid == result_pid:
            return RelevanceRating.EXTREMELY_SIMILAR
        if self.product_category.get(query_pid) != self.product_category.get(result_pid):
            return RelevanceRating.NOT_SIMILAR
        a, b = self.latent.get(query_pid), self.latent.get(result_pid)
        if a is not None and b is not None and float(np.linalg.norm(a - b)) <= self.similar_tau:
            return RelevanceRating.SIMILAR
        return RelevanceRating.MARGINALLY_SIMILAR

    def rate_scene(self, product: ImageSignature, scene: ImageSignature, box: BoundingBox | None = None) -> RelevanceRating:
        """Rate a reverse result: by its matched object, or the scene's best object without a box."""
        pid = self.product_id.get(product)
        if pid is None or scene not in self.scene_objects:
            return RelevanceRating.DID_NOT_LOAD
        if box is not None:
            try:
                return self.rate_pair(pid, self.object_product(scene, box))
            except UnknownEntityError:
                pass
        return max((self.rate_pair(pid, other) for other, _, _ in self.scene_objects[scene]), default=RelevanceRating.NOT_SIMILAR)

    def rate_product(self, scene: ImageSignature, product: ImageSignature) -> RelevanceRating:
        """Rate a forward result against the scene's best matching object."""
        pid = self.product_id.get(product)
        if pid is None or scene not in self.scene_objects:
            return RelevanceRating.DID_NOT_LOAD
        return max((self.rate_pair(other, pid) for other, _, _ in self.scene_objects[scene]), default=RelevanceRating.NOT_SIMILAR)

    def is_match(self, query_key, candidate: ImageSignature) -> str:
        """Labeling oracle for triplets: same ground-truth product."""
        from .triplets import MATCH, NO_MATCH

        scene, box = query_key
        cand = self.product_id.get(candidate)
        if cand is None:
            raise UnknownEntityError(f"{candidate} is not a known product")
        return MATCH if self.object_product(scene, box) == cand else NO_MATCH


def rate_predictions(rows: Iterable[dict], truth: TruthTable) -> dict[str, list[RelevanceRating]]:
    """Ratings per query from reverse (``product``/``scenes``) or forward (``scene``/``products``) result rows."""
    out: dict[str, list[RelevanceRating]] = {}
    for row in rows:
        if "product" in row:
            q = ImageSignature.from_hex(row["product"])
            ratings = []
            for s in row.get("scenes", []):
                box = BoundingBox.from_list(s["object"]["box"]) if s.get("object") else None
                ratings.append(truth.rate_scene(q, ImageSignature.from_hex(s["scene"]), box))
            out[row["product"]] = ratings
        elif "scene" in row:
            q = ImageSignature.from_hex(row["scene"])
            out[row["scene"]] = [truth.rate_product(q, ImageSignature.from_hex(p["signature"] if isinstance(p, dict) else p)) for p in row.get("products", [])]
        else:
            raise ValueError("prediction row needs a 'product' or 'scene' field")
    return out


def retrieval_report(rows: Iterable[dict], truth: TruthTable, ks: Sequence[int] = (1, 5)) -> dict:
    ratings = rate_predictions(rows, truth)
    report: dict = {"queries": len(ratings), "empty_results": sum(1 for r in ratings.values() if not r)}
    for k in ks:
        for level in (RelevanceRating.EXTREMELY_SIMILAR, RelevanceRating.SIMILAR):
            tag = "es" if level == RelevanceRating.EXTREMELY_SIMILAR else "similar"
            try:
                rep = precision_report(ratings, k, level)
                report[f"{tag}@{k}"] = rep.value
                report["excluded_queries"] = rep.excluded
            except EmptyEvaluationError:
                report[f"{tag}@{k}"] = None
    loaded = [len(r) for r in ratings.values()]
    report["mean_results"] = float(np.mean(loaded)) if loaded else 0.0
    return report


def detection_report(cases: Sequence[DetectionEvalCase], iou_threshold: float = 0.5) -> dict:
    return {
        "cases": len(cases),
        "map": mean_average_precision(cases, iou_threshold),
        "r@p90": recall_at_precision(cases, 0.90, iou_threshold),
        "per_category_ap": per_category_ap(cases, iou_threshold),
    }


def detection_cases(world, corruption=None, limit: int | None = None) -> list[DetectionEvalCase]:
    """Ground truth vs the (optionally corrupted, then NMS-filtered) stub detector."""
    from .vision import Corruption, class_agnostic_nms, detect_raw

    corruption = corruption or Corruption(world.config.duplicate_rate, world.config.false_positive_rate)
    out = []
    for scene in world.scenes[:limit]:
        dets = class_agnostic_nms(detect_raw(scene, world, corruption), world.config.nms_iou)
        out.append(
            DetectionEvalCase(
                tuple((box, cat) for _, box, cat in scene.objects),
                tuple((d.box, d.category, d.confidence) for d in dets),
            )
        )
    return out
