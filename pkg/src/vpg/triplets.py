"""Hard-triplet dataset generation from engagement logs.

Candidates whose closeups outnumber another candidate's (same query, same
window) become (query, positive, negative) triplets.  The current embedding
model then flags the ones it gets wrong (negative closer than positive), a
labeling oracle confirms them, and the final file mixes them with random
triplets built from ground-truth matches.
"""

from __future__ import annotations

import json
import logging
import os
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from datetime import date, timedelta
from typing import Callable, Hashable, Iterable, Iterator, Sequence

from .core import BoundingBox, Category, Embedding, ImageSignature, category, euclidean_distance
from .errors import DuplicateKeyError, InsufficientTriplets, LabelingError, UnknownEntityError

log = logging.getLogger(__name__)

MATCH = "match"
NO_MATCH = "no_match"
HARD = "hard"
EASY = "easy"
RANDOM = "random"

QueryKey = tuple  # (ImageSignature, BoundingBox)
Embedder = Callable[[Hashable], Embedding]
Oracle = Callable[[QueryKey, ImageSignature], str]


@dataclass(frozen=True)
class EngagementLog:
    query_signature: ImageSignature
    query_box: BoundingBox
    query_category: Category
    candidate_signature: ImageSignature
    candidate_slot: int
    closeup_count: int
    day: date

    def __post_init__(self):
        if self.candidate_slot < 0 or self.closeup_count < 0:
            raise ValueError("candidate_slot and closeup_count must be non-negative")

    @property
    def query_key(self) -> QueryKey:
        return (self.query_signature, self.query_box)

    def to_json(self) -> dict:
        return {
            "query_signature": self.query_signature.hex(),
            "query_box": self.query_box.as_list(),
            "query_category": self.query_category.name,
            "candidate_signature": self.candidate_signature.hex(),
            "candidate_slot": self.candidate_slot,
            "closeup_count": self.closeup_count,
            "day": self.day.isoformat(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EngagementLog":
        return cls(
            ImageSignature.from_hex(d["query_signature"]),
            BoundingBox.from_list(d["query_box"]),
            category(d["query_category"]),
            ImageSignature.from_hex(d["candidate_signature"]),
            int(d["candidate_slot"]),
            int(d["closeup_count"]),
            date.fromisoformat(d["day"]),
        )


@dataclass(frozen=True)
class TripletRecord:
    query: ImageSignature
    query_box: BoundingBox | None
    positive: ImageSignature
    negative: ImageSignature
    engagement_pos: int = 0
    engagement_neg: int = 0
    d_pos: float | None = None
    d_neg: float | None = None
    label_pos: str | None = None
    label_neg: str | None = None
    kind: str | None = None

    @property
    def query_key(self):
        return self.query if self.query_box is None else (self.query, self.query_box)

    def sort_key(self) -> tuple:
        box = self.query_box.as_list() if self.query_box is not None else []
        return (self.query, box, self.positive, self.negative)

    def to_json(self) -> dict:
        d = asdict(self)
        d["query"] = self.query.hex()
        d["positive"] = self.positive.hex()
        d["negative"] = self.negative.hex()
        d["query_box"] = self.query_box.as_list() if self.query_box is not None else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TripletRecord":
        d = dict(d)
        d["query"] = ImageSignature.from_hex(d["query"])
        d["positive"] = ImageSignature.from_hex(d["positive"])
        d["negative"] = ImageSignature.from_hex(d["negative"])
        d["query_box"] = BoundingBox.from_list(d["query_box"]) if d.get("query_box") is not None else None
        return cls(**d)


def read_logs_jsonl(path: str | os.PathLike) -> Iterator[EngagementLog]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield EngagementLog.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed engagement row ({exc})") from exc


def write_jsonl(path: str | os.PathLike, rows: Iterable) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_json() if hasattr(row, "to_json") else row, sort_keys=True) + "\n")
            n += 1
    return n


def read_triplets_jsonl(path: str | os.PathLike) -> list[TripletRecord]:
    with open(path, encoding="utf-8") as fh:
        return [TripletRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def aggregate_engagement(logs: Iterable[EngagementLog], window_days: int = 30, end: date | None = None) -> dict:
    """``{(query sig, box): {candidate: summed closeups}}`` over the trailing window.

    The window ends at ``end`` (default: the latest day in the logs) and
    covers ``window_days`` days including it.  Candidate slot is ignored.
    """
    logs = list(logs)
    if not logs:
        return {}
    end = end or max(row.day for row in logs)
    start = end - timedelta(days=window_days - 1)
    seen: set = set()
    out: dict = defaultdict(lambda: defaultdict(int))
    for row in logs:
        if not start <= row.day <= end:
            continue
        ident = (row.query_signature, row.query_box, row.candidate_signature, row.day)
        if ident in seen:
            raise DuplicateKeyError(f"two engagement rows for query {row.query_signature}, candidate {row.candidate_signature} on {row.day}")
        seen.add(ident)
        out[row.query_key][row.candidate_signature] += row.closeup_count
    return out


def mine_candidate_triplets(logs: Iterable[EngagementLog], window_days: int = 30, end: date | None = None) -> list[TripletRecord]:
    """Every ordered candidate pair with strictly higher engagement first; output is sorted."""
    out = []
    for (qsig, qbox), eng in aggregate_engagement(logs, window_days, end).items():
        if len(eng) < 2:
            continue
        for pos, e_pos in eng.items():
            for neg, e_neg in eng.items():
                if e_pos > e_neg:
                    out.append(TripletRecord(qsig, qbox, pos, neg, e_pos, e_neg))
    out.sort(key=TripletRecord.sort_key)
    return out


def hardness_check(t: TripletRecord, embedder: Embedder, literal: bool = False) -> TripletRecord:
    """Record distances; ``kind`` is hard iff the positive is farther than the negative.

    ``literal`` flips the comparison (positive nearer), the reading of the
    pseudocode kept for comparison runs.
    """
    try:
        q = embedder(t.query_key)
        d_pos = euclidean_distance(q, embedder(t.positive))
        d_neg = euclidean_distance(q, embedder(t.negative))
    except UnknownEntityError:
        raise
    except KeyError as exc:
        raise UnknownEntityError(f"no embedding for triplet member: {exc}") from exc
    hard = d_pos < d_neg if literal else d_pos > d_neg
    return replace(t, d_pos=d_pos, d_neg=d_neg, kind=HARD if hard else EASY)


@dataclass
class LabelStats:
    seen: int = 0
    kept: int = 0
    rejected: int = 0
    failed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def label_triplets(cands: Iterable[TripletRecord], oracle: Oracle, stats: LabelStats | None = None) -> list[TripletRecord]:
    """Keep triplets the oracle labels (match, no_match); oracle failures are skipped and counted."""
    stats = stats if stats is not None else LabelStats()
    out = []
    for t in cands:
        stats.seen += 1
        try:
            lp, ln = oracle(t.query_key, t.positive), oracle(t.query_key, t.negative)
            if lp not in (MATCH, NO_MATCH) or ln not in (MATCH, NO_MATCH):
                raise LabelingError(f"oracle returned {lp!r}/{ln!r}")
        except Exception as exc:
            stats.failed += 1
            log.warning("labeling failed for %s: %s", t.query, exc)
            continue
        if lp == MATCH and ln == NO_MATCH:
            stats.kept += 1
            out.append(replace(t, label_pos=lp, label_neg=ln))
        else:
            stats.rejected += 1
    return out


def assemble_dataset(
    hard: Sequence[TripletRecord],
    matches: Sequence[tuple[QueryKey, ImageSignature]],
    negatives: Sequence[ImageSignature],
    target_size: int,
    hard_fraction: float = 0.5,
    seed: int = 0,
    oracle: Oracle | None = None,
) -> list[TripletRecord]:
    """``round(hard_fraction * target_size)`` hard triplets plus random ones, shuffled under ``seed``.

    A random triplet pairs a uniformly drawn ground-truth match with a
    uniformly drawn product that is not a match for the query.
    """
    if not 0.0 <= hard_fraction <= 1.0:
        raise ValueError("hard_fraction must be in [0, 1]")
    if target_size < 0:
        raise ValueError("target_size must be non-negative")
    n_hard = round(hard_fraction * target_size)
    n_random = target_size - n_hard
    if len(hard) < n_hard:
        raise InsufficientTriplets(f"need {n_hard} hard triplets, have {len(hard)}")
    rng = random.Random(seed)
    pool = sorted(hard, key=TripletRecord.sort_key)
    chosen = [replace(t, kind=HARD) for t in rng.sample(pool, n_hard)]
    if n_random and (not matches or not negatives):
        raise InsufficientTriplets("random triplets need ground-truth matches and a negative pool")
    randoms = []
    attempts = 0
    while len(randoms) < n_random:
        attempts += 1
        if attempts > 100 * max(n_random, 1):
            raise InsufficientTriplets("could not draw enough non-matching negatives")
        (qsig, qbox), pos = matches[rng.randrange(len(matches))]
        neg = negatives[rng.randrange(len(negatives))]
        if neg == pos or (oracle is not None and oracle((qsig, qbox), neg) != NO_MATCH):
            continue
        randoms.append(TripletRecord(qsig, qbox, pos, neg, label_pos=MATCH, label_neg=NO_MATCH, kind=RANDOM))
    out = chosen + randoms
    rng.shuffle(out)
    return out


@dataclass
class MiningReport:
    rows: int = 0
    candidates: int = 0
    hard: int = 0
    labeling: LabelStats = field(default_factory=LabelStats)
    written: int = 0

    def to_dict(self) -> dict:
        return {"rows": self.rows, "candidates": self.candidates, "hard": self.hard, "labeling": self.labeling.to_dict(), "written": self.written}


def finalize_hard(
    logs: Sequence[EngagementLog], embedder: Embedder, oracle: Oracle, window_days: int = 30, literal: bool = False
) -> tuple[list[TripletRecord], MiningReport]:
    """Mine, keep model mistakes, then keep oracle-confirmed ones."""
    report = MiningReport(rows=len(logs))
    cands = mine_candidate_triplets(logs, window_days)
    report.candidates = len(cands)
    hard = [t for t in (hardness_check(c, embedder, literal) for c in cands) if t.kind == HARD]
    report.hard = len(hard)
    return label_triplets(hard, oracle, report.labeling), report


# -- synthetic engagement -------------------------------------------------


def synthetic_logs(world, n_queries: int = 50, days: int = 30, seed: int = 0, max_candidates: int = 6) -> list[EngagementLog]:
    """Engagement rows for ``n_queries`` scene objects against STL-style candidate slates.

    Each slate holds the true product plus same-category distractors; the
    true product tends to collect more closeups but not always.
    """
    rng = random.Random(seed)
    start = date(2024, 1, 1)
    rows = []
    scenes = [s for s in world.scenes if s.objects]
    used: set = set()
    n_queries = min(n_queries, sum(len(s.objects) for s in scenes))
    while len(used) < n_queries:
        scene = scenes[rng.randrange(len(scenes))]
        ordinal = rng.randrange(len(scene.objects))
        if (scene.signature, ordinal) in used:
            continue
        used.add((scene.signature, ordinal))
        pid, box, cat = scene.objects[ordinal]
        pool = [p for p in world._by_category[cat.name] if p != pid]
        n_cand = rng.randint(1, max_candidates)
        slate = [pid] + rng.sample(pool, min(n_cand - 1, len(pool)))
        rng.shuffle(slate)
        for slot, cand in enumerate(slate):
            for day in sorted(rng.sample(range(days), rng.randint(1, 3))):
                base = 4 if cand == pid else 2
                rows.append(
                    EngagementLog(scene.signature, box, cat, world.product(cand).signature, slot, rng.randint(0, base), start + timedelta(days=day))
                )
    return rows
