"""Multi-label evaluation: pooled/per-class F1, span validity, MRR, and
UV-grouped cross-validation folds (a UV never straddles folds)."""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import jsonl
from .errors import MalformedRecord, TooFewGroups, UnitMismatch, UnknownFragment


@dataclass(frozen=True)
class GoldAnnotation:
    fragment_id: str
    resource_id: str
    course_id: str
    gold: frozenset[str]


@dataclass(frozen=True)
class FoldSpec:
    n_folds: int
    seed: int
    assignment: dict[str, int]  # course_id -> fold

    def test_courses(self, fold: int) -> set[str]:
        return {uv for uv, f in self.assignment.items() if f == fold}

    def train_courses(self, fold: int) -> set[str]:
        return {uv for uv, f in self.assignment.items() if f != fold}


@dataclass(frozen=True)
class MetricsReport:
    micro_f1: float
    macro_f1: float
    resource_macro_f1: float
    span_valid: float
    mrr: float
    pooled: dict[str, int]  # tp / fp / fn over fragment units
    per_class: dict[str, dict[str, float]]
    n_fragments: int
    n_resources: int

    def to_dict(self) -> dict:
        return {
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "resource_macro_f1": self.resource_macro_f1,
            "span_valid": self.span_valid,
            "mrr": self.mrr,
            "pooled": dict(self.pooled),
            "per_class": {cid: dict(row) for cid, row in self.per_class.items()},
            "n_fragments": self.n_fragments,
            "n_resources": self.n_resources,
        }


def load_gold(path: str | Path) -> list[GoldAnnotation]:
    annotations = []
    seen: set[str] = set()
    for line_no, record in jsonl.iter_records(path):
        fragment_id = jsonl.require_field(record, line_no, "fragment_id", str)
        if fragment_id in seen:
            raise MalformedRecord(line_no, f"duplicate gold fragment {fragment_id!r}")
        seen.add(fragment_id)
        gold = jsonl.require_field(record, line_no, "gold", list)
        if not all(isinstance(cid, str) for cid in gold):
            raise MalformedRecord(line_no, "gold must be a list of competency ids")
        annotations.append(
            GoldAnnotation(
                fragment_id=fragment_id,
                resource_id=jsonl.require_field(record, line_no, "resource_id", str),
                course_id=jsonl.require_field(record, line_no, "course_id", str),
                gold=frozenset(gold),
            )
        )
    return annotations


def gold_to_record(g: GoldAnnotation) -> dict:
    return {
        "fragment_id": g.fragment_id,
        "resource_id": g.resource_id,
        "course_id": g.course_id,
        "gold": sorted(g.gold),
    }


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denominator = 2 * tp + fp + fn
    return 2 * tp / denominator if denominator else 0.0


def _check_units(golds: Mapping[str, set], preds: Mapping[str, set], units: Iterable[str]) -> list[str]:
    unit_list = list(units)
    unit_set = set(unit_list)
    stray = (set(golds) | set(preds)) - unit_set
    if stray:
        raise UnitMismatch(f"labels for units outside the evaluated set: {sorted(stray)[:5]}")
    return unit_list


def pooled_counts(
    golds: Mapping[str, set], preds: Mapping[str, set], units: Iterable[str]
) -> tuple[int, int, int]:
    """(tp, fp, fn) pooled over unit x competency pairs; a unit missing from
    either mapping counts as the empty label set."""
    tp = fp = fn = 0
    for unit in _check_units(golds, preds, units):
        gold = golds.get(unit, set())
        pred = preds.get(unit, set())
        tp += len(gold & pred)
        fp += len(pred - gold)
        fn += len(gold - pred)
    return tp, fp, fn


def micro_f1(golds: Mapping[str, set], preds: Mapping[str, set], units: Iterable[str]) -> float:
    tp, fp, fn = pooled_counts(golds, preds, units)
    return f1_from_counts(tp, fp, fn)


def per_class_counts(
    golds: Mapping[str, set],
    preds: Mapping[str, set],
    units: Iterable[str],
    competencies: Iterable[str],
) -> dict[str, tuple[int, int, int]]:
    unit_list = _check_units(golds, preds, units)
    counts = {cid: [0, 0, 0] for cid in competencies}
    for unit in unit_list:
        gold = golds.get(unit, set())
        pred = preds.get(unit, set())
        for cid in gold & pred:
            if cid in counts:
                counts[cid][0] += 1
        for cid in pred - gold:
            if cid in counts:
                counts[cid][1] += 1
        for cid in gold - pred:
            if cid in counts:
                counts[cid][2] += 1
    return {cid: tuple(row) for cid, row in counts.items()}


def macro_f1(
    golds: Mapping[str, set],
    preds: Mapping[str, set],
    units: Iterable[str],
    competencies: Iterable[str],
) -> float:
    """Unweighted mean of per-class F1 over every competency in the framework,
    including classes never observed (their 0/0 F1 counts as 0)."""
    counts = per_class_counts(golds, preds, units, competencies)
    if not counts:
        return 0.0
    return sum(f1_from_counts(*row) for row in counts.values()) / len(counts)


def derive_resource_gold(golds: Iterable[GoldAnnotation]) -> dict[str, set[str]]:
    """Resource gold = union of its annotated fragments' gold sets."""
    resource_gold: dict[str, set[str]] = {}
    for annotation in golds:
        resource_gold.setdefault(annotation.resource_id, set()).update(annotation.gold)
    return resource_gold


def span_valid(
    raw_spans: Iterable[tuple[str, int, int]],
    fragment_texts: Mapping[str, str],
) -> float:
    """Share of raw (pre-validation) spans satisfying 0 <= a < b <= len(text),
    offsets in characters; 1.0 when no spans were produced."""
    total = 0
    valid = 0
    for fragment_id, start, end in raw_spans:
        if fragment_id not in fragment_texts:
            raise UnknownFragment(fragment_id)
        total += 1
        if 0 <= start < end <= len(fragment_texts[fragment_id]):
            valid += 1
    return valid / total if total else 1.0


def mrr(
    ranked: Mapping[str, Sequence[str]],
    golds: Mapping[str, set],
    k: int,
) -> float:
    """Mean reciprocal rank of the first gold competency within the top-k.

    Fragments with an empty gold set are excluded; a fragment with no ranked
    list (or no gold hit in the top-k) contributes 0. Returns 0.0 when no
    fragment qualifies.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    total = 0.0
    n = 0
    for fragment_id, gold in golds.items():
        if not gold:
            continue
        n += 1
        for rank, cid in enumerate(ranked.get(fragment_id, ())[:k], start=1):
            if cid in gold:
                total += 1.0 / rank
                break
    return total / n if n else 0.0


def make_folds(golds: Sequence[GoldAnnotation], n_folds: int, seed: int) -> FoldSpec:
    """Group-aware folds over UVs: distinct course_ids are sorted, shuffled
    with the seed, and dealt round-robin, so every fragment of a UV lands in
    the same fold and repeated runs agree."""
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    courses = sorted({g.course_id for g in golds})
    if n_folds > len(courses):
        raise TooFewGroups(f"{n_folds} folds but only {len(courses)} UVs")
    rng = random.Random(seed)
    shuffled = list(courses)
    rng.shuffle(shuffled)
    return FoldSpec(n_folds, seed, {uv: i % n_folds for i, uv in enumerate(shuffled)})


def compute_report(
    *,
    frag_golds: Mapping[str, set],
    frag_preds: Mapping[str, set],
    fragment_units: Iterable[str],
    resource_golds: Mapping[str, set],
    resource_preds: Mapping[str, set],
    resource_units: Iterable[str],
    competencies: Sequence[str],
    raw_spans: Iterable[tuple[str, int, int]],
    fragment_texts: Mapping[str, str],
    ranked: Mapping[str, Sequence[str]],
    k: int,
) -> MetricsReport:
    fragment_units = list(fragment_units)
    resource_units = list(resource_units)
    tp, fp, fn = pooled_counts(frag_golds, frag_preds, fragment_units)
    per_class = {
        cid: {"tp": c[0], "fp": c[1], "fn": c[2], "f1": f1_from_counts(*c)}
        for cid, c in per_class_counts(frag_golds, frag_preds, fragment_units, competencies).items()
    }
    return MetricsReport(
        micro_f1=f1_from_counts(tp, fp, fn),
        macro_f1=macro_f1(frag_golds, frag_preds, fragment_units, competencies),
        resource_macro_f1=macro_f1(resource_golds, resource_preds, resource_units, competencies),
        span_valid=span_valid(raw_spans, fragment_texts),
        mrr=mrr(ranked, {u: frag_golds.get(u, set()) for u in fragment_units}, k),
        pooled={"tp": tp, "fp": fp, "fn": fn},
        per_class=per_class,
        n_fragments=len(fragment_units),
        n_resources=len(resource_units),
    )
