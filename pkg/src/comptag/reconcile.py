"""Graph-aware cleanup of fragment predictions: granularity filtering,
deduplication, and prerequisite coherence flags (advisory only).

Pipeline order per fragment is granularity_filter then dedup; coherence runs
per resource over the reconciled fragment predictions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import UnknownCompetency
from .graph import CompetencyGraph
from .tagger import TagPrediction

POLICIES = ("most_specific", "most_general")

REASON_ANCESTOR = "ancestor-of-selected"
REASON_DESCENDANT = "descendant-of-selected"
REASON_DUPLICATE = "duplicate"


@dataclass(frozen=True)
class CoherenceFlag:
    resource_id: str
    flagged_competency: str
    missing_prerequisites: tuple[str, ...]
    severity: str  # "warning" for missing direct prerequisites, "info" otherwise


@dataclass(frozen=True)
class ReconciledSet:
    fragment_id: str
    predictions: tuple[TagPrediction, ...]
    dropped: tuple[tuple[TagPrediction, str], ...]


def _fragment_id_of(preds: Sequence[TagPrediction], fragment_id: str | None) -> str:
    ids = {p.fragment_id for p in preds}
    if fragment_id is not None:
        ids.add(fragment_id)
    if len(ids) != 1:
        raise ValueError(f"predictions span fragments {sorted(ids)!r}; expected exactly one")
    return next(iter(ids))


def _check_known(preds: Iterable[TagPrediction], g: CompetencyGraph) -> None:
    for p in preds:
        if p.competency_id not in g:
            raise UnknownCompetency(p.competency_id)


def granularity_filter(
    preds: Sequence[TagPrediction],
    g: CompetencyGraph,
    policy: str = "most_specific",
    fragment_id: str | None = None,
) -> ReconciledSet:
    """Resolve hierarchy redundancy within one fragment's predictions.

    Default policy keeps the most specific node: a prediction is dropped when
    it is a strict ancestor of another predicted competency (reason
    "ancestor-of-selected"). The "most_general" policy inverts this for
    ablation, dropping strict descendants. Idempotent; never adds predictions.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    fid = _fragment_id_of(preds, fragment_id)
    _check_known(preds, g)
    predicted = {p.competency_id for p in preds}
    doomed: set[str] = set()
    for cid in predicted:
        covered = g.descendants(cid) if policy == "most_specific" else g.ancestors(cid)
        if any(other in covered for other in predicted if other != cid):
            doomed.add(cid)
    reason = REASON_ANCESTOR if policy == "most_specific" else REASON_DESCENDANT
    kept = tuple(p for p in preds if p.competency_id not in doomed)
    dropped = tuple((p, reason) for p in preds if p.competency_id in doomed)
    return ReconciledSet(fid, kept, dropped)


def dedup(preds: Sequence[TagPrediction], fragment_id: str | None = None) -> ReconciledSet:
    """Collapse repeated predictions of one competency to a single entry.

    Keeps the highest confidence; confidence ties keep the smallest
    evidence_start (then smallest evidence_end, then input order). Result
    order is insensitive to input order up to that rule.
    """
    fid = _fragment_id_of(preds, fragment_id)
    best: dict[str, tuple[tuple[float, int, int, int], int]] = {}
    for i, p in enumerate(preds):
        key = (-p.confidence, p.evidence_start, p.evidence_end, i)
        current = best.get(p.competency_id)
        if current is None or key < current[0]:
            best[p.competency_id] = (key, i)
    keep = {i for _, i in best.values()}
    kept = tuple(p for i, p in enumerate(preds) if i in keep)
    dropped = tuple((p, REASON_DUPLICATE) for i, p in enumerate(preds) if i not in keep)
    return ReconciledSet(fid, kept, dropped)


def reconcile_fragment(
    fragment_id: str,
    preds: Sequence[TagPrediction],
    g: CompetencyGraph,
    policy: str = "most_specific",
) -> ReconciledSet:
    """granularity_filter then dedup, with the dropped lists concatenated."""
    first = granularity_filter(preds, g, policy, fragment_id=fragment_id)
    second = dedup(first.predictions, fragment_id=fragment_id)
    return ReconciledSet(fragment_id, second.predictions, first.dropped + second.dropped)


def coherence_flags(
    resource_id: str,
    preds_by_fragment: Mapping[str, Sequence[TagPrediction]],
    g: CompetencyGraph,
    transitive: bool = False,
) -> list[CoherenceFlag]:
    """Flag predicted competencies whose prerequisites are unpredicted in the resource.

    A prerequisite counts as satisfied by any prediction of it anywhere in the
    resource, regardless of confidence. Direct prerequisites only by default;
    transitive=True extends the check to the transitive closure, where
    prerequisites missing only transitively downgrade severity to "info".
    Flags are advisory: nothing is dropped.
    """
    predicted: set[str] = set()
    for preds in preds_by_fragment.values():
        _check_known(preds, g)
        predicted.update(p.competency_id for p in preds)
    flags: list[CoherenceFlag] = []
    for cid in sorted(predicted):
        direct = set(g.direct_prerequisites(cid))
        required = g.prerequisites_of(cid) if transitive else direct
        missing = tuple(sorted(p for p in required if p not in predicted))
        if not missing:
            continue
        severity = "warning" if any(p in direct for p in missing) else "info"
        flags.append(CoherenceFlag(resource_id, cid, missing, severity))
    return flags


def flag_to_record(flag: CoherenceFlag) -> dict:
    return {
        "resource_id": flag.resource_id,
        "competency_id": flag.flagged_competency,
        "missing_prerequisites": list(flag.missing_prerequisites),
        "severity": flag.severity,
    }


def reconciled_to_records(rs: ReconciledSet) -> tuple[list[dict], list[dict]]:
    """(kept, dropped) records for the stage artifact files."""
    from .tagger import prediction_to_record

    kept = [prediction_to_record(p) for p in rs.predictions]
    dropped = [
        {**prediction_to_record(p), "reason": reason} for p, reason in rs.dropped
    ]
    return kept, dropped
