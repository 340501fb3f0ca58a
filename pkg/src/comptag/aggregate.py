"""Fragment-to-resource score aggregation and threshold mapping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .reconcile import ReconciledSet
from .tagger import TagPrediction

AGGREGATORS = ("max", "weighted_mean", "weighted_sum")


@dataclass(frozen=True)
class AggregationConfig:
    agg: str = "max"
    # resource kind -> fragment weight; kinds not listed weigh 1.0
    weights: Mapping[str, float] = field(default_factory=dict)
    tau: float = 0.4
    topk: int | None = None
    # when set, tau also filters fragment predictions before aggregation
    tau_prefilter: bool = False

    def __post_init__(self):
        if self.agg not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.agg!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be within [0, 1]")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be >= 0")
        if self.topk is not None and self.topk < 1:
            raise ValueError("topk must be >= 1")

    def weight_for(self, kind: str | None) -> float:
        if kind is None:
            return 1.0
        return float(self.weights.get(kind, 1.0))


@dataclass(frozen=True)
class ResourceScore:
    resource_id: str
    scores: dict[str, float]
    mapping: frozenset[str]
    topk: tuple[str, ...] | None = None


def prefilter_predictions(preds: Sequence[TagPrediction], tau: float) -> list[TagPrediction]:
    """Optional fragment-level tau filter (off by default: tau applies at aggregation)."""
    return [p for p in preds if p.confidence >= tau]


def score_resource(
    frags: Sequence[ReconciledSet],
    cfg: AggregationConfig,
    kind: str | None = None,
) -> dict[str, float]:
    """s(r, c) = Agg over all fragments x of w(x) * conf(x, c).

    `frags` must list every fragment of the resource, including those with no
    predictions: an unpredicted competency contributes confidence 0 for that
    fragment, which matters for weighted_mean's denominator (sum of weights
    over all fragments). Competencies predicted in no fragment are absent
    from the result (implicit 0). A resource with zero fragments scores {}.
    """
    if not frags:
        return {}
    weight = cfg.weight_for(kind)
    # one confidence per (fragment, competency); repeated predictions collapse to their max
    per_fragment: list[dict[str, float]] = []
    for rs in frags:
        conf: dict[str, float] = {}
        for p in rs.predictions:
            conf[p.competency_id] = max(conf.get(p.competency_id, 0.0), p.confidence)
        per_fragment.append(conf)
    competencies = sorted({cid for conf in per_fragment for cid in conf})
    total_weight = weight * len(frags)
    scores: dict[str, float] = {}
    for cid in competencies:
        values = [weight * conf.get(cid, 0.0) for conf in per_fragment]
        if cfg.agg == "max":
            scores[cid] = max(values)
        elif cfg.agg == "weighted_sum":
            scores[cid] = sum(values)
        else:  # weighted_mean
            scores[cid] = sum(values) / total_weight if total_weight > 0 else 0.0
    return scores


def map_resource(resource_id: str, scores: Mapping[str, float], cfg: AggregationConfig) -> ResourceScore:
    """Threshold mapping M(r) = {c : s(r, c) >= tau} (inclusive), plus an
    optional independent top-k list (score ties broken by ascending id)."""
    mapping = frozenset(cid for cid, score in scores.items() if score >= cfg.tau)
    topk: tuple[str, ...] | None = None
    if cfg.topk is not None:
        ordered = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
        topk = tuple(cid for cid, _ in ordered[: cfg.topk])
    return ResourceScore(resource_id, dict(scores), mapping, topk)


def resource_score_to_record(rs: ResourceScore) -> dict:
    record = {
        "resource_id": rs.resource_id,
        "scores": {cid: rs.scores[cid] for cid in sorted(rs.scores)},
        "mapping": sorted(rs.mapping),
    }
    if rs.topk is not None:
        record["topk"] = list(rs.topk)
    return record
