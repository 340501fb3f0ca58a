"""End-to-end orchestration: retrieve, tag, reconcile, aggregate, and the
(K, tau) sensitivity sweep with its per-K prediction cache.

Tagging cost depends on K only, so the sweep computes one TaggingRun per K
and reapplies tau in post-processing; the cache's hit/miss counters make the
reuse observable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .aggregate import AggregationConfig, ResourceScore, map_resource, prefilter_predictions, score_resource
from .corpus import Fragment, Resource
from .errors import MissingCache
from .evaluation import (
    FoldSpec,
    GoldAnnotation,
    MetricsReport,
    compute_report,
    derive_resource_gold,
    micro_f1,
)
from .graph import CompetencyGraph
from .reconcile import CoherenceFlag, ReconciledSet, coherence_flags, reconcile_fragment
from .retrieval import (
    RRF_K,
    CandidateSet,
    ProfileIndex,
    VectorStore,
    bm25_rank,
    cosine_rank,
    rrf_fuse,
    topk_candidates,
)
from .tagger import (
    Provider,
    TagPrediction,
    TagRequest,
    constrained_request,
    few_shot_request,
    tag_all,
    zero_shot_request,
)

DEFAULT_K_GRID = (5, 10, 15, 20)
DEFAULT_TAU_GRID = (0.3, 0.4, 0.5, 0.6)
SWEEP_CSV_COLUMNS = ("fold", "K", "tau", "micro_f1", "macro_f1", "resource_macro_f1", "span_valid", "mrr")


def retrieve_candidates(
    fragments: Sequence[Fragment],
    index: ProfileIndex,
    k: int,
    store: VectorStore | None = None,
    k_rrf: int = RRF_K,
) -> dict[str, CandidateSet]:
    """Top-k candidate competencies per fragment: BM25 alone, or RRF-fused
    with cosine ranking when a vector store is supplied."""
    out: dict[str, CandidateSet] = {}
    for fragment in fragments:
        lexical = bm25_rank(index, fragment.fragment_id, fragment.text)
        if store is not None:
            fused = rrf_fuse([lexical, cosine_rank(store, fragment.fragment_id)], k_rrf)
        else:
            fused = lexical
        out[fragment.fragment_id] = topk_candidates(fused, k)
    return out


def build_requests(
    fragments: Sequence[Fragment],
    candidates: Mapping[str, CandidateSet],
    g: CompetencyGraph,
    mode: str = "constrained",
    language: str = "en",
    demonstrations: Sequence[tuple[str, Sequence[str]]] = (),
) -> list[TagRequest]:
    """One request per fragment; fragments whose candidate set is empty are
    skipped (nothing to tag against), except in zero_shot mode which always
    offers the full inventory."""
    requests_: list[TagRequest] = []
    for fragment in fragments:
        if mode == "zero_shot":
            requests_.append(zero_shot_request(fragment, g, language))
            continue
        candidate_set = candidates[fragment.fragment_id]
        if not candidate_set.candidates:
            continue
        if mode == "few_shot":
            requests_.append(few_shot_request(fragment, candidate_set, g, demonstrations, language))
        else:
            requests_.append(constrained_request(fragment, candidate_set, g, language))
    return requests_


@dataclass(frozen=True)
class TaggingRun:
    """Reconciled predictions for one retrieval depth K, every fragment present."""

    k: int
    reconciled: dict[str, ReconciledSet]
    raw_spans: tuple[tuple[str, int, int], ...]
    n_discarded: int
    log: tuple[dict, ...] = ()


def run_tagging(
    k: int,
    fragments: Sequence[Fragment],
    index: ProfileIndex,
    g: CompetencyGraph,
    provider: Provider,
    *,
    mode: str = "constrained",
    language: str = "en",
    retries: int = 1,
    store: VectorStore | None = None,
    k_rrf: int = RRF_K,
    policy: str = "most_specific",
    demonstrations: Sequence[tuple[str, Sequence[str]]] = (),
    max_workers: int = 1,
    keep_log: bool = False,
) -> TaggingRun:
    """Full fragment-level chain for one K: retrieve, tag, reconcile."""
    candidates = retrieve_candidates(fragments, index, k, store, k_rrf)
    requests_ = build_requests(fragments, candidates, g, mode, language, demonstrations)
    outcomes = tag_all(requests_, provider, retries=retries, max_workers=max_workers)

    preds_by_fragment: dict[str, list[TagPrediction]] = {f.fragment_id: [] for f in fragments}
    raw_spans: list[tuple[str, int, int]] = []
    log: list[dict] = []
    n_discarded = 0
    for request, outcome in zip(requests_, outcomes):
        preds_by_fragment[request.fragment.fragment_id] = list(outcome.predictions)
        raw_spans.extend(outcome.raw_spans)
        n_discarded += outcome.discarded
        if keep_log:
            log.extend(outcome.raw_log)

    reconciled = {
        fragment_id: reconcile_fragment(fragment_id, preds, g, policy)
        for fragment_id, preds in preds_by_fragment.items()
    }
    return TaggingRun(k, reconciled, tuple(raw_spans), n_discarded, tuple(log))


def _effective_predictions(run: TaggingRun, cfg: AggregationConfig) -> dict[str, list[TagPrediction]]:
    if not cfg.tau_prefilter:
        return {fid: list(rs.predictions) for fid, rs in run.reconciled.items()}
    return {fid: prefilter_predictions(rs.predictions, cfg.tau) for fid, rs in run.reconciled.items()}


def aggregate_resources(
    resources: Sequence[Resource],
    fragments: Sequence[Fragment],
    predictions: Mapping[str, Sequence[TagPrediction]],
    cfg: AggregationConfig,
) -> dict[str, ResourceScore]:
    """Score and threshold every resource from its fragments' predictions."""
    frags_by_resource: dict[str, list[Fragment]] = {r.resource_id: [] for r in resources}
    for fragment in fragments:
        frags_by_resource[fragment.resource_id].append(fragment)
    out: dict[str, ResourceScore] = {}
    for resource in resources:
        sets = [
            ReconciledSet(f.fragment_id, tuple(predictions.get(f.fragment_id, ())), ())
            for f in frags_by_resource[resource.resource_id]
        ]
        scores = score_resource(sets, cfg, kind=resource.kind)
        out[resource.resource_id] = map_resource(resource.resource_id, scores, cfg)
    return out


def flags_for_resources(
    resources: Sequence[Resource],
    fragments: Sequence[Fragment],
    predictions: Mapping[str, Sequence[TagPrediction]],
    g: CompetencyGraph,
    transitive: bool = False,
) -> list[CoherenceFlag]:
    frags_by_resource: dict[str, list[Fragment]] = {r.resource_id: [] for r in resources}
    for fragment in fragments:
        frags_by_resource[fragment.resource_id].append(fragment)
    flags: list[CoherenceFlag] = []
    for resource in resources:
        by_fragment = {
            f.fragment_id: list(predictions.get(f.fragment_id, ()))
            for f in frags_by_resource[resource.resource_id]
        }
        flags.extend(coherence_flags(resource.resource_id, by_fragment, g, transitive))
    return flags


class PredictionCache:
    """Write-once store of tagging runs keyed by retrieval depth K."""

    def __init__(self):
        self._runs: dict[int, TaggingRun] = {}
        self.hits = 0
        self.misses = 0

    def __contains__(self, k: int) -> bool:
        return k in self._runs

    def put(self, k: int, run: TaggingRun) -> None:
        if k in self._runs:
            raise ValueError(f"cache already holds a run for K={k}")
        self._runs[k] = run

    def get_or_compute(self, k: int, factory: Callable[[int], TaggingRun] | None = None) -> TaggingRun:
        if k in self._runs:
            self.hits += 1
            return self._runs[k]
        if factory is None:
            raise MissingCache(f"no cached predictions for K={k} and no way to compute them")
        self.misses += 1
        run = factory(k)
        self._runs[k] = run
        return run

    def stats(self) -> dict[str, int]:
        return {"hits": self.hits, "misses": self.misses}


@dataclass(frozen=True)
class SweepRow:
    fold: str
    k: int
    tau: float
    report: MetricsReport


@dataclass(frozen=True)
class FoldSelection:
    fold: int
    k: int
    tau: float
    train_micro_f1: float
    test: MetricsReport


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[SweepRow, ...]
    selections: tuple[FoldSelection, ...]
    k_grid: tuple[int, ...]
    tau_grid: tuple[float, ...]
    n_folds: int
    cache_hits: int
    cache_misses: int


def _metric_fields(report: MetricsReport) -> dict[str, float]:
    return {
        "micro_f1": report.micro_f1,
        "macro_f1": report.macro_f1,
        "resource_macro_f1": report.resource_macro_f1,
        "span_valid": report.span_valid,
        "mrr": report.mrr,
    }


def sweep_grid(
    *,
    resources: Sequence[Resource],
    fragments: Sequence[Fragment],
    golds: Sequence[GoldAnnotation],
    g: CompetencyGraph,
    folds: FoldSpec,
    cache: PredictionCache,
    compute_run: Callable[[int], TaggingRun] | None = None,
    agg_config: AggregationConfig | None = None,
    k_grid: Sequence[int] = DEFAULT_K_GRID,
    tau_grid: Sequence[float] = DEFAULT_TAU_GRID,
) -> SweepReport:
    """Evaluate every (K, tau) cell per fold and pooled.

    The cache is consulted exactly once per cell, so a grid of |K| x |tau|
    shows |K| misses and |K| * (|tau| - 1) hits when it starts empty. Raises
    MissingCache when a K is neither cached nor computable. Inner selection
    picks, per fold, the cell maximizing micro-F1 over the training courses,
    breaking ties toward smaller K then smaller tau.
    """
    agg_config = agg_config if agg_config is not None else AggregationConfig()
    frag_golds = {a.fragment_id: set(a.gold) for a in golds}
    frag_course = {}
    resource_course = {r.resource_id: r.course_id for r in resources}
    for fragment in fragments:
        frag_course[fragment.fragment_id] = resource_course[fragment.resource_id]
    fragment_texts = {f.fragment_id: f.text for f in fragments}
    resource_golds = derive_resource_gold(golds)
    all_resource_units = sorted(resource_golds)
    all_fragment_units = [a.fragment_id for a in golds]

    rows: list[SweepRow] = []
    # per fold: (train_micro, K, tau, test report) in grid order for selection
    fold_cells: dict[int, list[tuple[float, int, float, MetricsReport]]] = {
        fold: [] for fold in range(folds.n_folds)
    }

    for k in k_grid:
        for tau in tau_grid:
            run = cache.get_or_compute(k, compute_run)
            cfg = replace(agg_config, tau=tau)
            predictions = _effective_predictions(run, cfg)
            frag_pred_sets = {
                fid: {p.competency_id for p in preds} for fid, preds in predictions.items()
            }
            ranked = {
                fid: [
                    p.competency_id
                    for p in sorted(preds, key=lambda p: (-p.confidence, p.competency_id))
                ]
                for fid, preds in predictions.items()
            }
            resource_scores = aggregate_resources(resources, fragments, predictions, cfg)
            resource_pred_sets = {rid: set(rs.mapping) for rid, rs in resource_scores.items()}

            def cell_report(courses: set[str] | None) -> MetricsReport:
                if courses is None:
                    fragment_units = all_fragment_units
                    resource_units = all_resource_units
                    spans: Iterable[tuple[str, int, int]] = run.raw_spans
                else:
                    fragment_units = [u for u in all_fragment_units if frag_course[u] in courses]
                    resource_units = [u for u in all_resource_units if resource_course[u] in courses]
                    spans = [s for s in run.raw_spans if frag_course[s[0]] in courses]
                return compute_report(
                    frag_golds={u: frag_golds[u] for u in fragment_units},
                    frag_preds={u: frag_pred_sets.get(u, set()) for u in fragment_units},
                    fragment_units=fragment_units,
                    resource_golds={u: resource_golds[u] for u in resource_units},
                    resource_preds={u: resource_pred_sets.get(u, set()) for u in resource_units},
                    resource_units=resource_units,
                    competencies=g.competency_ids(),
                    raw_spans=spans,
                    fragment_texts=fragment_texts,
                    ranked={u: ranked.get(u, []) for u in fragment_units},
                    k=k,
                )

            for fold in range(folds.n_folds):
                test_report = cell_report(folds.test_courses(fold))
                rows.append(SweepRow(str(fold), k, tau, test_report))
                train_courses = folds.train_courses(fold)
                train_units = [u for u in all_fragment_units if frag_course[u] in train_courses]
                train_micro = micro_f1(
                    {u: frag_golds[u] for u in train_units},
                    {u: frag_pred_sets.get(u, set()) for u in train_units},
                    train_units,
                )
                fold_cells[fold].append((train_micro, k, tau, test_report))
            rows.append(SweepRow("pooled", k, tau, cell_report(None)))

    selections = []
    for fold in range(folds.n_folds):
        # max keeps the first of equals; cells are in (K asc, tau asc) order
        train_micro, k, tau, test_report = max(fold_cells[fold], key=lambda cell: cell[0])
        selections.append(FoldSelection(fold, k, tau, train_micro, test_report))

    return SweepReport(
        rows=tuple(rows),
        selections=tuple(selections),
        k_grid=tuple(k_grid),
        tau_grid=tuple(tau_grid),
        n_folds=folds.n_folds,
        cache_hits=cache.hits,
        cache_misses=cache.misses,
    )


def write_sweep_csv(path: str | Path, report: SweepReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_COLUMNS)
        for row in report.rows:
            metrics = _metric_fields(row.report)
            writer.writerow(
                [row.fold, row.k, f"{row.tau:g}"]
                + [f"{metrics[name]:.6f}" for name in SWEEP_CSV_COLUMNS[3:]]
            )


def sweep_summary(report: SweepReport) -> dict:
    """Pooled metrics per cell plus per-fold selections and cache counters."""
    return {
        "k_grid": list(report.k_grid),
        "tau_grid": list(report.tau_grid),
        "n_folds": report.n_folds,
        "cache": {"hits": report.cache_hits, "misses": report.cache_misses},
        "pooled": [
            {"K": row.k, "tau": row.tau, **_metric_fields(row.report)}
            for row in report.rows
            if row.fold == "pooled"
        ],
        "selections": [
            {
                "fold": s.fold,
                "K": s.k,
                "tau": s.tau,
                "train_micro_f1": s.train_micro_f1,
                "test": _metric_fields(s.test),
            }
            for s in report.selections
        ],
    }
