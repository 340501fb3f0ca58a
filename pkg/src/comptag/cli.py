"""Command-line pipeline.

Each subcommand reads the previous stage's files from the run directory,
writes its own stage artifacts as flat JSONL, and records a manifest with
the effective config, seed, versions, and input digests. Commands are
idempotent: identical inputs and seed give identical outputs.
"""

from __future__ import annotations

import functools
import json
from pathlib import Path
from typing import Mapping

import click

from . import jsonl
from .aggregate import AggregationConfig, resource_score_to_record
from .config import RunConfig, file_digest, load_config, require_inputs, write_manifest
from .corpus import FragmentConfig, Fragment, fragment_resource, ingest_resources, read_fragments, write_fragments, write_resources
from .errors import CompTagError, MissingStageInput
from .evaluation import compute_report, derive_resource_gold, load_gold, make_folds
from .fixture import DEFAULT_SEED, write_fixture
from .graph import CompetencyGraph, build_profiles, load_graph
from .pipeline import (
    PredictionCache,
    aggregate_resources,
    build_requests,
    flags_for_resources,
    retrieve_candidates,
    run_tagging,
    sweep_grid,
    sweep_summary,
    write_sweep_csv,
)
from .reconcile import flag_to_record, reconcile_fragment, reconciled_to_records
from .retrieval import (
    CandidateSet,
    ProfileIndex,
    VectorStore,
    bm25_rank,
    cosine_rank,
    load_pair_scores,
    ranked,
    rrf_fuse,
    topk_candidates,
)
from .tagger import (
    HttpProvider,
    MockProvider,
    Provider,
    ReplayProvider,
    few_shot_request,
    prediction_to_record,
    read_predictions,
    select_demonstrations,
    tag_all,
)

RESOURCES_FILE = "resources.jsonl"
FRAGMENTS_FILE = "fragments.jsonl"
CANDIDATES_FILE = "candidates.jsonl"
PREDICTIONS_FILE = "predictions.jsonl"
RAW_SPANS_FILE = "raw_spans.jsonl"
TAG_LOG_FILE = "tag_log.jsonl"
RECONCILED_FILE = "reconciled.jsonl"
DROPPED_FILE = "dropped.jsonl"
FLAGS_FILE = "flags.jsonl"
RESOURCE_SCORES_FILE = "resource_scores.jsonl"
METRICS_FILE = "metrics.json"
SWEEP_CSV_FILE = "sweep.csv"
SWEEP_SUMMARY_FILE = "sweep_summary.json"


def _clean_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (CompTagError, ValueError) as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc

    return wrapper


def _common_options(fn):
    fn = click.option("--seed", type=int, default=None, help="Override the evaluation seed.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None, help="Run directory.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(), default=None, help="TOML or JSON config file.")(fn)
    return fn


def _setup(config_path, out_dir, seed) -> tuple[RunConfig, Path]:
    cfg = load_config(config_path) if config_path else RunConfig()
    if out_dir is not None:
        cfg.paths.out_dir = str(out_dir)
    if seed is not None:
        cfg.evaluation.seed = seed
    run_dir = Path(cfg.paths.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return cfg, run_dir


def _manifest(run_dir: Path, command: str, cfg: RunConfig | None, seed, inputs, outputs) -> None:
    write_manifest(
        run_dir / f"manifest_{command}.json",
        command=command,
        config=cfg,
        seed=seed,
        inputs=inputs,
        outputs=outputs,
    )


def _make_provider(cfg: RunConfig, g: CompetencyGraph) -> Provider:
    kind = cfg.tagger.provider
    if kind == "mock":
        return MockProvider(g)
    if kind == "replay":
        require_inputs({"replay_log": cfg.tagger.replay_log})
        return ReplayProvider.from_path(cfg.tagger.replay_log)
    return HttpProvider(model=cfg.tagger.model)


def _read_candidates(path: str | Path) -> dict[str, CandidateSet]:
    out: dict[str, CandidateSet] = {}
    for line_no, record in jsonl.iter_records(path):
        fragment_id = jsonl.require_field(record, line_no, "fragment_id", str)
        entries = record.get("candidates", [])
        if not isinstance(entries, list):
            raise jsonl.MalformedRecord(line_no, "'candidates' must be a list")
        pairs = tuple((e["competency_id"], float(e["score"])) for e in entries)
        out[fragment_id] = CandidateSet(fragment_id, int(record.get("k", len(pairs))), pairs)
    return out


def _group_predictions(predictions) -> dict[str, list]:
    grouped: dict[str, list] = {}
    for p in predictions:
        grouped.setdefault(p.fragment_id, []).append(p)
    return grouped


def _aggregation_config(cfg: RunConfig) -> AggregationConfig:
    a = cfg.aggregation
    return AggregationConfig(
        agg=a.agg, weights=dict(a.weights), tau=a.tau, topk=a.topk, tau_prefilter=a.tau_prefilter
    )


@click.group()
def main():
    """Competency tagging pipeline for course resources."""


@main.command()
@_common_options
@_clean_errors
def ingest(config_path, out_dir, seed):
    """Validate the raw resource corpus and copy it into the run directory."""
    cfg, run_dir = _setup(config_path, out_dir, seed)
    require_inputs({"corpus": cfg.paths.corpus})
    resources = ingest_resources(cfg.paths.corpus)
    out_path = run_dir / RESOURCES_FILE
    write_resources(out_path, resources)
    _manifest(run_dir, "ingest", cfg, None, {"corpus": cfg.paths.corpus}, {"resources": out_path})
    click.echo(f"ingested {len(resources)} resources -> {out_path}")


@main.command()
@_common_options
@_clean_errors
def fragment(config_path, out_dir, seed):
    """Split ingested resources into offset-addressed fragments."""
    cfg, run_dir = _setup(config_path, out_dir, seed)
    resources_path = run_dir / RESOURCES_FILE
    require_inputs({"resources": resources_path})
    resources = ingest_resources(resources_path)
    frag_config = FragmentConfig(max_tokens=cfg.fragmentation.max_tokens)
    fragments = [f for r in resources for f in fragment_resource(r, frag_config)]
    out_path = run_dir / FRAGMENTS_FILE
    write_fragments(out_path, fragments)
    _manifest(run_dir, "fragment", cfg, None, {"resources": resources_path}, {"fragments": out_path})
    click.echo(f"fragmented {len(resources)} resources into {len(fragments)} fragments -> {out_path}")


@main.command()
@_common_options
@_clean_errors
def retrieve(config_path, out_dir, seed):
    """Rank candidate competencies per fragment (BM25, RRF, or file scores)."""
    cfg, run_dir = _setup(config_path, out_dir, seed)
    fragments_path = run_dir / FRAGMENTS_FILE
    inputs: dict[str, str | Path] = {"fragments": fragments_path, "graph": cfg.paths.graph}
    method = cfg.retrieval.method
    if method == "rrf":
        inputs["vectors"] = cfg.paths.vectors
    if method == "pair_scores":
        inputs["pair_scores"] = cfg.paths.pair_scores
    require_inputs(inputs)

    fragments = read_fragments(fragments_path)
    g = load_graph(cfg.paths.graph)
    index = ProfileIndex(build_profiles(g))
    k = cfg.retrieval.k

    candidates: dict[str, CandidateSet] = {}
    if method == "pair_scores":
        by_fragment = load_pair_scores(cfg.paths.pair_scores)
        for f in fragments:
            ranked_list = by_fragment.get(f.fragment_id, ranked(f.fragment_id, {}))
            candidates[f.fragment_id] = topk_candidates(ranked_list, k)
    else:
        store = VectorStore.load(cfg.paths.vectors, g.competency_ids()) if method == "rrf" else None
        for f in fragments:
            lexical = bm25_rank(index, f.fragment_id, f.text, cfg.retrieval.bm25_k1, cfg.retrieval.bm25_b)
            fused = (
                rrf_fuse([lexical, cosine_rank(store, f.fragment_id)], cfg.retrieval.k_rrf)
                if store is not None
                else lexical
            )
            candidates[f.fragment_id] = topk_candidates(fused, k)

    out_path = run_dir / CANDIDATES_FILE
    jsonl.write_records(
        out_path,
        (
            {
                "fragment_id": f.fragment_id,
                "k": k,
                "candidates": [
                    {"competency_id": cid, "score": score}
                    for cid, score in candidates[f.fragment_id].candidates
                ],
            }
            for f in fragments
        ),
    )
    _manifest(run_dir, "retrieve", cfg, None, inputs, {"candidates": out_path})
    click.echo(f"retrieved top-{k} candidates for {len(fragments)} fragments -> {out_path}")


@main.command()
@_common_options
@_clean_errors
def tag(config_path, out_dir, seed):
    """Run the tagging provider over fragments with their candidate sets."""
    cfg, run_dir = _setup(config_path, out_dir, seed)
    fragments_path = run_dir / FRAGMENTS_FILE
    candidates_path = run_dir / CANDIDATES_FILE
    inputs: dict[str, str | Path] = {
        "fragments": fragments_path,
        "candidates": candidates_path,
        "graph": cfg.paths.graph,
    }
    if cfg.tagger.mode == "few_shot":
        inputs["gold"] = cfg.paths.gold
    require_inputs(inputs)

    fragments = read_fragments(fragments_path)
    g = load_graph(cfg.paths.graph)
    candidates = _read_candidates(candidates_path)
    provider = _make_provider(cfg, g)

    if cfg.tagger.mode == "few_shot":
        texts = {f.fragment_id: f.text for f in fragments}
        pool = [
            (texts[a.fragment_id], sorted(a.gold), a.fragment_id)
            for a in load_gold(cfg.paths.gold)
            if a.fragment_id in texts
        ]
        requests_ = []
        for f in fragments:
            candidate_set = candidates[f.fragment_id]
            if not candidate_set.candidates:
                continue
            examples = [(text, gold) for text, gold, fid in pool if fid != f.fragment_id]
            demos = select_demonstrations(f.text, examples, cfg.tagger.n_demonstrations)
            requests_.append(few_shot_request(f, candidate_set, g, demos, cfg.tagger.language))
    else:
        requests_ = build_requests(fragments, candidates, g, cfg.tagger.mode, cfg.tagger.language)

    outcomes = tag_all(requests_, provider, retries=cfg.tagger.retries, max_workers=cfg.tagger.max_workers)

    predictions = [p for outcome in outcomes for p in outcome.predictions]
    n_discarded = sum(outcome.discarded for outcome in outcomes)
    predictions_path = run_dir / PREDICTIONS_FILE
    jsonl.write_records(predictions_path, (prediction_to_record(p) for p in predictions))
    spans_path = run_dir / RAW_SPANS_FILE
    jsonl.write_records(
        spans_path,
        (
            {"fragment_id": fid, "start": a, "end": b}
            for outcome in outcomes
            for fid, a, b in outcome.raw_spans
        ),
    )
    log_path = run_dir / TAG_LOG_FILE
    jsonl.write_records(log_path, (record for outcome in outcomes for record in outcome.raw_log))
    _manifest(
        run_dir,
        "tag",
        cfg,
        None,
        inputs,
        {"predictions": predictions_path, "raw_spans": spans_path, "tag_log": log_path},
    )
    click.echo(
        f"tagged {len(requests_)} fragments: {len(predictions)} predictions, "
        f"{n_discarded} discarded -> {predictions_path}"
    )


@main.command()
@_common_options
@_clean_errors
def reconcile(config_path, out_dir, seed):
    """Apply granularity filtering, dedup, and prerequisite coherence flags."""
    cfg, run_dir = _setup(config_path, out_dir, seed)
    predictions_path = run_dir / PREDICTIONS_FILE
    fragments_path = run_dir / FRAGMENTS_FILE
    resources_path = run_dir / RESOURCES_FILE
    inputs = {
        "predictions": predictions_path,
        "fragments": fragments_path,
        "resources": resources_path,
        "graph": cfg.paths.graph,
    }
    require_inputs(inputs)

    fragments = read_fragments(fragments_path)
    resources = ingest_resources(resources_path)
    g = load_graph(cfg.paths.graph)
    grouped = _group_predictions(read_predictions(predictions_path))

    kept_records: list[dict] = []
    dropped_records: list[dict] = []
    reconciled_preds: dict[str, list] = {}
    for f in fragments:
        rs = reconcile_fragment(f.fragment_id, grouped.get(f.fragment_id, []), g, cfg.reconcile.policy)
        reconciled_preds[f.fragment_id] = list(rs.predictions)
        kept, dropped = reconciled_to_records(rs)
        kept_records.extend(kept)
        dropped_records.extend(dropped)

    flags = flags_for_resources(resources, fragments, reconciled_preds, g, cfg.reconcile.transitive_flags)

    reconciled_path = run_dir / RECONCILED_FILE
    dropped_path = run_dir / DROPPED_FILE
    flags_path = run_dir / FLAGS_FILE
    jsonl.write_records(reconciled_path, kept_records)
    jsonl.write_records(dropped_path, dropped_records)
    jsonl.write_records(flags_path, (flag_to_record(flag) for flag in flags))
    _manifest(
        run_dir,
        "reconcile",
        cfg,
        None,
        inputs,
        {"reconciled": reconciled_path, "dropped": dropped_path, "flags": flags_path},
    )
    click.echo(
        f"reconciled: kept {len(kept_records)}, dropped {len(dropped_records)}, "
        f"{len(flags)} coherence flags -> {reconciled_path}"
    )


@main.command()
@_common_options
@_clean_errors
def aggregate(config_path, out_dir, seed):
    """Aggregate fragment predictions into resource-level competency maps."""
    cfg, run_dir = _setup(config_path, out_dir, seed)
    reconciled_path = run_dir / RECONCILED_FILE
    fragments_path = run_dir / FRAGMENTS_FILE
    resources_path = run_dir / RESOURCES_FILE
    inputs = {"reconciled": reconciled_path, "fragments": fragments_path, "resources": resources_path}
    require_inputs(inputs)

    fragments = read_fragments(fragments_path)
    resources = ingest_resources(resources_path)
    grouped = _group_predictions(read_predictions(reconciled_path))
    scores = aggregate_resources(resources, fragments, grouped, _aggregation_config(cfg))

    out_path = run_dir / RESOURCE_SCORES_FILE
    jsonl.write_records(out_path, (resource_score_to_record(scores[r.resource_id]) for r in resources))
    _manifest(run_dir, "aggregate", cfg, None, inputs, {"resource_scores": out_path})
    click.echo(f"aggregated {len(resources)} resources -> {out_path}")


@main.command()
@_common_options
@_clean_errors
def evaluate(config_path, out_dir, seed):
    """Score reconciled predictions against gold at fragment and resource level."""
    cfg, run_dir = _setup(config_path, out_dir, seed)
    reconciled_path = run_dir / RECONCILED_FILE
    scores_path = run_dir / RESOURCE_SCORES_FILE
    fragments_path = run_dir / FRAGMENTS_FILE
    resources_path = run_dir / RESOURCES_FILE
    spans_path = run_dir / RAW_SPANS_FILE
    inputs = {
        "reconciled": reconciled_path,
        "resource_scores": scores_path,
        "fragments": fragments_path,
        "resources": resources_path,
        "raw_spans": spans_path,
        "gold": cfg.paths.gold,
        "graph": cfg.paths.graph,
    }
    require_inputs(inputs)

    fragments = read_fragments(fragments_path)
    resources = ingest_resources(resources_path)
    g = load_graph(cfg.paths.graph)
    golds = load_gold(cfg.paths.gold)
    grouped = _group_predictions(read_predictions(reconciled_path))
    raw_spans = [
        (r["fragment_id"], r["start"], r["end"]) for _, r in jsonl.iter_records(spans_path)
    ]
    resource_preds: dict[str, set] = {}
    for line_no, record in jsonl.iter_records(scores_path):
        rid = jsonl.require_field(record, line_no, "resource_id", str)
        resource_preds[rid] = set(record.get("mapping", []))

    frag_golds = {a.fragment_id: set(a.gold) for a in golds}
    frag_pred_sets = {fid: {p.competency_id for p in preds} for fid, preds in grouped.items()}
    ranked_by_fragment = {
        fid: [p.competency_id for p in sorted(preds, key=lambda p: (-p.confidence, p.competency_id))]
        for fid, preds in grouped.items()
    }
    fragment_texts = {f.fragment_id: f.text for f in fragments}
    resource_golds = derive_resource_gold(golds)
    resource_course = {r.resource_id: r.course_id for r in resources}
    frag_course = {f.fragment_id: resource_course[f.resource_id] for f in fragments}
    all_fragment_units = [a.fragment_id for a in golds]
    all_resource_units = sorted(resource_golds)

    def report_for(courses: set[str] | None):
        if courses is None:
            fragment_units, resource_units, spans = all_fragment_units, all_resource_units, raw_spans
        else:
            fragment_units = [u for u in all_fragment_units if frag_course[u] in courses]
            resource_units = [u for u in all_resource_units if resource_course[u] in courses]
            spans = [s for s in raw_spans if frag_course[s[0]] in courses]
        return compute_report(
            frag_golds={u: frag_golds[u] for u in fragment_units},
            frag_preds={u: frag_pred_sets.get(u, set()) for u in fragment_units},
            fragment_units=fragment_units,
            resource_golds={u: resource_golds[u] for u in resource_units},
            resource_preds={u: resource_preds.get(u, set()) for u in resource_units},
            resource_units=resource_units,
            competencies=g.competency_ids(),
            raw_spans=spans,
            fragment_texts=fragment_texts,
            ranked={u: ranked_by_fragment.get(u, []) for u in fragment_units},
            k=cfg.retrieval.k,
        )

    folds = make_folds(golds, cfg.evaluation.n_folds, cfg.evaluation.seed)
    pooled = report_for(None)
    payload = {
        "seed": cfg.evaluation.seed,
        "n_folds": cfg.evaluation.n_folds,
        "k": cfg.retrieval.k,
        "pooled": pooled.to_dict(),
        "folds": [
            {"fold": i, **report_for(folds.test_courses(i)).to_dict()} for i in range(folds.n_folds)
        ],
    }
    out_path = run_dir / METRICS_FILE
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    _manifest(run_dir, "evaluate", cfg, cfg.evaluation.seed, inputs, {"metrics": out_path})
    click.echo(
        f"micro_f1={pooled.micro_f1:.4f} macro_f1={pooled.macro_f1:.4f} "
        f"resource_macro_f1={pooled.resource_macro_f1:.4f} span_valid={pooled.span_valid:.4f} "
        f"mrr={pooled.mrr:.4f} -> {out_path}"
    )


@main.command()
@_common_options
@_clean_errors
def sweep(config_path, out_dir, seed):
    """Evaluate the full K x tau grid under UV-grouped cross-validation."""
    cfg, run_dir = _setup(config_path, out_dir, seed)
    fragments_path = run_dir / FRAGMENTS_FILE
    resources_path = run_dir / RESOURCES_FILE
    inputs: dict[str, str | Path] = {
        "fragments": fragments_path,
        "resources": resources_path,
        "gold": cfg.paths.gold,
        "graph": cfg.paths.graph,
    }
    if cfg.retrieval.method == "rrf":
        inputs["vectors"] = cfg.paths.vectors
    require_inputs(inputs)

    fragments = read_fragments(fragments_path)
    resources = ingest_resources(resources_path)
    g = load_graph(cfg.paths.graph)
    golds = load_gold(cfg.paths.gold)
    index = ProfileIndex(build_profiles(g))
    store = VectorStore.load(cfg.paths.vectors, g.competency_ids()) if cfg.retrieval.method == "rrf" else None
    provider = _make_provider(cfg, g)

    def compute_run(k: int):
        return run_tagging(
            k,
            fragments,
            index,
            g,
            provider,
            mode=cfg.tagger.mode,
            language=cfg.tagger.language,
            retries=cfg.tagger.retries,
            store=store,
            k_rrf=cfg.retrieval.k_rrf,
            policy=cfg.reconcile.policy,
            max_workers=cfg.tagger.max_workers,
        )

    folds = make_folds(golds, cfg.evaluation.n_folds, cfg.evaluation.seed)
    report = sweep_grid(
        resources=resources,
        fragments=fragments,
        golds=golds,
        g=g,
        folds=folds,
        cache=PredictionCache(),
        compute_run=compute_run,
        agg_config=_aggregation_config(cfg),
        k_grid=tuple(cfg.evaluation.k_grid),
        tau_grid=tuple(cfg.evaluation.tau_grid),
    )

    csv_path = run_dir / SWEEP_CSV_FILE
    summary_path = run_dir / SWEEP_SUMMARY_FILE
    write_sweep_csv(csv_path, report)
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(sweep_summary(report), fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    _manifest(
        run_dir,
        "sweep",
        cfg,
        cfg.evaluation.seed,
        inputs,
        {"sweep_csv": csv_path, "sweep_summary": summary_path},
    )
    for s in report.selections:
        click.echo(
            f"fold {s.fold}: selected K={s.k} tau={s.tau:g} "
            f"(train micro_f1={s.train_micro_f1:.4f}, test micro_f1={s.test.micro_f1:.4f})"
        )
    click.echo(
        f"{len(report.rows)} rows ({report.n_folds} folds + pooled), "
        f"cache hits={report.cache_hits} misses={report.cache_misses} -> {csv_path}"
    )


@main.command("gen-fixture")
@click.option("--out", "out_dir", type=click.Path(), default="fixture", help="Output directory.")
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--no-vectors", is_flag=True, default=False, help="Skip vectors.jsonl.")
@_clean_errors
def gen_fixture(out_dir, seed, no_vectors):
    """Generate the deterministic synthetic dataset (22 competencies, 26 UVs)."""
    paths = write_fixture(out_dir, seed=seed, with_vectors=not no_vectors)
    write_manifest(
        Path(out_dir) / "manifest_gen-fixture.json",
        command="gen-fixture",
        config=None,
        seed=seed,
        inputs={},
        outputs=paths,
    )
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


if __name__ == "__main__":
    main()
