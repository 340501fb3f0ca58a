import csv
import hashlib
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from comptag.cli import main
from comptag.corpus import Resource, write_resources
from comptag.graph import CompetencyEdge, CompetencyGraph, CompetencyNode, save_graph


@pytest.fixture
def runner():
    return CliRunner()


def _write_inputs(root: Path) -> dict[str, Path]:
    g = CompetencyGraph(
        [
            CompetencyNode("c1", "linear regression"),
            CompetencyNode("c2", "probability theory"),
            CompetencyNode("c3", "graph algorithms"),
        ],
        [CompetencyEdge("c2", "c1", "prerequisite_of")],
    )
    resources = [
        Resource("r1", "uv1", "page", "Intro", "We introduce linear regression and probability theory."),
        Resource("r2", "uv1", "page", "Lesson", "A lesson about probability theory."),
        Resource("r3", "uv2", "page", "Graphs", "Fundamentals of graph algorithms."),
        Resource("r4", "uv2", "page", "More", "More about probability theory."),
    ]
    gold = [
        {"fragment_id": "r1::f0000", "resource_id": "r1", "course_id": "uv1", "gold": ["c1", "c2"]},
        {"fragment_id": "r2::f0000", "resource_id": "r2", "course_id": "uv1", "gold": ["c2"]},
        {"fragment_id": "r3::f0000", "resource_id": "r3", "course_id": "uv2", "gold": ["c3"]},
        {"fragment_id": "r4::f0000", "resource_id": "r4", "course_id": "uv2", "gold": ["c2"]},
    ]
    paths = {
        "corpus": root / "corpus.jsonl",
        "graph": root / "graph.json",
        "gold": root / "gold.jsonl",
    }
    write_resources(paths["corpus"], resources)
    save_graph(paths["graph"], g)
    paths["gold"].write_text(
        "\n".join(json.dumps(r) for r in gold) + "\n", encoding="utf-8"
    )
    return paths


def _write_config(root: Path, run_dir: Path, fmt: str = "json", **overrides) -> Path:
    paths = _write_inputs(root)
    config = {
        "paths": {
            "corpus": str(paths["corpus"]),
            "graph": str(paths["graph"]),
            "gold": str(paths["gold"]),
            "out_dir": str(run_dir),
        },
        "retrieval": {"method": "bm25", "k": 3},
        "tagger": {"provider": "mock"},
        "evaluation": {"n_folds": 2, "seed": 13, "k_grid": [2, 3], "tau_grid": [0.3, 0.6]},
    }
    config.update(overrides)
    if fmt == "json":
        path = root / "config.json"
        path.write_text(json.dumps(config), encoding="utf-8")
    else:
        lines = []
        for section, table in config.items():
            lines.append(f"[{section}]")
            for key, value in table.items():
                if isinstance(value, str):
                    lines.append(f'{key} = "{value}"')
                elif isinstance(value, list):
                    lines.append(f"{key} = {json.dumps(value)}")
                else:
                    lines.append(f"{key} = {value}")
        path = root / "config.toml"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _run(runner, args):
    result = runner.invoke(main, args)
    assert result.exit_code == 0, result.output
    return result


STAGES = ["ingest", "fragment", "retrieve", "tag", "reconcile", "aggregate", "evaluate"]


def test_full_pipeline_json_config(tmp_path, runner):
    run_dir = tmp_path / "run"
    config = _write_config(tmp_path, run_dir)
    for stage in STAGES:
        _run(runner, [stage, "--config", str(config)])

    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["pooled"]["micro_f1"] == 1.0
    assert metrics["pooled"]["macro_f1"] == 1.0
    assert metrics["pooled"]["resource_macro_f1"] == 1.0
    assert metrics["pooled"]["span_valid"] == 1.0
    assert metrics["pooled"]["mrr"] == 1.0
    assert metrics["n_folds"] == 2 and metrics["seed"] == 13
    assert [f["fold"] for f in metrics["folds"]] == [0, 1]
    for stage in STAGES:
        assert (run_dir / f"manifest_{stage}.json").exists()
    for artifact in [
        "resources.jsonl",
        "fragments.jsonl",
        "candidates.jsonl",
        "predictions.jsonl",
        "raw_spans.jsonl",
        "tag_log.jsonl",
        "reconciled.jsonl",
        "dropped.jsonl",
        "flags.jsonl",
        "resource_scores.jsonl",
        "metrics.json",
    ]:
        assert (run_dir / artifact).exists(), artifact


def test_full_pipeline_toml_config(tmp_path, runner):
    run_dir = tmp_path / "run"
    config = _write_config(tmp_path, run_dir, fmt="toml")
    for stage in STAGES:
        _run(runner, [stage, "--config", str(config)])
    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["pooled"]["micro_f1"] == 1.0


def test_manifest_records_digests_and_config(tmp_path, runner):
    run_dir = tmp_path / "run"
    config = _write_config(tmp_path, run_dir)
    _run(runner, ["ingest", "--config", str(config)])
    manifest = json.loads((run_dir / "manifest_ingest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "ingest"
    corpus_path = Path(manifest["inputs"]["corpus"]["path"])
    digest = hashlib.sha256(corpus_path.read_bytes()).hexdigest()
    assert manifest["inputs"]["corpus"]["sha256"] == digest
    assert manifest["config"]["retrieval"]["k"] == 3
    assert "timestamp" not in manifest


def test_stage_out_of_order_fails_cleanly(tmp_path, runner):
    run_dir = tmp_path / "run"
    config = _write_config(tmp_path, run_dir)
    result = runner.invoke(main, ["evaluate", "--config", str(config)])
    assert result.exit_code != 0
    assert "MissingStageInput" in result.output
    assert "Traceback" not in result.output


def test_unknown_config_key_rejected(tmp_path, runner):
    run_dir = tmp_path / "run"
    config = _write_config(tmp_path, run_dir, retrieval={"method": "bm25", "bogus": 1})
    result = runner.invoke(main, ["ingest", "--config", str(config)])
    assert result.exit_code != 0
    assert "bogus" in result.output


def test_out_flag_overrides_config_out_dir(tmp_path, runner):
    config = _write_config(tmp_path, tmp_path / "ignored")
    override = tmp_path / "elsewhere"
    _run(runner, ["ingest", "--config", str(config), "--out", str(override)])
    assert (override / "resources.jsonl").exists()
    assert not (tmp_path / "ignored").exists()


def test_replay_reproduces_mock_predictions(tmp_path, runner):
    run1 = tmp_path / "run1"
    config1 = _write_config(tmp_path, run1)
    for stage in ["ingest", "fragment", "retrieve", "tag"]:
        _run(runner, [stage, "--config", str(config1)])

    run2 = tmp_path / "run2"
    config2 = _write_config(
        tmp_path,
        run2,
        tagger={"provider": "replay", "replay_log": str(run1 / "tag_log.jsonl")},
    )
    for stage in ["ingest", "fragment", "retrieve", "tag"]:
        _run(runner, [stage, "--config", str(config2)])
    assert (run1 / "predictions.jsonl").read_bytes() == (run2 / "predictions.jsonl").read_bytes()


def test_sweep_outputs(tmp_path, runner):
    run_dir = tmp_path / "run"
    config = _write_config(tmp_path, run_dir)
    for stage in ["ingest", "fragment"]:
        _run(runner, [stage, "--config", str(config)])
    result = _run(runner, ["sweep", "--config", str(config)])
    assert "selected K=" in result.output

    with open(run_dir / "sweep.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["fold", "K", "tau"]
    assert len(rows) == 1 + 4 * 3  # 4 cells x (2 folds + pooled)

    summary = json.loads((run_dir / "sweep_summary.json").read_text(encoding="utf-8"))
    assert summary["cache"] == {"hits": 2, "misses": 2}
    assert len(summary["selections"]) == 2


def test_gen_fixture_deterministic(tmp_path, runner):
    a = tmp_path / "a"
    b = tmp_path / "b"
    _run(runner, ["gen-fixture", "--out", str(a), "--seed", "7", "--no-vectors"])
    _run(runner, ["gen-fixture", "--out", str(b), "--seed", "7", "--no-vectors"])
    for name in ["corpus.jsonl", "graph.json", "gold.jsonl"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert not (a / "vectors.jsonl").exists()
    assert (a / "manifest_gen-fixture.json").exists()


def test_seed_flag_overrides_evaluation_seed(tmp_path, runner):
    run_dir = tmp_path / "run"
    config = _write_config(tmp_path, run_dir)
    for stage in STAGES[:-1]:
        _run(runner, [stage, "--config", str(config)])
    _run(runner, ["evaluate", "--config", str(config), "--seed", "99"])
    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["seed"] == 99
