"""Run configuration (TOML or JSON) and the reproducibility manifest.

Every defaulted value is echoed back out through to_dict(), so manifests
record the full effective configuration, not just the overridden keys.
Manifests carry no timestamps: identical inputs give identical bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MissingStageInput

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml


def package_version() -> str:
    try:
        from importlib.metadata import version

        return version("comptag")
    except Exception:
        return "0+unknown"


@dataclass
class PathsConfig:
    corpus: str = ""
    graph: str = ""
    gold: str = ""
    vectors: str = ""
    pair_scores: str = ""
    out_dir: str = "runs"


@dataclass
class FragmentationConfig:
    max_tokens: int = 512


@dataclass
class RetrievalConfig:
    method: str = "bm25"  # bm25 | rrf | pair_scores
    k: int = 20
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    k_rrf: int = 60

    def __post_init__(self):
        if self.method not in ("bm25", "rrf", "pair_scores"):
            raise ValueError(f"unknown retrieval method {self.method!r}")
        if self.k < 1:
            raise ValueError("retrieval.k must be >= 1")


@dataclass
class TaggerConfig:
    mode: str = "constrained"  # constrained | zero_shot | few_shot
    provider: str = "mock"  # mock | live | replay
    model: str = "gpt-4o-mini"
    retries: int = 1
    n_demonstrations: int = 3
    language: str = "en"
    max_workers: int = 1
    replay_log: str = ""

    def __post_init__(self):
        if self.mode not in ("constrained", "zero_shot", "few_shot"):
            raise ValueError(f"unknown tagger mode {self.mode!r}")
        if self.provider not in ("mock", "live", "replay"):
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.language not in ("en", "fr"):
            raise ValueError(f"unknown language {self.language!r}")


@dataclass
class ReconcileConfig:
    policy: str = "most_specific"  # most_specific | most_general
    transitive_flags: bool = False

    def __post_init__(self):
        if self.policy not in ("most_specific", "most_general"):
            raise ValueError(f"unknown reconciliation policy {self.policy!r}")


@dataclass
class AggregationSection:
    agg: str = "max"  # max | weighted_mean | weighted_sum
    weights: dict = field(default_factory=dict)  # resource kind -> weight
    tau: float = 0.4
    topk: int | None = None
    tau_prefilter: bool = False


@dataclass
class EvaluationConfig:
    n_folds: int = 5
    seed: int = 13
    k_grid: list = field(default_factory=lambda: [5, 10, 15, 20])
    tau_grid: list = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6])


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    fragmentation: FragmentationConfig = field(default_factory=FragmentationConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    tagger: TaggerConfig = field(default_factory=TaggerConfig)
    reconcile: ReconcileConfig = field(default_factory=ReconcileConfig)
    aggregation: AggregationSection = field(default_factory=AggregationSection)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "paths": PathsConfig,
    "fragmentation": FragmentationConfig,
    "retrieval": RetrievalConfig,
    "tagger": TaggerConfig,
    "reconcile": ReconcileConfig,
    "aggregation": AggregationSection,
    "evaluation": EvaluationConfig,
}


def _build_section(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ValueError(f"section {section!r} must be a table/object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(unknown)}")
    kwargs = {
        name: _build_section(cls, data.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    """Parse a TOML (.toml) or JSON (.json) config file into a RunConfig."""
    p = Path(path)
    if not p.is_file():
        raise MissingStageInput(f"config file not found: {p}")
    if p.suffix == ".toml":
        with open(p, "rb") as fh:
            data = _toml.load(fh)
    elif p.suffix == ".json":
        with open(p, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        raise ValueError(f"config must be .toml or .json, got {p.suffix!r}")
    return config_from_dict(data)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def require_inputs(inputs: dict[str, str | Path]) -> None:
    """Raise MissingStageInput naming the first stage input that is absent."""
    for name, path in inputs.items():
        if not path or not Path(path).is_file():
            raise MissingStageInput(f"{name} input not found: {path or '(unset)'}")


def write_manifest(
    path: str | Path,
    *,
    command: str,
    config: RunConfig | None,
    seed: int | None,
    inputs: dict[str, str | Path],
    outputs: dict[str, str | Path],
) -> dict:
    """Record everything needed to reproduce the run: effective config with
    all defaults expanded, seed, versions, and sha256 digests of the inputs."""
    manifest = {
        "command": command,
        "seed": seed,
        "package": {"name": "comptag", "version": package_version()},
        "python": platform.python_version(),
        "config": config.to_dict() if config is not None else None,
        "inputs": {
            name: {"path": str(p), "sha256": file_digest(p)} for name, p in sorted(inputs.items())
        },
        "outputs": {name: str(p) for name, p in sorted(outputs.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    return manifest
