"""Competency alignment for course resources: fragment learning materials,
retrieve candidate competencies, tag with evidence spans via an LLM-style
provider, reconcile against the competency graph, aggregate to resource
level, and evaluate under UV-grouped cross-validation."""

from .aggregate import AggregationConfig, ResourceScore, map_resource, score_resource
from .config import RunConfig, load_config
from .corpus import Fragment, FragmentConfig, Resource, fragment_resource, ingest_resources
from .errors import (
    CompTagError,
    Malformed,
    MalformedReason,
    MalformedRecord,
    MissingCache,
    MissingStageInput,
    TooFewGroups,
    UnknownCompetency,
)
from .evaluation import (
    FoldSpec,
    GoldAnnotation,
    MetricsReport,
    compute_report,
    derive_resource_gold,
    load_gold,
    macro_f1,
    make_folds,
    micro_f1,
    mrr,
    span_valid,
)
from .fixture import generate_fixture, write_fixture
from .graph import (
    CompetencyEdge,
    CompetencyGraph,
    CompetencyNode,
    CompetencyProfile,
    build_profile,
    build_profiles,
    load_graph,
    validate_hierarchy,
)
from .pipeline import (
    PredictionCache,
    SweepReport,
    TaggingRun,
    aggregate_resources,
    flags_for_resources,
    retrieve_candidates,
    run_tagging,
    sweep_grid,
)
from .reconcile import (
    CoherenceFlag,
    ReconciledSet,
    coherence_flags,
    dedup,
    granularity_filter,
    reconcile_fragment,
)
from .retrieval import (
    CandidateSet,
    ProfileIndex,
    RankedList,
    TextAnalyzer,
    VectorStore,
    bm25_rank,
    cosine_rank,
    rrf_fuse,
    topk_candidates,
)
from .tagger import (
    HttpProvider,
    MockProvider,
    ReplayProvider,
    TagPrediction,
    TagRequest,
    build_prompt,
    constrained_request,
    parse_response,
    tag_all,
    tag_fragment,
)

from .config import package_version as _package_version

__version__ = _package_version()
