import pytest

from comptag.graph import CompetencyEdge, CompetencyGraph, CompetencyNode
from comptag.tagger import TagPrediction


@pytest.fixture
def ml101():
    """Five-competency course graph with prerequisite links only."""
    nodes = [
        CompetencyNode("c1", "Linear Algebra"),
        CompetencyNode("c2", "Probability"),
        CompetencyNode("c3", "Supervised Learning"),
        CompetencyNode("c4", "Linear Regression"),
        CompetencyNode("c5", "Logistic Regression / Classification"),
    ]
    edges = [
        CompetencyEdge("c1", "c4", "prerequisite_of"),
        CompetencyEdge("c2", "c3", "prerequisite_of"),
        CompetencyEdge("c3", "c4", "prerequisite_of"),
        CompetencyEdge("c3", "c5", "prerequisite_of"),
    ]
    return CompetencyGraph(nodes, edges)


@pytest.fixture
def chain3():
    """a <- b <- c hierarchy chain (c narrowest), stored child -> parent."""
    nodes = [CompetencyNode("a", "A"), CompetencyNode("b", "B"), CompetencyNode("c", "C")]
    edges = [
        CompetencyEdge("b", "a", "broader_narrower"),
        CompetencyEdge("c", "b", "broader_narrower"),
    ]
    return CompetencyGraph(nodes, edges)


@pytest.fixture
def make_pred():
    def _make(cid, confidence=0.8, start=0, end=1, fragment_id="f1", text="x"):
        return TagPrediction(fragment_id, cid, confidence, start, end, text)

    return _make
