"""Competency graph: loading, validation, traversal, and retrieval profiles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import (
    DuplicateEdge,
    MalformedRecord,
    SelfLoop,
    UnknownCompetency,
    UnknownEndpoint,
)

RELATIONS = ("broader_narrower", "part_of", "prerequisite_of")

# broader_narrower and part_of edges both run child -> parent and are treated
# identically by hierarchy traversals.
HIERARCHY_RELATIONS = ("broader_narrower", "part_of")


@dataclass(frozen=True)
class CompetencyNode:
    competency_id: str
    label_fr: str
    label_en: str | None = None
    description: str = ""
    aliases: tuple[str, ...] = ()
    examples: tuple[str, ...] = ()

    def __post_init__(self):
        # aliases dedup case-insensitively, first occurrence wins
        seen: set[str] = set()
        unique = []
        for alias in self.aliases:
            key = alias.casefold()
            if key not in seen:
                seen.add(key)
                unique.append(alias)
        object.__setattr__(self, "aliases", tuple(unique))
        object.__setattr__(self, "examples", tuple(self.examples))


@dataclass(frozen=True)
class CompetencyEdge:
    source: str
    target: str
    relation: str


@dataclass(frozen=True)
class Violation:
    relation_group: str  # "hierarchy" or "prerequisite"
    cycle: tuple[str, ...]  # member competency ids, ascending


@dataclass(frozen=True)
class CompetencyProfile:
    competency_id: str
    profile_text: str


class CompetencyGraph:
    def __init__(self, nodes: Iterable[CompetencyNode], edges: Iterable[CompetencyEdge]):
        self.nodes: dict[str, CompetencyNode] = {}
        for node in nodes:
            if node.competency_id in self.nodes:
                raise MalformedRecord(1, f"duplicate node id {node.competency_id!r}")
            self.nodes[node.competency_id] = node
        self.edges: list[CompetencyEdge] = []
        seen: set[tuple[str, str, str]] = set()
        for edge in edges:
            if edge.relation not in RELATIONS:
                raise MalformedRecord(1, f"unknown relation {edge.relation!r}")
            if edge.source == edge.target:
                raise SelfLoop(f"{edge.source} -> {edge.target} ({edge.relation})")
            for endpoint in (edge.source, edge.target):
                if endpoint not in self.nodes:
                    raise UnknownEndpoint(endpoint)
            key = (edge.source, edge.target, edge.relation)
            if key in seen:
                raise DuplicateEdge(str(key))
            seen.add(key)
            self.edges.append(edge)
        # adjacency by relation group, both directions
        self._up: dict[str, list[str]] = {cid: [] for cid in self.nodes}  # child -> parents
        self._down: dict[str, list[str]] = {cid: [] for cid in self.nodes}
        self._prereq_of: dict[str, list[str]] = {cid: [] for cid in self.nodes}  # c -> its prerequisites
        self._dependents: dict[str, list[str]] = {cid: [] for cid in self.nodes}
        for edge in self.edges:
            if edge.relation in HIERARCHY_RELATIONS:
                self._up[edge.source].append(edge.target)
                self._down[edge.target].append(edge.source)
            else:
                self._prereq_of[edge.target].append(edge.source)
                self._dependents[edge.source].append(edge.target)

    def __contains__(self, competency_id: str) -> bool:
        return competency_id in self.nodes

    def node(self, competency_id: str) -> CompetencyNode:
        try:
            return self.nodes[competency_id]
        except KeyError:
            raise UnknownCompetency(competency_id) from None

    def competency_ids(self) -> list[str]:
        return sorted(self.nodes)

    def parents(self, competency_id: str) -> list[str]:
        self.node(competency_id)
        return sorted(set(self._up[competency_id]))

    def children(self, competency_id: str) -> list[str]:
        self.node(competency_id)
        return sorted(set(self._down[competency_id]))

    def direct_prerequisites(self, competency_id: str) -> list[str]:
        self.node(competency_id)
        return sorted(set(self._prereq_of[competency_id]))

    def ancestors(self, competency_id: str) -> set[str]:
        """Transitive hierarchy closure following child -> parent edges."""
        return self._reach(competency_id, self._up)

    def descendants(self, competency_id: str) -> set[str]:
        return self._reach(competency_id, self._down)

    def prerequisites_of(self, competency_id: str) -> set[str]:
        """Direct and transitive prerequisites."""
        return self._reach(competency_id, self._prereq_of)

    def _reach(self, start: str, adjacency: dict[str, list[str]]) -> set[str]:
        self.node(start)
        seen: set[str] = set()
        stack = list(adjacency[start])
        while stack:
            current = stack.pop()
            if current in seen:
                continue
            seen.add(current)
            stack.extend(adjacency[current])
        seen.discard(start)
        return seen


def load_graph(path: str | Path) -> CompetencyGraph:
    """Load and validate a competency graph from its JSON file."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return graph_from_dict(payload)


def graph_from_dict(payload: dict) -> CompetencyGraph:
    if not isinstance(payload, dict) or "nodes" not in payload:
        raise MalformedRecord(1, "graph file must be an object with 'nodes' and 'edges'")
    nodes = [_node_from_record(record) for record in payload.get("nodes", [])]
    edges = [
        CompetencyEdge(record["source"], record["target"], _checked_relation(record))
        for record in payload.get("edges", [])
    ]
    return CompetencyGraph(nodes, edges)


def graph_to_dict(g: CompetencyGraph) -> dict:
    return {
        "nodes": [
            {
                "competency_id": n.competency_id,
                "label_fr": n.label_fr,
                "label_en": n.label_en,
                "description": n.description,
                "aliases": list(n.aliases),
                "examples": list(n.examples),
            }
            for n in g.nodes.values()
        ],
        "edges": [
            {"source": e.source, "target": e.target, "relation": e.relation}
            for e in g.edges
        ],
    }


def save_graph(path: str | Path, g: CompetencyGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(g), fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def _checked_relation(record: dict) -> str:
    relation = record.get("relation")
    if relation not in RELATIONS:
        raise MalformedRecord(1, f"unknown relation {relation!r}")
    return relation


def _node_from_record(record: dict) -> CompetencyNode:
    competency_id = record.get("competency_id")
    if not competency_id or not isinstance(competency_id, str):
        raise MalformedRecord(1, "competency_id must be a non-empty string")
    label_fr = record.get("label_fr")
    if not label_fr or not isinstance(label_fr, str):
        raise MalformedRecord(1, f"node {competency_id}: label_fr must be non-empty")
    # aliases deduplicated case-insensitively, first occurrence wins
    aliases: list[str] = []
    seen_folds: set[str] = set()
    for alias in record.get("aliases", ()):
        fold = alias.casefold()
        if fold not in seen_folds:
            seen_folds.add(fold)
            aliases.append(alias)
    return CompetencyNode(
        competency_id=competency_id,
        label_fr=label_fr,
        label_en=record.get("label_en"),
        description=record.get("description", "") or "",
        aliases=tuple(aliases),
        examples=tuple(record.get("examples", ())),
    )


def validate_hierarchy(g: CompetencyGraph) -> list[Violation]:
    """Report cycles per relation subgraph; empty iff both subgraphs are DAGs.

    Each strongly connected component with more than one node is reported as
    one violation (self-loops are rejected at load time).
    """
    violations: list[Violation] = []
    for group, relations in (("hierarchy", HIERARCHY_RELATIONS), ("prerequisite", ("prerequisite_of",))):
        adjacency: dict[str, list[str]] = {cid: [] for cid in g.nodes}
        for edge in g.edges:
            if edge.relation in relations:
                adjacency[edge.source].append(edge.target)
        for component in _strongly_connected(adjacency):
            if len(component) > 1:
                violations.append(Violation(group, tuple(sorted(component))))
    return violations


def _strongly_connected(adjacency: dict[str, list[str]]) -> list[list[str]]:
    """Iterative Tarjan over a string-keyed adjacency map."""
    index: dict[str, int] = {}
    lowlink: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    components: list[list[str]] = []
    counter = 0

    for root in sorted(adjacency):
        if root in index:
            continue
        work: list[tuple[str, int]] = [(root, 0)]
        while work:
            node, child_idx = work.pop()
            if child_idx == 0:
                index[node] = lowlink[node] = counter
                counter += 1
                stack.append(node)
                on_stack.add(node)
            recurse = False
            neighbors = adjacency[node]
            for i in range(child_idx, len(neighbors)):
                neighbor = neighbors[i]
                if neighbor not in index:
                    work.append((node, i + 1))
                    work.append((neighbor, 0))
                    recurse = True
                    break
                if neighbor in on_stack:
                    lowlink[node] = min(lowlink[node], index[neighbor])
            if recurse:
                continue
            if lowlink[node] == index[node]:
                component = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    component.append(member)
                    if member == node:
                        break
                components.append(component)
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[node])
    return components


def build_profile(g: CompetencyGraph, competency_id: str) -> CompetencyProfile:
    """Retrieval text for one competency: its own fields plus one-hop context.

    Field order is fixed (labels, aliases, description, examples, parents,
    children, prerequisites); absent fields are skipped without placeholders.
    """
    node = g.node(competency_id)
    parts: list[str] = [node.label_fr]
    if node.label_en:
        parts.append(node.label_en)
    parts.extend(node.aliases)
    if node.description:
        parts.append(node.description)
    parts.extend(node.examples)
    for neighbor_ids in (
        g.parents(competency_id),
        g.children(competency_id),
        g.direct_prerequisites(competency_id),
    ):
        parts.extend(g.nodes[n].label_fr for n in neighbor_ids)
    return CompetencyProfile(competency_id, "\n".join(parts))


def build_profiles(g: CompetencyGraph) -> list[CompetencyProfile]:
    return [build_profile(g, cid) for cid in g.competency_ids()]
