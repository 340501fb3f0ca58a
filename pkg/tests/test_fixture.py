import hashlib
import json
from pathlib import Path

import pytest

from comptag.fixture import (
    DEFAULT_SEED,
    N_COMPETENCIES,
    N_COURSES,
    N_GOLD_FRAGMENTS,
    N_RESOURCES,
    VECTOR_DIM,
    build_fixture_graph,
    generate_fixture,
    write_fixture,
)
from comptag.graph import build_profiles, validate_hierarchy
from comptag.textnorm import fold_text as fold


@pytest.fixture(scope="module")
def data():
    return generate_fixture(DEFAULT_SEED)


def test_exact_population_counts(data):
    assert len(data.graph.competency_ids()) == N_COMPETENCIES == 22
    assert len({r.course_id for r in data.resources}) == N_COURSES == 26
    assert len(data.resources) == N_RESOURCES == 430
    assert len(data.gold) == N_GOLD_FRAGMENTS == 432


def test_gold_covers_every_resource(data):
    assert {a.resource_id for a in data.gold} == {r.resource_id for r in data.resources}
    # two resources carry a second annotated fragment
    per_resource = {}
    for a in data.gold:
        per_resource[a.resource_id] = per_resource.get(a.resource_id, 0) + 1
    assert sorted(per_resource.values())[-3:] == [1, 2, 2]


def test_gold_fragments_exist_and_ids_unique(data):
    fragment_ids = {f.fragment_id for f in data.fragments}
    gold_ids = [a.fragment_id for a in data.gold]
    assert len(set(gold_ids)) == len(gold_ids)
    assert set(gold_ids) <= fragment_ids


def test_graph_is_acyclic_and_violation_free(data):
    assert validate_hierarchy(data.graph) == []


def test_labels_pairwise_non_substring_after_folding():
    g = build_fixture_graph()
    needles = []
    for cid in g.competency_ids():
        node = g.node(cid)
        needles.extend(fold(t) for t in (node.label_fr, node.label_en, *node.aliases) if t)
    for i, a in enumerate(needles):
        for j, b in enumerate(needles):
            if i != j:
                assert a not in b, (a, b)


def test_gold_labels_embedded_verbatim(data):
    g = data.graph
    texts = {f.fragment_id: f.text for f in data.fragments}
    for annotation in data.gold:
        folded = fold(texts[annotation.fragment_id])
        for cid in annotation.gold:
            node = g.node(cid)
            candidates = [fold(t) for t in (node.label_fr, node.label_en, *node.aliases) if t]
            assert any(needle in folded for needle in candidates), (
                annotation.fragment_id,
                cid,
            )


def test_no_stray_needles_anywhere(data):
    g = data.graph
    gold_by_fragment = {a.fragment_id: a.gold for a in data.gold}
    needles = {}
    for cid in g.competency_ids():
        node = g.node(cid)
        needles[cid] = [fold(t) for t in (node.label_fr, node.label_en, *node.aliases) if t]
    for fragment in data.fragments:
        folded = fold(fragment.text)
        allowed = gold_by_fragment.get(fragment.fragment_id, frozenset())
        for cid, cid_needles in needles.items():
            if cid in allowed:
                continue
            for needle in cid_needles:
                assert needle not in folded, (fragment.fragment_id, cid, needle)


def test_gold_sets_are_antichains(data):
    g = data.graph
    for annotation in data.gold:
        ids = sorted(annotation.gold)
        for cid in ids:
            related = g.ancestors(cid) | g.descendants(cid)
            assert not (related & set(ids)), (annotation.fragment_id, ids)


def test_every_competency_appears_in_gold(data):
    used = set()
    for annotation in data.gold:
        used.update(annotation.gold)
    assert used == set(data.graph.competency_ids())


def test_resource_kind_mix(data):
    kinds = {r.kind for r in data.resources}
    assert kinds == {"page", "pdf_text", "quiz", "assignment", "url"}


def test_course_sizes(data):
    sizes = {}
    for r in data.resources:
        sizes[r.course_id] = sizes.get(r.course_id, 0) + 1
    assert sorted(sizes.values()) == [16] * 12 + [17] * 14


def _digest_dir(path: Path) -> dict[str, str]:
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir())
    }


def test_write_fixture_byte_identical_per_seed(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    paths_a = write_fixture(a, seed=DEFAULT_SEED)
    paths_b = write_fixture(b, seed=DEFAULT_SEED)
    assert set(paths_a) == {"corpus", "graph", "gold", "vectors"}
    assert _digest_dir(a) == _digest_dir(b)
    c = tmp_path / "c"
    write_fixture(c, seed=DEFAULT_SEED + 1)
    assert _digest_dir(a) != _digest_dir(c)


def test_vectors_cover_profiles_and_fragments(tmp_path):
    paths = write_fixture(tmp_path / "fx", seed=DEFAULT_SEED)
    data = generate_fixture(DEFAULT_SEED)
    ids = set()
    with open(paths["vectors"], encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            assert len(record["vector"]) == VECTOR_DIM
            ids.add(record["id"])
    expected = {p.competency_id for p in build_profiles(data.graph)}
    expected.update(f.fragment_id for f in data.fragments)
    assert ids == expected


def test_without_vectors(tmp_path):
    paths = write_fixture(tmp_path / "fx", seed=DEFAULT_SEED, with_vectors=False)
    assert "vectors" not in paths
    assert not (tmp_path / "fx" / "vectors.jsonl").exists()
