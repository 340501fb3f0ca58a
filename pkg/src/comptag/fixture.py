"""Deterministic synthetic dataset at realistic scale: 22 competencies,
26 UVs, 430 resources, 432 gold fragments.

Construction guarantees the mock tagger's closed-world ceiling: every gold
fragment embeds each of its gold competencies' French labels verbatim, no
other competency's label or alias occurs in any gold fragment, and no gold
set contains a hierarchy ancestor/descendant pair. Same seed, same bytes.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from pathlib import Path

from . import jsonl
from .corpus import Fragment, FragmentConfig, Resource, fragment_resource, write_resources
from .evaluation import GoldAnnotation, gold_to_record
from .graph import (
    CompetencyEdge,
    CompetencyGraph,
    CompetencyNode,
    build_profiles,
    save_graph,
    validate_hierarchy,
)
from .retrieval import TextAnalyzer
from .textnorm import fold_text

N_COMPETENCIES = 22
N_COURSES = 26
N_RESOURCES = 430
N_GOLD_FRAGMENTS = 432
DEFAULT_SEED = 7
VECTOR_DIM = 48

_TOPICS: list[tuple[str, str]] = [
    ("Algèbre linéaire", "Linear algebra"),
    ("Calcul différentiel", "Differential calculus"),
    ("Probabilités discrètes", "Discrete probability"),
    ("Statistiques inférentielles", "Inferential statistics"),
    ("Optimisation convexe", "Convex optimization"),
    ("Apprentissage supervisé", "Supervised learning"),
    ("Régression linéaire", "Linear regression"),
    ("Régression logistique", "Logistic regression"),
    ("Arbres de décision", "Decision trees"),
    ("Forêts aléatoires", "Random forests"),
    ("Réseaux de neurones", "Neural networks"),
    ("Apprentissage profond", "Deep learning"),
    ("Traitement du langage naturel", "Natural language processing"),
    ("Recherche d'information", "Information retrieval"),
    ("Bases de données relationnelles", "Relational databases"),
    ("Algorithmique des graphes", "Graph algorithms"),
    ("Complexité algorithmique", "Computational complexity"),
    ("Programmation orientée objet", "Object-oriented programming"),
    ("Génie logiciel", "Software engineering"),
    ("Systèmes distribués", "Distributed systems"),
    ("Sécurité informatique", "Computer security"),
    ("Visualisation de données", "Data visualization"),
]

_ALIASES: dict[str, tuple[str, ...]] = {
    "c11": ("réseaux neuronaux",),
    "c18": ("programmation objet",),
    "c14": ("recherche documentaire",),
}

# (source, target, relation); hierarchy edges run child -> parent
_EDGES: list[tuple[str, str, str]] = [
    ("c07", "c06", "broader_narrower"),
    ("c08", "c06", "broader_narrower"),
    ("c09", "c06", "broader_narrower"),
    ("c10", "c09", "broader_narrower"),
    ("c12", "c11", "broader_narrower"),
    ("c22", "c04", "part_of"),
    ("c01", "c07", "prerequisite_of"),
    ("c02", "c05", "prerequisite_of"),
    ("c03", "c04", "prerequisite_of"),
    ("c03", "c08", "prerequisite_of"),
    ("c04", "c06", "prerequisite_of"),
    ("c05", "c11", "prerequisite_of"),
    ("c15", "c20", "prerequisite_of"),
    ("c16", "c20", "prerequisite_of"),
    ("c17", "c16", "prerequisite_of"),
    ("c18", "c19", "prerequisite_of"),
]

_FILLERS = [
    "Cette séance présente le plan de travail et les objectifs pédagogiques.",
    "Les étudiants remettent leur compte rendu avant la fin de la semaine.",
    "Un rappel des consignes figure dans le guide de l'UV.",
    "La permanence du jeudi répond aux questions sur le projet.",
    "Le barème détaillé est publié sur l'espace du cours.",
    "Chaque binôme prépare une courte restitution orale.",
    "Les supports de la séance précédente restent disponibles en ligne.",
    "Pensez à vérifier la configuration de votre environnement avant le TP.",
]

_GOLD_TEMPLATES = [
    "Ce chapitre étudie {label} à travers des exemples commentés.",
    "Cette partie introduit {label} et ses applications pratiques.",
    "Objectif : maîtriser {label} avant le contrôle final.",
]

_ITEM_TEMPLATES = [
    "Question : expliquez {label} avec vos propres mots.",
    "Exercice : appliquez {label} au jeu de données fourni.",
]

_SECTION_TITLES = ["Introduction", "Partie principale", "Synthèse", "Pour aller plus loin"]

_KINDS = ("page", "pdf_text", "url", "quiz", "assignment")
_KIND_WEIGHTS = (45, 20, 10, 15, 10)


@dataclass(frozen=True)
class FixtureData:
    graph: CompetencyGraph
    resources: list[Resource]
    fragments: list[Fragment]
    gold: list[GoldAnnotation]


def build_fixture_graph() -> CompetencyGraph:
    nodes = []
    for i, (label_fr, label_en) in enumerate(_TOPICS, start=1):
        cid = f"c{i:02d}"
        nodes.append(
            CompetencyNode(
                competency_id=cid,
                label_fr=label_fr,
                label_en=label_en,
                description=f"Étude de {label_fr.lower()} : définitions, propriétés et méthodes.",
                aliases=_ALIASES.get(cid, ()),
                examples=(f"Travaux dirigés : {label_fr.lower()}",) if i % 7 == 0 else (),
            )
        )
    g = CompetencyGraph(nodes, [CompetencyEdge(*e) for e in _EDGES])
    if validate_hierarchy(g):
        raise RuntimeError("fixture graph has cycles")
    return g


def _needles(g: CompetencyGraph, cid: str) -> list[str]:
    node = g.node(cid)
    needles = [node.label_fr]
    if node.label_en:
        needles.append(node.label_en)
    needles.extend(node.aliases)
    return needles


def _check_needle_disjointness(g: CompetencyGraph) -> None:
    folded = {
        cid: [fold_text(n) for n in _needles(g, cid)] for cid in g.competency_ids()
    }
    for cid_a, needles_a in folded.items():
        for cid_b, needles_b in folded.items():
            if cid_a == cid_b:
                continue
            for na in needles_a:
                for nb in needles_b:
                    if na in nb or nb in na:
                        raise RuntimeError(f"needle collision between {cid_a} and {cid_b}: {na!r}/{nb!r}")


def _antichain(g: CompetencyGraph, cids: list[str]) -> bool:
    for a in cids:
        ancestors = g.ancestors(a)
        if any(b in ancestors for b in cids if b != a):
            return False
    return True


def _sample_gold(rng: random.Random, g: CompetencyGraph, theme: list[str]) -> list[str]:
    for _ in range(20):
        size = 2 if len(theme) >= 2 and rng.random() < 0.25 else 1
        picked = sorted(rng.sample(theme, size))
        if _antichain(g, picked):
            return picked
    return [rng.choice(theme)]


def generate_fixture(seed: int = DEFAULT_SEED) -> FixtureData:
    """Build the full dataset in memory; raises if a construction guarantee fails."""
    rng = random.Random(seed)
    g = build_fixture_graph()
    _check_needle_disjointness(g)
    all_ids = g.competency_ids()
    config = FragmentConfig()

    resources: list[Resource] = []
    fragments: list[Fragment] = []
    gold: list[GoldAnnotation] = []

    for course_idx in range(N_COURSES):
        course_id = f"UV{course_idx + 1:02d}"
        theme = sorted(rng.sample(all_ids, rng.randint(4, 7)))
        n_resources = 17 if course_idx < 14 else 16
        for res_idx in range(n_resources):
            resource_id = f"{course_id}-r{res_idx:02d}"
            double_gold = course_idx < 2 and res_idx == 0
            kind = "page" if double_gold else rng.choices(_KINDS, weights=_KIND_WEIGHTS, k=1)[0]
            if kind in ("quiz", "assignment"):
                n_sections = rng.randint(2, 4)
            elif kind == "url":
                n_sections = 1
            else:
                n_sections = 3 if double_gold else rng.randint(1, 3)
            gold_sections = {0, 2} if double_gold else {rng.randrange(n_sections)}

            section_texts: list[str] = []
            section_golds: dict[int, list[str]] = {}
            for section_idx in range(n_sections):
                sentences: list[str] = []
                if section_idx in gold_sections:
                    picked = _sample_gold(rng, g, theme)
                    section_golds[section_idx] = picked
                    for cid in picked:
                        template = rng.choice(_ITEM_TEMPLATES if kind in ("quiz", "assignment") else _GOLD_TEMPLATES)
                        sentences.append(template.format(label=g.node(cid).label_fr))
                    sentences.append(rng.choice(_FILLERS))
                else:
                    sentences.append(rng.choice(_FILLERS))
                    sentences.append(rng.choice(_FILLERS))
                section_texts.append(" ".join(sentences))

            if kind in ("quiz", "assignment") or kind == "url":
                body = "\n\n".join(section_texts)
            else:
                blocks = [
                    f"## {_SECTION_TITLES[i % len(_SECTION_TITLES)]}\n\n{text}"
                    for i, text in enumerate(section_texts)
                ]
                body = "\n\n".join(blocks)

            resource = Resource(
                resource_id=resource_id,
                course_id=course_id,
                kind=kind,
                title=f"{course_id} module {res_idx + 1}",
                body=body,
                url=f"https://example.edu/{course_id.lower()}/{res_idx:02d}" if kind == "url" else None,
            )
            resources.append(resource)

            resource_fragments = fragment_resource(resource, config)
            if len(resource_fragments) != n_sections:
                raise RuntimeError(
                    f"{resource_id}: expected {n_sections} fragments, got {len(resource_fragments)}"
                )
            fragments.extend(resource_fragments)
            for section_idx, fragment in enumerate(resource_fragments):
                _check_fragment_needles(g, fragment.text, section_golds.get(section_idx, []))
            for section_idx, picked in sorted(section_golds.items()):
                gold.append(
                    GoldAnnotation(
                        fragment_id=resource_fragments[section_idx].fragment_id,
                        resource_id=resource_id,
                        course_id=course_id,
                        gold=frozenset(picked),
                    )
                )

    if len(resources) != N_RESOURCES:
        raise RuntimeError(f"expected {N_RESOURCES} resources, built {len(resources)}")
    if len(gold) != N_GOLD_FRAGMENTS:
        raise RuntimeError(f"expected {N_GOLD_FRAGMENTS} gold fragments, built {len(gold)}")
    return FixtureData(g, resources, fragments, gold)


def _check_fragment_needles(g: CompetencyGraph, text: str, gold_ids: list[str]) -> None:
    folded = fold_text(text)
    for cid in gold_ids:
        if fold_text(g.node(cid).label_fr) not in folded:
            raise RuntimeError(f"gold label of {cid} not embedded")
    for cid in g.competency_ids():
        if cid in gold_ids:
            continue
        for needle in _needles(g, cid):
            if fold_text(needle) in folded:
                raise RuntimeError(f"stray needle of {cid} in a fragment not gold for it")


def _hashed_vector(text: str, dim: int = VECTOR_DIM) -> list[int]:
    vector = [0] * dim
    for token in TextAnalyzer()(text):
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        vector[int.from_bytes(digest[:4], "big") % dim] += 1
    return vector


def write_fixture(out_dir: str | Path, seed: int = DEFAULT_SEED, with_vectors: bool = True) -> dict[str, str]:
    """Emit corpus.jsonl, graph.json, gold.jsonl (and vectors.jsonl) into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_fixture(seed)
    paths = {
        "corpus": str(out / "corpus.jsonl"),
        "graph": str(out / "graph.json"),
        "gold": str(out / "gold.jsonl"),
    }
    write_resources(paths["corpus"], data.resources)
    save_graph(paths["graph"], data.graph)
    jsonl.write_records(paths["gold"], (gold_to_record(a) for a in data.gold))
    if with_vectors:
        paths["vectors"] = str(out / "vectors.jsonl")
        records = [
            {"id": p.competency_id, "vector": _hashed_vector(p.profile_text)}
            for p in build_profiles(data.graph)
        ]
        records.extend(
            {"id": f.fragment_id, "vector": _hashed_vector(f.text)} for f in data.fragments
        )
        jsonl.write_records(paths["vectors"], records)
    return paths
