import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comptag.errors import (
    DimensionMismatch,
    EmptyProfileSet,
    FragmentMismatch,
    MalformedRecord,
    MissingVector,
)
from comptag.graph import CompetencyProfile
from comptag.retrieval import (
    BM25_B,
    BM25_K1,
    RRF_K,
    CandidateSet,
    ProfileIndex,
    RankedList,
    TextAnalyzer,
    VectorStore,
    bm25_rank,
    cosine_rank,
    load_pair_scores,
    ranked,
    rank_to_multilabel,
    rrf_fuse,
    topk_candidates,
)


def profiles(**texts):
    return [CompetencyProfile(cid, text) for cid, text in sorted(texts.items())]


HAND = profiles(
    p1="regression regression linear",
    p2="logistic regression classifier model",
    p3="probability theory",
)


def test_analyzer_folds_accents_and_case():
    assert TextAnalyzer()("Régression Linéaire") == ["regression", "lineaire"]


def test_analyzer_splits_non_alphanumeric_and_underscore():
    assert TextAnalyzer()("foo_bar-baz  qux42") == ["foo", "bar", "baz", "qux42"]


def test_analyzer_drops_short_tokens():
    assert TextAnalyzer()("a de la xy") == ["de", "la", "xy"]


def test_index_statistics():
    index = ProfileIndex(HAND)
    assert index.n_docs == 3
    assert index.avgdl == pytest.approx(3.0)
    assert index.df["regression"] == 2
    assert index.df["linear"] == 1


def test_index_single_profile():
    index = ProfileIndex(profiles(p="Probability"))
    assert index.n_docs == 1
    assert index.df["probability"] == 1


def test_index_rejects_empty_and_duplicates():
    with pytest.raises(EmptyProfileSet):
        ProfileIndex([])
    with pytest.raises(ValueError):
        ProfileIndex([CompetencyProfile("a", "x"), CompetencyProfile("a", "y")])


def test_bm25_matches_hand_formula():
    rl = bm25_rank(ProfileIndex(HAND), "f1", "regression")
    scores = dict(rl.items)
    idf = math.log(1 + (3 - 2 + 0.5) / (2 + 0.5))

    def term(tf, dl):
        return tf * (BM25_K1 + 1) / (tf + BM25_K1 * (1 - BM25_B + BM25_B * dl / 3.0))

    assert scores["p1"] == pytest.approx(idf * term(2, 3), abs=1e-9)
    assert scores["p2"] == pytest.approx(idf * term(1, 4), abs=1e-9)
    # frozen literals guard against formula drift on both sides
    assert scores["p1"] == pytest.approx(0.6462549902128865, abs=1e-9)
    assert scores["p2"] == pytest.approx(0.41360319373624743, abs=1e-9)
    assert rl.ids() == ["p1", "p2"]


def test_bm25_zero_score_profiles_omitted():
    rl = bm25_rank(ProfileIndex(HAND), "f1", "probability")
    assert rl.ids() == ["p3"]


def test_bm25_unique_term_ranks_first():
    rl = bm25_rank(ProfileIndex(HAND), "f1", "linear regression")
    assert rl.ids()[0] == "p1"


def test_bm25_no_indexed_terms_gives_empty_list():
    rl = bm25_rank(ProfileIndex(HAND), "f1", "zzz qqq")
    assert rl.items == ()
    assert bm25_rank(ProfileIndex(HAND), "f1", "").items == ()


def test_bm25_query_is_a_multiset():
    index = ProfileIndex(HAND)
    single = dict(bm25_rank(index, "f", "regression").items)
    double = dict(bm25_rank(index, "f", "regression regression").items)
    assert double["p1"] == pytest.approx(2 * single["p1"])


def test_bm25_tie_breaks_ascending_id():
    index = ProfileIndex(profiles(z="alpha beta", a="alpha beta"))
    assert bm25_rank(index, "f", "alpha").ids() == ["a", "z"]


def test_bm25_accented_query_matches_plain_profile():
    index = ProfileIndex(profiles(p="regression lineaire"))
    assert bm25_rank(index, "f", "Régression Linéaire").ids() == ["p"]


@settings(max_examples=100, deadline=None)
@given(
    tf_low=st.integers(min_value=1, max_value=20),
    bump=st.integers(min_value=1, max_value=20),
    extra=st.integers(min_value=0, max_value=30),
)
def test_bm25_tf_monotonicity(tf_low, bump, extra):
    pad = " ".join(["pad"] * extra)
    low = ProfileIndex(profiles(d=" ".join(["term"] * tf_low + [pad]), o="other words here"))
    high = ProfileIndex(profiles(d=" ".join(["term"] * (tf_low + bump) + [pad]), o="other words here"))
    s_low = dict(bm25_rank(low, "f", "term").items)["d"]
    s_high = dict(bm25_rank(high, "f", "term").items)["d"]
    assert s_high >= s_low - 1e-12


def test_idf_nonnegative_even_when_term_is_everywhere():
    index = ProfileIndex(profiles(a="common", b="common", c="common"))
    scores = dict(bm25_rank(index, "f", "common").items)
    assert all(s > 0 for s in scores.values())


def test_cosine_identical_vector_scores_one():
    store = VectorStore({"f1": [1.0, 2.0], "c1": [1.0, 2.0], "c2": [-2.0, 1.0]}, ["c1", "c2"])
    rl = cosine_rank(store, "f1")
    scores = dict(rl.items)
    assert scores["c1"] == pytest.approx(1.0)
    assert scores["c2"] == pytest.approx(0.0, abs=1e-12)
    assert rl.ids()[0] == "c1"


def test_cosine_zero_vector_scores_zero():
    store = VectorStore({"f1": [0.0, 0.0], "c1": [1.0, 0.0]}, ["c1"])
    assert dict(cosine_rank(store, "f1").items)["c1"] == 0.0


def test_cosine_matches_numpy_brute_force():
    rng = np.random.default_rng(5)
    vectors = {name: rng.normal(size=8).tolist() for name in ["f", "c1", "c2", "c3", "c4"]}
    store = VectorStore(vectors, ["c1", "c2", "c3", "c4"])
    got = dict(cosine_rank(store, "f").items)
    fv = np.array(vectors["f"])
    for cid in ["c1", "c2", "c3", "c4"]:
        cv = np.array(vectors[cid])
        expect = float(fv @ cv / (np.linalg.norm(fv) * np.linalg.norm(cv)))
        assert got[cid] == pytest.approx(expect, abs=1e-12)


def test_vector_store_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        VectorStore({"a": [1.0, 2.0], "b": [1.0]}, ["a"])


def test_vector_store_missing_vector():
    store = VectorStore({"c1": [1.0]}, ["c1"])
    with pytest.raises(MissingVector):
        cosine_rank(store, "nope")


def test_vector_store_load(tmp_path):
    path = tmp_path / "vectors.jsonl"
    path.write_text(
        '{"id": "c1", "vector": [1.0, 0.0]}\n{"id": "f1", "vector": [0.5, 0.5]}\n',
        encoding="utf-8",
    )
    store = VectorStore.load(path, ["c1"])
    assert cosine_rank(store, "f1").ids() == ["c1"]


def test_rrf_rank_one_in_both_lists():
    lists = [
        RankedList("f", (("c", 2.0), ("d", 1.0))),
        RankedList("f", (("c", 9.0), ("e", 8.0))),
    ]
    scores = dict(rrf_fuse(lists).items)
    assert scores["c"] == pytest.approx(2 / 61, abs=1e-12)
    assert scores["d"] == pytest.approx(1 / 62, abs=1e-12)


def test_rrf_single_list_membership_at_rank_two():
    lists = [
        RankedList("f", (("a", 2.0), ("c", 1.0))),
        RankedList("f", (("a", 5.0),)),
    ]
    assert dict(rrf_fuse(lists).items)["c"] == pytest.approx(1 / 62, abs=1e-12)


def test_rrf_requires_two_lists():
    with pytest.raises(ValueError):
        rrf_fuse([RankedList("f", (("a", 1.0),))])


def test_rrf_fragment_mismatch():
    with pytest.raises(FragmentMismatch):
        rrf_fuse([RankedList("f1", ()), RankedList("f2", ())])


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_rrf_brute_force_and_permutation_invariance(data):
    ids = [f"c{i}" for i in range(6)]
    n_lists = data.draw(st.integers(min_value=2, max_value=4))
    lists = []
    for _ in range(n_lists):
        members = data.draw(st.lists(st.sampled_from(ids), unique=True, max_size=6))
        lists.append(RankedList("f", tuple((cid, float(10 - r)) for r, cid in enumerate(members))))
    fused = rrf_fuse(lists)
    expect: dict[str, float] = {}
    for rl in lists:
        for rank, cid in enumerate(rl.ids(), start=1):
            expect[cid] = expect.get(cid, 0.0) + 1.0 / (RRF_K + rank)
    assert dict(fused.items) == pytest.approx(expect)
    perm = data.draw(st.permutations(lists))
    assert rrf_fuse(perm).items == fused.items


def test_topk_prefix_property():
    rl = ranked("f", {f"c{i}": float(20 - i) for i in range(10)})
    five = topk_candidates(rl, 5)
    assert len(five.candidates) == 5
    assert five.candidates == topk_candidates(rl, 8).candidates[:5]
    assert topk_candidates(rl, 20).candidates == rl.items
    with pytest.raises(ValueError):
        topk_candidates(rl, 0)


def test_rank_to_multilabel():
    rl = ranked("f", {"a": 3.0, "b": 2.0, "c": 1.0})
    assert rank_to_multilabel(rl, 2) == {"a", "b"}
    assert rank_to_multilabel(rl, 10) == {"a", "b", "c"}


def test_ranked_rejects_non_finite():
    with pytest.raises(ValueError):
        ranked("f", {"a": float("nan")})


def test_load_pair_scores(tmp_path):
    path = tmp_path / "pairs.jsonl"
    path.write_text(
        '{"fragment_id": "f1", "competency_id": "a", "score": 1.5}\n'
        '{"fragment_id": "f1", "competency_id": "b", "score": 2.5}\n',
        encoding="utf-8",
    )
    by_fragment = load_pair_scores(path)
    assert by_fragment["f1"].ids() == ["b", "a"]


def test_load_pair_scores_duplicate_pair(tmp_path):
    path = tmp_path / "pairs.jsonl"
    path.write_text(
        '{"fragment_id": "f1", "competency_id": "a", "score": 1.0}\n'
        '{"fragment_id": "f1", "competency_id": "a", "score": 2.0}\n',
        encoding="utf-8",
    )
    with pytest.raises(MalformedRecord):
        load_pair_scores(path)
