"""Candidate retrieval over competency profiles: BM25, cosine, and RRF fusion."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import jsonl
from .errors import (
    DimensionMismatch,
    EmptyProfileSet,
    FragmentMismatch,
    MalformedRecord,
    MissingVector,
)
from .graph import CompetencyProfile
from .textnorm import word_tokens

BM25_K1 = 1.2
BM25_B = 0.75
RRF_K = 60


@dataclass(frozen=True)
class TextAnalyzer:
    """Lowercases, strips diacritics, splits on non-alphanumeric runs, and
    drops tokens shorter than min_token_len (bilingual-corpus default 2)."""

    min_token_len: int = 2

    def __call__(self, text: str) -> list[str]:
        return [t for t in word_tokens(text) if len(t) >= self.min_token_len]


@dataclass(frozen=True)
class RankedList:
    """Competencies ranked for one fragment: scores descending, score ties
    broken by ascending competency_id, no duplicate competencies."""

    fragment_id: str
    items: tuple[tuple[str, float], ...]

    def ids(self) -> list[str]:
        return [cid for cid, _ in self.items]


@dataclass(frozen=True)
class CandidateSet:
    fragment_id: str
    k: int
    candidates: tuple[tuple[str, float], ...]

    def ids(self) -> list[str]:
        return [cid for cid, _ in self.candidates]


def ranked(fragment_id: str, scores: Mapping[str, float]) -> RankedList:
    """Build a RankedList with the canonical sort from a competency->score map."""
    for cid, score in scores.items():
        if not math.isfinite(score):
            raise ValueError(f"non-finite score for {cid!r}")
    items = tuple(sorted(scores.items(), key=lambda item: (-item[1], item[0])))
    return RankedList(fragment_id, items)


class ProfileIndex:
    """Frozen term statistics over competency profiles for BM25 scoring."""

    def __init__(self, profiles: Sequence[CompetencyProfile], analyzer: TextAnalyzer | None = None):
        if not profiles:
            raise EmptyProfileSet("no competency profiles to index")
        ids = [p.competency_id for p in profiles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate competency ids in profile set")
        self.analyzer = analyzer or TextAnalyzer()
        self.doc_ids: tuple[str, ...] = tuple(ids)
        term_freqs = [Counter(self.analyzer(p.profile_text)) for p in profiles]
        self.doc_lens: tuple[int, ...] = tuple(sum(tf.values()) for tf in term_freqs)
        self.n_docs = len(profiles)
        self.avgdl = sum(self.doc_lens) / self.n_docs
        self.df: dict[str, int] = {}
        postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
        for doc_idx, tf in enumerate(term_freqs):
            for term, count in tf.items():
                self.df[term] = self.df.get(term, 0) + 1
                postings[term].append((doc_idx, count))
        self.postings: dict[str, tuple[tuple[int, int], ...]] = {
            term: tuple(plist) for term, plist in postings.items()
        }


def build_index(profiles: Sequence[CompetencyProfile], analyzer: TextAnalyzer | None = None) -> ProfileIndex:
    return ProfileIndex(profiles, analyzer)


def bm25_rank(
    index: ProfileIndex,
    fragment_id: str,
    text: str,
    k1: float = BM25_K1,
    b: float = BM25_B,
) -> RankedList:
    """Okapi BM25 of the fragment text against every profile.

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)); the sum runs over query
    tokens as a multiset, so a repeated query term contributes once per
    occurrence. Profiles with score 0 are omitted.
    """
    scores: dict[int, float] = defaultdict(float)
    for term in index.analyzer(text):
        plist = index.postings.get(term)
        if not plist:
            continue
        df = index.df[term]
        idf = math.log(1 + (index.n_docs - df + 0.5) / (df + 0.5))
        for doc_idx, tf in plist:
            norm = 1 - b + b * index.doc_lens[doc_idx] / index.avgdl
            scores[doc_idx] += idf * tf * (k1 + 1) / (tf + k1 * norm)
    return ranked(
        fragment_id,
        {index.doc_ids[i]: s for i, s in scores.items() if s > 0},
    )


class VectorStore:
    """Precomputed embeddings (one per competency, one per fragment), equal dimension."""

    def __init__(self, vectors: Mapping[str, Sequence[float]], competency_ids: Iterable[str]):
        self.vectors: dict[str, np.ndarray] = {}
        self.dim: int | None = None
        for vec_id, values in vectors.items():
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim != 1:
                raise DimensionMismatch(f"vector {vec_id!r} is not one-dimensional")
            if self.dim is None:
                self.dim = int(arr.shape[0])
            elif arr.shape[0] != self.dim:
                raise DimensionMismatch(
                    f"vector {vec_id!r} has dim {arr.shape[0]}, expected {self.dim}"
                )
            self.vectors[vec_id] = arr
        self.competency_ids: tuple[str, ...] = tuple(sorted(set(competency_ids)))

    @classmethod
    def load(cls, path: str | Path, competency_ids: Iterable[str]) -> "VectorStore":
        vectors: dict[str, list[float]] = {}
        for line_no, record in jsonl.iter_records(path):
            vec_id = jsonl.require_field(record, line_no, "id", str)
            values = jsonl.require_field(record, line_no, "vector", list)
            if vec_id in vectors:
                raise MalformedRecord(line_no, f"duplicate vector id {vec_id!r}")
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
                raise MalformedRecord(line_no, f"vector {vec_id!r} has non-numeric entries")
            vectors[vec_id] = [float(v) for v in values]
        return cls(vectors, competency_ids)

    def vector(self, vec_id: str) -> np.ndarray:
        try:
            return self.vectors[vec_id]
        except KeyError:
            raise MissingVector(vec_id) from None


def cosine_rank(store: VectorStore, fragment_id: str) -> RankedList:
    """Cosine similarity of the fragment vector against every competency vector.

    Zero-norm vectors score 0 against everything. All competencies appear in
    the result (scores may be zero or negative).
    """
    frag = store.vector(fragment_id)
    frag_norm = float(np.linalg.norm(frag))
    scores: dict[str, float] = {}
    for cid in store.competency_ids:
        comp = store.vector(cid)
        comp_norm = float(np.linalg.norm(comp))
        if frag_norm == 0.0 or comp_norm == 0.0:
            scores[cid] = 0.0
        else:
            scores[cid] = float(np.dot(frag, comp) / (frag_norm * comp_norm))
    return ranked(fragment_id, scores)


def rrf_fuse(lists: Sequence[RankedList], k_rrf: int = RRF_K) -> RankedList:
    """Reciprocal rank fusion: score(c) = sum over lists of 1/(k_rrf + rank),
    ranks 1-based; a competency absent from a list contributes nothing for it."""
    if len(lists) < 2:
        raise ValueError("rrf_fuse needs at least two ranked lists")
    fragment_id = lists[0].fragment_id
    for rl in lists[1:]:
        if rl.fragment_id != fragment_id:
            raise FragmentMismatch(f"{rl.fragment_id!r} != {fragment_id!r}")
    # fsum over sorted contributions keeps fusion exactly permutation-invariant
    contributions: dict[str, list[float]] = defaultdict(list)
    for rl in lists:
        for rank, (cid, _) in enumerate(rl.items, start=1):
            contributions[cid].append(1.0 / (k_rrf + rank))
    fused = {cid: math.fsum(sorted(parts)) for cid, parts in contributions.items()}
    return ranked(fragment_id, fused)


def topk_candidates(ranked_list: RankedList, k: int) -> CandidateSet:
    """First min(k, len) entries; the K1 result is a prefix of the K2 result for K1 <= K2."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return CandidateSet(ranked_list.fragment_id, k, ranked_list.items[:k])


def rank_to_multilabel(ranked_list: RankedList, k: int) -> set[str]:
    """Baseline conversion: the top-k competencies as an unordered label set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return {cid for cid, _ in ranked_list.items[:k]}


def load_pair_scores(path: str | Path) -> dict[str, RankedList]:
    """Read precomputed (fragment, competency, score) rows into ranked lists."""
    by_fragment: dict[str, dict[str, float]] = defaultdict(dict)
    for line_no, record in jsonl.iter_records(path):
        fragment_id = jsonl.require_field(record, line_no, "fragment_id", str)
        competency_id = jsonl.require_field(record, line_no, "competency_id", str)
        score = jsonl.require_field(record, line_no, "score", float)
        if not math.isfinite(score):
            raise MalformedRecord(line_no, "score must be finite")
        if competency_id in by_fragment[fragment_id]:
            raise MalformedRecord(
                line_no, f"duplicate pair ({fragment_id!r}, {competency_id!r})"
            )
        by_fragment[fragment_id][competency_id] = score
    return {fid: ranked(fid, scores) for fid, scores in by_fragment.items()}
