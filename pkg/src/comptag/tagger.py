"""Constrained LLM tagging: prompt construction, strict response parsing,
and the provider implementations (mock heuristic, HTTP, replay log)."""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import requests

from . import jsonl
from .corpus import Fragment
from .errors import (
    EmptyCandidateList,
    Malformed,
    MalformedReason,
    ProviderUnavailable,
)
from .graph import CompetencyGraph, CompetencyProfile
from .retrieval import CandidateSet, ProfileIndex, bm25_rank
from .textnorm import fold_text, fold_with_map

MODES = ("constrained", "zero_shot", "few_shot")
LANGUAGES = ("en", "fr")

API_KEY_ENV = "COMPTAG_API_KEY"
DEFAULT_BASE_URL = "https://api.openai.com/v1/chat/completions"
DEFAULT_MODEL = "gpt-4o-mini"
TEMPERATURE = 0.0

# Above this inventory size, zero-shot prompts list labels without descriptions.
INVENTORY_DESCRIPTION_LIMIT = 50

_FRAGMENT_OPEN = "===FRAGMENT START==="
_FRAGMENT_CLOSE = "===FRAGMENT END==="
_EXAMPLE_OPEN = "===EXAMPLE START==="
_EXAMPLE_CLOSE = "===EXAMPLE END==="

_INSTRUCTIONS = {
    "en": (
        "You are a competency tagging assistant for course materials.\n"
        "From the CANDIDATES list, select the competencies that the fragment text explicitly covers.\n"
        "Rules:\n"
        "- Use only competency ids from the CANDIDATES list.\n"
        "- Selecting no competency is a valid answer: return [].\n"
        "- For every selection give a confidence in [0, 1] and the character offsets of a supporting\n"
        "  span of the fragment text (evidence_start inclusive, evidence_end exclusive, counted from 0).\n"
        '- Answer with a JSON array only, schema: [{"competency_id": "...", "confidence": 0.0,'
        ' "evidence_start": 0, "evidence_end": 0}]. No other text.'
    ),
    "fr": (
        "Vous etes un assistant d'alignement de competences pour des supports de cours.\n"
        "Dans la liste CANDIDATES, selectionnez les competences que le texte du fragment couvre explicitement.\n"
        "Regles :\n"
        "- Utilisez uniquement des identifiants de la liste CANDIDATES.\n"
        "- Ne rien selectionner est une reponse valide : renvoyez [].\n"
        "- Pour chaque selection, donnez une confiance dans [0, 1] et les positions de caracteres d'un\n"
        "  extrait justificatif du fragment (evidence_start inclus, evidence_end exclu, a partir de 0).\n"
        '- Repondez uniquement par un tableau JSON, schema : [{"competency_id": "...", "confidence": 0.0,'
        ' "evidence_start": 0, "evidence_end": 0}]. Aucun autre texte.'
    ),
}


@dataclass(frozen=True)
class TagPrediction:
    fragment_id: str
    competency_id: str
    confidence: float
    evidence_start: int
    evidence_end: int
    evidence_text: str


@dataclass(frozen=True)
class CandidateEntry:
    competency_id: str
    label: str
    description: str = ""


@dataclass(frozen=True)
class TagRequest:
    fragment: Fragment
    mode: str
    candidates: tuple[CandidateEntry, ...]
    demonstrations: tuple[tuple[str, tuple[str, ...]], ...] = ()
    language: str = "en"

    def allowed_ids(self) -> frozenset[str]:
        return frozenset(entry.competency_id for entry in self.candidates)


@dataclass(frozen=True)
class TaggerOutcome:
    """Result for one fragment: accepted predictions, the discard count
    (0 or 1), provider round-trip records, and pre-validation raw spans."""

    predictions: tuple[TagPrediction, ...]
    discarded: int
    raw_log: tuple[dict, ...]
    raw_spans: tuple[tuple[str, int, int], ...]


def _one_line(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def _entry(g: CompetencyGraph, competency_id: str, with_description: bool = True) -> CandidateEntry:
    node = g.node(competency_id)
    return CandidateEntry(
        competency_id=node.competency_id,
        label=node.label_fr,
        description=_one_line(node.description) if with_description else "",
    )


def constrained_request(
    fragment: Fragment,
    candidate_set: CandidateSet,
    g: CompetencyGraph,
    language: str = "en",
) -> TagRequest:
    if not candidate_set.candidates:
        raise EmptyCandidateList(fragment.fragment_id)
    entries = tuple(_entry(g, cid) for cid in candidate_set.ids())
    return TagRequest(fragment, "constrained", entries, (), language)


def zero_shot_request(fragment: Fragment, g: CompetencyGraph, language: str = "en") -> TagRequest:
    ids = g.competency_ids()
    if not ids:
        raise EmptyCandidateList(fragment.fragment_id)
    with_description = len(ids) <= INVENTORY_DESCRIPTION_LIMIT
    entries = tuple(_entry(g, cid, with_description) for cid in ids)
    return TagRequest(fragment, "zero_shot", entries, (), language)


def few_shot_request(
    fragment: Fragment,
    candidate_set: CandidateSet,
    g: CompetencyGraph,
    demonstrations: Sequence[tuple[str, Sequence[str]]],
    language: str = "en",
) -> TagRequest:
    if not candidate_set.candidates:
        raise EmptyCandidateList(fragment.fragment_id)
    entries = tuple(_entry(g, cid) for cid in candidate_set.ids())
    demos = tuple((text, tuple(gold)) for text, gold in demonstrations)
    return TagRequest(fragment, "few_shot", entries, demos, language)


def select_demonstrations(
    target_text: str,
    examples: Sequence[tuple[str, Sequence[str]]],
    k: int = 3,
) -> list[tuple[str, tuple[str, ...]]]:
    """Pick the k examples with highest BM25 similarity to the target text.

    Examples with no lexical overlap are never selected, so fewer than k
    demonstrations (possibly none) may be returned.
    """
    if k < 1 or not examples:
        return []
    profiles = [
        CompetencyProfile(f"d{i:06d}", text) for i, (text, _) in enumerate(examples)
    ]
    index = ProfileIndex(profiles)
    top = bm25_rank(index, "demo-query", target_text).ids()[:k]
    return [(examples[int(pid[1:])][0], tuple(examples[int(pid[1:])][1])) for pid in top]


def build_prompt(request: TagRequest) -> str:
    """Deterministic prompt: instruction, allowed candidates as
    (id | label | one-line description), optional demonstrations, then the
    fragment verbatim between fixed markers. Same request, same bytes."""
    if request.mode not in MODES:
        raise ValueError(f"unknown mode {request.mode!r}")
    if not request.candidates:
        raise EmptyCandidateList(request.fragment.fragment_id)
    lines: list[str] = [_INSTRUCTIONS[request.language]]
    lines.append("")
    lines.append("CANDIDATES:")
    for entry in request.candidates:
        if entry.description:
            lines.append(f"- {entry.competency_id} | {entry.label} | {entry.description}")
        else:
            lines.append(f"- {entry.competency_id} | {entry.label}")
    # demonstrations precede the target fragment
    for demo_text, demo_gold in request.demonstrations:
        lines.append("")
        lines.append("EXAMPLE FRAGMENT:")
        lines.append(_EXAMPLE_OPEN)
        lines.append(demo_text)
        lines.append(_EXAMPLE_CLOSE)
        lines.append("EXAMPLE ANSWER:")
        lines.append(
            json.dumps(
                [
                    {
                        "competency_id": gid,
                        "confidence": 1.0,
                        "evidence_start": 0,
                        "evidence_end": len(demo_text),
                    }
                    for gid in demo_gold
                ],
                ensure_ascii=False,
            )
        )
    lines.append("")
    lines.append("FRAGMENT:")
    lines.append(_FRAGMENT_OPEN)
    lines.append(request.fragment.text)
    lines.append(_FRAGMENT_CLOSE)
    lines.append("")
    lines.append("ANSWER:")
    return "\n".join(lines)


def _strip_fences(raw: str) -> str:
    text = raw.strip()
    if text.startswith("```"):
        text = re.sub(r"^```[a-zA-Z]*\n", "", text)
        text = re.sub(r"\n```$", "", text)
    return text


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def parse_response(raw: str, request: TagRequest) -> list[TagPrediction]:
    """Parse a provider response into predictions, or raise Malformed.

    One invalid element rejects the whole response: retry-then-discard works
    at response granularity. Reasons: ParseError for JSON/schema failures,
    UnknownCompetency for ids outside the allowed set, BadConfidence for
    confidence outside [0, 1], BadSpan for offsets violating
    0 <= start < end <= len(fragment text).
    """
    try:
        data = json.loads(_strip_fences(raw))
    except ValueError as exc:
        raise Malformed(MalformedReason.PARSE_ERROR, str(exc)) from exc
    if not isinstance(data, list):
        raise Malformed(MalformedReason.PARSE_ERROR, "response is not a JSON array")
    allowed = request.allowed_ids()
    text = request.fragment.text
    predictions: list[TagPrediction] = []
    for entry in data:
        if not isinstance(entry, dict):
            raise Malformed(MalformedReason.PARSE_ERROR, "array element is not an object")
        competency_id = entry.get("competency_id")
        confidence = entry.get("confidence")
        start = entry.get("evidence_start")
        end = entry.get("evidence_end")
        if not isinstance(competency_id, str):
            raise Malformed(MalformedReason.PARSE_ERROR, "competency_id missing or not a string")
        if not _is_number(confidence):
            raise Malformed(MalformedReason.PARSE_ERROR, "confidence missing or not numeric")
        if not _is_int(start) or not _is_int(end):
            raise Malformed(MalformedReason.PARSE_ERROR, "evidence offsets missing or not integers")
        if competency_id not in allowed:
            raise Malformed(MalformedReason.UNKNOWN_COMPETENCY, competency_id)
        if not 0.0 <= float(confidence) <= 1.0:
            raise Malformed(MalformedReason.BAD_CONFIDENCE, repr(confidence))
        if not (0 <= start < end <= len(text)):
            raise Malformed(MalformedReason.BAD_SPAN, f"({start}, {end}) for length {len(text)}")
        predictions.append(
            TagPrediction(
                fragment_id=request.fragment.fragment_id,
                competency_id=competency_id,
                confidence=float(confidence),
                evidence_start=start,
                evidence_end=end,
                evidence_text=text[start:end],
            )
        )
    return predictions


def extract_raw_spans(raw: str) -> list[tuple[int, int]]:
    """Best-effort span extraction before validation, for span-validity stats."""
    try:
        data = json.loads(_strip_fences(raw))
    except ValueError:
        return []
    if not isinstance(data, list):
        return []
    spans = []
    for entry in data:
        if isinstance(entry, dict) and _is_int(entry.get("evidence_start")) and _is_int(entry.get("evidence_end")):
            spans.append((entry["evidence_start"], entry["evidence_end"]))
    return spans


def prompt_sha(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class Provider(Protocol):
    def complete(self, prompt: str) -> str: ...


def _log_record(provider, fragment_id: str, attempt: int, prompt: str, response: str, outcome: str) -> dict:
    return {
        "fragment_id": fragment_id,
        "attempt": attempt,
        "provider": getattr(provider, "name", type(provider).__name__),
        "model": getattr(provider, "model", None),
        "temperature": TEMPERATURE,
        "prompt_sha256": prompt_sha(prompt),
        "prompt": prompt,
        "response": response,
        "outcome": outcome,
    }


def tag_fragment(request: TagRequest, provider: Provider, retries: int = 1) -> TaggerOutcome:
    """Tag one fragment: build the prompt once, call the provider, parse.

    A Malformed response is retried up to `retries` times; after the final
    failure the fragment is discarded (zero predictions, discarded == 1).
    ProviderUnavailable propagates.
    """
    prompt = build_prompt(request)
    fragment_id = request.fragment.fragment_id
    log: list[dict] = []
    raw_spans: list[tuple[str, int, int]] = []
    for attempt in range(retries + 1):
        response = provider.complete(prompt)
        raw_spans.extend((fragment_id, a, b) for a, b in extract_raw_spans(response))
        try:
            predictions = parse_response(response, request)
        except Malformed as exc:
            log.append(_log_record(provider, fragment_id, attempt, prompt, response, f"malformed:{exc.reason.value}"))
            continue
        log.append(_log_record(provider, fragment_id, attempt, prompt, response, "ok"))
        return TaggerOutcome(tuple(predictions), 0, tuple(log), tuple(raw_spans))
    return TaggerOutcome((), 1, tuple(log), tuple(raw_spans))


def tag_all(
    requests_: Sequence[TagRequest],
    provider: Provider,
    retries: int = 1,
    max_workers: int = 1,
) -> list[TaggerOutcome]:
    """Tag fragments with bounded concurrency; outcomes keep request order."""
    if max_workers <= 1:
        return [tag_fragment(request, provider, retries) for request in requests_]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda request: tag_fragment(request, provider, retries), requests_))


class MockProvider:
    """Deterministic lexical tagger used for tests and offline runs.

    Parses the candidate ids and fragment text back out of the prompt, then
    searches the fragment (case- and accent-insensitively) for each
    candidate's label or alias. A hit yields that candidate with
    confidence 0.5 + 0.5 * min(1, matched_length / fragment_length) and the
    matched span's offsets in the original text. Output is ordered by span
    start. Aliases come from the graph: the prompt lists labels only.
    """

    name = "mock"

    def __init__(self, g: CompetencyGraph):
        self.graph = g

    def complete(self, prompt: str) -> str:
        candidate_ids = _prompt_candidate_ids(prompt)
        fragment_text = _prompt_fragment_text(prompt)
        folded, source_map = fold_with_map(fragment_text)
        predictions = []
        for cid in candidate_ids:
            if cid not in self.graph:
                continue
            node = self.graph.node(cid)
            needles = [node.label_fr]
            if node.label_en:
                needles.append(node.label_en)
            needles.extend(node.aliases)
            span = None
            for needle in needles:
                folded_needle = fold_text(needle)
                if not folded_needle:
                    continue
                pos = folded.find(folded_needle)
                if pos >= 0:
                    span = (source_map[pos], source_map[pos + len(folded_needle) - 1] + 1)
                    break
            if span is None:
                continue
            matched_len = span[1] - span[0]
            confidence = 0.5 + 0.5 * min(1.0, matched_len / len(fragment_text))
            predictions.append(
                {
                    "competency_id": cid,
                    "confidence": confidence,
                    "evidence_start": span[0],
                    "evidence_end": span[1],
                }
            )
        predictions.sort(key=lambda p: (p["evidence_start"], p["competency_id"]))
        return json.dumps(predictions, ensure_ascii=False)


def _prompt_candidate_ids(prompt: str) -> list[str]:
    ids: list[str] = []
    in_block = False
    for line in prompt.splitlines():
        if line == "CANDIDATES:":
            in_block = True
            continue
        if in_block:
            if not line.startswith("- "):
                break
            ids.append(line[2:].split(" | ", 1)[0])
    return ids


def _prompt_fragment_text(prompt: str) -> str:
    open_pos = prompt.rfind(_FRAGMENT_OPEN + "\n")
    close_pos = prompt.rfind("\n" + _FRAGMENT_CLOSE)
    if open_pos < 0 or close_pos < 0 or close_pos < open_pos:
        return ""
    return prompt[open_pos + len(_FRAGMENT_OPEN) + 1 : close_pos]


class HttpProvider:
    """Chat-completions client: POST {model, messages, temperature} to a
    configurable endpoint, bearer auth from the COMPTAG_API_KEY variable."""

    name = "http"

    def __init__(
        self,
        base_url: str = DEFAULT_BASE_URL,
        model: str = DEFAULT_MODEL,
        api_key: str | None = None,
        timeout: float = 60.0,
        transport_retries: int = 2,
    ):
        self.base_url = base_url
        self.model = model
        self.timeout = timeout
        self.transport_retries = transport_retries
        self._api_key = api_key or os.environ.get(API_KEY_ENV)
        if not self._api_key:
            raise ProviderUnavailable(f"no API key: set {API_KEY_ENV}")

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": TEMPERATURE,
        }
        headers = {"Authorization": f"Bearer {self._api_key}"}
        last_error = "no attempt made"
        for attempt in range(self.transport_retries + 1):
            if attempt:
                time.sleep(0.5 * 2 ** (attempt - 1))
            try:
                response = requests.post(self.base_url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = str(exc)
                continue
            if response.status_code >= 500:
                last_error = f"HTTP {response.status_code}"
                continue
            if response.status_code != 200:
                raise ProviderUnavailable(f"HTTP {response.status_code}: {response.text[:200]}")
            try:
                return response.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProviderUnavailable(f"unexpected response shape: {exc}") from exc
        raise ProviderUnavailable(last_error)


class ReplayProvider:
    """Serve logged responses keyed by prompt digest, in logged order.

    Makes a paid run reproducible: retry sequences replay response by
    response, and the final response repeats if asked again.
    """

    name = "replay"

    def __init__(self, records: Iterable[dict]):
        self._queues: dict[str, deque[str]] = defaultdict(deque)
        for record in records:
            sha = record.get("prompt_sha256")
            response = record.get("response")
            if isinstance(sha, str) and isinstance(response, str):
                self._queues[sha].append(response)

    @classmethod
    def from_path(cls, path: str | Path) -> "ReplayProvider":
        return cls(record for _, record in jsonl.iter_records(path))

    def complete(self, prompt: str) -> str:
        queue = self._queues.get(prompt_sha(prompt))
        if not queue:
            raise ProviderUnavailable(f"no logged response for prompt sha {prompt_sha(prompt)[:12]}")
        if len(queue) > 1:
            return queue.popleft()
        return queue[0]


def prediction_to_record(p: TagPrediction) -> dict:
    return {
        "fragment_id": p.fragment_id,
        "competency_id": p.competency_id,
        "confidence": p.confidence,
        "evidence_start": p.evidence_start,
        "evidence_end": p.evidence_end,
        "evidence_text": p.evidence_text,
    }


def read_predictions(path: str | Path) -> list[TagPrediction]:
    predictions = []
    for line_no, record in jsonl.iter_records(path):
        try:
            predictions.append(
                TagPrediction(
                    fragment_id=record["fragment_id"],
                    competency_id=record["competency_id"],
                    confidence=record["confidence"],
                    evidence_start=record["evidence_start"],
                    evidence_end=record["evidence_end"],
                    evidence_text=record.get("evidence_text", ""),
                )
            )
        except KeyError as exc:
            raise jsonl.MalformedRecord(line_no, f"missing field {exc.args[0]!r}") from exc
    return predictions


def write_predictions(path: str | Path, predictions: Iterable[TagPrediction]) -> int:
    return jsonl.write_records(path, (prediction_to_record(p) for p in predictions))
