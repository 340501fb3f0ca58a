"""Learning-resource ingestion and offset-faithful fragmentation.

Offsets count Unicode scalar values (plain Python string indices), spans are
half-open [start, end), and every fragment satisfies text == body[start:end].
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from . import jsonl
from .errors import DuplicateResourceId, MalformedRecord

RESOURCE_KINDS = ("page", "pdf_text", "url", "quiz", "assignment")

# Kinds whose bodies are blank-line-delimited item lists (one fragment per item).
ITEM_KINDS = ("quiz", "assignment")

_TOKEN = re.compile(r"\S+")
_PARA_SEP = re.compile(r"\n\s*\n")
_SENT_BOUND = re.compile(r"[.!?]+(?=\s)")
_MD_HEADING = re.compile(r"^(#{1,3})[ \t]+(.*)$", re.MULTILINE)
_HTML_HEADING = re.compile(r"<h([1-3])[^>]*>(.*?)</h\1\s*>", re.IGNORECASE | re.DOTALL)
_TAG = re.compile(r"<[^>]+>")


@dataclass(frozen=True)
class Resource:
    resource_id: str
    course_id: str
    kind: str
    title: str
    body: str
    url: str | None = None


@dataclass(frozen=True)
class Fragment:
    fragment_id: str
    resource_id: str
    start: int
    end: int
    order_index: int
    text: str
    section_title: str | None = None


@dataclass(frozen=True)
class FragmentConfig:
    max_tokens: int = 512

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


def count_tokens(text: str) -> int:
    """Number of maximal non-whitespace runs."""
    return len(_TOKEN.findall(text))


def ingest_resources(path: str | Path) -> list[Resource]:
    """Read and validate a resource corpus (JSONL), preserving input order."""
    resources: list[Resource] = []
    seen: set[str] = set()
    for line_no, record in jsonl.iter_records(path):
        resource = _resource_from_record(record, line_no)
        if resource.resource_id in seen:
            raise DuplicateResourceId(resource.resource_id)
        seen.add(resource.resource_id)
        resources.append(resource)
    return resources


def write_resources(path: str | Path, resources: Iterable[Resource]) -> int:
    return jsonl.write_records(path, (resource_to_record(r) for r in resources))


def resource_to_record(r: Resource) -> dict:
    record = {
        "resource_id": r.resource_id,
        "course_id": r.course_id,
        "kind": r.kind,
        "title": r.title,
        "url": r.url,
        "body": r.body,
    }
    if r.url is None:
        del record["url"]
    return record


def _resource_from_record(record: dict, line_no: int) -> Resource:
    resource_id = jsonl.require_field(record, line_no, "resource_id", str)
    if not resource_id:
        raise MalformedRecord(line_no, "resource_id must be non-empty")
    course_id = jsonl.require_field(record, line_no, "course_id", str)
    if not course_id:
        raise MalformedRecord(line_no, "course_id must be non-empty")
    kind = jsonl.require_field(record, line_no, "kind", str)
    if kind not in RESOURCE_KINDS:
        raise MalformedRecord(line_no, f"unknown kind {kind!r}")
    title = jsonl.require_field(record, line_no, "title", str)
    body = jsonl.require_field(record, line_no, "body", str)
    url = record.get("url")
    if url is not None and not isinstance(url, str):
        raise MalformedRecord(line_no, "field 'url' must be str")
    return Resource(resource_id, course_id, kind, title, body, url)


def fragment_to_record(f: Fragment) -> dict:
    return {
        "fragment_id": f.fragment_id,
        "resource_id": f.resource_id,
        "section_title": f.section_title,
        "start": f.start,
        "end": f.end,
        "order_index": f.order_index,
        "text": f.text,
    }


def read_fragments(path: str | Path) -> list[Fragment]:
    fragments = []
    for line_no, record in jsonl.iter_records(path):
        try:
            fragments.append(
                Fragment(
                    fragment_id=record["fragment_id"],
                    resource_id=record["resource_id"],
                    start=record["start"],
                    end=record["end"],
                    order_index=record["order_index"],
                    text=record["text"],
                    section_title=record.get("section_title"),
                )
            )
        except KeyError as exc:
            raise MalformedRecord(line_no, f"missing field {exc.args[0]!r}") from exc
    return fragments


def write_fragments(path: str | Path, fragments: Iterable[Fragment]) -> int:
    return jsonl.write_records(path, (fragment_to_record(f) for f in fragments))


def fragment_resource(resource: Resource, config: FragmentConfig | None = None) -> list[Fragment]:
    """Split a resource body into ordered, non-overlapping fragments.

    Structural boundaries are used when present: markdown or HTML h1-h3
    headings, or blank-line-delimited items for quiz/assignment kinds.
    A structural segment over the token budget is re-split by
    fallback_segment; fallback never crosses a structural boundary.
    """
    config = config or FragmentConfig()
    body = resource.body
    fragments: list[Fragment] = []
    for seg_start, seg_end, title in _structural_segments(resource):
        if count_tokens(body[seg_start:seg_end]) > config.max_tokens:
            spans = [
                (seg_start + s, seg_start + e)
                for s, e in fallback_segment(body[seg_start:seg_end], config.max_tokens)
            ]
        else:
            spans = [(seg_start, seg_end)]
        for start, end in spans:
            order = len(fragments)
            fragments.append(
                Fragment(
                    fragment_id=f"{resource.resource_id}::f{order:04d}",
                    resource_id=resource.resource_id,
                    start=start,
                    end=end,
                    order_index=order,
                    text=body[start:end],
                    section_title=title,
                )
            )
    return fragments


def fallback_segment(text: str, max_tokens: int) -> list[tuple[int, int]]:
    """Budgeted greedy segmentation for text without usable structure.

    Whole paragraphs (blank-line-delimited) are packed while the combined
    token count stays within max_tokens. An oversize paragraph is split at
    sentence terminators (. ! ? followed by whitespace) and its sentences
    packed the same way; an oversize sentence is cut at whitespace every
    max_tokens tokens. Returned spans are trimmed to non-whitespace at both
    ends and jointly cover every non-whitespace character.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")

    def split_sentence(start: int, end: int) -> list[tuple[int, int]]:
        token_spans = [(m.start(), m.end()) for m in _TOKEN.finditer(text, start, end)]
        return [
            (token_spans[i][0], token_spans[min(i + max_tokens, len(token_spans)) - 1][1])
            for i in range(0, len(token_spans), max_tokens)
        ]

    def split_paragraph(start: int, end: int) -> list[tuple[int, int]]:
        return _pack_spans(text, _sentence_spans(text, start, end), max_tokens, split_sentence)

    return _pack_spans(text, _paragraph_spans(text), max_tokens, split_paragraph)


def _pack_spans(
    text: str,
    spans: list[tuple[int, int]],
    max_tokens: int,
    split_oversize: Callable[[int, int], list[tuple[int, int]]],
) -> list[tuple[int, int]]:
    """Greedily merge adjacent trimmed spans while the token budget holds.

    The gap between consecutive trimmed spans is whitespace-only, so the token
    count of a merged span is the sum of its parts.
    """
    packed: list[tuple[int, int]] = []
    current: tuple[int, int] | None = None
    current_tokens = 0
    for start, end in spans:
        n = count_tokens(text[start:end])
        if n > max_tokens:
            if current is not None:
                packed.append(current)
                current, current_tokens = None, 0
            packed.extend(split_oversize(start, end))
            continue
        if current is not None and current_tokens + n > max_tokens:
            packed.append(current)
            current, current_tokens = None, 0
        current = (start, end) if current is None else (current[0], end)
        current_tokens += n
    if current is not None:
        packed.append(current)
    return packed


def _trim(text: str, start: int, end: int) -> tuple[int, int] | None:
    while start < end and text[start].isspace():
        start += 1
    while end > start and text[end - 1].isspace():
        end -= 1
    return (start, end) if start < end else None


def _trimmed_all(text: str, raw: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    spans = []
    for start, end in raw:
        trimmed = _trim(text, start, end)
        if trimmed is not None:
            spans.append(trimmed)
    return spans


def _paragraph_spans(text: str) -> list[tuple[int, int]]:
    raw = []
    pos = 0
    for sep in _PARA_SEP.finditer(text):
        raw.append((pos, sep.start()))
        pos = sep.end()
    raw.append((pos, len(text)))
    return _trimmed_all(text, raw)


def _sentence_spans(text: str, start: int, end: int) -> list[tuple[int, int]]:
    raw = []
    pos = start
    for bound in _SENT_BOUND.finditer(text, start, end):
        raw.append((pos, bound.end()))
        pos = bound.end()
    if pos < end:
        raw.append((pos, end))
    return _trimmed_all(text, raw)


def _structural_segments(resource: Resource) -> list[tuple[int, int, str | None]]:
    """Trimmed (start, end, section_title) spans covering the body's content."""
    body = resource.body
    if resource.kind in ITEM_KINDS:
        return [(s, e, None) for s, e in _paragraph_spans(body)]

    markers: list[tuple[int, str]] = []
    for m in _MD_HEADING.finditer(body):
        markers.append((m.start(), m.group(2).strip()))
    for m in _HTML_HEADING.finditer(body):
        title = re.sub(r"\s+", " ", _TAG.sub("", m.group(2))).strip()
        markers.append((m.start(), title))
    markers.sort(key=lambda item: item[0])

    segments: list[tuple[int, int, str | None]] = []
    if not markers:
        candidates: list[tuple[int, int, str | None]] = [(0, len(body), None)]
    else:
        candidates = []
        if markers[0][0] > 0:
            candidates.append((0, markers[0][0], None))
        for i, (pos, title) in enumerate(markers):
            end = markers[i + 1][0] if i + 1 < len(markers) else len(body)
            candidates.append((pos, end, title or None))
    for start, end, title in candidates:
        trimmed = _trim(body, start, end)
        if trimmed is not None:
            segments.append((trimmed[0], trimmed[1], title))
    return segments
