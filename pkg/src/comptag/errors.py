"""Exception types shared across the pipeline stages."""

from __future__ import annotations

from enum import Enum


class CompTagError(Exception):
    """Base class for all comptag errors."""


class MalformedRecord(CompTagError):
    """An input file record failed validation; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateResourceId(CompTagError):
    pass


class UnknownEndpoint(CompTagError):
    pass


class SelfLoop(CompTagError):
    pass


class DuplicateEdge(CompTagError):
    pass


class UnknownCompetency(CompTagError):
    pass


class EmptyProfileSet(CompTagError):
    pass


class DimensionMismatch(CompTagError):
    pass


class MissingVector(CompTagError):
    pass


class FragmentMismatch(CompTagError):
    pass


class EmptyCandidateList(CompTagError):
    pass


class MalformedReason(str, Enum):
    PARSE_ERROR = "ParseError"
    UNKNOWN_COMPETENCY = "UnknownCompetency"
    BAD_CONFIDENCE = "BadConfidence"
    BAD_SPAN = "BadSpan"


class Malformed(CompTagError):
    """A provider response that failed parsing or validation."""

    def __init__(self, reason: MalformedReason, message: str = ""):
        super().__init__(f"{reason.value}: {message}" if message else reason.value)
        self.reason = reason


class ProviderUnavailable(CompTagError):
    pass


class UnitMismatch(CompTagError):
    pass


class UnknownFragment(CompTagError):
    pass


class TooFewGroups(CompTagError):
    pass


class MissingCache(CompTagError):
    pass


class MissingStageInput(CompTagError):
    pass
