"""Diacritic folding and tokenization primitives shared by retrieval and tagging."""

from __future__ import annotations

import re
import unicodedata

# Unicode word characters minus underscore: splits on any non-alphanumeric run.
_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def fold_diacritics(text: str) -> str:
    """Strip combining marks after NFKD decomposition ("Régression" -> "Regression")."""
    decomposed = unicodedata.normalize("NFKD", text)
    return "".join(ch for ch in decomposed if not unicodedata.combining(ch))


def fold_text(text: str) -> str:
    """Lowercased, diacritic-free form used for matching and indexing."""
    return fold_diacritics(text).lower()


def fold_with_map(text: str) -> tuple[str, list[int]]:
    """Fold text while tracking, per folded character, its source character index.

    Needed to report evidence offsets into the original string after searching
    in folded space. NFKD can expand one character into several (ligatures) or
    drop it entirely (lone combining marks); the map handles both.
    """
    chars: list[str] = []
    source: list[int] = []
    for i, ch in enumerate(text):
        folded = fold_text(ch)
        for c in folded:
            chars.append(c)
            source.append(i)
    return "".join(chars), source


def word_tokens(text: str) -> list[str]:
    """Alphanumeric runs of the folded text, in order, no length filtering."""
    return _WORD.findall(fold_text(text))
