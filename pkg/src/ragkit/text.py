"""Small text utilities: tokenization, sentence spans, stopwords.

Everything here is deterministic and rule-based on purpose; tests depend
on these exact rules.
"""

from __future__ import annotations

import re

# Question-structure words and function words that carry no content for
# overlap scoring and must survive entity masking.
STRUCTURE_WORDS = frozenset(
    """
    who what which when where how why whom whose
    is are was were be been being am
    do does did done doing
    has have had having
    can could will would shall should may might must
    the a an this that these those
    of in on at to for from by with about into over under
    and or nor but not no yes
    it its he she they them his her their
    please tell me us say said
    """.split()
)

_WORD_RE = re.compile(r"\S+")

# Sentence boundary: terminator run, whitespace, then an uppercase letter,
# an opening quote/bracket before one, or a digit starting the next sentence.
_SENTENCE_BOUNDARY_RE = re.compile(r"[.?!]+[\"')\]]*\s+(?=[\"'(\[]?[A-Z0-9])")


def word_spans(text: str) -> list[tuple[int, int]]:
    """(start, end) spans of whitespace-delimited tokens."""
    return [m.span() for m in _WORD_RE.finditer(text)]


def tokenize(text: str) -> list[str]:
    """Lowercased tokens with surrounding punctuation stripped."""
    out = []
    for m in _WORD_RE.finditer(text):
        core = m.group().strip("\"'()[]{}.,;:!?").lower()
        if core:
            out.append(core)
    return out


def content_tokens(text: str) -> list[str]:
    """Tokens that carry content: structure words removed, order kept."""
    return [t for t in tokenize(text) if t not in STRUCTURE_WORDS]


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Split text into sentence spans, trimmed of surrounding whitespace.

    The boundary rule is a terminator ([.?!]) followed by whitespace and
    an uppercase start; it never splits inside a sentence otherwise. The
    final stretch of text is always its own sentence even without a
    terminator.
    """
    spans: list[tuple[int, int]] = []
    pos = 0
    for m in _SENTENCE_BOUNDARY_RE.finditer(text):
        spans.append((pos, m.start(0) + len(m.group(0).rstrip())))
        pos = m.end(0)
    if pos < len(text):
        spans.append((pos, len(text)))
    trimmed = []
    for start, end in spans:
        while start < end and text[start].isspace():
            start += 1
        while end > start and text[end - 1].isspace():
            end -= 1
        if start < end:
            trimmed.append((start, end))
    return trimmed
