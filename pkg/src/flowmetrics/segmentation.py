"""Rule-based sentence segmentation over character spans.

Splits on terminal punctuation (. ! ?) followed by whitespace and an
uppercase letter or digit, with a bundled abbreviation list so that titles
("Dr.", "Mrs.") and latinisms ("e.g.", "i.e.") do not end a sentence.
Spans index into the original string, so downstream code can always
recover the exact sentence text.
"""

from __future__ import annotations

import re
from importlib import resources


class EmptyTextError(ValueError):
    """Raised when asked to segment empty or whitespace-only text."""


def _load_abbreviations() -> frozenset[str]:
    raw = resources.files("flowmetrics.data").joinpath("abbreviations.txt").read_text("utf-8")
    abbrevs = set()
    for line in raw.splitlines():
        word = line.strip()
        if word and not word.startswith("#"):
            abbrevs.add(word.lower())
    return frozenset(abbrevs)


ABBREVIATIONS = _load_abbreviations()

# Terminal cluster: one or more of .!? then optional closing quotes/brackets,
# then whitespace, then an uppercase letter or digit starting the next sentence.
_BOUNDARY = re.compile(r"[.!?]+[\"'”’)\]]*\s+(?=[A-Z0-9])")

# Word ending at a period, used for the abbreviation check. Allows internal
# periods so "e.g." and "i.e." match as one unit.
_TRAILING_WORD = re.compile(r"[A-Za-z](?:[A-Za-z.'-]*[A-Za-z])?\.$")


def _ends_with_abbreviation(prefix: str) -> bool:
    m = _TRAILING_WORD.search(prefix)
    if m is None:
        return False
    return m.group(0).lower() in ABBREVIATIONS


def segment_sentences(text: str) -> list[tuple[int, int]]:
    """Split ``text`` into ordered, non-overlapping sentence spans.

    Returns (start, end) character pairs covering all non-whitespace
    content; gaps between spans are whitespace only. Deterministic for a
    fixed input.

    Raises EmptyTextError for empty or whitespace-only input.
    """
    if not text or not text.strip():
        raise EmptyTextError("cannot segment empty or whitespace-only text")

    boundaries = []
    for m in _BOUNDARY.finditer(text):
        # Candidate boundary sits after the punctuation/quote cluster.
        cluster_end = m.start() + len(m.group(0).rstrip())
        if _ends_with_abbreviation(text[: m.start() + 1]):
            continue
        boundaries.append(cluster_end)

    spans = []
    start = 0
    for cut in boundaries:
        spans.append((start, cut))
        start = cut
    spans.append((start, len(text)))

    trimmed = []
    for s, e in spans:
        while s < e and text[s].isspace():
            s += 1
        while e > s and text[e - 1].isspace():
            e -= 1
        if e > s:
            trimmed.append((s, e))
    return trimmed
