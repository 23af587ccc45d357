"""Positional-phrase parsing, text augmentation, and position-label affinities.

A position label is a 6-bit vector over the 2x3 lung grid: index = row*2 + col
with rows (upper=0, middle=1, lower=2) and columns (left=0, right=1).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

ROWS = ("upper", "middle", "lower")
COLS = ("left", "right")
N_CELLS = 6

UNK_POS_TOKEN = "[UNK_POS]"
FUZZ_PHRASE = "a region of the lung"

_VERT = r"(?:upper|middle|lower|all)"
_LAT = r"(?:left|right|bilateral)"
_UNIT = rf"(?:{_VERT}\s+)?{_LAT}"
# A chain of position units joined by "and"/"," whose last unit is followed by
# "lung"; earlier units may carry their own "lung" (e.g. output of span mixing).
_CHAIN = re.compile(
    rf"\b(?:{_UNIT}(?:\s+lung)?\s*(?:,|\band\b)\s*)*{_UNIT}\s+lung\b",
    re.IGNORECASE,
)
_UNIT_RE = re.compile(rf"\b(?:(?P<vert>{_VERT})\s+)?(?P<lat>{_LAT})\b", re.IGNORECASE)


def cell_index(row: int, col: int) -> int:
    return row * 2 + col


def empty_label() -> np.ndarray:
    return np.zeros(N_CELLS, dtype=np.int64)


def label_from_cells(cells) -> np.ndarray:
    q = empty_label()
    for r, c in cells:
        q[cell_index(r, c)] = 1
    return q


@dataclass(frozen=True)
class PositionSpan:
    """A located positional phrase: [start, end) character offsets in the text."""

    start: int
    end: int
    cells: np.ndarray  # 6-bit label for this span
    surface: str

    def __post_init__(self):
        assert 0 <= self.start < self.end


@dataclass
class ReferringExpression:
    text: str
    spans: list[PositionSpan] = field(default_factory=list)

    @property
    def label(self) -> np.ndarray:
        q = empty_label()
        for s in self.spans:
            q = np.maximum(q, s.cells)
        return q


def _unit_cells(vert: str | None, lat: str) -> set[tuple[int, int]]:
    if vert is None or vert.lower() == "all":
        rows = (0, 1, 2)
    else:
        rows = (ROWS.index(vert.lower()),)
    if lat.lower() == "bilateral":
        cols = (0, 1)
    else:
        cols = (COLS.index(lat.lower()),)
    return {(r, c) for r in rows for c in cols}


def parse_positions(text: str) -> ReferringExpression:
    """Deterministically extract positional-phrase spans from a caption.

    Grammar (case-insensitive): ``(upper|middle|lower|all)? (left|right|bilateral)
    lung`` with conjunctions joined by "and" or ",". Missing or "all" vertical
    term selects all three rows; "bilateral" selects both columns. Text without
    a grammar match yields no spans and an all-zero label.
    """
    spans = []
    for m in _CHAIN.finditer(text):
        cells = set()
        for um in _UNIT_RE.finditer(m.group(0)):
            cells |= _unit_cells(um.group("vert"), um.group("lat"))
        spans.append(
            PositionSpan(start=m.start(), end=m.end(),
                         cells=label_from_cells(cells), surface=m.group(0))
        )
    return ReferringExpression(text=text, spans=spans)


def _replace_spans(expr: ReferringExpression, replacements: list[str]) -> ReferringExpression:
    """Rebuild the caption with each span's text swapped for its replacement."""
    out = []
    cursor = 0
    for span, rep in zip(expr.spans, replacements):
        out.append(expr.text[cursor:span.start])
        out.append(rep)
        cursor = span.end
    out.append(expr.text[cursor:])
    return parse_positions("".join(out))


def posaug(expr: ReferringExpression, rho: float, rng: np.random.Generator) -> ReferringExpression:
    """Positional-phrase dropout/fuzzing on the student text.

    One Bernoulli(rho) draw per expression: with probability rho every span is
    replaced by the reserved ``[UNK_POS]`` token (dropout), otherwise by the
    location-agnostic phrase "a region of the lung" (fuzzing). Characters
    outside the spans are untouched; an expression without spans is returned
    unchanged.
    """
    if not expr.spans:
        return expr
    rep = UNK_POS_TOKEN if rng.random() < rho else FUZZ_PHRASE
    return _replace_spans(expr, [rep] * len(expr.spans))


def span_mix(expr_i: ReferringExpression, pos_j: str) -> ReferringExpression:
    """Replace the first positional span of ``expr_i`` with "<pos_i> and <pos_j>".

    If ``pos_j`` equals the span text the expression is returned unchanged.
    Raises ValueError when ``expr_i`` has no span (callers must guard).
    """
    if not expr_i.spans:
        raise ValueError("span_mix requires an expression with at least one positional span")
    first = expr_i.spans[0]
    if pos_j == first.surface:
        return expr_i
    replacements = [f"{first.surface} and {pos_j}"] + [s.surface for s in expr_i.spans[1:]]
    return _replace_spans(expr_i, replacements)


def jaccard_affinity(q_i: np.ndarray, q_j: np.ndarray) -> float:
    """|intersection| / |union| of two position labels; 0 when both are empty."""
    inter = int(np.sum((q_i > 0) & (q_j > 0)))
    union = int(np.sum((q_i > 0) | (q_j > 0)))
    if union == 0:
        return 0.0
    return inter / union


def affinity_matrix(labels: list[np.ndarray]) -> np.ndarray:
    """Pairwise Jaccard affinities with the diagonal forced to 1."""
    b = len(labels)
    a = np.empty((b, b), dtype=np.float64)
    for i in range(b):
        a[i, i] = 1.0
        for j in range(i + 1, b):
            a[i, j] = a[j, i] = jaccard_affinity(labels[i], labels[j])
    return a


def laterality_conflict(q_i: np.ndarray, q_j: np.ndarray) -> bool:
    """True iff both labels are non-empty and touch disjoint left/right columns."""
    cols_i = {c for c in range(2) if q_i[c::2].any()}
    cols_j = {c for c in range(2) if q_j[c::2].any()}
    return bool(cols_i) and bool(cols_j) and not (cols_i & cols_j)
