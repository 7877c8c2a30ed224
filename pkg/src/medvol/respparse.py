"""Strict reader/writer for ``<think>...</think><answer>...</answer>`` responses.

The answer body is a JSON object with exactly two fields::

    {"slice": 32, "bbox_2d_list": [[x0, y0, x1, y1], ...]}

``slice`` is a 0-based integer, or the prompt-facing 1-based identifier
string ``"<slice 33>"``.  Boxes are half-open pixel rectangles.  The list may
be empty.  Whitespace around the blocks and inside the JSON is ignored; any
other text outside the blocks is a schema error.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Sequence

from medvol.targets import Box2D, EvidenceAnchor

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

MISSING_BLOCK = "missing-block"
DUPLICATE_BLOCK = "duplicate-block"
BAD_ORDER = "bad-order"
SCHEMA_ERROR = "schema-error"
OUT_OF_BOUNDS = "out-of-bounds"
DEGENERATE_BOX = "degenerate-box"
REASONS = (MISSING_BLOCK, DUPLICATE_BLOCK, BAD_ORDER, SCHEMA_ERROR, OUT_OF_BOUNDS, DEGENERATE_BOX)

_SLICE_ID = re.compile(r"<slice ([1-9][0-9]*)>")


@dataclass(frozen=True)
class ParsedResponse:
    think: str
    anchor: EvidenceAnchor


@dataclass(frozen=True)
class FormatFailure:
    reason: str
    detail: str = ""

    def __bool__(self):
        return False


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _slice_index(value) -> int | None:
    if _is_int(value):
        return value
    if isinstance(value, str):
        match = _SLICE_ID.fullmatch(value.strip())
        if match:
            return int(match.group(1)) - 1
    return None


def parse(text: str, dims: Sequence[int]) -> ParsedResponse | FormatFailure:
    """Parse a rollout against a ``(H, W, D)`` grid.  Never raises."""
    if not isinstance(text, str):
        return FormatFailure(SCHEMA_ERROR, "response is not text")
    counts = [text.count(tag) for tag in TAGS]
    if min(counts) == 0:
        return FormatFailure(MISSING_BLOCK, "missing " + ", ".join(t for t, c in zip(TAGS, counts) if c == 0))
    if max(counts) > 1:
        return FormatFailure(DUPLICATE_BLOCK, "repeated " + ", ".join(t for t, c in zip(TAGS, counts) if c > 1))
    pos = [text.index(tag) for tag in TAGS]
    if not pos[0] < pos[1] < pos[2] < pos[3]:
        return FormatFailure(BAD_ORDER)
    outside = (text[:pos[0]], text[pos[1] + len(THINK_CLOSE):pos[2]], text[pos[3] + len(ANSWER_CLOSE):])
    if any(chunk.strip() for chunk in outside):
        return FormatFailure(SCHEMA_ERROR, "text outside the think/answer blocks")
    think = text[pos[0] + len(THINK_OPEN):pos[1]]
    body = text[pos[2] + len(ANSWER_OPEN):pos[3]]

    try:
        obj = json.loads(body)
    except (ValueError, RecursionError) as exc:
        return FormatFailure(SCHEMA_ERROR, f"answer is not JSON: {exc}")
    if not isinstance(obj, dict) or set(obj) != {"slice", "bbox_2d_list"}:
        return FormatFailure(SCHEMA_ERROR, "answer must have exactly 'slice' and 'bbox_2d_list'")
    k = _slice_index(obj["slice"])
    if k is None:
        return FormatFailure(SCHEMA_ERROR, "slice must be an integer or '<slice N>'")
    raw_boxes = obj["bbox_2d_list"]
    if not isinstance(raw_boxes, list) or not all(
            isinstance(b, list) and len(b) == 4 and all(_is_int(v) for v in b) for b in raw_boxes):
        return FormatFailure(SCHEMA_ERROR, "bbox_2d_list must be a list of 4-integer arrays")

    h, w, d = dims
    if not 0 <= k < d:
        return FormatFailure(OUT_OF_BOUNDS, f"slice {k} outside [0, {d})")
    boxes = []
    for x0, y0, x1, y1 in raw_boxes:
        if x0 >= x1 or y0 >= y1:
            return FormatFailure(DEGENERATE_BOX, f"box {[x0, y0, x1, y1]} has no area")
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            return FormatFailure(OUT_OF_BOUNDS, f"box {[x0, y0, x1, y1]} outside {w}x{h}")
        boxes.append(Box2D(x0, y0, x1, y1))
    return ParsedResponse(think, EvidenceAnchor(k, tuple(boxes)))


def serialize(think: str, anchor: EvidenceAnchor, dims: Sequence[int] | None = None) -> str:
    """Render a response that :func:`parse` maps back to ``(think, anchor)``.

    Tag text inside ``think`` is rejected rather than escaped.
    """
    for tag in TAGS:
        if tag in think:
            raise ValueError(f"think text may not contain {tag!r}")
    if dims is not None:
        anchor.validate(dims)
    answer = json.dumps({"slice": anchor.key_slice, "bbox_2d_list": [b.as_list() for b in anchor.boxes]})
    return f"{THINK_OPEN}{think}{THINK_CLOSE}\n{ANSWER_OPEN}{answer}{ANSWER_CLOSE}"
