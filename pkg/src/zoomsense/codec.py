"""Parse and render the structured policy I/O.

A response looks like::

    <think>free text</think><answer>[{"bbox_2d": [x1, y1, x2, y2], "label": "..."}]</answer>

Tags are matched literally and case-sensitively. Text outside the two blocks
is ignored, and a markdown code fence around the JSON payload is stripped.
"""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import NamedTuple, Sequence

from .geometry import BBox

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
PLACEHOLDER = "{object}"

DETECTION_COUNT = (1, 3)
SEGMENTATION_COUNT = (3, 3)

_FENCE = re.compile(r"^```[A-Za-z0-9_+-]*[ \t]*\n?(.*?)\n?[ \t]*```$", re.DOTALL)


class FormatErrorKind(enum.Enum):
    MISSING_THINK = "MissingThink"
    MISSING_ANSWER = "MissingAnswer"
    TAG_ORDER = "TagOrder"
    DUPLICATE_TAGS = "DuplicateTags"
    INVALID_JSON = "InvalidJson"
    MISSING_BBOX_FIELD = "MissingBboxField"
    BAD_ARITY = "BadArity"
    NON_FINITE_NUMBER = "NonFiniteNumber"


class ValidationErrorKind(enum.Enum):
    OUT_OF_FRAME = "OutOfFrame"
    INVERTED = "Inverted"
    COUNT_VIOLATION = "CountViolation"


class FormatError(ValueError):
    def __init__(self, kind: FormatErrorKind, detail: str = ""):
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = kind


class ValidationError(ValueError):
    def __init__(self, kind: ValidationErrorKind, detail: str = ""):
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = kind


class Proposal(NamedTuple):
    bbox: tuple  # four finite numbers, as parsed
    label: str | None = None


@dataclass(frozen=True)
class StructuredResponse:
    think_text: str
    answer_text: str
    proposals: tuple[Proposal, ...] = field(default_factory=tuple)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _strip_fence(text: str) -> str:
    m = _FENCE.match(text)
    return m.group(1).strip() if m else text


def parse_response(text: str | bytes) -> StructuredResponse:
    """Parse a tagged response; raise :class:`FormatError` naming the first violated rule."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")

    counts = {t: text.count(t) for t in (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)}
    if counts[THINK_OPEN] == 0 or counts[THINK_CLOSE] == 0:
        raise FormatError(FormatErrorKind.MISSING_THINK)
    if counts[ANSWER_OPEN] == 0 or counts[ANSWER_CLOSE] == 0:
        raise FormatError(FormatErrorKind.MISSING_ANSWER)
    if any(c > 1 for c in counts.values()):
        raise FormatError(FormatErrorKind.DUPLICATE_TAGS)

    t0, t1 = text.index(THINK_OPEN), text.index(THINK_CLOSE)
    a0, a1 = text.index(ANSWER_OPEN), text.index(ANSWER_CLOSE)
    if not (t0 < t1 and t1 + len(THINK_CLOSE) <= a0 and a0 < a1):
        raise FormatError(FormatErrorKind.TAG_ORDER)

    think = text[t0 + len(THINK_OPEN) : t1].strip()
    answer = text[a0 + len(ANSWER_OPEN) : a1].strip()
    payload = _strip_fence(answer)

    try:
        data = json.loads(payload)
    except (ValueError, RecursionError) as exc:
        raise FormatError(FormatErrorKind.INVALID_JSON, str(exc)[:80]) from None
    if not isinstance(data, list):
        raise FormatError(FormatErrorKind.INVALID_JSON, "answer must be a JSON array")

    proposals = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or "bbox_2d" not in item:
            raise FormatError(FormatErrorKind.MISSING_BBOX_FIELD, f"item {i}")
        box = item["bbox_2d"]
        if not isinstance(box, list):
            raise FormatError(FormatErrorKind.MISSING_BBOX_FIELD, f"item {i}: bbox_2d is not an array")
        if len(box) != 4:
            raise FormatError(FormatErrorKind.BAD_ARITY, f"item {i}: {len(box)} numbers")
        if not all(_is_number(v) for v in box):
            raise FormatError(FormatErrorKind.MISSING_BBOX_FIELD, f"item {i}: non-numeric bbox_2d")
        if not all(isinstance(v, int) or math.isfinite(v) for v in box):
            raise FormatError(FormatErrorKind.NON_FINITE_NUMBER, f"item {i}")
        label = item.get("label")
        if label is not None and not isinstance(label, str):
            raise FormatError(FormatErrorKind.INVALID_JSON, f"item {i}: label is not a string")
        proposals.append(Proposal(tuple(box), label))

    return StructuredResponse(think, answer, tuple(proposals))


def serialize_response(r: StructuredResponse) -> str:
    items = []
    for p in r.proposals:
        item = {"bbox_2d": list(p.bbox)}
        if p.label is not None:
            item["label"] = p.label
        items.append(item)
    # escape "<" so labels that contain tag text cannot break the framing
    payload = json.dumps(items).replace("<", "\\u003c")
    return f"{THINK_OPEN}{r.think_text}{THINK_CLOSE}{ANSWER_OPEN}{payload}{ANSWER_CLOSE}"


def response_from_boxes(boxes: Sequence[BBox], label: str | None = None, think: str = "") -> StructuredResponse:
    props = tuple(Proposal(tuple(b.as_list()), label) for b in boxes)
    items = [{"bbox_2d": list(p.bbox)} | ({"label": label} if label is not None else {}) for p in props]
    return StructuredResponse(think, json.dumps(items), props)


def validate_proposals(
    r: StructuredResponse, width: int, height: int, k_min: int, k_max: int
) -> list[BBox]:
    """Coerce parsed proposals to in-frame integer boxes (truncating toward zero)."""
    boxes = []
    for i, p in enumerate(r.proposals):
        x1, y1, x2, y2 = (math.trunc(v) for v in p.bbox)
        if x1 > x2 or y1 > y2:
            raise ValidationError(ValidationErrorKind.INVERTED, f"proposal {i}: {[x1, y1, x2, y2]}")
        if x1 < 0 or y1 < 0 or x2 > width - 1 or y2 > height - 1:
            raise ValidationError(
                ValidationErrorKind.OUT_OF_FRAME, f"proposal {i}: {[x1, y1, x2, y2]} in {width}x{height}"
            )
        boxes.append(BBox(x1, y1, x2, y2))
    if not k_min <= len(boxes) <= k_max:
        raise ValidationError(
            ValidationErrorKind.COUNT_VIOLATION, f"{len(boxes)} proposals, expected {k_min}..{k_max}"
        )
    return boxes


class ParseOutcome(NamedTuple):
    """Result of parse + validate; ``boxes`` is empty whenever ``error`` is set."""

    response: StructuredResponse | None
    boxes: tuple[BBox, ...]
    error: FormatError | ValidationError | None

    @property
    def ok(self) -> bool:
        return self.error is None


def check_response(text: str | bytes, width: int, height: int, k_min: int, k_max: int) -> ParseOutcome:
    try:
        resp = parse_response(text)
    except FormatError as exc:
        return ParseOutcome(None, (), exc)
    try:
        boxes = validate_proposals(resp, width, height, k_min, k_max)
    except ValidationError as exc:
        return ParseOutcome(resp, (), exc)
    return ParseOutcome(resp, tuple(boxes), None)


@dataclass(frozen=True)
class PromptTemplate:
    task_kind: str  # "detection" | "segmentation" | "task"
    body: str

    def __post_init__(self):
        if PLACEHOLDER not in self.body:
            raise ValueError(f"template for {self.task_kind!r} has no {PLACEHOLDER} placeholder")


def load_template(task_kind: str) -> PromptTemplate:
    body = resources.files(__package__).joinpath("prompts", f"{task_kind}.txt").read_text("utf-8")
    return PromptTemplate(task_kind, body)


def render_prompt(t: PromptTemplate, object_name: str) -> str:
    if not object_name or not object_name.strip():
        raise ValueError("EmptyObjectName: object name must be non-empty")
    return t.body.replace(PLACEHOLDER, object_name)
