"""Extracted fields, ground truth, and the rule that labels predictions correct."""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError

PREDICTION = "prediction"
GROUND_TRUTH = "ground_truth"
DEFAULT_IOU_THRESHOLD = 0.3

_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"degenerate box {self.as_list()}", field="location")
        if min(self.x1, self.y1) < 0:
            raise ValidationError(f"negative coordinate in {self.as_list()}", field="location")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class IeField:
    location: BBox
    text: str
    key: str
    source: str = PREDICTION

    def __post_init__(self):
        if self.source not in (PREDICTION, GROUND_TRUTH):
            raise ValidationError(f"unknown source {self.source!r}", field="source")
        if self.source == PREDICTION and not self.text:
            raise ValidationError("predicted field has empty text", field="text")

    def to_json(self) -> dict:
        return {"location": self.location.as_list(), "text": self.text, "key": self.key}

    @classmethod
    def from_json(cls, obj: dict, source: str = PREDICTION) -> "IeField":
        try:
            loc = obj["location"]
            text = obj["text"]
            key = obj["key"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"field is missing {exc}", field=str(exc).strip("'")) from None
        if not isinstance(loc, list) or len(loc) != 4:
            raise ValidationError("location must be four numbers", field="location")
        if not isinstance(text, str):
            raise ValidationError("text must be a string", field="text")
        if not isinstance(key, str):
            raise ValidationError("key must be a string", field="key")
        return cls(BBox(*(float(v) for v in loc)), text, key, source)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def normalize_text(text: str, case_sensitive: bool = True) -> str:
    text = _WS.sub(" ", text.strip())
    return text if case_sensitive else text.casefold()


def fields_match(
    pred: IeField,
    gt: IeField,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    case_sensitive: bool = True,
) -> bool:
    """Same key, same normalized text, and IoU strictly above the threshold."""
    return (
        pred.key == gt.key
        and normalize_text(pred.text, case_sensitive) == normalize_text(gt.text, case_sensitive)
        and iou(pred.location, gt.location) > iou_threshold
    )


def label_predictions(
    preds: Sequence[IeField],
    gts: Sequence[IeField],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    case_sensitive: bool = True,
) -> list[int]:
    """1 for each prediction that matches at least one ground-truth field.

    Matching is existential: one ground-truth field may validate several
    predictions. Ground truth is bucketed by (key, text) so only candidates
    that could match have their IoU computed.
    """
    buckets: dict[tuple[str, str], list[BBox]] = defaultdict(list)
    for gt in gts:
        buckets[(gt.key, normalize_text(gt.text, case_sensitive))].append(gt.location)
    labels = []
    for pred in preds:
        cands = buckets.get((pred.key, normalize_text(pred.text, case_sensitive)), ())
        labels.append(int(any(iou(pred.location, box) > iou_threshold for box in cands)))
    return labels
