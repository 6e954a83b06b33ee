"""Classifier-gated mask post-processing and mask-set evaluation.

A presence classifier decides, per image, whether a lesion class occurs at
all; masks of images judged Absent are zeroed wholesale. Evaluation scores
every prediction/truth pair with Dice and IoU and averages across items,
with an explicit, configurable convention for pairs where both masks are
empty (score them 1, score them 0, or exclude them from the mean).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .core import FormatError, MaskImage, ValidationError
from .metrics import dice_coefficient, iou

SEG_HEADER = "image_id,label,dice,iou,both_empty"
VERDICT_HEADER = "image_id,present"
CONVENTIONS = ("one", "zero", "exclude")


@dataclass(frozen=True)
class PresenceVerdict:
    """Per-item Absent (0) / Present (1) decisions."""

    verdicts: Mapping[str, int]

    def __post_init__(self):
        for item, v in self.verdicts.items():
            if v not in (0, 1):
                raise ValidationError(f"verdict for {item!r} must be 0 or 1, got {v!r}")
        object.__setattr__(self, "verdicts", dict(self.verdicts))

    @classmethod
    def from_probabilities(
        cls, probs: Mapping[str, float], threshold: float = 0.5
    ) -> "PresenceVerdict":
        # Present iff the presence probability reaches the threshold.
        return cls({i: 1 if p >= threshold else 0 for i, p in probs.items()})

    def __contains__(self, item: str) -> bool:
        return item in self.verdicts

    def __getitem__(self, item: str) -> int:
        return self.verdicts[item]

    def present_count(self) -> int:
        return sum(self.verdicts.values())


def write_verdicts(path, verdict: PresenceVerdict) -> None:
    lines = [VERDICT_HEADER]
    for item in sorted(verdict.verdicts):
        lines.append(f"{item},{verdict.verdicts[item]}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_verdicts(path) -> PresenceVerdict:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != VERDICT_HEADER:
        raise FormatError(str(path), "line 1", f"expected header {VERDICT_HEADER!r}")
    verdicts: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError(str(path), f"line {lineno}", "expected 2 fields")
        item, value = parts
        if item in verdicts:
            raise FormatError(str(path), f"line {lineno}", f"duplicate id {item!r}")
        if value not in ("0", "1"):
            raise FormatError(
                str(path), f"line {lineno}", f"verdict must be 0 or 1, got {value!r}"
            )
        verdicts[item] = int(value)
    return PresenceVerdict(verdicts)


def gate_masks(
    masks: Mapping[str, MaskImage], verdict: PresenceVerdict
) -> dict[str, MaskImage]:
    """Zero every mask whose image was judged Absent; pass the rest through."""
    missing = sorted(set(masks) - set(verdict.verdicts))
    if missing:
        raise ValidationError(f"no verdict for mask id {missing[0]!r}")
    out = {}
    for item, mask in masks.items():
        if verdict[item] == 1:
            out[item] = mask
        else:
            out[item] = MaskImage.zeros(mask.height, mask.width)
    return out


@dataclass(frozen=True)
class SegItem:
    item: str
    label: int
    dice: float
    iou: float
    both_empty: bool


@dataclass(frozen=True)
class SegReport:
    """Per-item overlap scores plus convention-dependent means.

    Item rows always carry the raw metric values (both-empty pairs score 1.0
    there); the convention only governs how such pairs enter the means, so
    any alternative aggregation can be recomputed from the rows.
    """

    label: int
    convention: str
    items: tuple[SegItem, ...]
    mean_dice: float
    mean_iou: float
    n_scored: int


def evaluate_segmentation(
    pred_masks: Mapping[str, MaskImage],
    gt_masks: Mapping[str, MaskImage],
    label: int = 1,
    convention: str = "one",
) -> SegReport:
    if convention not in CONVENTIONS:
        raise ValidationError(f"unknown both-empty convention {convention!r}")
    if set(pred_masks) != set(gt_masks):
        odd = sorted(set(pred_masks) ^ set(gt_masks))
        raise ValidationError(f"prediction and truth id sets differ, e.g. {odd[0]!r}")
    if not pred_masks:
        raise ValidationError("no masks to evaluate")
    items = []
    dice_scores: list[float] = []
    iou_scores: list[float] = []
    for item in sorted(pred_masks):
        p, g = pred_masks[item], gt_masks[item]
        d = dice_coefficient(p, g)
        j = iou(p, g)
        both_empty = p.is_empty() and g.is_empty()
        items.append(SegItem(item, label, d, j, both_empty))
        if both_empty:
            if convention == "exclude":
                continue
            score = 1.0 if convention == "one" else 0.0
            dice_scores.append(score)
            iou_scores.append(score)
        else:
            dice_scores.append(d)
            iou_scores.append(j)
    if not dice_scores:
        raise ValidationError(
            "every pair is both-empty and the convention excludes them; no mean"
        )
    return SegReport(
        label=label,
        convention=convention,
        items=tuple(items),
        mean_dice=math.fsum(dice_scores) / len(dice_scores),
        mean_iou=math.fsum(iou_scores) / len(iou_scores),
        n_scored=len(dice_scores),
    )


def write_seg_results(path, report: SegReport) -> None:
    lines = [SEG_HEADER]
    for r in report.items:
        lines.append(
            f"{r.item},{r.label},{r.dice!r},{r.iou!r},{1 if r.both_empty else 0}"
        )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_seg_results(path) -> tuple[SegItem, ...]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != SEG_HEADER:
        raise FormatError(str(path), "line 1", f"expected header {SEG_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError(str(path), f"line {lineno}", "expected 5 fields")
        try:
            if parts[4] not in ("0", "1"):
                raise ValueError(f"both_empty must be 0 or 1, got {parts[4]!r}")
            rows.append(
                SegItem(
                    item=parts[0],
                    label=int(parts[1]),
                    dice=float(parts[2]),
                    iou=float(parts[3]),
                    both_empty=parts[4] == "1",
                )
            )
        except ValueError as exc:
            raise FormatError(str(path), f"line {lineno}", str(exc)) from exc
    return tuple(rows)
