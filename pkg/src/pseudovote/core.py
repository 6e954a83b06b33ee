"""Domain types and deterministic file I/O shared by every pipeline stage.

All types are immutable after construction; readers validate eagerly and
report the offending line or byte offset. Writers are byte-stable: the same
in-memory value always serializes to identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ROW_SUM_TOL = 1e-6
PROB_DECIMALS = 6
_PROB_SCALE = 10 ** PROB_DECIMALS


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PipelineError):
    """An input value, argument, or file failed validation."""


class FormatError(ValidationError):
    """Validation failure tied to a location inside a file."""

    def __init__(self, path, location: str, message: str):
        self.path = str(path)
        self.location = location
        self.reason = message
        super().__init__(f"{self.path}: {location}: {message}")


class LabelSource(Enum):
    GROUND_TRUTH = "ground_truth"
    PSEUDO_HIGH_CONF = "pseudo_high_conf"
    PSEUDO_VOTED = "pseudo_voted"


def _check_item_id(item_id: str) -> str:
    if not isinstance(item_id, str) or not item_id:
        raise ValidationError("item id must be a non-empty string")
    if "," in item_id or "\n" in item_id:
        raise ValidationError(f"item id {item_id!r} contains a CSV delimiter")
    return item_id


@dataclass(frozen=True)
class LabelEntry:
    label: int
    source: LabelSource = LabelSource.GROUND_TRUTH
    weight: int = 1

    def __post_init__(self):
        if self.label < 0:
            raise ValidationError(f"class label {self.label} is negative")
        if self.weight < 1:
            raise ValidationError(f"label weight {self.weight} < 1")


@dataclass(frozen=True)
class LabelSet:
    """Ground-truth or pseudo class assignments keyed by item id."""

    entries: dict[str, LabelEntry]

    def __post_init__(self):
        for item_id in self.entries:
            _check_item_id(item_id)

    @classmethod
    def from_ground_truth(cls, labels: Mapping[str, int]) -> "LabelSet":
        return cls({i: LabelEntry(l) for i, l in labels.items()})

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.entries

    def __getitem__(self, item_id: str) -> LabelEntry:
        return self.entries[item_id]

    def ids(self) -> list[str]:
        return sorted(self.entries)

    def label_of(self, item_id: str) -> int:
        return self.entries[item_id].label

    def num_classes_lower_bound(self) -> int:
        return 1 + max(e.label for e in self.entries.values())

    def effective_size(self) -> int:
        """Epoch size after expanding each entry by its repeat weight."""
        return sum(e.weight for e in self.entries.values())


@dataclass(frozen=True)
class PredictionMatrix:
    """Per-item class-probability vectors, in a fixed row order."""

    ids: tuple[str, ...]
    probs: np.ndarray  # shape (N, K), float64

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2 or probs.shape[1] < 1:
            raise ValidationError("probability matrix must be 2-D with K >= 1")
        if len(self.ids) != probs.shape[0]:
            raise ValidationError("id count does not match probability rows")
        if not np.all(np.isfinite(probs)):
            raise ValidationError("probabilities contain NaN or Inf")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise ValidationError("probabilities outside [0, 1]")
        sums = probs.sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > ROW_SUM_TOL)[0]
        if bad.size:
            raise ValidationError(
                f"row for id {self.ids[bad[0]]!r} sums to {sums[bad[0]]!r}, "
                f"outside 1 +/- {ROW_SUM_TOL}"
            )
        index = {}
        for pos, item_id in enumerate(self.ids):
            _check_item_id(item_id)
            if item_id in index:
                raise ValidationError(f"duplicate id {item_id!r}")
            index[item_id] = pos
        object.__setattr__(self, "_index", index)
        probs.setflags(write=False)

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[str, Sequence[float]]]) -> "PredictionMatrix":
        pairs = list(entries)
        ids = tuple(item_id for item_id, _ in pairs)
        probs = np.asarray([vec for _, vec in pairs], dtype=np.float64)
        return cls(ids, probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def row(self, item_id: str) -> np.ndarray:
        if item_id not in self._index:
            raise ValidationError(f"no prediction for id {item_id!r}")
        return self.probs[self._index[item_id]]

    def argmax_label(self, item_id: str) -> int:
        # np.argmax breaks ties toward the lowest class index.
        return int(np.argmax(self.row(item_id)))

    def argmax_labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def max_probs(self) -> np.ndarray:
        return self.probs.max(axis=1)


@dataclass(frozen=True)
class MaskImage:
    """Binary 2-D lesion mask; pixels[row, col] is 0 or 1."""

    pixels: np.ndarray  # shape (height, width), uint8

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.uint8)
        if pixels.ndim != 2 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValidationError("mask must be a non-empty 2-D grid")
        if not np.all((pixels == 0) | (pixels == 1)):
            raise ValidationError("mask pixels must be strictly binary")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def popcount(self) -> int:
        return int(self.pixels.sum())

    def is_empty(self) -> bool:
        return self.popcount() == 0

    @classmethod
    def zeros(cls, height: int, width: int) -> "MaskImage":
        return cls(np.zeros((height, width), dtype=np.uint8))


@dataclass(frozen=True)
class DatasetManifest:
    """Desk-scale dataset: feature vectors with optionally known labels."""

    ids: tuple[str, ...]
    features: np.ndarray  # shape (N, D)
    labels: dict[str, int]  # known labels only; may cover a subset of ids
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", features)
        if features.ndim != 2 or features.shape[1] < 1:
            raise ValidationError("feature matrix must be 2-D with D >= 1")
        if len(self.ids) != features.shape[0]:
            raise ValidationError("id count does not match feature rows")
        if self.num_classes < 2:
            raise ValidationError("manifest needs at least 2 classes")
        if not np.all(np.isfinite(features)):
            raise ValidationError("features contain NaN or Inf")
        index = {}
        for pos, item_id in enumerate(self.ids):
            _check_item_id(item_id)
            if item_id in index:
                raise ValidationError(f"duplicate id {item_id!r}")
            index[item_id] = pos
        for item_id, label in self.labels.items():
            if item_id not in index:
                raise ValidationError(f"label for unknown id {item_id!r}")
            if not 0 <= label < self.num_classes:
                raise ValidationError(
                    f"label {label} for id {item_id!r} outside [0, {self.num_classes})"
                )
        object.__setattr__(self, "_index", index)
        features.setflags(write=False)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def feature_rows(self, ids: Sequence[str]) -> np.ndarray:
        try:
            rows = [self._index[i] for i in ids]
        except KeyError as exc:
            raise ValidationError(f"id {exc.args[0]!r} not in manifest") from exc
        return self.features[rows]

    def labeled_ids(self) -> list[str]:
        return sorted(self.labels)

    def unlabeled_ids(self) -> list[str]:
        return [i for i in self.ids if i not in self.labels]

    def ground_truth(self) -> LabelSet:
        return LabelSet.from_ground_truth(self.labels)

    def with_labels(self, labels: Mapping[str, int]) -> "DatasetManifest":
        return DatasetManifest(self.ids, self.features, dict(labels), self.num_classes)


# ---------------------------------------------------------------------------
# predictions CSV


def _format_prob_row(vec: np.ndarray) -> list[str]:
    """Render one probability row at fixed precision.

    Rows are quantized to 6 decimals with a largest-remainder correction so
    the written decimals sum to exactly 1.000000; this keeps the reader's
    1e-6 sum tolerance sound for any K. Values already on the 6-decimal grid
    are written unchanged.
    """
    scaled = vec * _PROB_SCALE
    units = np.floor(scaled + 0.5).astype(np.int64)
    residual = scaled - units
    diff = _PROB_SCALE - int(units.sum())
    while diff > 0:
        pick = int(np.argmax(residual))
        units[pick] += 1
        residual[pick] -= 1.0
        diff -= 1
    while diff < 0:
        candidates = np.where(units > 0, residual, np.inf)
        pick = int(np.argmin(candidates))
        units[pick] -= 1
        residual[pick] += 1.0
        diff += 1
    return [f"{u // _PROB_SCALE}.{u % _PROB_SCALE:06d}" for u in units]


def write_predictions(preds: PredictionMatrix, path) -> None:
    k = preds.num_classes
    header = "image_id," + ",".join(f"p{i}" for i in range(k))
    lines = [header]
    for item_id, row in zip(preds.ids, preds.probs):
        lines.append(item_id + "," + ",".join(_format_prob_row(row)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_predictions(path) -> PredictionMatrix:
    """Parse and validate a predictions CSV, preserving row order."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read predictions file {path}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(path, "line 1", "empty predictions file")
    header = lines[0].split(",")
    if header[0] != "image_id" or len(header) < 2:
        raise FormatError(path, "line 1", f"bad header {lines[0]!r}")
    k = len(header) - 1
    expected = [f"p{i}" for i in range(k)]
    if header[1:] != expected:
        raise FormatError(path, "line 1", f"bad header {lines[0]!r}")

    ids: list[str] = []
    rows: list[list[float]] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != k + 1:
            raise FormatError(path, f"line {lineno}", f"expected {k + 1} fields, got {len(fields)}")
        item_id = fields[0]
        if not item_id:
            raise FormatError(path, f"line {lineno}", "empty image_id")
        if item_id in seen:
            raise FormatError(
                path, f"line {lineno}",
                f"duplicate id {item_id!r} (first seen on line {seen[item_id]})",
            )
        seen[item_id] = lineno
        try:
            vec = [float(f) for f in fields[1:]]
        except ValueError:
            raise FormatError(path, f"line {lineno}", f"malformed probability in {line!r}") from None
        if any(math.isnan(p) or math.isinf(p) for p in vec):
            raise FormatError(path, f"line {lineno}", "probability is NaN or Inf")
        if any(p < 0.0 or p > 1.0 for p in vec):
            raise FormatError(path, f"line {lineno}", "probability outside [0, 1]")
        total = sum(vec)
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise FormatError(
                path, f"line {lineno}",
                f"row sum {total!r} out of tolerance 1 +/- {ROW_SUM_TOL}",
            )
        ids.append(item_id)
        rows.append(vec)
    if not ids:
        raise FormatError(path, "line 2", "predictions file has no data rows")
    return PredictionMatrix(tuple(ids), np.asarray(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# labels CSV

_LABEL_HEADER_FULL = "image_id,label,source,weight"
_LABEL_HEADER_SHORT = "image_id,label"
_SOURCE_TAGS = {s.value: s for s in LabelSource}


def write_labelset(labels: LabelSet, path) -> None:
    """Write a labels CSV sorted by id (byte-stable)."""
    lines = [_LABEL_HEADER_FULL]
    for item_id in sorted(labels.entries):
        e = labels.entries[item_id]
        lines.append(f"{item_id},{e.label},{e.source.value},{e.weight}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_labelset(path) -> LabelSet:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read labels file {path}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(path, "line 1", "empty labels file")
    header = lines[0]
    if header == _LABEL_HEADER_FULL:
        full = True
    elif header == _LABEL_HEADER_SHORT:
        full = False
    else:
        raise FormatError(path, "line 1", f"bad header {header!r}")
    entries: dict[str, LabelEntry] = {}
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != (4 if full else 2):
            raise FormatError(path, f"line {lineno}", f"wrong field count in {line!r}")
        item_id = fields[0]
        if not item_id:
            raise FormatError(path, f"line {lineno}", "empty image_id")
        if item_id in seen:
            raise FormatError(
                path, f"line {lineno}",
                f"duplicate id {item_id!r} (first seen on line {seen[item_id]})",
            )
        seen[item_id] = lineno
        try:
            label = int(fields[1])
        except ValueError:
            raise FormatError(path, f"line {lineno}", f"malformed label {fields[1]!r}") from None
        if label < 0:
            raise FormatError(path, f"line {lineno}", f"negative label {label}")
        if full:
            if fields[2] not in _SOURCE_TAGS:
                raise FormatError(path, f"line {lineno}", f"unknown source tag {fields[2]!r}")
            source = _SOURCE_TAGS[fields[2]]
            try:
                weight = int(fields[3])
            except ValueError:
                raise FormatError(path, f"line {lineno}", f"malformed weight {fields[3]!r}") from None
            if weight < 1:
                raise FormatError(path, f"line {lineno}", f"weight {weight} < 1")
        else:
            source, weight = LabelSource.GROUND_TRUTH, 1
        entries[item_id] = LabelEntry(label, source, weight)
    return LabelSet(entries)


# ---------------------------------------------------------------------------
# masks (PGM, P5)


def write_mask(mask: MaskImage, path) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    payload = (mask.pixels.astype(np.uint8) * 255).tobytes()
    Path(path).write_bytes(header + payload)


def _next_pgm_token(data: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(path, f"byte {pos}", "truncated header")
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_mask(path) -> MaskImage:
    """Read a strictly binary P5 PGM; gray values in (0, 128) are rejected."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read mask file {path}: {exc}") from exc
    if data[:2] != b"P5":
        raise FormatError(path, "byte 0", "not a P5 PGM (bad magic)")
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        token, pos = _next_pgm_token(data, pos, path)
        try:
            value = int(token)
        except ValueError:
            raise FormatError(path, f"byte {pos - len(token)}", f"malformed {name} {token!r}") from None
        values.append(value)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(path, f"byte {pos}", f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(path, f"byte {pos}", f"maxval must be 255, got {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(path, f"byte {pos}", "missing whitespace after maxval")
    pos += 1
    expected = width * height
    payload = np.frombuffer(data, dtype=np.uint8, count=min(expected, len(data) - pos), offset=pos)
    if payload.size < expected:
        raise FormatError(
            path, f"byte {pos + payload.size}",
            f"truncated payload: expected {expected} pixels, got {payload.size}",
        )
    gray = np.where((payload > 0) & (payload < 128))[0]
    if gray.size:
        i = int(gray[0])
        raise FormatError(
            path, f"byte {pos + i}",
            f"non-binary pixel value {int(payload[i])} (only 0 and >= 128 allowed)",
        )
    pixels = (payload >= 128).astype(np.uint8).reshape(height, width)
    return MaskImage(pixels)


# ---------------------------------------------------------------------------
# dataset manifest CSV: image_id,f0..f{D-1},label (label column may be blank)


def write_manifest(manifest: DatasetManifest, path) -> None:
    d = manifest.feature_dim
    header = "image_id," + ",".join(f"f{i}" for i in range(d)) + ",label"
    lines = [header]
    for item_id, row in zip(manifest.ids, manifest.features):
        label = manifest.labels.get(item_id)
        feat = ",".join(repr(float(x)) for x in row)
        lines.append(f"{item_id},{feat},{'' if label is None else label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_manifest(path, num_classes: int | None = None) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read manifest file {path}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(path, "line 1", "empty manifest file")
    header = lines[0].split(",")
    if header[0] != "image_id" or header[-1] != "label" or len(header) < 3:
        raise FormatError(path, "line 1", f"bad header {lines[0]!r}")
    d = len(header) - 2
    if header[1:-1] != [f"f{i}" for i in range(d)]:
        raise FormatError(path, "line 1", f"bad header {lines[0]!r}")
    ids: list[str] = []
    feats: list[list[float]] = []
    labels: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != d + 2:
            raise FormatError(path, f"line {lineno}", f"wrong field count in {line!r}")
        item_id = fields[0]
        try:
            feats.append([float(f) for f in fields[1:-1]])
        except ValueError:
            raise FormatError(path, f"line {lineno}", f"malformed feature in {line!r}") from None
        if fields[-1] != "":
            try:
                labels[item_id] = int(fields[-1])
            except ValueError:
                raise FormatError(path, f"line {lineno}", f"malformed label {fields[-1]!r}") from None
        ids.append(item_id)
    if num_classes is None:
        if not labels:
            raise ValidationError(f"{path}: manifest has no labels; pass num_classes explicitly")
        num_classes = 1 + max(labels.values())
    try:
        return DatasetManifest(tuple(ids), np.asarray(feats), labels, num_classes)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
