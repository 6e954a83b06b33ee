"""Run a named image backbone over a manifest and emit the prediction-file
contract: header ``image_id,p0,...,p{K-1}``, one row per manifest item in
manifest order, probabilities on each row summing to 1.

The data flow is strictly one-way. This package produces files for the
pipeline's reader; it never imports pipeline logic, so the consumer stays
the single authority on what a valid prediction file is.

The ``stub`` backbone maps each file name to a fixed softmax vector through
sha256. It needs no model weights, no network, and never decodes the image,
which makes the contract testable on any fixture. Real backbones resolve
through torchvision by name and require a local weights file.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

MANIFEST_HEADER = "image_id,path"
TORCHVISION_PREFIX = "torchvision:"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class AdapterError(Exception):
    """Operation failed; one report line per affected file or manifest line."""

    def __init__(self, reports):
        reports = tuple(reports)
        super().__init__("\n".join(reports))
        self.reports = reports


@dataclass(frozen=True)
class AdapterConfig:
    manifest: str
    out: str
    backbone: str = "stub"
    num_classes: int = 3
    weights: str | None = None
    image_dir: str | None = None  # default: the manifest's own directory
    device: str = "cpu"
    resize: int | None = None  # edge length; None keeps native resolution

    def __post_init__(self):
        if self.num_classes < 2:
            raise AdapterError(["num_classes must be at least 2"])
        if self.resize is not None and self.resize < 1:
            raise AdapterError(["resize must be a positive edge length"])
        if not self.backbone:
            raise AdapterError(["backbone name must not be empty"])


def read_image_manifest(path) -> list[tuple[str, str]]:
    """Parse ``image_id,path`` rows, preserving file order.

    Ids must satisfy the prediction-file contract (non-empty, no comma or
    newline), so every id accepted here is writable later. All violations
    are collected and reported together.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise AdapterError([f"{path}: {err}"]) from err
    if not lines or lines[0] != MANIFEST_HEADER:
        raise AdapterError([f"{path}: line 1: expected header {MANIFEST_HEADER!r}"])
    rows: list[tuple[str, str]] = []
    seen: set[str] = set()
    reports: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 2:
            reports.append(f"{path}: line {lineno}: expected 2 fields, got {len(fields)}")
            continue
        image_id, rel = fields
        if not image_id:
            reports.append(f"{path}: line {lineno}: empty image id")
        elif image_id in seen:
            reports.append(f"{path}: line {lineno}: duplicate image id {image_id!r}")
        elif not rel:
            reports.append(f"{path}: line {lineno}: empty image path")
        else:
            seen.add(image_id)
            rows.append((image_id, rel))
    if reports:
        raise AdapterError(reports)
    if not rows:
        raise AdapterError([f"{path}: manifest lists no images"])
    return rows


def stub_probabilities(filename: str, num_classes: int) -> np.ndarray:
    """Fixed softmax vector derived from the file's base name alone."""
    name = os.path.basename(filename)
    logits = np.empty(num_classes)
    for cls in range(num_classes):
        digest = hashlib.sha256(f"{name}:{cls}".encode("utf-8")).digest()
        logits[cls] = 4.0 * int.from_bytes(digest[:8], "big") / 2.0**64
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def _torchvision_probabilities(paths, config: AdapterConfig) -> np.ndarray:
    name = config.backbone[len(TORCHVISION_PREFIX):]
    if not config.weights:
        raise AdapterError(
            [f"backbone {config.backbone!r} requires a local weights file"]
        )
    if not os.path.isfile(config.weights):
        raise AdapterError([f"{config.weights}: weights file not found"])
    import torch  # deferred: only real backbones need it
    import torchvision
    from PIL import Image

    try:
        model = torchvision.models.get_model(
            name, weights=None, num_classes=config.num_classes
        )
        state = torch.load(config.weights, map_location=config.device)
        model.load_state_dict(state)
    except Exception as err:
        raise AdapterError([f"{config.weights}: unloadable weights: {err}"]) from err
    model.to(config.device)
    model.eval()

    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    batch, reports = [], []
    for path in paths:
        try:
            with Image.open(path) as img:
                rgb = img.convert("RGB")
                if config.resize is not None:
                    rgb = rgb.resize((config.resize, config.resize))
                arr = np.asarray(rgb, dtype=np.float32) / 255.0
        except Exception as err:
            reports.append(f"{path}: undecodable image: {err}")
            continue
        tensor = torch.from_numpy(arr).permute(2, 0, 1)
        batch.append((tensor - mean) / std)
    if reports:
        raise AdapterError(reports)
    with torch.no_grad():
        logits = model(torch.stack(batch).to(config.device))
        probs = torch.softmax(logits, dim=1).cpu().numpy()
    return probs.astype(np.float64)


def _atomic_write(path: str, text: str) -> None:
    # Writers elsewhere may watch for the file; it must appear fully formed.
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def emit_predictions(config: AdapterConfig) -> int:
    """Write one probability row per manifest item; return the row count."""
    rows = read_image_manifest(config.manifest)
    base = config.image_dir or os.path.dirname(os.path.abspath(config.manifest))
    resolved = [(item, os.path.join(base, rel)) for item, rel in rows]

    reports = [
        f"{item}: image not found: {path}"
        for item, path in resolved
        if not os.path.isfile(path)
    ]
    if reports:
        raise AdapterError(reports)

    k = config.num_classes
    if config.backbone == "stub":
        probs = np.stack(
            [stub_probabilities(path, k) for _, path in resolved]
        )
    elif config.backbone.startswith(TORCHVISION_PREFIX):
        probs = _torchvision_probabilities([p for _, p in resolved], config)
        if probs.shape != (len(resolved), k):
            raise AdapterError(
                [f"backbone produced {probs.shape[1]} classes, expected {k}"]
            )
    else:
        raise AdapterError([f"unknown backbone {config.backbone!r}"])

    header = "image_id," + ",".join(f"p{i}" for i in range(k))
    lines = [header]
    for (item, _), row in zip(resolved, probs):
        lines.append(item + "," + ",".join(repr(float(p)) for p in row))
    _atomic_write(config.out, "\n".join(lines) + "\n")

    meta = {
        "backbone": config.backbone,
        "classes": k,
        "device": config.device,
        "resize": config.resize,
        "rows": len(resolved),
    }
    _atomic_write(
        config.out + ".meta.json",
        json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n",
    )
    return len(resolved)
