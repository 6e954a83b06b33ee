"""Confidence bucketing, hard-vote filtering, pseudo-label assembly,
model ensembling, and the round-by-round self-training loop.

Predictions split into a high-confidence bucket (max probability above a
high threshold, labeled by argmax, weight 1) and a low-confidence band
(max probability inside a closed interval) whose members must survive a
two-rule vote against four peer models before they enter training with
weight 2. Everything between the band and the high threshold, and anything
below the band, stays out of training entirely.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    DatasetManifest,
    FormatError,
    LabelEntry,
    LabelSet,
    LabelSource,
    PredictionMatrix,
    ValidationError,
    write_labelset,
    write_predictions,
)
from .metrics import MetricReport, evaluate_predictions
from .trainer import (
    Checkpoint,
    TrainerConfig,
    finetune,
    write_checkpoint,
)

VOTE_HEADER = "image_id,baseline,peer1,peer2,peer3,peer4,outcome"
HI_DEFAULT = 0.95
LO_DEFAULT = (0.5, 0.65)


class _UnsureType:
    """Sentinel for items the vote could not settle; compares by identity."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "Unsure"


UNSURE = _UnsureType()


def _same_outcome(a, b) -> bool:
    if isinstance(a, _UnsureType) or isinstance(b, _UnsureType):
        return a is b
    return a == b


@dataclass(frozen=True)
class ConfidenceBuckets:
    """Partition of prediction ids by max class probability."""

    part1: Mapping[str, int]  # id -> argmax label, confidence above hi
    part2_candidates: tuple[str, ...]  # inside the low band, await the vote
    unused: tuple[str, ...]

    def __post_init__(self):
        groups = (set(self.part1), set(self.part2_candidates), set(self.unused))
        total = len(self.part1) + len(self.part2_candidates) + len(self.unused)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ValidationError("buckets must be pairwise disjoint")
        object.__setattr__(self, "part1", dict(self.part1))


def bucket_predictions(
    preds: PredictionMatrix,
    hi: float = HI_DEFAULT,
    lo: tuple[float, float] = LO_DEFAULT,
) -> ConfidenceBuckets:
    """Split by max probability: above hi, inside the closed lo band, or neither."""
    lo_low, lo_high = lo
    if not lo_low <= lo_high < hi:
        raise ValidationError(
            f"thresholds must satisfy lo_low <= lo_high < hi, "
            f"got lo=[{lo_low}, {lo_high}] hi={hi}"
        )
    part1: dict[str, int] = {}
    part2: list[str] = []
    unused: list[str] = []
    max_probs = preds.max_probs()
    arg = preds.argmax_labels()
    for pos, item in enumerate(preds.ids):
        p = max_probs[pos]
        if p > hi:
            part1[item] = int(arg[pos])
        elif lo_low <= p <= lo_high:
            part2.append(item)
        else:
            unused.append(item)
    return ConfidenceBuckets(part1, tuple(part2), tuple(unused))


def hard_vote_filter(baseline: int, peers: Sequence[int]):
    """Two-rule peer filter over argmax labels.

    Rule 1: at least two of the four peers agree with the baseline, keep the
    baseline label. Rule 2, consulted only when rule 1 fails: all four peers
    agree with each other, take their label. Anything else is Unsure.
    """
    peers = [int(p) for p in peers]
    if len(peers) != 4:
        raise ValidationError(f"exactly 4 peer labels required, got {len(peers)}")
    baseline = int(baseline)
    if baseline < 0 or any(p < 0 for p in peers):
        raise ValidationError("class labels must be non-negative")
    if sum(p == baseline for p in peers) >= 2:
        return baseline
    if all(p == peers[0] for p in peers):
        return peers[0]
    return UNSURE


@dataclass(frozen=True)
class VoteRecord:
    """One vote: self-validating, the stored outcome must match the rules."""

    item: str
    baseline: int
    peers: tuple[int, int, int, int]
    outcome: object  # ClassLabel or UNSURE

    def __post_init__(self):
        expected = hard_vote_filter(self.baseline, self.peers)
        if not _same_outcome(expected, self.outcome):
            raise ValidationError(
                f"outcome {self.outcome!r} for {self.item!r} contradicts the "
                f"filter rules (expected {expected!r})"
            )


@dataclass(frozen=True)
class PseudoLabelBatch:
    """Labels minted in one round: high-confidence part 1 and voted part 2."""

    round_index: int
    part1: Mapping[str, int]
    part2: Mapping[str, int]
    unsure: tuple[str, ...]

    def __post_init__(self):
        if self.round_index < 1:
            raise ValidationError("round index must be at least 1")
        overlap = set(self.part1) & set(self.part2)
        if overlap:
            raise ValidationError(f"part1 and part2 overlap: {sorted(overlap)[:5]}")
        object.__setattr__(self, "part1", dict(self.part1))
        object.__setattr__(self, "part2", dict(self.part2))

    def is_empty(self) -> bool:
        return not self.part1 and not self.part2

    def to_labelset(self) -> LabelSet:
        entries = {
            i: LabelEntry(l, LabelSource.PSEUDO_HIGH_CONF, 1)
            for i, l in self.part1.items()
        }
        entries.update(
            {
                i: LabelEntry(l, LabelSource.PSEUDO_VOTED, 2)
                for i, l in self.part2.items()
            }
        )
        return LabelSet(entries)


def build_pseudo_batch(
    buckets: ConfidenceBuckets,
    baseline_preds: PredictionMatrix,
    peer_preds: Sequence[PredictionMatrix],
    round_index: int,
) -> tuple[PseudoLabelBatch, tuple[VoteRecord, ...]]:
    """Vote every low-band candidate; survivors become weight-2 labels."""
    peer_preds = tuple(peer_preds)
    if len(peer_preds) != 4:
        raise ValidationError(
            f"exactly 4 peer prediction matrices required, got {len(peer_preds)}"
        )
    part2: dict[str, int] = {}
    records: list[VoteRecord] = []
    for item in buckets.part2_candidates:
        baseline_label = baseline_preds.argmax_label(item)
        peer_labels = tuple(m.argmax_label(item) for m in peer_preds)
        outcome = hard_vote_filter(baseline_label, peer_labels)
        records.append(VoteRecord(item, baseline_label, peer_labels, outcome))
        if not isinstance(outcome, _UnsureType):
            part2[item] = outcome
    unsure = tuple(r.item for r in records if isinstance(r.outcome, _UnsureType))
    batch = PseudoLabelBatch(round_index, dict(buckets.part1), part2, unsure)
    return batch, tuple(records)


def assemble_training_set(original: LabelSet, batch: PseudoLabelBatch) -> LabelSet:
    """Union of originals and pseudo-labels; originals are never overwritten."""
    pseudo = batch.to_labelset()
    collisions = [i for i in pseudo.ids() if i in original]
    if collisions:
        raise ValidationError(
            f"pseudo-label ids collide with the original set: {collisions[:5]}"
        )
    entries = dict(original.entries)
    entries.update(pseudo.entries)
    return LabelSet(entries)


def write_vote_audit(path, records: Sequence[VoteRecord]) -> None:
    lines = [VOTE_HEADER]
    for r in records:
        outcome = "Unsure" if isinstance(r.outcome, _UnsureType) else str(r.outcome)
        lines.append(
            f"{r.item},{r.baseline},{r.peers[0]},{r.peers[1]},{r.peers[2]},{r.peers[3]},{outcome}"
        )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vote_audit(path) -> tuple[VoteRecord, ...]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != VOTE_HEADER:
        raise FormatError(str(path), "line 1", f"expected header {VOTE_HEADER!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 7:
            raise FormatError(str(path), f"line {lineno}", "expected 7 fields")
        try:
            outcome = UNSURE if parts[6] == "Unsure" else int(parts[6])
            records.append(
                VoteRecord(
                    item=parts[0],
                    baseline=int(parts[1]),
                    peers=tuple(int(p) for p in parts[2:6]),
                    outcome=outcome,
                )
            )
        except (ValueError, ValidationError) as exc:
            raise FormatError(str(path), f"line {lineno}", str(exc)) from exc
    return tuple(records)


def _aligned(member: PredictionMatrix, ids: Sequence[str]) -> np.ndarray:
    return np.stack([member.row(i) for i in ids])


def ensemble(members: Sequence[PredictionMatrix], mode: str = "mean_prob") -> PredictionMatrix:
    """Combine aligned prediction matrices.

    mean_prob averages element-wise (exactly, via compensated summation, so
    member order cannot perturb the result). hard_vote takes the plurality of
    member argmaxes as a one-hot row; ties go to the tied class with the
    highest mean probability, then the lowest class index.
    """
    members = list(members)
    if len(members) < 2:
        raise ValidationError("ensemble needs at least 2 members")
    ids = members[0].ids
    id_set = set(ids)
    k = members[0].num_classes
    for pos, m in enumerate(members[1:], start=2):
        if m.num_classes != k:
            raise ValidationError(f"member {pos} has {m.num_classes} classes, expected {k}")
        if set(m.ids) != id_set:
            raise ValidationError(f"member {pos} id set differs from member 1")
    aligned = [_aligned(m, ids) for m in members]
    mean = np.empty((len(ids), k), dtype=np.float64)
    for pos in range(len(ids)):
        for c in range(k):
            mean[pos, c] = math.fsum(a[pos, c] for a in aligned) / len(aligned)
    if mode == "mean_prob":
        return PredictionMatrix(ids, mean)
    if mode != "hard_vote":
        raise ValidationError(f"unknown ensemble mode {mode!r}")
    votes = np.stack([np.argmax(a, axis=1) for a in aligned])
    one_hot = np.zeros((len(ids), k), dtype=np.float64)
    for pos in range(len(ids)):
        counts = np.bincount(votes[:, pos], minlength=k)
        tied = np.flatnonzero(counts == counts.max())
        if tied.size > 1:
            best = mean[pos, tied].max()
            tied = tied[mean[pos, tied] == best]
        one_hot[pos, tied[0]] = 1.0
    return PredictionMatrix(ids, one_hot)


@dataclass(frozen=True)
class RoundConfig:
    hi: float = HI_DEFAULT
    lo_low: float = LO_DEFAULT[0]
    lo_high: float = LO_DEFAULT[1]
    finetune_epochs: int = 10
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    prediction_source: str = "baseline"  # baseline | ensemble_with_peers
    ensemble_mode: str = "mean_prob"

    def __post_init__(self):
        if not self.lo_low <= self.lo_high < self.hi:
            raise ValidationError("thresholds must satisfy lo_low <= lo_high < hi")
        if self.finetune_epochs < 1:
            raise ValidationError("finetune epochs must be at least 1")
        if self.prediction_source not in ("baseline", "ensemble_with_peers"):
            raise ValidationError(f"unknown prediction source {self.prediction_source!r}")
        if self.ensemble_mode not in ("mean_prob", "hard_vote"):
            raise ValidationError(f"unknown ensemble mode {self.ensemble_mode!r}")


@dataclass(frozen=True)
class RoundState:
    """Inputs for the next round: supervision, current model, pool predictions."""

    round_index: int
    train_labels: LabelSet
    checkpoint: Checkpoint
    baseline_preds: PredictionMatrix
    peer_preds: tuple[PredictionMatrix, ...]

    def __post_init__(self):
        if self.round_index < 1:
            raise ValidationError("round index must be at least 1")
        if len(self.peer_preds) != 4:
            raise ValidationError(
                f"exactly 4 peer prediction matrices required, got {len(self.peer_preds)}"
            )


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    part1_count: int
    voted_count: int
    unsure_count: int
    finetuned: bool
    val_report: MetricReport
    warnings: tuple[str, ...] = ()

    def to_json(self) -> str:
        doc = {
            "round": self.round_index,
            "part1": self.part1_count,
            "voted": self.voted_count,
            "unsure": self.unsure_count,
            "finetuned": self.finetuned,
            "val": self.val_report.to_dict(),
            "warnings": list(self.warnings),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def run_round(
    manifest: DatasetManifest,
    state: RoundState,
    val_ids: Sequence[str],
    config: RoundConfig | None = None,
    out_dir: str | None = None,
    seed: int = 0,
) -> tuple[RoundState, RoundReport]:
    """One self-training round: bucket, vote, assemble, finetune, re-predict.

    A round that mints no pseudo-labels skips the finetune and returns the
    state unchanged (with a warning); artifacts are still written so the
    audit trail has no gaps.
    """
    config = config or RoundConfig()
    r = state.round_index
    buckets = bucket_predictions(
        state.baseline_preds, config.hi, (config.lo_low, config.lo_high)
    )
    batch, records = build_pseudo_batch(
        buckets, state.baseline_preds, state.peer_preds, r
    )
    training = assemble_training_set(state.train_labels, batch)

    warnings: list[str] = []
    if batch.is_empty():
        warnings.append(f"round {r} minted no pseudo-labels; finetune skipped")
        checkpoint = state.checkpoint
        new_state = state
    else:
        checkpoint, log = finetune(
            manifest, state.checkpoint, training, val_ids,
            config.trainer, config.finetune_epochs, seed,
        )
        warnings.extend(log.warnings)
        base = checkpoint.model().predictions(manifest, state.baseline_preds.ids)
        if config.prediction_source == "ensemble_with_peers":
            new_preds = ensemble([base, *state.peer_preds], mode=config.ensemble_mode)
        else:
            new_preds = base
        new_state = RoundState(
            round_index=r + 1,
            train_labels=state.train_labels,
            checkpoint=checkpoint,
            baseline_preds=new_preds,
            peer_preds=state.peer_preds,
        )

    val_preds = checkpoint.model().predictions(manifest, val_ids)
    val_report = evaluate_predictions(manifest.ground_truth(), val_preds)
    report = RoundReport(
        round_index=r,
        part1_count=len(batch.part1),
        voted_count=len(batch.part2),
        unsure_count=len(batch.unsure),
        finetuned=not batch.is_empty(),
        val_report=val_report,
        warnings=tuple(warnings),
    )

    if out_dir is not None:
        _persist_round(out_dir, r, batch, records, training, checkpoint, new_state.baseline_preds, report)
    return new_state, report


def _persist_round(out_dir, r, batch, records, training, checkpoint, preds, report):
    prefix = os.path.join(out_dir, f"round{r}_")
    write_vote_audit(prefix + "votes.csv", records)
    write_labelset(batch.to_labelset(), prefix + "pseudo_labels.csv")
    write_labelset(training, prefix + "training_set.csv")
    write_checkpoint(prefix + "checkpoint.json", checkpoint)
    write_predictions(preds, prefix + "predictions.csv")
    with open(prefix + "report.json", "w", encoding="ascii", newline="\n") as fh:
        fh.write(report.to_json())
