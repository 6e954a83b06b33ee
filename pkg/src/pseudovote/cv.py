"""Stratified fold construction and the nested cross-validation protocol.

Folds are a pure function of (labels, k, seed): ids are sorted per class,
shuffled by one seeded generator consumed class by class in ascending label
order, and dealt round-robin starting at fold 0. A nested split holds one
fold out for testing and carves a random 20% of the remainder off for
checkpoint selection; the selection metric is always computed on val and the
reported metric always on test.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import DatasetManifest, FormatError, PipelineError, ValidationError, _check_item_id
from .metrics import MetricReport, evaluate_predictions
from .trainer import Checkpoint, PlateauPolicy, TrainLog, TrainerConfig, train

VAL_FRACTION = 0.2


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every labeled item to one of k folds."""

    k: int
    seed: int
    assignment: Mapping[str, int]

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be at least 1")
        if len(self.assignment) == 0:
            raise ValidationError("fold plan covers no items")
        for item, fold in self.assignment.items():
            _check_item_id(item)
            if not 0 <= fold < self.k:
                raise ValidationError(f"fold {fold} for id {item!r} outside [0, {self.k})")
        object.__setattr__(self, "assignment", dict(self.assignment))

    def fold_members(self, fold: int) -> list[str]:
        if not 0 <= fold < self.k:
            raise ValidationError(f"test fold {fold} outside [0, {self.k})")
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def ids(self) -> list[str]:
        return sorted(self.assignment)


@dataclass(frozen=True)
class NestedSplit:
    """One outer fold held out; the rest split 80/20 into train and val."""

    test_fold: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        groups = (set(self.train_ids), set(self.val_ids), set(self.test_ids))
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ValidationError("train/val/test sets must be pairwise disjoint")


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> FoldPlan:
    """Deal each class's shuffled ids round-robin across folds."""
    if len(labels) == 0:
        raise ValidationError("cannot split an empty label set")
    if k < 1:
        raise ValidationError("k must be at least 1")
    by_class: dict[int, list[str]] = {}
    for item in labels.ids():
        by_class.setdefault(labels.label_of(item), []).append(item)
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    for label in sorted(by_class):
        ids = by_class[label]  # sorted: labels.ids() is canonical order
        perm = rng.permutation(len(ids))
        for slot, idx in enumerate(perm):
            assignment[ids[idx]] = slot % k
    return FoldPlan(k=k, seed=seed, assignment=assignment)


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def nested_split(plan: FoldPlan, test_fold: int, seed: int = 0) -> NestedSplit:
    """Hold one fold out; shuffle the rest and take the first 20% as val.

    The test set depends only on the plan; the seed moves ids between train
    and val but never across the test boundary.
    """
    if plan.k < 2:
        raise ValidationError("nested CV requires k >= 2")
    test = plan.fold_members(test_fold)
    rest = sorted(i for i, f in plan.assignment.items() if f != test_fold)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(rest))
    shuffled = [rest[i] for i in perm]
    n_val = round_half_up(VAL_FRACTION * len(rest))
    return NestedSplit(
        test_fold=test_fold,
        train_ids=tuple(shuffled[n_val:]),
        val_ids=tuple(shuffled[:n_val]),
        test_ids=tuple(test),
    )


def write_fold_plan(path, plan: FoldPlan) -> None:
    doc = {"k": plan.k, "seed": plan.seed, "assignment": dict(plan.assignment)}
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def read_fold_plan(path) -> FoldPlan:
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(str(path), "fold plan", str(exc)) from exc
    if not isinstance(doc, dict):
        raise FormatError(str(path), "fold plan", "expected a JSON object")
    try:
        plan = FoldPlan(
            k=int(doc["k"]),
            seed=int(doc["seed"]),
            assignment={str(i): int(f) for i, f in doc["assignment"].items()},
        )
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise FormatError(str(path), "fold plan", str(exc)) from exc
    return plan


@dataclass(frozen=True)
class FoldOutcome:
    fold: int
    split: NestedSplit
    checkpoint: Checkpoint
    log: TrainLog
    report: MetricReport


@dataclass(frozen=True)
class CVResult:
    name: str
    plan: FoldPlan
    outcomes: tuple[FoldOutcome, ...]

    def fold_values(self) -> list[float]:
        return [o.report.kappa for o in self.outcomes]

    def mean(self) -> float:
        values = self.fold_values()
        return sum(values) / len(values)


class FoldFailure(PipelineError):
    """A fold aborted; outcomes completed before it are preserved."""

    def __init__(self, fold: int, partial: tuple[FoldOutcome, ...], cause: Exception):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold
        self.partial = partial


def run_cv(
    manifest: DatasetManifest,
    plan: FoldPlan,
    config: TrainerConfig | None = None,
    policy: PlateauPolicy | None = None,
    name: str = "reference",
    seed: int = 0,
    jobs: int = 1,
) -> CVResult:
    """Train and test once per fold; report the held-out fold's metrics.

    Folds share no mutable state, so jobs > 1 runs them on a thread pool;
    results are assembled in fold order either way, so the output does not
    depend on the job count.
    """
    if plan.k < 2:
        raise ValidationError("nested CV requires k >= 2")
    if jobs < 1:
        raise ValidationError("jobs must be at least 1")
    if any(c in name for c in ",\n\r"):
        raise ValidationError("result name must not contain commas or newlines")
    for item in plan.assignment:
        if item not in manifest.labels:
            raise ValidationError(f"plan id {item!r} has no label in the manifest")
    truth = manifest.ground_truth()

    def run_fold(fold: int) -> FoldOutcome:
        split = nested_split(plan, fold, seed=seed + fold)
        checkpoint, log = train(
            manifest, split.train_ids, split.val_ids,
            config=config, policy=policy, seed=seed + fold,
        )
        preds = checkpoint.model().predictions(manifest, split.test_ids)
        report = evaluate_predictions(truth, preds)
        return FoldOutcome(fold, split, checkpoint, log, report)

    outcomes: list[FoldOutcome] = []
    if jobs == 1:
        for fold in range(plan.k):
            try:
                outcomes.append(run_fold(fold))
            except PipelineError as exc:
                raise FoldFailure(fold, tuple(outcomes), exc) from exc
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_fold, fold) for fold in range(plan.k)]
        for fold, future in enumerate(futures):
            exc = future.exception()
            if exc is None:
                outcomes.append(future.result())
            elif isinstance(exc, PipelineError):
                raise FoldFailure(fold, tuple(outcomes), exc) from exc
            else:
                raise exc
    return CVResult(name=name, plan=plan, outcomes=tuple(outcomes))


def cv_table_lines(results: Sequence[CVResult]) -> list[str]:
    """Rows of per-fold kappas plus the arithmetic mean, one line per model."""
    if not results:
        raise ValidationError("no CV results to tabulate")
    k = results[0].plan.k
    if any(r.plan.k != k for r in results):
        raise ValidationError("all results must use the same fold count")
    lines = ["backbone," + ",".join(f"fold{i}" for i in range(k)) + ",mean"]
    for r in results:
        cells = [r.name] + [repr(v) for v in r.fold_values()] + [repr(r.mean())]
        lines.append(",".join(cells))
    return lines


def write_cv_table(path, results: Sequence[CVResult]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(cv_table_lines(results)) + "\n")
