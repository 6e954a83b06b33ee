"""Reference learner plus the optimization policies used across the pipeline.

The learner is a softmax linear classifier, optionally with one ReLU hidden
layer. Optimization is Adam with either a per-epoch exponential learning-rate
decay or a plateau policy that divides the rate when the smoothed training
loss stalls and stops outright once the smoothed validation loss stalls at a
tiny learning rate. Everything is deterministic given (inputs, seed): one
generator drives initialization and shuffling, batches reduce in a fixed
order, and logs serialize floats with repr so reruns are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .core import (
    DatasetManifest,
    FormatError,
    LabelSet,
    PredictionMatrix,
    ValidationError,
)
from .losses import (
    CompositeMode,
    CompositeSchedule,
    ProbBatch,
    composite_loss,
    cross_entropy,
    inverse_frequency_weights,
    soft_kappa_loss,
    softmax,
)
from .metrics import confusion_matrix, quadratic_weighted_kappa

CHECKPOINT_VERSION = 1
CHECKPOINT_METRICS = ("kappa", "mean_dice", "val_loss")
LOG_HEADER = "epoch,train_loss,val_loss,lr,val_metric"


class LossKind(Enum):
    CROSS_ENTROPY = "ce"
    KAPPA = "kappa"
    WCE_PLUS_KAPPA = "wce_plus_kappa"
    ALPHA_BLEND = "alpha_blend"


@dataclass(frozen=True)
class LossSpec:
    """Which objective the trainer optimizes and how its terms are weighted."""

    kind: LossKind = LossKind.CROSS_ENTROPY
    class_weighting: str = "none"  # none | inverse_frequency
    lam: float = 1.0
    alpha_start: float = 1.0
    alpha_end: float = 0.0

    def __post_init__(self):
        if not isinstance(self.kind, LossKind):
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        if self.class_weighting not in ("none", "inverse_frequency"):
            raise ValidationError(f"unknown class weighting {self.class_weighting!r}")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    gamma: float = 0.99
    schedule: str = "exponential"  # exponential | plateau
    hidden_units: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    checkpoint_metric: str = "kappa"  # kappa | val_loss
    record_sample_order: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("training requires at least one epoch")
        if self.batch_size < 1:
            raise ValidationError("batch size must be at least 1")
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight decay must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ValidationError("gamma must lie in (0, 1]")
        if self.schedule not in ("exponential", "plateau"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        if self.hidden_units < 0:
            raise ValidationError("hidden units must be non-negative")
        if self.checkpoint_metric not in ("kappa", "val_loss"):
            raise ValidationError(f"unknown checkpoint metric {self.checkpoint_metric!r}")


def _init_params(num_features: int, num_classes: int, hidden_units: int, rng) -> dict:
    if hidden_units == 0:
        return {
            "W": rng.standard_normal((num_features, num_classes)) * 0.01,
            "b": np.zeros(num_classes, dtype=np.float64),
        }
    return {
        "W1": rng.standard_normal((num_features, hidden_units)) * 0.01,
        "b1": np.zeros(hidden_units, dtype=np.float64),
        "W2": rng.standard_normal((hidden_units, num_classes)) * 0.01,
        "b2": np.zeros(num_classes, dtype=np.float64),
    }


def _check_params(params: Mapping[str, np.ndarray]) -> dict:
    names = set(params)
    if names not in ({"W", "b"}, {"W1", "b1", "W2", "b2"}):
        raise ValidationError(f"unrecognized parameter set {sorted(names)}")
    out = {}
    for name in sorted(names):
        arr = np.asarray(params[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"parameter {name!r} contains non-finite values")
        out[name] = arr
    if "W" in out:
        if out["W"].ndim != 2 or out["b"].shape != (out["W"].shape[1],):
            raise ValidationError("W must be 2-D with b matching its column count")
    else:
        w1, b1, w2, b2 = out["W1"], out["b1"], out["W2"], out["b2"]
        if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != w2.shape[0]:
            raise ValidationError("hidden layer shapes do not chain")
        if b1.shape != (w1.shape[1],) or b2.shape != (w2.shape[1],):
            raise ValidationError("bias shapes do not match their layers")
    return out


def _params_shape(params: Mapping[str, np.ndarray]) -> tuple[int, int]:
    if "W" in params:
        return params["W"].shape
    return params["W1"].shape[0], params["W2"].shape[1]


def _forward_logits(params: Mapping[str, np.ndarray], features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if "W" in params:
        return x @ params["W"] + params["b"]
    h = np.maximum(x @ params["W1"] + params["b1"], 0.0)
    return h @ params["W2"] + params["b2"]


def _param_grads(params, features, dlogits) -> dict:
    x = np.asarray(features, dtype=np.float64)
    if "W" in params:
        return {"W": x.T @ dlogits, "b": dlogits.sum(axis=0)}
    pre = x @ params["W1"] + params["b1"]
    h = np.maximum(pre, 0.0)
    dh = (dlogits @ params["W2"].T) * (pre > 0.0)
    return {
        "W1": x.T @ dh,
        "b1": dh.sum(axis=0),
        "W2": h.T @ dlogits,
        "b2": dlogits.sum(axis=0),
    }


@dataclass(frozen=True)
class ReferenceModel:
    """Deterministic softmax classifier over manifest feature rows."""

    params: Mapping[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "params", _check_params(self.params))

    @classmethod
    def init(cls, num_features: int, num_classes: int, hidden_units: int = 0, seed: int = 0):
        rng = np.random.default_rng(seed)
        return cls(_init_params(num_features, num_classes, hidden_units, rng))

    @property
    def num_features(self) -> int:
        return _params_shape(self.params)[0]

    @property
    def num_classes(self) -> int:
        return _params_shape(self.params)[1]

    def logits(self, features) -> np.ndarray:
        return _forward_logits(self.params, features)

    def forward(self, features) -> np.ndarray:
        return softmax(self.logits(features))

    def predictions(self, manifest: DatasetManifest, ids: Sequence[str]) -> PredictionMatrix:
        probs = self.forward(manifest.feature_rows(ids))
        return PredictionMatrix(tuple(ids), probs)


@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")


@dataclass(frozen=True)
class OptimizerState:
    """Adam moment accumulators plus the step count and current rate."""

    m: Mapping[str, np.ndarray]
    v: Mapping[str, np.ndarray]
    step: int
    lr: float

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray], lr: float) -> "OptimizerState":
        m = {name: np.zeros_like(arr) for name, arr in params.items()}
        v = {name: np.zeros_like(arr) for name, arr in params.items()}
        return cls(m=m, v=v, step=0, lr=lr)


def adam_step(params, grads, state: OptimizerState, hyper: AdamHyper):
    """One bias-corrected Adam update; weight decay enters as an L2 gradient term."""
    if set(grads) != set(params):
        raise ValidationError("gradient names do not match parameter names")
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise ValidationError(
                f"non-finite gradient for {name!r} at step {state.step + 1}"
            )
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        g = grads[name] + hyper.weight_decay * params[name]
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * g * g
        m_hat = m / (1.0 - hyper.beta1 ** t)
        v_hat = v / (1.0 - hyper.beta2 ** t)
        new_params[name] = params[name] - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(m=new_m, v=new_v, step=t, lr=hyper.lr)


def exponential_lr(epoch: int, lr0: float, gamma: float = 0.99) -> float:
    if epoch < 0:
        raise ValidationError("epoch must be non-negative")
    return lr0 * gamma ** epoch


class Action(Enum):
    CONTINUE = "continue"
    REDUCE_LR = "reduce_lr"
    STOP = "stop"


@dataclass(frozen=True)
class PlateauPolicy:
    """Loss-smoothing windows for learning-rate reduction and early stop."""

    ema_decay: float = 0.9
    improve_threshold: float = 5e-3
    reduce_window: int = 30
    reduce_factor: float = 5.0
    stop_window: int = 60
    min_lr_for_stop: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.ema_decay < 1:
            raise ValidationError("ema decay must lie in [0, 1)")
        if self.reduce_window < 1 or self.stop_window < 1:
            raise ValidationError("policy windows must be at least 1")
        if self.reduce_factor <= 1:
            raise ValidationError("reduce factor must exceed 1")


@dataclass(frozen=True)
class PolicyState:
    last_reduce_epoch: int | None = None


def _trailing_ema(values: Sequence[float], decay: float, horizon: int) -> list[float]:
    # Smooth only the trailing horizon+1 losses, seeded at the oldest of them,
    # so the decision never depends on history older than the stop window.
    start = max(0, len(values) - 1 - horizon)
    ema = float(values[start])
    out = [ema]
    for v in values[start + 1:]:
        ema = decay * ema + (1.0 - decay) * float(v)
        out.append(ema)
    return out


def plateau_policy_step(
    train_losses: Sequence[float],
    val_losses: Sequence[float],
    policy: PlateauPolicy,
    state: PolicyState,
    lr: float,
) -> tuple[Action, PolicyState]:
    """Decide Continue / ReduceLR / Stop after the latest epoch.

    ReduceLR fires when the smoothed training loss failed to improve by at
    least improve_threshold on the best smoothed value within the trailing
    reduce window; Stop fires when the smoothed validation loss failed to
    improve by more than the threshold within the trailing stop window and
    the learning rate has already fallen below min_lr_for_stop. Stop takes
    precedence. A reduction starts a cooldown of one full reduce window.
    """
    if len(train_losses) == 0 or len(train_losses) != len(val_losses):
        raise ValidationError("loss histories must be non-empty and equally long")
    epoch = len(train_losses) - 1

    if epoch >= policy.stop_window and lr < policy.min_lr_for_stop:
        series = _trailing_ema(val_losses, policy.ema_decay, policy.stop_window)
        improvement = min(series[:-1]) - series[-1]
        if improvement <= policy.improve_threshold:
            return Action.STOP, state

    in_cooldown = (
        state.last_reduce_epoch is not None
        and epoch - state.last_reduce_epoch < policy.reduce_window
    )
    if epoch >= policy.reduce_window and not in_cooldown:
        series = _trailing_ema(train_losses, policy.ema_decay, policy.stop_window)
        window = series[-(policy.reduce_window + 1):-1]
        improvement = min(window) - series[-1]
        if improvement < policy.improve_threshold:
            return Action.REDUCE_LR, PolicyState(last_reduce_epoch=epoch)

    return Action.CONTINUE, state


@dataclass(frozen=True)
class LogRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    val_metric: float


@dataclass(frozen=True)
class TrainLog:
    rows: tuple[LogRow, ...]
    warnings: tuple[str, ...] = ()
    sample_orders: tuple[tuple[str, ...], ...] = ()
    degenerate_loss_batches: int = 0


@dataclass(frozen=True)
class Checkpoint:
    """Parameter snapshot tagged with the epoch and metric that selected it."""

    params: Mapping[str, np.ndarray]
    epoch: int
    metric_value: float
    metric_name: str
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.metric_name not in CHECKPOINT_METRICS:
            raise ValidationError(f"unknown checkpoint metric {self.metric_name!r}")
        params = _check_params(self.params)
        for arr in params.values():
            arr.setflags(write=False)
        object.__setattr__(self, "params", params)

    def model(self) -> ReferenceModel:
        return ReferenceModel(self.params)


def write_checkpoint(path, checkpoint: Checkpoint) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "epoch": checkpoint.epoch,
        "metric_name": checkpoint.metric_name,
        "metric_value": checkpoint.metric_value,
        "params": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
            for name, arr in checkpoint.params.items()
        },
        "metadata": dict(checkpoint.metadata),
    }
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def read_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(str(path), "checkpoint", str(exc)) from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(str(path), "checkpoint", "missing or unsupported version")
    try:
        params = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        checkpoint = Checkpoint(
            params=params,
            epoch=int(doc["epoch"]),
            metric_value=float(doc["metric_value"]),
            metric_name=str(doc["metric_name"]),
            metadata=dict(doc.get("metadata", {})),
        )
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise FormatError(str(path), "checkpoint", str(exc)) from exc
    return checkpoint


def write_training_log(path, log: TrainLog) -> None:
    lines = [LOG_HEADER]
    for r in log.rows:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},{r.val_metric!r}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_training_log(path) -> tuple[LogRow, ...]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise FormatError(str(path), "line 1", f"expected header {LOG_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError(str(path), f"line {lineno}", "expected 5 fields")
        try:
            rows.append(
                LogRow(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]))
            )
        except ValueError as exc:
            raise FormatError(str(path), f"line {lineno}", str(exc)) from exc
    return tuple(rows)


def _resolve_loss(config: TrainerConfig, train_labels: Sequence[int], num_classes: int, epochs: int):
    weights = None
    if config.loss.class_weighting == "inverse_frequency":
        weights = inverse_frequency_weights(train_labels, num_classes)
    schedule = CompositeSchedule(
        lam=config.loss.lam,
        alpha_start=config.loss.alpha_start,
        alpha_end=config.loss.alpha_end,
        total_epochs=epochs,
    )
    kind = config.loss.kind

    def loss_fn(batch: ProbBatch, epoch: int):
        if kind is LossKind.CROSS_ENTROPY:
            return cross_entropy(batch, weights)
        if kind is LossKind.KAPPA:
            return soft_kappa_loss(batch)
        mode = (
            CompositeMode.WCE_PLUS_LAMBDA_KAPPA
            if kind is LossKind.WCE_PLUS_KAPPA
            else CompositeMode.ALPHA_BLEND
        )
        return composite_loss(batch, schedule, mode, epoch, weights)

    def fallback(batch: ProbBatch):
        return cross_entropy(batch, weights)

    return loss_fn, fallback


def _snapshot(params: Mapping[str, np.ndarray]) -> dict:
    return {name: arr.copy() for name, arr in params.items()}


def _check_ids(manifest: DatasetManifest, ids: Sequence[str], role: str) -> None:
    for item in ids:
        if item not in manifest.labels:
            raise ValidationError(f"{role} id {item!r} has no label in the manifest")


def _fit(
    manifest: DatasetManifest,
    start_params,
    label_map: Mapping[str, int],
    weight_map: Mapping[str, int],
    val_ids: Sequence[str],
    config: TrainerConfig,
    policy: PlateauPolicy | None,
    epochs: int,
    seed: int,
    source: str,
) -> tuple[Checkpoint, TrainLog]:
    rng = np.random.default_rng(seed)
    k = manifest.num_classes
    if start_params is None:
        params = _init_params(manifest.feature_dim, k, config.hidden_units, rng)
    else:
        params = _snapshot(start_params)
    if policy is None:
        policy = PlateauPolicy()

    base_order: list[str] = []
    for item in sorted(label_map):
        base_order.extend([item] * weight_map[item])

    warnings: list[str] = []
    val_truth = np.asarray([manifest.labels[i] for i in val_ids], dtype=np.int64)
    metric_name = config.checkpoint_metric
    if metric_name == "kappa" and np.unique(val_truth).size < 2:
        metric_name = "val_loss"
        warnings.append(
            "validation fold contains a single class; "
            "checkpoint selection falls back to min val loss"
        )

    sorted_train = sorted(label_map)
    loss_fn, fallback = _resolve_loss(
        config, [label_map[i] for i in sorted_train], k, epochs
    )
    opt = OptimizerState.zeros(params, config.lr)
    lr = config.lr
    pstate = PolicyState()
    val_x = manifest.feature_rows(val_ids)

    best: Checkpoint | None = None
    rows: list[LogRow] = []
    orders: list[tuple[str, ...]] = []
    train_hist: list[float] = []
    val_hist: list[float] = []
    degenerate = 0

    for epoch in range(epochs):
        if config.schedule == "exponential":
            lr = exponential_lr(epoch, config.lr, config.gamma)
        perm = rng.permutation(len(base_order))
        order = [base_order[i] for i in perm]
        if config.record_sample_order:
            orders.append(tuple(order))

        total = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            x = manifest.feature_rows(chunk)
            batch = ProbBatch.from_logits(
                _forward_logits(params, x), [label_map[i] for i in chunk]
            )
            try:
                value, dlogits = loss_fn(batch, epoch)
            except ValidationError:
                # Single-class or single-sample batch: the kappa term is
                # undefined, so this batch trains on cross entropy alone.
                value, dlogits = fallback(batch)
                degenerate += 1
            total += value * len(chunk)
            grads = _param_grads(params, x, dlogits)
            hyper = AdamHyper(lr=lr, weight_decay=config.weight_decay)
            params, opt = adam_step(params, grads, opt, hyper)
        train_loss = total / len(order)

        val_logits = _forward_logits(params, val_x)
        val_batch = ProbBatch.from_logits(val_logits, val_truth)
        try:
            val_loss, _ = loss_fn(val_batch, epoch)
        except ValidationError:
            val_loss, _ = fallback(val_batch)
            degenerate += 1
        if metric_name == "kappa":
            val_pred = np.argmax(val_logits, axis=1)
            val_metric = quadratic_weighted_kappa(
                confusion_matrix(val_truth, val_pred, k)
            )
        else:
            val_metric = val_loss

        rows.append(LogRow(epoch, train_loss, val_loss, lr, val_metric))
        train_hist.append(train_loss)
        val_hist.append(val_loss)

        better = (
            best is None
            or (metric_name == "val_loss" and val_metric < best.metric_value)
            or (metric_name != "val_loss" and val_metric > best.metric_value)
        )
        if better:
            best = Checkpoint(
                params=_snapshot(params),
                epoch=epoch,
                metric_value=val_metric,
                metric_name=metric_name,
                metadata={
                    "source": source,
                    "seed": seed,
                    "schedule": config.schedule,
                    "loss": config.loss.kind.value,
                    "fresh_optimizer": source == "finetune",
                },
            )

        if config.schedule == "plateau":
            action, pstate = plateau_policy_step(train_hist, val_hist, policy, pstate, lr)
            if action is Action.REDUCE_LR:
                lr = lr / policy.reduce_factor
            elif action is Action.STOP:
                break

    log = TrainLog(
        rows=tuple(rows),
        warnings=tuple(warnings),
        sample_orders=tuple(orders),
        degenerate_loss_batches=degenerate,
    )
    return best, log


def train(
    manifest: DatasetManifest,
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    config: TrainerConfig | None = None,
    policy: PlateauPolicy | None = None,
    seed: int = 0,
) -> tuple[Checkpoint, TrainLog]:
    """Fit from scratch on manifest ground truth; best epoch wins.

    The returned checkpoint maximizes validation kappa (minimizes validation
    loss once the fold is degenerate), ties resolved toward the earlier epoch.
    """
    config = config or TrainerConfig()
    train_ids = list(train_ids)
    val_ids = list(val_ids)
    if not train_ids or not val_ids:
        raise ValidationError("train and val id lists must be non-empty")
    overlap = set(train_ids) & set(val_ids)
    if overlap:
        raise ValidationError(f"train and val ids overlap: {sorted(overlap)[:5]}")
    _check_ids(manifest, train_ids, "train")
    _check_ids(manifest, val_ids, "val")
    label_map = {i: manifest.labels[i] for i in train_ids}
    weight_map = {i: 1 for i in train_ids}
    return _fit(
        manifest, None, label_map, weight_map, val_ids,
        config, policy, config.epochs, seed, source="train",
    )


def finetune(
    manifest: DatasetManifest,
    checkpoint: Checkpoint,
    labels: LabelSet,
    val_ids: Sequence[str],
    config: TrainerConfig | None = None,
    epochs: int = 10,
    seed: int = 0,
) -> tuple[Checkpoint, TrainLog]:
    """Resume from a checkpoint on a (possibly pseudo-labeled) label set.

    Optimizer state starts fresh. Sample weights are honored literally: an
    entry of weight w appears w times in every epoch's shuffled pass. Zero
    epochs is the identity.
    """
    config = config or TrainerConfig()
    if epochs < 0:
        raise ValidationError("epochs must be non-negative")
    if epochs == 0:
        return checkpoint, TrainLog(rows=())
    d, k = _params_shape(checkpoint.params)
    if (d, k) != (manifest.feature_dim, manifest.num_classes):
        raise ValidationError(
            f"checkpoint expects {d} features x {k} classes, "
            f"manifest provides {manifest.feature_dim} x {manifest.num_classes}"
        )
    val_ids = list(val_ids)
    if not val_ids:
        raise ValidationError("finetune needs a non-empty validation id list")
    _check_ids(manifest, val_ids, "val")
    overlap = set(val_ids) & set(labels.ids())
    if overlap:
        raise ValidationError(f"val ids overlap the finetune label set: {sorted(overlap)[:5]}")
    for item in labels.ids():
        if item not in manifest:
            raise ValidationError(f"label set id {item!r} missing from the manifest")
    label_map = {i: labels[i].label for i in labels.ids()}
    weight_map = {i: labels[i].weight for i in labels.ids()}
    return _fit(
        manifest, checkpoint.params, label_map, weight_map, val_ids,
        config, None, epochs, seed, source="finetune",
    )
