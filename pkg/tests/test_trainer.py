"""Optimizer, schedules, plateau policy, and the training/finetuning loop."""

import numpy as np
import pytest

import oracles
import synthfix
from pseudovote.core import FormatError, LabelEntry, LabelSet, LabelSource, ValidationError
from pseudovote.trainer import (
    Action,
    AdamHyper,
    Checkpoint,
    LogRow,
    OptimizerState,
    PlateauPolicy,
    PolicyState,
    ReferenceModel,
    TrainLog,
    TrainerConfig,
    adam_step,
    exponential_lr,
    finetune,
    plateau_policy_step,
    read_checkpoint,
    read_training_log,
    train,
    write_checkpoint,
    write_training_log,
)


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_unit_gradient():
    params = {"p": np.array([0.0])}
    grads = {"p": np.array([1.0])}
    hyper = AdamHyper(lr=0.1)
    new, state = adam_step(params, grads, OptimizerState.zeros(params, 0.1), hyper)
    # bias correction makes the very first step -lr / (1 + eps)
    assert new["p"][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_matches_scalar_oracle():
    rng = np.random.default_rng(31)
    grad_seq = rng.normal(size=20).tolist()
    params = {"p": np.array([0.3])}
    hyper = AdamHyper(lr=0.05, weight_decay=0.01)
    state = OptimizerState.zeros(params, hyper.lr)
    for g in grad_seq:
        params, state = adam_step(params, {"p": np.array([g])}, state, hyper)
    ref = oracles.adam_scalar_oracle(0.3, grad_seq, lr=0.05, weight_decay=0.01)
    assert params["p"][0] == pytest.approx(ref, rel=1e-12)


def test_adam_is_elementwise():
    # a vector update must equal independent scalar updates
    rng = np.random.default_rng(32)
    p0 = rng.normal(size=4)
    grads = rng.normal(size=(6, 4))
    hyper = AdamHyper(lr=0.02, weight_decay=0.005)
    params = {"w": p0.copy()}
    state = OptimizerState.zeros(params, hyper.lr)
    for g in grads:
        params, state = adam_step(params, {"w": g.copy()}, state, hyper)
    for j in range(4):
        ref = oracles.adam_scalar_oracle(
            p0[j], grads[:, j].tolist(), lr=0.02, weight_decay=0.005
        )
        assert params["w"][j] == pytest.approx(ref, rel=1e-12)


def test_adam_rejects_non_finite_gradients():
    params = {"p": np.array([0.0])}
    state = OptimizerState.zeros(params, 0.1)
    with pytest.raises(ValidationError, match="'p' at step 1"):
        adam_step(params, {"p": np.array([np.nan])}, state, AdamHyper(lr=0.1))
    with pytest.raises(ValidationError, match="do not match"):
        adam_step(params, {"q": np.array([1.0])}, state, AdamHyper(lr=0.1))


def test_exponential_lr_matches_repeated_multiplication():
    for epoch in (0, 1, 7, 40, 200):
        ours = exponential_lr(epoch, 1e-3, 0.99)
        ref = oracles.exp_lr_oracle(epoch, 1e-3, 0.99)
        assert ours == pytest.approx(ref, rel=1e-12)
    assert exponential_lr(0, 0.5) == 0.5
    with pytest.raises(ValidationError):
        exponential_lr(-1, 0.1)


# ---------------------------------------------------------------------------
# plateau policy


def run_policy(train_losses, val_losses, lr, policy=None):
    """Replay full histories through the policy, returning the action per epoch."""
    policy = policy or PlateauPolicy()
    state = PolicyState()
    actions = []
    for t in range(len(train_losses)):
        action, state = plateau_policy_step(
            train_losses[: t + 1], val_losses[: t + 1], policy, state, lr
        )
        actions.append(action)
    return actions


def test_flat_training_loss_reduces_at_window_edge():
    n = 40
    flat = [1.0] * n
    falling = [1.0 - 0.02 * t for t in range(n)]
    actions = run_policy(flat, falling, lr=1e-3)
    assert all(a is Action.CONTINUE for a in actions[:30])
    assert actions[30] is Action.REDUCE_LR


def test_improving_training_loss_never_reduces():
    n = 50
    falling = [2.0 * 0.9 ** t for t in range(n)]
    actions = run_policy(falling, falling, lr=1e-3)
    assert all(a is Action.CONTINUE for a in actions)


def test_reduce_cooldown_spans_one_window():
    n = 70
    flat = [1.0] * n
    falling = [1.0 - 0.001 * t for t in range(n)]
    actions = run_policy(flat, falling, lr=1e-3)
    reduce_epochs = [t for t, a in enumerate(actions) if a is Action.REDUCE_LR]
    assert reduce_epochs == [30, 60]


def test_flat_validation_never_stops_above_lr_floor():
    n = 80
    falling = [2.0 * 0.9 ** t for t in range(n)]
    flat = [1.0] * n
    actions = run_policy(falling, flat, lr=1e-6)  # not strictly below the floor
    assert Action.STOP not in actions


def test_flat_validation_stops_at_window_edge_below_lr_floor():
    n = 70
    falling = [2.0 * 0.9 ** t for t in range(n)]
    flat = [1.0] * n
    actions = run_policy(falling, flat, lr=1e-7)
    assert all(a is not Action.STOP for a in actions[:60])
    assert actions[60] is Action.STOP


def test_stop_takes_precedence_over_reduce():
    n = 61
    flat = [1.0] * n
    action, _ = plateau_policy_step(flat, flat, PlateauPolicy(), PolicyState(), lr=1e-7)
    assert action is Action.STOP


def test_decision_ignores_history_older_than_stop_window():
    rng = np.random.default_rng(33)
    recent_train = (1.0 + 0.001 * rng.standard_normal(61)).tolist()
    recent_val = (2.0 + 0.001 * rng.standard_normal(61)).tolist()
    prefix = rng.uniform(5.0, 9.0, 40).tolist()  # wild old history
    policy = PlateauPolicy()
    for lr in (1e-3, 1e-7):
        a1, _ = plateau_policy_step(recent_train, recent_val, policy, PolicyState(), lr)
        a2, _ = plateau_policy_step(
            prefix + recent_train, prefix + recent_val, policy, PolicyState(), lr
        )
        assert a1 is a2


def test_policy_rejects_mismatched_histories():
    with pytest.raises(ValidationError):
        plateau_policy_step([1.0], [], PlateauPolicy(), PolicyState(), 1e-3)
    with pytest.raises(ValidationError):
        plateau_policy_step([], [], PlateauPolicy(), PolicyState(), 1e-3)


# ---------------------------------------------------------------------------
# checkpoint and log serialization


def test_checkpoint_round_trip(tmp_path):
    model = ReferenceModel.init(3, 4, seed=5)
    ckpt = Checkpoint(
        params=model.params,
        epoch=7,
        metric_value=0.875,
        metric_name="kappa",
        metadata={"source": "train", "seed": 5},
    )
    path = tmp_path / "ckpt.json"
    write_checkpoint(path, ckpt)
    back = read_checkpoint(path)
    assert back.epoch == 7
    assert back.metric_name == "kappa"
    assert back.metric_value == 0.875
    assert back.metadata == {"source": "train", "seed": 5}
    for name in model.params:
        assert np.array_equal(back.params[name], model.params[name])


def test_checkpoint_rejects_bad_files(tmp_path):
    path = tmp_path / "ckpt.json"
    path.write_text("not json")
    with pytest.raises(FormatError):
        read_checkpoint(path)
    path.write_text('{"version":99}')
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(path)


def test_checkpoint_metric_name_validated():
    model = ReferenceModel.init(2, 2)
    with pytest.raises(ValidationError):
        Checkpoint(params=model.params, epoch=0, metric_value=0.0, metric_name="loss")


def test_training_log_round_trip(tmp_path):
    rows = (
        LogRow(0, 0.6931471805599453, 0.7012, 0.001, 0.25),
        LogRow(1, 0.5123456789012345, 0.6833, 0.00099, 0.5),
    )
    path = tmp_path / "log.csv"
    write_training_log(path, TrainLog(rows=rows))
    assert read_training_log(path) == rows


# ---------------------------------------------------------------------------
# train


def split_ids(manifest, n_val):
    ids = manifest.labeled_ids()
    return ids[n_val:], ids[:n_val]


def test_train_learns_separable_data():
    manifest, _ = synthfix.blob_manifest(n_labeled=90, seed=41)
    train_ids, val_ids = split_ids(manifest, 15)
    ckpt, log = train(manifest, train_ids, val_ids, synthfix.fast_config(), seed=1)
    assert ckpt.metric_name == "kappa"
    assert ckpt.metric_value > 0.9
    assert len(log.rows) == 25
    assert log.rows[0].lr == 0.1
    assert log.rows[1].lr == pytest.approx(0.1 * 0.99)


def test_train_is_deterministic_and_seed_sensitive(tmp_path):
    manifest, _ = synthfix.blob_manifest(n_labeled=60, seed=42)
    train_ids, val_ids = split_ids(manifest, 12)
    cfg = synthfix.fast_config(epochs=8)
    a, _ = train(manifest, train_ids, val_ids, cfg, seed=3)
    b, _ = train(manifest, train_ids, val_ids, cfg, seed=3)
    c, _ = train(manifest, train_ids, val_ids, cfg, seed=4)
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    write_checkpoint(pa, a)
    write_checkpoint(pb, b)
    assert pa.read_bytes() == pb.read_bytes()
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)


def test_checkpoint_selection_prefers_earliest_best_epoch():
    manifest, _ = synthfix.blob_manifest(n_labeled=90, seed=43)
    train_ids, val_ids = split_ids(manifest, 15)
    ckpt, log = train(manifest, train_ids, val_ids, synthfix.fast_config(), seed=2)
    metrics = [r.val_metric for r in log.rows]
    best = max(metrics)
    assert ckpt.metric_value == best
    assert ckpt.epoch == metrics.index(best)


def test_single_class_validation_falls_back_to_val_loss():
    manifest, _ = synthfix.blob_manifest(n_labeled=60, seed=44)
    ids = manifest.labeled_ids()
    val_ids = [i for i in ids if manifest.labels[i] == 0][:6]
    train_ids = [i for i in ids if i not in set(val_ids)]
    ckpt, log = train(manifest, train_ids, val_ids, synthfix.fast_config(epochs=4), seed=0)
    assert ckpt.metric_name == "val_loss"
    assert any("single class" in w for w in log.warnings)
    metrics = [r.val_metric for r in log.rows]
    assert ckpt.metric_value == min(metrics)


def test_train_input_validation():
    manifest, _ = synthfix.blob_manifest(n_labeled=30, n_unlabeled=3, seed=45)
    ids = manifest.labeled_ids()
    with pytest.raises(ValidationError, match="non-empty"):
        train(manifest, [], ids[:3])
    with pytest.raises(ValidationError, match="overlap"):
        train(manifest, ids[:5], ids[4:8])
    with pytest.raises(ValidationError, match="no label"):
        train(manifest, ids[:5] + manifest.unlabeled_ids()[:1], ids[5:8])


def test_hidden_layer_variant_trains():
    manifest, _ = synthfix.blob_manifest(n_labeled=60, seed=46)
    train_ids, val_ids = split_ids(manifest, 12)
    cfg = synthfix.fast_config(epochs=12, hidden_units=8)
    ckpt, _ = train(manifest, train_ids, val_ids, cfg, seed=0)
    assert set(ckpt.params) == {"W1", "b1", "W2", "b2"}
    assert ckpt.metric_value > 0.8
    model = ckpt.model()
    preds = model.predictions(manifest, val_ids)
    assert preds.ids == tuple(val_ids)
    assert np.allclose(preds.probs.sum(axis=1), 1.0)


def test_plateau_schedule_reduces_then_stops_early():
    manifest, _ = synthfix.blob_manifest(n_labeled=24, seed=47)
    train_ids, val_ids = split_ids(manifest, 6)
    # lr too small to move the loss: reduce fires at the window edge, then stop
    cfg = synthfix.fast_config(epochs=12, lr=1e-7, schedule="plateau")
    policy = PlateauPolicy(reduce_window=2, stop_window=4, min_lr_for_stop=1.0)
    ckpt, log = train(manifest, train_ids, val_ids, cfg, policy=policy, seed=0)
    assert len(log.rows) == 5  # stopped after epoch 4
    assert log.rows[2].lr == pytest.approx(1e-7)
    assert log.rows[3].lr == pytest.approx(1e-7 / 5)


# ---------------------------------------------------------------------------
# finetune


def test_finetune_zero_epochs_is_identity():
    manifest, _ = synthfix.blob_manifest(n_labeled=30, seed=48)
    train_ids, val_ids = split_ids(manifest, 6)
    ckpt, _ = train(manifest, train_ids, val_ids, synthfix.fast_config(epochs=3), seed=0)
    labels = LabelSet.from_ground_truth({i: manifest.labels[i] for i in train_ids})
    same, log = finetune(manifest, ckpt, labels, val_ids, epochs=0)
    assert same is ckpt
    assert log.rows == ()


def test_finetune_moves_from_checkpoint_and_tags_metadata():
    manifest, _ = synthfix.blob_manifest(n_labeled=60, seed=49)
    train_ids, val_ids = split_ids(manifest, 12)
    cfg = synthfix.fast_config(epochs=4)
    ckpt, _ = train(manifest, train_ids, val_ids, cfg, seed=0)
    labels = LabelSet.from_ground_truth({i: manifest.labels[i] for i in train_ids})
    tuned, log = finetune(manifest, ckpt, labels, val_ids, config=cfg, epochs=3, seed=1)
    assert tuned.metadata["source"] == "finetune"
    assert tuned.metadata["fresh_optimizer"] is True
    assert len(log.rows) == 3


def test_finetune_repeats_weighted_samples():
    manifest, _ = synthfix.blob_manifest(n_labeled=30, seed=50)
    train_ids, val_ids = split_ids(manifest, 6)
    cfg = synthfix.fast_config(epochs=2, record_sample_order=True)
    ckpt, _ = train(manifest, train_ids, val_ids, synthfix.fast_config(epochs=2), seed=0)
    heavy = train_ids[0]
    entries = {i: LabelEntry(manifest.labels[i]) for i in train_ids}
    entries[heavy] = LabelEntry(manifest.labels[heavy], LabelSource.PSEUDO_VOTED, 2)
    labels = LabelSet(entries)
    _, log = finetune(manifest, ckpt, labels, val_ids, config=cfg, epochs=2, seed=0)
    assert len(log.sample_orders) == 2
    for order in log.sample_orders:
        assert len(order) == labels.effective_size() == len(train_ids) + 1
        assert order.count(heavy) == 2


def test_finetune_validation():
    manifest, _ = synthfix.blob_manifest(n_labeled=30, seed=51)
    train_ids, val_ids = split_ids(manifest, 6)
    ckpt, _ = train(manifest, train_ids, val_ids, synthfix.fast_config(epochs=2), seed=0)
    labels = LabelSet.from_ground_truth({i: manifest.labels[i] for i in train_ids})
    with pytest.raises(ValidationError, match="overlap"):
        finetune(manifest, ckpt, labels, train_ids[:2], epochs=1)
    with pytest.raises(ValidationError, match="non-empty"):
        finetune(manifest, ckpt, labels, [], epochs=1)
    other, _ = synthfix.blob_manifest(n_labeled=30, feature_dim=5, seed=51)
    with pytest.raises(ValidationError, match="features"):
        finetune(other, ckpt, labels, val_ids, epochs=1)
