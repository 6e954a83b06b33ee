"""Command-line surface: one subcommand per pipeline stage.

Every invocation resolves its options from defaults, then an INI config
file, then flags (flags win), writes its artifacts under --out, and drops a
run_manifest.json recording the resolved options plus sha256 hashes of every
input file. Nothing writes a timestamp, so identical invocations produce
byte-identical output trees. Exit codes: 0 success, 1 validation or usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import re
import sys

from . import core, cv, metrics, pseudo, seggate, trainer

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; the contract reserves 2 for
    # runtime failures, so usage problems are rethrown as validation errors.
    def error(self, message):
        raise core.ValidationError(message)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise core.ValidationError(f"missing required path for {what}")
    if not os.path.isfile(path):
        raise core.ValidationError(f"{what} path {path!r} does not exist")
    return path


def _require_dir(path: str | None, what: str) -> str:
    if not path:
        raise core.ValidationError(f"missing required path for {what}")
    if not os.path.isdir(path):
        raise core.ValidationError(f"{what} directory {path!r} does not exist")
    return path


def _cast(value: str, kind):
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise core.ValidationError(f"invalid boolean {value!r}")
    try:
        return kind(value)
    except ValueError as exc:
        raise core.ValidationError(f"invalid {kind.__name__} {value!r}") from exc


class Resolver:
    """Flag > config file > default, recording every resolved value."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.ini = None
        if args.config is not None:
            path = _require_file(args.config, "config")
            parser = configparser.ConfigParser()
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise core.ValidationError(f"bad config file {path!r}: {exc}") from exc
            self.ini = parser
        self.resolved: dict[str, object] = {}

    def get(self, section: str, key: str, flag_value, default, kind=str):
        if flag_value is not None:
            value = flag_value
        elif self.ini is not None and self.ini.has_option(section, key):
            value = _cast(self.ini.get(section, key), kind)
        else:
            value = default
        self.resolved[f"{section}.{key}"] = value
        return value

    @property
    def seed(self) -> int:
        return self.get("run", "seed", self.args.seed, 0, int)

    @property
    def jobs(self) -> int:
        jobs = self.get("run", "jobs", self.args.jobs, 1, int)
        if jobs < 1:
            raise core.ValidationError("jobs must be at least 1")
        return jobs

    def out_dir(self) -> str:
        out = self.get("run", "out", self.args.out, None)
        if not out:
            raise core.ValidationError("an output directory is required (--out)")
        os.makedirs(out, exist_ok=True)
        return out


def _write_run_manifest(out_dir, command, resolver, inputs, outputs) -> None:
    doc = {
        "command": command,
        "config": dict(sorted(resolver.resolved.items())),
        "inputs": {p: _sha256(p) for p in sorted(set(inputs))},
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def _json_dump(path, doc) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def _read_id_list(path: str) -> list[str]:
    with open(path, "r", encoding="ascii") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if not ids:
        raise core.ValidationError(f"id list {path!r} is empty")
    return ids


def _loss_spec(r: Resolver) -> trainer.LossSpec:
    kind_value = r.get("trainer", "loss", r.args.loss, "ce")
    try:
        kind = trainer.LossKind(kind_value)
    except ValueError as exc:
        raise core.ValidationError(f"unknown loss kind {kind_value!r}") from exc
    return trainer.LossSpec(
        kind=kind,
        class_weighting=r.get(
            "trainer", "class_weighting", r.args.class_weighting, "none"
        ),
        lam=r.get("trainer", "lam", r.args.lam, 1.0, float),
        alpha_start=r.get("trainer", "alpha_start", r.args.alpha_start, 1.0, float),
        alpha_end=r.get("trainer", "alpha_end", r.args.alpha_end, 0.0, float),
    )


def _trainer_config(r: Resolver) -> trainer.TrainerConfig:
    return trainer.TrainerConfig(
        epochs=r.get("trainer", "epochs", r.args.epochs, 60, int),
        batch_size=r.get("trainer", "batch_size", r.args.batch_size, 32, int),
        lr=r.get("trainer", "lr", r.args.lr, 1e-4, float),
        weight_decay=r.get("trainer", "weight_decay", r.args.weight_decay, 1e-4, float),
        gamma=r.get("trainer", "gamma", r.args.gamma, 0.99, float),
        schedule=r.get("trainer", "schedule", r.args.schedule, "exponential"),
        hidden_units=r.get("trainer", "hidden_units", r.args.hidden_units, 0, int),
        loss=_loss_spec(r),
        checkpoint_metric=r.get(
            "trainer", "checkpoint_metric", r.args.checkpoint_metric, "kappa"
        ),
    )


def _read_manifest(r: Resolver, path: str) -> core.DatasetManifest:
    num_classes = r.get("dataset", "num_classes", getattr(r.args, "num_classes", None), None, int)
    return core.read_manifest(path, num_classes=num_classes)


def cmd_split(r: Resolver) -> None:
    labels_path = _require_file(
        r.get("paths", "labels", r.args.labels, None), "labels"
    )
    k = r.get("cv", "k", r.args.k, 5, int)
    out = r.out_dir()
    labels = core.read_labelset(labels_path)
    plan = cv.stratified_kfold(labels, k=k, seed=r.seed)
    cv.write_fold_plan(os.path.join(out, "fold_plan.json"), plan)
    _write_run_manifest(out, "split", r, [labels_path], ["fold_plan.json"])
    print(f"fold_plan.json: {len(plan.assignment)} items over {plan.k} folds")


def cmd_train(r: Resolver) -> None:
    manifest_path = _require_file(
        r.get("paths", "manifest", r.args.manifest, None), "manifest"
    )
    plan_path = _require_file(r.get("paths", "folds", r.args.folds, None), "fold plan")
    out = r.out_dir()
    manifest = _read_manifest(r, manifest_path)
    plan = cv.read_fold_plan(plan_path)
    config = _trainer_config(r)
    name = r.get("run", "name", r.args.name, "reference")
    inputs = [manifest_path, plan_path]
    test_fold = r.get("cv", "test_fold", r.args.test_fold, None, int)
    if test_fold is None:
        result = cv.run_cv(
            manifest, plan, config=config, name=name, seed=r.seed, jobs=r.jobs
        )
        outputs = ["cv_table.csv"]
        cv.write_cv_table(os.path.join(out, "cv_table.csv"), [result])
        for outcome in result.outcomes:
            prefix = f"fold{outcome.fold}_"
            trainer.write_checkpoint(
                os.path.join(out, prefix + "checkpoint.json"), outcome.checkpoint
            )
            trainer.write_training_log(
                os.path.join(out, prefix + "log.csv"), outcome.log
            )
            metrics.write_report(
                os.path.join(out, prefix + "report.json"), outcome.report
            )
            outputs += [prefix + "checkpoint.json", prefix + "log.csv", prefix + "report.json"]
            print(f"fold {outcome.fold}: kappa={outcome.report.kappa:.6f}")
        print(f"mean kappa={result.mean():.6f}")
        _write_run_manifest(out, "train", r, inputs, outputs)
        return
    split = cv.nested_split(plan, test_fold, seed=r.seed + test_fold)
    checkpoint, log = trainer.train(
        manifest, split.train_ids, split.val_ids,
        config=config, seed=r.seed + test_fold,
    )
    preds = checkpoint.model().predictions(manifest, split.test_ids)
    report = metrics.evaluate_predictions(manifest.ground_truth(), preds)
    trainer.write_checkpoint(os.path.join(out, "checkpoint.json"), checkpoint)
    trainer.write_training_log(os.path.join(out, "training_log.csv"), log)
    metrics.write_report(os.path.join(out, "report.json"), report)
    _write_run_manifest(
        out, "train", r, inputs,
        ["checkpoint.json", "training_log.csv", "report.json"],
    )
    for warning in log.warnings:
        print(f"warning: {warning}")
    print(f"fold {test_fold}: kappa={report.kappa:.6f}")


def cmd_predict(r: Resolver) -> None:
    manifest_path = _require_file(
        r.get("paths", "manifest", r.args.manifest, None), "manifest"
    )
    checkpoint_path = _require_file(
        r.get("paths", "checkpoint", r.args.checkpoint, None), "checkpoint"
    )
    subset = r.get("predict", "subset", r.args.subset, "all")
    if subset not in ("all", "labeled", "unlabeled"):
        raise core.ValidationError(f"unknown subset {subset!r}")
    out = r.out_dir()
    manifest = _read_manifest(r, manifest_path)
    checkpoint = trainer.read_checkpoint(checkpoint_path)
    if subset == "all":
        ids = list(manifest.ids)
    elif subset == "labeled":
        ids = [i for i in manifest.ids if i in manifest.labels]
    else:
        ids = [i for i in manifest.ids if i not in manifest.labels]
    if not ids:
        raise core.ValidationError(f"subset {subset!r} selects no items")
    preds = checkpoint.model().predictions(manifest, ids)
    core.write_predictions(preds, os.path.join(out, "predictions.csv"))
    _write_run_manifest(
        out, "predict", r, [manifest_path, checkpoint_path], ["predictions.csv"]
    )
    print(f"predictions.csv: {len(ids)} rows, {preds.num_classes} classes")


def cmd_evaluate(r: Resolver) -> None:
    labels_path = _require_file(
        r.get("paths", "labels", r.args.labels, None), "labels"
    )
    preds_path = _require_file(
        r.get("paths", "predictions", r.args.predictions, None), "predictions"
    )
    out = r.out_dir()
    labels = core.read_labelset(labels_path)
    preds = core.read_predictions(preds_path)
    report = metrics.evaluate_predictions(labels, preds)
    metrics.write_report(os.path.join(out, "report.json"), report)
    _write_run_manifest(
        out, "evaluate", r, [labels_path, preds_path], ["report.json"]
    )
    print(f"kappa={report.kappa:.6f}")
    auc = "NA" if report.auc_ovo is None else f"{report.auc_ovo:.6f}"
    print(f"auc_ovo={auc}")
    print(f"accuracy={report.accuracy:.6f}")
    if report.flags:
        print("flags=" + ";".join(report.flags))


def cmd_bucket(r: Resolver) -> None:
    preds_path = _require_file(
        r.get("paths", "predictions", r.args.predictions, None), "predictions"
    )
    hi = r.get("thresholds", "hi", r.args.hi, pseudo.HI_DEFAULT, float)
    lo_low = r.get("thresholds", "lo_low", r.args.lo_low, pseudo.LO_DEFAULT[0], float)
    lo_high = r.get("thresholds", "lo_high", r.args.lo_high, pseudo.LO_DEFAULT[1], float)
    out = r.out_dir()
    preds = core.read_predictions(preds_path)
    buckets = pseudo.bucket_predictions(preds, hi, (lo_low, lo_high))
    _json_dump(
        os.path.join(out, "buckets.json"),
        {
            "hi": hi,
            "lo": [lo_low, lo_high],
            "part1": dict(buckets.part1),
            "part2_candidates": list(buckets.part2_candidates),
            "unused": list(buckets.unused),
        },
    )
    _write_run_manifest(out, "bucket", r, [preds_path], ["buckets.json"])
    print(
        f"part1={len(buckets.part1)} part2_candidates={len(buckets.part2_candidates)} "
        f"unused={len(buckets.unused)}"
    )


def cmd_vote(r: Resolver) -> None:
    baseline_path = _require_file(
        r.get("paths", "baseline", r.args.baseline, None), "baseline predictions"
    )
    peer_paths = r.args.peers or _peers_from_ini(r)
    if not peer_paths or len(peer_paths) != 4:
        raise core.ValidationError("exactly 4 peer prediction files are required")
    peer_paths = [_require_file(p, "peer predictions") for p in peer_paths]
    out = r.out_dir()
    baseline = core.read_predictions(baseline_path)
    peers = [core.read_predictions(p) for p in peer_paths]
    records = []
    for item in baseline.ids:
        b = baseline.argmax_label(item)
        peer_labels = tuple(m.argmax_label(item) for m in peers)
        outcome = pseudo.hard_vote_filter(b, peer_labels)
        records.append(pseudo.VoteRecord(item, b, peer_labels, outcome))
    pseudo.write_vote_audit(os.path.join(out, "votes.csv"), records)
    _write_run_manifest(
        out, "vote", r, [baseline_path, *peer_paths], ["votes.csv"]
    )
    unsure = sum(1 for rec in records if isinstance(rec.outcome, pseudo._UnsureType))
    print(f"votes.csv: {len(records)} rows, {len(records) - unsure} decided, {unsure} unsure")


def _peers_from_ini(r: Resolver):
    # INI cannot hold a 4-element flag, so [paths] peers is comma-separated.
    value = r.get("paths", "peers", None, None)
    if value is None:
        return None
    parts = [p.strip() for p in str(value).split(",") if p.strip()]
    return parts or None


def cmd_pseudo_round(r: Resolver) -> None:
    manifest_path = _require_file(
        r.get("paths", "manifest", r.args.manifest, None), "manifest"
    )
    labels_path = _require_file(
        r.get("paths", "labels", r.args.labels, None), "labels"
    )
    checkpoint_path = _require_file(
        r.get("paths", "checkpoint", r.args.checkpoint, None), "checkpoint"
    )
    baseline_path = _require_file(
        r.get("paths", "baseline", r.args.baseline, None), "baseline predictions"
    )
    peer_paths = r.args.peers or _peers_from_ini(r)
    if not peer_paths or len(peer_paths) != 4:
        raise core.ValidationError("exactly 4 peer prediction files are required")
    peer_paths = [_require_file(p, "peer predictions") for p in peer_paths]
    val_ids_path = _require_file(
        r.get("paths", "val_ids", r.args.val_ids, None), "validation id list"
    )
    rounds = r.get("pseudo", "rounds", r.args.rounds, 1, int)
    if rounds < 1:
        raise core.ValidationError("rounds must be at least 1")
    config = pseudo.RoundConfig(
        hi=r.get("thresholds", "hi", r.args.hi, pseudo.HI_DEFAULT, float),
        lo_low=r.get("thresholds", "lo_low", r.args.lo_low, pseudo.LO_DEFAULT[0], float),
        lo_high=r.get("thresholds", "lo_high", r.args.lo_high, pseudo.LO_DEFAULT[1], float),
        finetune_epochs=r.get("pseudo", "finetune_epochs", r.args.finetune_epochs, 10, int),
        trainer=_trainer_config(r),
        prediction_source=r.get(
            "pseudo", "prediction_source", r.args.prediction_source, "baseline"
        ),
        ensemble_mode=r.get("pseudo", "ensemble_mode", r.args.ensemble_mode, "mean_prob"),
    )
    out = r.out_dir()
    manifest = _read_manifest(r, manifest_path)
    labels = core.read_labelset(labels_path)
    checkpoint = trainer.read_checkpoint(checkpoint_path)
    baseline = core.read_predictions(baseline_path)
    peers = tuple(core.read_predictions(p) for p in peer_paths)
    val_ids = _read_id_list(val_ids_path)
    state = pseudo.RoundState(
        round_index=1,
        train_labels=labels,
        checkpoint=checkpoint,
        baseline_preds=baseline,
        peer_preds=peers,
    )
    outputs = []
    for i in range(rounds):
        state, report = pseudo.run_round(
            manifest, state, val_ids, config=config, out_dir=out, seed=r.seed + i
        )
        rr = report.round_index
        outputs += [
            f"round{rr}_votes.csv",
            f"round{rr}_pseudo_labels.csv",
            f"round{rr}_training_set.csv",
            f"round{rr}_checkpoint.json",
            f"round{rr}_predictions.csv",
            f"round{rr}_report.json",
        ]
        note = "" if report.finetuned else " (finetune skipped)"
        print(
            f"round {rr}: part1={report.part1_count} voted={report.voted_count} "
            f"unsure={report.unsure_count} val_kappa={report.val_report.kappa:.6f}{note}"
        )
    _write_run_manifest(
        out, "pseudo-round", r,
        [manifest_path, labels_path, checkpoint_path, baseline_path, *peer_paths, val_ids_path],
        outputs,
    )


def cmd_ensemble(r: Resolver) -> None:
    input_paths = r.args.inputs or []
    if len(input_paths) < 2:
        raise core.ValidationError("ensemble needs at least 2 prediction files")
    input_paths = [_require_file(p, "predictions") for p in input_paths]
    mode = r.get("pseudo", "ensemble_mode", r.args.mode, "mean_prob")
    out = r.out_dir()
    members = [core.read_predictions(p) for p in input_paths]
    combined = pseudo.ensemble(members, mode=mode)
    core.write_predictions(combined, os.path.join(out, "ensemble.csv"))
    _write_run_manifest(out, "ensemble", r, input_paths, ["ensemble.csv"])
    print(f"ensemble.csv: {len(combined)} rows from {len(members)} members ({mode})")


def _read_mask_dir(path: str) -> dict[str, core.MaskImage]:
    masks = {}
    for name in sorted(os.listdir(path)):
        if name.endswith(".pgm"):
            masks[name[:-4]] = core.read_mask(os.path.join(path, name))
    if not masks:
        raise core.ValidationError(f"no .pgm masks found in {path!r}")
    return masks


def cmd_gate(r: Resolver) -> None:
    masks_dir = _require_dir(
        r.get("paths", "masks", r.args.masks_dir, None), "masks"
    )
    verdicts_path = _require_file(
        r.get("paths", "verdicts", r.args.verdicts, None), "verdicts"
    )
    truth_dir = r.get("paths", "truth", r.args.truth_dir, None)
    label = r.get("gate", "label", r.args.label, 1, int)
    convention = r.get("gate", "convention", r.args.convention, "one")
    out = r.out_dir()
    masks = _read_mask_dir(masks_dir)
    verdict = seggate.read_verdicts(verdicts_path)
    gated = seggate.gate_masks(masks, verdict)
    gated_dir = os.path.join(out, "gated")
    os.makedirs(gated_dir, exist_ok=True)
    outputs = []
    inputs = [verdicts_path] + [
        os.path.join(masks_dir, f"{item}.pgm") for item in sorted(masks)
    ]
    for item in sorted(gated):
        core.write_mask(gated[item], os.path.join(gated_dir, f"{item}.pgm"))
        outputs.append(f"gated/{item}.pgm")
    zeroed = sum(1 for item in masks if verdict[item] == 0)
    print(f"zeroed {zeroed} of {len(masks)} masks")
    if truth_dir is not None:
        _require_dir(truth_dir, "truth masks")
        truths = _read_mask_dir(truth_dir)
        report = seggate.evaluate_segmentation(gated, truths, label=label, convention=convention)
        seggate.write_seg_results(os.path.join(out, "seg_results.csv"), report)
        outputs.append("seg_results.csv")
        inputs += [os.path.join(truth_dir, f"{item}.pgm") for item in sorted(truths)]
        print(f"mean_dice={report.mean_dice:.6f}")
        print(f"mean_iou={report.mean_iou:.6f}")
    _write_run_manifest(out, "gate", r, inputs, outputs)


def cmd_report(r: Resolver) -> None:
    artifacts = _require_dir(
        r.get("paths", "artifacts", r.args.artifacts, None), "artifacts"
    )
    name = r.get("run", "name", r.args.name, "reference")
    convention = r.get("gate", "convention", r.args.convention, "one")
    if convention not in seggate.CONVENTIONS:
        raise core.ValidationError(f"unknown both-empty convention {convention!r}")
    out = r.out_dir()
    inputs: list[str] = []
    outputs: list[str] = []

    fold_reports = {}
    for fname in sorted(os.listdir(artifacts)):
        match = re.fullmatch(r"fold(\d+)_report\.json", fname)
        if match:
            path = os.path.join(artifacts, fname)
            fold_reports[int(match.group(1))] = metrics.read_report(path)
            inputs.append(path)
    if fold_reports:
        folds = sorted(fold_reports)
        if folds != list(range(len(folds))):
            raise core.ValidationError(f"fold reports are not contiguous: {folds}")
        values = [fold_reports[f].kappa for f in folds]
        header = "backbone," + ",".join(f"fold{f}" for f in folds) + ",mean"
        row = ",".join([name] + [repr(v) for v in values] + [repr(sum(values) / len(values))])
        with open(os.path.join(out, "cv_table.csv"), "w", encoding="ascii", newline="\n") as fh:
            fh.write(header + "\n" + row + "\n")
        outputs.append("cv_table.csv")
        print(f"cv_table.csv: {len(folds)} folds")

    vote_rows: list[str] = []
    for fname in sorted(os.listdir(artifacts)):
        if re.fullmatch(r"(round\d+_)?votes\.csv", fname):
            path = os.path.join(artifacts, fname)
            records = pseudo.read_vote_audit(path)
            inputs.append(path)
            for rec in records:
                outcome = "Unsure" if isinstance(rec.outcome, pseudo._UnsureType) else str(rec.outcome)
                vote_rows.append(
                    f"{rec.item},{rec.baseline},{rec.peers[0]},{rec.peers[1]},"
                    f"{rec.peers[2]},{rec.peers[3]},{outcome}"
                )
    if vote_rows:
        with open(os.path.join(out, "votes_table.csv"), "w", encoding="ascii", newline="\n") as fh:
            fh.write(pseudo.VOTE_HEADER + "\n" + "\n".join(vote_rows) + "\n")
        outputs.append("votes_table.csv")
        print(f"votes_table.csv: {len(vote_rows)} rows")

    seg_rows: list[str] = []
    for fname in sorted(os.listdir(artifacts)):
        if re.fullmatch(r"(.+_)?seg_results\.csv", fname):
            path = os.path.join(artifacts, fname)
            items = seggate.read_seg_results(path)
            inputs.append(path)
            by_label: dict[int, list] = {}
            for item in items:
                by_label.setdefault(item.label, []).append(item)
            for lab in sorted(by_label):
                rows = by_label[lab]
                dices, ious, skipped = [], [], 0
                for row in rows:
                    if row.both_empty:
                        if convention == "exclude":
                            skipped += 1
                            continue
                        score = 1.0 if convention == "one" else 0.0
                        dices.append(score)
                        ious.append(score)
                    else:
                        dices.append(row.dice)
                        ious.append(row.iou)
                if not dices:
                    continue
                mean_dice = sum(dices) / len(dices)
                mean_iou = sum(ious) / len(ious)
                seg_rows.append(
                    f"{fname},{lab},{mean_dice!r},{mean_iou!r},{len(dices)},{skipped}"
                )
    if seg_rows:
        header = "source,label,mean_dice,mean_iou,n_scored,n_excluded"
        with open(os.path.join(out, "seg_summary.csv"), "w", encoding="ascii", newline="\n") as fh:
            fh.write(header + "\n" + "\n".join(seg_rows) + "\n")
        outputs.append("seg_summary.csv")
        print(f"seg_summary.csv: {len(seg_rows)} rows")

    if not outputs:
        raise core.ValidationError(f"no recognized artifacts in {artifacts!r}")
    _write_run_manifest(out, "report", r, inputs, outputs)


HANDLERS = {
    "split": cmd_split,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "bucket": cmd_bucket,
    "vote": cmd_vote,
    "pseudo-round": cmd_pseudo_round,
    "ensemble": cmd_ensemble,
    "gate": cmd_gate,
    "report": cmd_report,
}


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file; flags override it")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--jobs", type=int, help="max parallel fold workers (default 1)")
    common.add_argument("--out", help="output directory for artifacts")

    parser = _Parser(prog="pseudovote", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common], help="stratified k-fold plan from a label file")
    p.add_argument("--labels")
    p.add_argument("--k", type=int)

    p = sub.add_parser("train", parents=[common], help="train on one nested split or on every fold")
    p.add_argument("--manifest")
    p.add_argument("--folds")
    p.add_argument("--test-fold", dest="test_fold", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--name")
    _add_trainer_flags(p)

    p = sub.add_parser("predict", parents=[common], help="write predictions for manifest items")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--subset", choices=["all", "labeled", "unlabeled"])
    p.add_argument("--num-classes", dest="num_classes", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against labels")
    p.add_argument("--labels")
    p.add_argument("--predictions")

    p = sub.add_parser("bucket", parents=[common], help="split predictions by confidence")
    p.add_argument("--predictions")
    _add_threshold_flags(p)

    p = sub.add_parser("vote", parents=[common], help="hard-vote every baseline id against 4 peers")
    p.add_argument("--baseline")
    p.add_argument("--peers", nargs=4)

    p = sub.add_parser("pseudo-round", parents=[common], help="run self-training rounds")
    p.add_argument("--manifest")
    p.add_argument("--labels")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline")
    p.add_argument("--peers", nargs=4)
    p.add_argument("--val-ids", dest="val_ids")
    p.add_argument("--rounds", type=int)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--prediction-source", dest="prediction_source",
                   choices=["baseline", "ensemble_with_peers"])
    p.add_argument("--ensemble-mode", dest="ensemble_mode",
                   choices=["mean_prob", "hard_vote"])
    p.add_argument("--num-classes", dest="num_classes", type=int)
    _add_threshold_flags(p)
    _add_trainer_flags(p)

    p = sub.add_parser("ensemble", parents=[common], help="combine prediction files")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--mode", choices=["mean_prob", "hard_vote"])

    p = sub.add_parser("gate", parents=[common], help="zero masks judged Absent; optionally score them")
    p.add_argument("--masks-dir", dest="masks_dir")
    p.add_argument("--verdicts")
    p.add_argument("--truth-dir", dest="truth_dir")
    p.add_argument("--label", type=int)
    p.add_argument("--convention", choices=list(seggate.CONVENTIONS))

    p = sub.add_parser("report", parents=[common], help="regenerate tables from persisted artifacts")
    p.add_argument("--artifacts")
    p.add_argument("--name")
    p.add_argument("--convention", choices=list(seggate.CONVENTIONS))

    return parser


def _add_threshold_flags(p) -> None:
    p.add_argument("--hi", type=float)
    p.add_argument("--lo-low", dest="lo_low", type=float)
    p.add_argument("--lo-high", dest="lo_high", type=float)


def _add_trainer_flags(p) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--schedule", choices=["exponential", "plateau"])
    p.add_argument("--hidden-units", dest="hidden_units", type=int)
    p.add_argument("--loss", choices=[k.value for k in trainer.LossKind])
    p.add_argument("--class-weighting", dest="class_weighting",
                   choices=["none", "inverse_frequency"])
    p.add_argument("--lam", type=float)
    p.add_argument("--alpha-start", dest="alpha_start", type=float)
    p.add_argument("--alpha-end", dest="alpha_end", type=float)
    p.add_argument("--checkpoint-metric", dest="checkpoint_metric",
                   choices=["kappa", "val_loss"])


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        resolver = Resolver(args)
        HANDLERS[args.command](resolver)
        return EXIT_OK
    except core.ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (core.PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
