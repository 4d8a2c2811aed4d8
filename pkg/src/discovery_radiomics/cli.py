"""Command-line front end.

Every subcommand reads an optional JSON run config, writes its artifacts
atomically, and prints a one-line JSON summary on stdout. Exit status is 0 on
success, 1 for domain errors (infeasible split, diverged training, ...) and 2
for usage, configuration and I/O errors.
"""

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentPolicy, augment_archive
from .classifier import TreeParams, fit_tree, load_tree, predict_many, save_tree
from .dataset import (PARTITIONS, load_archive, save_archive, stratified_patient_split,
                      synthesize_cohort)
from .errors import ConfigError, FormatError, RadiomicsError
from .evaluation import LesionPrediction, evaluate_predictions, run_cv
from .io_utils import atomic_write_text
from .sequencer import (SequencerConfig, discover, extract_sequences, load_model,
                        save_model)

log = logging.getLogger("discovery_radiomics")

SECTIONS = {
    "synth": {"seed", "n_benign_patients", "n_malignant_patients", "lesions_per_patient", "patch_size"},
    "augment": {f.name for f in dataclasses.fields(AugmentPolicy)},
    "sequencer": {f.name for f in dataclasses.fields(SequencerConfig)},
    "tree": {f.name for f in dataclasses.fields(TreeParams)},
    "split": {"fractions", "seed", "unit"},
    "cv": {"k", "seed", "unit", "jobs"},
    "paths": {"archive", "augmented", "split_dir", "train", "val", "model", "training_log",
              "sequences", "tree", "eval_report", "cv_report"},
}
SEEDED = ("synth", "sequencer", "split", "cv")


class RunConfig:
    """Validated view of a JSON run configuration."""

    def __init__(self, data=None):
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name, section in data.items():
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            bad = set(section) - SECTIONS[name]
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            if name in SEEDED and "seed" not in section:
                raise ConfigError(f"section {name!r} must set an explicit seed")
        self.data = data

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            try:
                return cls(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc

    def section(self, name, required=False):
        if required and name not in self.data:
            raise ConfigError(f"run config needs a {name!r} section with an explicit seed")
        return dict(self.data.get(name, {}))

    def path(self, key, override=None, required=True):
        value = override if override is not None else self.data.get("paths", {}).get(key)
        if value is None and required:
            raise ConfigError(f"no path given for {key!r} (flag or paths.{key} in the config)")
        return None if value is None else Path(value)

    def sequencer(self):
        try:
            return SequencerConfig.from_dict(self.section("sequencer", required=True))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def policy(self):
        try:
            return AugmentPolicy(**self.section("augment"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"augment: {exc}") from exc

    def tree(self):
        try:
            return TreeParams(**self.section("tree"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"tree: {exc}") from exc


def _emit(summary):
    print(json.dumps(summary, sort_keys=False))


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _check_out_dir(path):
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")


# -- sequence CSV -----------------------------------------------------------

SEQ_META = ["patient_id", "lesion_id", "rotation_deg", "annotator_id", "label"]


def sequences_to_csv(sequences):
    width = len(sequences[0].features) if sequences else 0
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SEQ_META + [f"f{i}" for i in range(width)])
    for s in sequences:
        label = "" if s.label is None else s.label
        writer.writerow([s.patient_id, s.lesion_id, s.rotation_deg, s.annotator_id, label]
                        + [repr(float(v)) for v in s.features])
    return out.getvalue()


def read_sequence_csv(path):
    """Return (meta rows, feature matrix) from an extract CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != SEQ_META:
            raise FormatError(f"{path}: missing sequence CSV header", line=1)
        meta, feats = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                meta.append((row[0], row[1], int(row[2]), int(row[3]),
                             None if row[4] == "" else int(row[4])))
                feats.append([float(v) for v in row[5:]])
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}", line=lineno) from None
    return meta, np.array(feats, dtype=np.float64).reshape(len(feats), len(header) - 5)


# -- commands ---------------------------------------------------------------

def cmd_synth(args, cfg):
    s = cfg.section("synth", required=True)
    out = cfg.path("archive", args.out)
    _check_out_dir(out)
    archive = synthesize_cohort(
        s["seed"], s.get("n_benign_patients", 28), s.get("n_malignant_patients", 69),
        s.get("lesions_per_patient", 5), s.get("patch_size", 18))
    save_archive(archive, out)
    if args.figure:
        from .plotting import plot_patches
        plot_patches(archive, args.figure)
    return {"archive": str(out), "patches": len(archive), "patients": len(archive.patient_ids()),
            "sha256": _sha256(out)}


def cmd_split(args, cfg):
    s = cfg.section("split", required=True)
    archive = load_archive(cfg.path("archive", args.archive))
    out_dir = cfg.path("split_dir", args.out_dir)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out_dir}")
    spec = stratified_patient_split(archive, s.get("fractions", (0.8, 0.1, 0.1)), s["seed"],
                                    s.get("unit", "patient"))
    counts = {}
    for part in PARTITIONS:
        sub = spec.select(archive, part)
        counts[part] = len(sub)
        if sub.patches:
            save_archive(sub, out_dir / f"{part}.rsa")
    assignment = {"/".join(k) if isinstance(k, tuple) else k: v
                  for k, v in sorted(spec.assignment.items())}
    atomic_write_text(out_dir / "split.json",
                      json.dumps({"seed": spec.seed, "unit": spec.unit, "assignment": assignment},
                                 indent=2) + "\n")
    return {"out_dir": str(out_dir), "patches": counts}


def cmd_augment(args, cfg):
    src = cfg.path("archive", args.input)
    out = cfg.path("augmented", args.out)
    _check_out_dir(out)
    augmented = augment_archive(load_archive(src), cfg.policy())
    save_archive(augmented, out)
    return {"archive": str(out), "patches": len(augmented), "sha256": _sha256(out)}


def cmd_discover(args, cfg):
    config = cfg.sequencer()
    if args.epochs is not None:
        config = dataclasses.replace(config, epochs=args.epochs)
    train = load_archive(cfg.path("train", args.train))
    val_path = cfg.path("val", args.val, required=False)
    val = load_archive(val_path) if val_path else None
    model_out = cfg.path("model", args.model_out)
    _check_out_dir(model_out)
    log_out = cfg.path("training_log", args.log_out, required=False) or model_out.with_suffix(".log.csv")
    model, history = discover(train, val, config)
    save_model(model, model_out)
    atomic_write_text(log_out, history.to_csv())
    if history.epochs:
        from .plotting import plot_training_log
        plot_training_log(history.epochs, log_out.with_suffix(".png"))
    last = history.epochs[-1] if history.epochs else None
    return {"model": str(model_out), "training_log": str(log_out), "epochs": model.trained_epochs,
            "final_train_loss": last and last.train_loss, "final_val_acc": last and last.val_acc,
            "sha256": _sha256(model_out)}


def cmd_extract(args, cfg):
    model = load_model(cfg.path("model", args.model))
    archive = load_archive(cfg.path("archive", args.archive))
    out = cfg.path("sequences", args.out)
    _check_out_dir(out)
    sequences = extract_sequences(model, archive)
    atomic_write_text(out, sequences_to_csv(sequences))
    return {"sequences": str(out), "rows": len(sequences), "width": model.config.sequence_length,
            "sha256": _sha256(out)}


def cmd_fit_tree(args, cfg):
    params = cfg.tree()
    overrides = {k: v for k, v in (("max_depth", args.max_depth),
                                    ("min_samples_leaf", args.min_samples_leaf)) if v is not None}
    params = dataclasses.replace(params, **overrides)
    meta, X = read_sequence_csv(cfg.path("sequences", args.sequences))
    if any(m[4] is None for m in meta):
        raise ConfigError("sequence CSV rows need labels to fit a tree")
    out = cfg.path("tree", args.tree_out)
    _check_out_dir(out)
    tree = fit_tree(X, np.array([m[4] for m in meta]), params)
    save_tree(tree, out)
    return {"tree": str(out), "nodes": len(tree.nodes), "depth": tree.depth, "sha256": _sha256(out)}


def cmd_eval(args, cfg):
    model = load_model(cfg.path("model", args.model))
    tree = load_tree(cfg.path("tree", args.tree))
    archive = load_archive(cfg.path("archive", args.archive))
    out = cfg.path("eval_report", args.report_out)
    _check_out_dir(out)
    test = archive.select(lambda p: p.rotation_deg == 0)
    sequences = extract_sequences(model, test)
    labels, scores = predict_many(tree, np.stack([s.features for s in sequences]))
    preds = [LesionPrediction(s.patient_id, s.lesion_id, s.rotation_deg, s.annotator_id,
                              int(lab), s.label, float(sc))
             for s, lab, sc in zip(sequences, labels, scores)]
    lesion, patient = evaluate_predictions(preds)
    report = {"archive_patches": len(archive), "evaluated_patches": len(test),
              "lesion": lesion.to_dict(), "patient": patient.to_dict()}
    atomic_write_text(out, json.dumps(report, indent=2) + "\n")
    rows = ["level,sensitivity,specificity,accuracy"]
    for r in (lesion, patient):
        rows.append(",".join([r.level] + ["" if v is None else repr(v)
                                          for v in (r.sensitivity, r.specificity, r.accuracy)]))
    atomic_write_text(out.with_suffix(".csv"), "\n".join(rows) + "\n")
    return {"report": str(out), "lesion_accuracy": lesion.accuracy,
            "patient_accuracy": patient.accuracy}


def cmd_cv(args, cfg):
    c = cfg.section("cv", required=True)
    archive = load_archive(cfg.path("archive", args.archive))
    out = cfg.path("cv_report", args.report_out)
    _check_out_dir(out)
    jobs = args.jobs if args.jobs is not None else c.get("jobs", 1)
    report = run_cv(archive, cfg.sequencer(), cfg.tree(), k=c.get("k", 10), seed=c["seed"],
                    policy=cfg.policy(), unit=c.get("unit", "patient"), jobs=jobs)
    atomic_write_text(out, report.to_json())
    atomic_write_text(out.with_suffix(".csv"), report.to_csv())
    if not args.no_figures:
        from .plotting import plot_cv_report, plot_training_log
        plot_cv_report(report, out.with_suffix(".png"))
        for f in report.folds:
            plot_training_log(f.history, out.with_name(f"{out.stem}_fold{f.fold}_training.png"),
                              title=f"Sequencer discovery, fold {f.fold}")
    return {"report": str(out), "k": report.k, "fingerprint": report.fingerprint,
            "lesion_accuracy_mean": report.mean("lesion", "accuracy"),
            "patient_accuracy_mean": report.mean("patient", "accuracy"),
            "sha256": _sha256(out)}


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "augment": cmd_augment, "discover": cmd_discover,
    "extract": cmd_extract, "fit-tree": cmd_fit_tree, "eval": cmd_eval, "cv": cmd_cv,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="discovery-radiomics",
        description="Discover a convolutional radiomic sequencer and evaluate it with a decision tree.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON run config")
        return p

    p = add("synth", "generate a synthetic lesion cohort archive")
    p.add_argument("--out", help="archive path (.rsa)")
    p.add_argument("--figure", help="optional PNG of example patches")

    p = add("split", "patient-level train/val/test split of an archive")
    p.add_argument("--archive")
    p.add_argument("--out-dir")

    p = add("augment", "rotation-augment an unrotated archive")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")

    p = add("discover", "train the sequencer")
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--model-out")
    p.add_argument("--log-out", help="training log CSV (default: next to the model)")
    p.add_argument("--epochs", type=int, help="override sequencer.epochs")

    p = add("extract", "write radiomic sequences of an archive as CSV")
    p.add_argument("--model")
    p.add_argument("--archive")
    p.add_argument("--out")

    p = add("fit-tree", "fit a decision tree on a sequence CSV")
    p.add_argument("--sequences")
    p.add_argument("--tree-out")
    p.add_argument("--max-depth", type=int)
    p.add_argument("--min-samples-leaf", type=int)

    p = add("eval", "score unrotated patches of an archive")
    p.add_argument("--model")
    p.add_argument("--tree")
    p.add_argument("--archive")
    p.add_argument("--report-out")

    p = add("cv", "k-fold cross-validation of the whole pipeline")
    p.add_argument("--archive")
    p.add_argument("--report-out")
    p.add_argument("--jobs", type=int, help="folds to run in parallel")
    p.add_argument("--no-figures", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config)
        summary = COMMANDS[args.command](args, cfg)
    except (ConfigError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RadiomicsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _emit({"command": args.command, "status": "ok", **summary})
    return 0


if __name__ == "__main__":
    sys.exit(main())
