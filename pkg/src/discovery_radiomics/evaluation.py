"""Sensitivity/specificity/accuracy, lesion-to-patient aggregation and the
k-fold cross-validation harness (malignant is the positive class)."""

import dataclasses
import hashlib
import io
import json
import logging
import statistics
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .augment import AugmentPolicy, augment_archive
from .classifier import TreeParams, fit_tree, predict_many, tree_to_text
from .dataset import (MALIGNANT, archive_to_bytes, kfold_patient_partition, stack_pixels,
                      stratified_patient_split)
from .errors import SplitError
from .sequencer import SequencerConfig, discover, extract_matrix, model_to_bytes

log = logging.getLogger(__name__)

METRICS = ("sensitivity", "specificity", "accuracy")
LEVELS = ("lesion", "patient")
# train:val share of the non-test patients, i.e. 80% / 10% of the whole cohort
INNER_FRACTIONS = (8 / 9, 1 / 9, 0.0)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num, den):
    return num / den if den else None


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: float
    counts: ConfusionCounts
    level: str

    def to_dict(self):
        return OrderedDict([
            ("level", self.level),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("accuracy", self.accuracy),
            ("counts", OrderedDict((k, getattr(self.counts, k)) for k in ("tp", "fp", "tn", "fn"))),
        ])


def metrics_from_counts(counts, level):
    return MetricsReport(
        sensitivity=_ratio(counts.tp, counts.tp + counts.fn),
        specificity=_ratio(counts.tn, counts.tn + counts.fp),
        accuracy=(counts.tp + counts.tn) / counts.total,
        counts=counts,
        level=level,
    )


def compute_metrics(predictions, level="lesion"):
    """Metrics from ``(unit_id, predicted, truth)`` triples with 0/1 labels.

    Ratios whose denominator is zero are reported as None.
    """
    predictions = list(predictions)
    if not predictions:
        raise ValueError("no predictions to score")
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    tp = fp = tn = fn = 0
    for unit, pred, truth in predictions:
        if pred not in (0, 1) or truth not in (0, 1):
            raise ValueError(f"unit {unit!r}: labels must be 0 or 1")
        if truth == MALIGNANT:
            tp += pred == MALIGNANT
            fn += pred != MALIGNANT
        else:
            fp += pred == MALIGNANT
            tn += pred != MALIGNANT
    return metrics_from_counts(ConfusionCounts(int(tp), int(fp), int(tn), int(fn)), level)


@dataclass(frozen=True)
class LesionPrediction:
    patient_id: str
    lesion_id: str
    rotation_deg: int
    annotator_id: int
    predicted: int
    truth: int
    score: float = float("nan")


def aggregate_patient(lesion_predictions):
    """Collapse lesion predictions to ``(patient_id, predicted, truth)``.

    A patient is predicted malignant when at least half of its lesion
    predictions are malignant, and is truly malignant when any lesion is.
    Only unrotated patches may be aggregated.
    """
    groups: Dict[str, List[LesionPrediction]] = {}
    for p in lesion_predictions:
        if p.rotation_deg != 0:
            raise ValueError(f"patient {p.patient_id}: rotated patch ({p.rotation_deg} deg) in evaluation")
        groups.setdefault(p.patient_id, []).append(p)
    out = []
    for pid in sorted(groups):
        preds = groups[pid]
        votes = sum(p.predicted for p in preds)
        predicted = int(2 * votes >= len(preds))
        truth = int(any(p.truth == MALIGNANT for p in preds))
        out.append((pid, predicted, truth))
    return out


def evaluate_predictions(lesion_predictions):
    """Lesion- and patient-level reports for one set of unrotated predictions."""
    lesion = compute_metrics(
        [((p.patient_id, p.lesion_id, p.annotator_id), p.predicted, p.truth) for p in lesion_predictions],
        "lesion")
    patient = compute_metrics(aggregate_patient(lesion_predictions), "patient")
    return lesion, patient


# -- cross-validation -------------------------------------------------------

def derive_seed(seed, *keys):
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass
class FoldResult:
    fold: int
    lesion: MetricsReport
    patient: MetricsReport
    baseline_accuracy: float
    train_units: List
    val_units: List
    test_units: List
    test_rotations: List[int]
    n_train_patches: int
    model_sha256: str
    tree_sha256: str
    final_val_acc: Optional[float]
    history: list = field(default_factory=list, repr=False)


def _summary(values):
    vals = [v for v in values if v is not None]
    mean = statistics.fmean(vals) if vals else None
    std = statistics.stdev(vals) if len(vals) > 1 else None
    return OrderedDict([("mean", mean), ("std", std), ("n", len(vals))])


@dataclass
class CvReport:
    k: int
    seed: int
    unit: str
    fingerprint: str
    folds: List[FoldResult]

    def mean(self, level, metric):
        return _summary([getattr(getattr(f, level), metric) for f in self.folds])["mean"]

    def to_dict(self):
        summary = OrderedDict()
        for level in LEVELS:
            summary[level] = OrderedDict(
                (m, _summary([getattr(getattr(f, level), m) for f in self.folds])) for m in METRICS)
        summary["baseline_accuracy"] = _summary([f.baseline_accuracy for f in self.folds])
        folds = []
        for f in self.folds:
            folds.append(OrderedDict([
                ("fold", f.fold),
                ("lesion", f.lesion.to_dict()),
                ("patient", f.patient.to_dict()),
                ("baseline_accuracy", f.baseline_accuracy),
                ("final_val_acc", f.final_val_acc),
                ("n_train_patches", f.n_train_patches),
                ("train_units", [_unit_str(u) for u in f.train_units]),
                ("val_units", [_unit_str(u) for u in f.val_units]),
                ("test_units", [_unit_str(u) for u in f.test_units]),
                ("test_rotations", f.test_rotations),
                ("model_sha256", f.model_sha256),
                ("tree_sha256", f.tree_sha256),
            ]))
        return OrderedDict([
            ("k", self.k), ("seed", self.seed), ("unit", self.unit),
            ("fingerprint", self.fingerprint), ("summary", summary), ("folds", folds),
        ])

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self):
        out = io.StringIO()
        out.write("fold,level,sensitivity,specificity,accuracy\n")
        for f in self.folds:
            for level in LEVELS:
                r = getattr(f, level)
                cells = ["" if v is None else repr(v) for v in (r.sensitivity, r.specificity, r.accuracy)]
                out.write(f"{f.fold},{level},{','.join(cells)}\n")
        return out.getvalue()


def _unit_str(u):
    return u if isinstance(u, str) else "/".join(u)


def fingerprint(archive, seq_config, tree_params, policy, k, seed, unit):
    blob = json.dumps({
        "archive_sha256": hashlib.sha256(archive_to_bytes(archive)).hexdigest(),
        "sequencer": seq_config.to_dict(),
        "tree": dataclasses.asdict(tree_params),
        "augment": dataclasses.asdict(policy),
        "k": k, "seed": seed, "unit": unit,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def run_fold(archive, split, fold, seq_config, tree_params, policy, seed):
    """Train and score one held-out fold; see :func:`run_cv`."""
    unit = split.unit
    test = split.select(archive, fold)
    rest = archive.select(lambda p: split.assignment[split.unit_of(p)] != fold)
    try:
        inner = stratified_patient_split(rest, INNER_FRACTIONS, derive_seed(seed, fold, 1), unit)
        train, val = inner.select(rest, "train"), inner.select(rest, "val")
    except SplitError:
        # too few patients for a validation share; validation is diagnostic only
        log.warning("fold %d: no room for a validation set, training on all non-test patients", fold)
        train, val = rest, None
    train_aug = augment_archive(train, policy)
    cfg = dataclasses.replace(seq_config, seed=derive_seed(seq_config.seed, fold))
    model, history = discover(train_aug, val, cfg)

    x_train = stack_pixels(train_aug)[:, None]
    y_train = np.array([p.label for p in train_aug.patches])
    tree = fit_tree(extract_matrix(model, x_train), y_train, tree_params)

    labels, scores = predict_many(tree, extract_matrix(model, stack_pixels(test)[:, None]))
    preds = [LesionPrediction(p.patient_id, p.lesion_id, p.rotation_deg, p.annotator_id,
                              int(lab), p.label, float(s))
             for p, lab, s in zip(test.patches, labels, scores)]
    lesion, patient = evaluate_predictions(preds)

    train_labels = [p.label for p in train.patches]
    majority = int(2 * sum(train_labels) >= len(train_labels))
    baseline = float(np.mean([p.label == majority for p in test.patches]))
    units = lambda a: sorted({split.unit_of(p) for p in a.patches}) if a is not None else []
    return FoldResult(
        fold=fold, lesion=lesion, patient=patient, baseline_accuracy=baseline,
        train_units=units(train), val_units=units(val), test_units=units(test),
        test_rotations=sorted({p.rotation_deg for p in test.patches}),
        n_train_patches=len(train_aug.patches),
        model_sha256=hashlib.sha256(model_to_bytes(model)).hexdigest(),
        tree_sha256=hashlib.sha256(tree_to_text(tree).encode("utf-8")).hexdigest(),
        final_val_acc=history.epochs[-1].val_acc if history.epochs else None,
        history=history.epochs,
    )


def run_cv(archive, seq_config=SequencerConfig(), tree_params=TreeParams(), k=10, seed=0,
           policy=AugmentPolicy(), unit="patient", jobs=1):
    """Patient-granular k-fold cross-validation of the full pipeline.

    For every fold the held-out patients are set aside, the rest is split
    8:1 into training and validation patients, only the training patients
    are rotation-augmented, a sequencer is discovered, a tree is fitted on
    the training sequences and the unrotated held-out lesions are scored at
    lesion and patient level.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if any(p.rotation_deg != 0 for p in archive.patches):
        raise ValueError("run_cv expects an unaugmented archive; augmentation happens per fold")
    split = kfold_patient_partition(archive, k, seed, unit)
    args = [(archive, split, f, seq_config, tree_params, policy, seed) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(run_fold, *zip(*args)))
    else:
        folds = []
        for a in args:
            folds.append(run_fold(*a))
            r = folds[-1]
            log.info("fold %d/%d lesion acc %.3f patient acc %.3f", r.fold + 1, k,
                     r.lesion.accuracy, r.patient.accuracy)
    fp = fingerprint(archive, seq_config, tree_params, policy, k, seed, unit)
    return CvReport(k=k, seed=seed, unit=unit, fingerprint=fp, folds=folds)
