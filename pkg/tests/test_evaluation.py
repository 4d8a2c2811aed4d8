import json

import numpy as np
import pytest

from discovery_radiomics.augment import AugmentPolicy
from discovery_radiomics.classifier import TreeParams
from discovery_radiomics.dataset import synthesize_cohort
from discovery_radiomics.errors import SplitError
from discovery_radiomics.evaluation import (ConfusionCounts, LesionPrediction, aggregate_patient,
                                            compute_metrics, evaluate_predictions, metrics_from_counts,
                                            run_cv)
from discovery_radiomics.sequencer import SequencerConfig

from oracles import tally

TINY_SEQ = SequencerConfig(conv_channels=(4, 6, 8), seed=5, epochs=2, batch_size=16)
TINY_TREE = TreeParams(max_depth=4, min_samples_leaf=2)


def triples(tp, fn, tn, fp):
    rows = [(1, 1)] * tp + [(0, 1)] * fn + [(0, 0)] * tn + [(1, 0)] * fp
    return [(i, p, t) for i, (p, t) in enumerate(rows)]


def lp(patient, lesion, pred, truth=0, rot=0):
    return LesionPrediction(patient, lesion, rot, 0, pred, truth)


# -- metrics ------------------------------------------------------------------

def test_all_correct():
    r = compute_metrics(triples(3, 0, 4, 0))
    assert (r.sensitivity, r.specificity, r.accuracy) == (1.0, 1.0, 1.0)


def test_hand_computed_confusion():
    r = compute_metrics(triples(2, 1, 3, 1))
    assert r.sensitivity == 2 / 3 and r.specificity == 3 / 4 and r.accuracy == 5 / 7
    assert r.counts == ConfusionCounts(tp=2, fp=1, tn=3, fn=1)


def test_undefined_ratio_is_absent():
    r = compute_metrics(triples(0, 0, 3, 1))
    assert r.sensitivity is None and r.specificity == 0.75
    assert r.to_dict()["sensitivity"] is None


def test_thousand_random_pairs_match_tally():
    rng = np.random.default_rng(0)
    pred, truth = rng.integers(0, 2, 1000), rng.integers(0, 2, 1000)
    r = compute_metrics(list(zip(range(1000), pred.tolist(), truth.tolist())))
    tp, fp, tn, fn = tally(zip(pred.tolist(), truth.tolist()))
    assert r.counts == ConfusionCounts(tp, fp, tn, fn)
    assert r.sensitivity == tp / (tp + fn) and r.specificity == tn / (tn + fp)
    assert r.accuracy == (tp + tn) / 1000
    # accuracy is the prevalence-weighted mix of sensitivity and specificity
    prev = (tp + fn) / 1000
    assert r.accuracy == pytest.approx(prev * r.sensitivity + (1 - prev) * r.specificity, abs=1e-15)


def test_metric_errors():
    with pytest.raises(ValueError):
        compute_metrics([])
    with pytest.raises(ValueError):
        compute_metrics([("a", 2, 1)])
    with pytest.raises(ValueError):
        compute_metrics(triples(1, 0, 0, 0), level="scan")


def test_metrics_from_counts_total():
    r = metrics_from_counts(ConfusionCounts(1, 2, 3, 4), "patient")
    assert r.counts.total == 10 and r.accuracy == 0.4 and r.level == "patient"


# -- patient aggregation ------------------------------------------------------

def test_single_lesion_patient_keeps_prediction():
    assert aggregate_patient([lp("A", "1", 1, 0), lp("B", "1", 0, 1)]) == [("A", 1, 0), ("B", 0, 1)]


def test_majority_vote():
    preds = [lp("A", "1", 0), lp("A", "2", 0), lp("A", "3", 1)]
    assert aggregate_patient(preds) == [("A", 0, 0)]


def test_tie_goes_to_malignant():
    assert aggregate_patient([lp("A", "1", 0), lp("A", "2", 1)]) == [("A", 1, 0)]


def test_patient_truth_is_any_malignant():
    assert aggregate_patient([lp("A", "1", 0, 0), lp("A", "2", 0, 1), lp("A", "3", 0, 0)]) == [("A", 0, 1)]


def test_rotated_lesions_are_refused():
    with pytest.raises(ValueError, match="rotated"):
        aggregate_patient([lp("A", "1", 0, rot=90)])


def test_evaluate_predictions_levels():
    lesion, patient = evaluate_predictions([lp("A", "1", 1, 1), lp("A", "2", 0, 1), lp("B", "1", 0, 0)])
    assert lesion.level == "lesion" and lesion.counts.total == 3
    assert patient.level == "patient" and patient.counts == ConfusionCounts(tp=1, fp=0, tn=1, fn=0)


# -- cross-validation ---------------------------------------------------------

@pytest.fixture(scope="module")
def four_patients():
    return synthesize_cohort(9, 2, 2, 2)


@pytest.fixture(scope="module")
def twelve_patients():
    return synthesize_cohort(8, 6, 6, 2)


@pytest.fixture(scope="module")
def eighteen_patients():
    return synthesize_cohort(7, 9, 9, 1)


def test_k2_smoke(four_patients):
    report = run_cv(four_patients, TINY_SEQ, TINY_TREE, k=2, seed=0)
    assert len(report.folds) == 2 and report.k == 2
    for f in report.folds:
        assert f.val_units == []  # too few patients for a validation share
        assert len(f.test_units) == 2 and f.test_rotations == [0]
        assert f.lesion.counts.total == 4 and f.patient.counts.total == 2
    d = json.loads(report.to_json())
    assert list(d) == ["k", "seed", "unit", "fingerprint", "summary", "folds"]
    assert report.to_csv().splitlines()[0] == "fold,level,sensitivity,specificity,accuracy"
    assert len(report.to_csv().splitlines()) == 1 + 2 * 2


def test_no_leakage_and_unrotated_tests(eighteen_patients):
    report = run_cv(eighteen_patients, TINY_SEQ, TINY_TREE, k=3, seed=1)
    seen_test = []
    for f in report.folds:
        test = set(f.test_units)
        assert not test & set(f.train_units) and not test & set(f.val_units)
        assert len(f.val_units) == 2  # one per class from the 6 + 6 remaining
        assert f.test_rotations == [0]
        assert f.n_train_patches == sum(36 if u < "P0009" else 8 for u in f.train_units)
        seen_test += f.test_units
    assert sorted(seen_test) == eighteen_patients.patient_ids()


def test_cv_is_deterministic_and_parallel_safe(twelve_patients):
    a = run_cv(twelve_patients, TINY_SEQ, TINY_TREE, k=3, seed=2)
    b = run_cv(twelve_patients, TINY_SEQ, TINY_TREE, k=3, seed=2)
    c = run_cv(twelve_patients, TINY_SEQ, TINY_TREE, k=3, seed=2, jobs=2)
    assert a.to_json() == b.to_json() == c.to_json()
    assert a.to_csv() == c.to_csv()
    d = run_cv(twelve_patients, TINY_SEQ, TINY_TREE, k=3, seed=3)
    assert d.fingerprint != a.fingerprint


def test_lesion_unit_knob(twelve_patients):
    report = run_cv(twelve_patients, TINY_SEQ, TINY_TREE, k=3, seed=0, unit="lesion")
    assert report.unit == "lesion"
    assert all(isinstance(u, tuple) for f in report.folds for u in f.test_units)


def test_cv_errors(four_patients):
    with pytest.raises(ValueError):
        run_cv(four_patients, TINY_SEQ, TINY_TREE, k=1)
    with pytest.raises(SplitError):
        run_cv(four_patients, TINY_SEQ, TINY_TREE, k=3)
    rotated = synthesize_cohort(0, 2, 2, 1)
    rotated.patches[0].rotation_deg = 10
    with pytest.raises(ValueError, match="unaugmented"):
        run_cv(rotated, TINY_SEQ, TINY_TREE, k=2)


def test_summary_statistics(twelve_patients):
    report = run_cv(twelve_patients, TINY_SEQ, TINY_TREE, k=3, seed=4, policy=AugmentPolicy(90, 90))
    accs = [f.lesion.accuracy for f in report.folds]
    s = report.to_dict()["summary"]["lesion"]["accuracy"]
    assert s["mean"] == pytest.approx(np.mean(accs)) and s["std"] == pytest.approx(np.std(accs, ddof=1))
    assert s["n"] == 3
