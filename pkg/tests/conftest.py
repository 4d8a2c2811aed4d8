import json
import pathlib
import subprocess
import sys

import numpy as np
import pytest

from discovery_radiomics import dataset as D
from discovery_radiomics.augment import augment_archive
from discovery_radiomics.classifier import TreeParams, fit_tree, predict_many
from discovery_radiomics.sequencer import SequencerConfig, discover, extract_matrix

ROOT = pathlib.Path(__file__).resolve().parents[1]
CALIBRATION_CONFIG = ROOT / "configs" / "calibration.json"

# Fixed at calibration time (seed-1 cohort, default hyperparameters); see README.
CALIBRATION = {
    "min_val_acc": 0.90,
    "min_heldout_acc": 0.90,
    "max_logistic_acc": 0.80,
    "min_cv_lesion_acc": 0.85,
    "min_margin_over_baseline": 0.15,
    "max_cv_minutes": 30.0,
}


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "discovery_radiomics", *map(str, args)],
                          capture_output=True, text=True, cwd=cwd)


@pytest.fixture(scope="session")
def calibration_config():
    return json.loads(CALIBRATION_CONFIG.read_text())


@pytest.fixture(scope="session")
def cohort(calibration_config):
    s = calibration_config["synth"]
    return D.synthesize_cohort(s["seed"], s["n_benign_patients"], s["n_malignant_patients"],
                               s["lesions_per_patient"], s["patch_size"])


@pytest.fixture(scope="session")
def small_cohort():
    return D.synthesize_cohort(3, 4, 4, 2)


@pytest.fixture(scope="session")
def heldout_pipeline(cohort, calibration_config):
    """Full pipeline trained on the 80/10/10 calibration split (about 2 minutes)."""
    split = D.stratified_patient_split(cohort, calibration_config["split"]["fractions"],
                                       calibration_config["split"]["seed"])
    train, val, test = (split.select(cohort, part) for part in D.PARTITIONS)
    train_aug = augment_archive(train)
    config = SequencerConfig.from_dict(calibration_config["sequencer"])
    model, log = discover(train_aug, val, config)
    y_train = np.array([p.label for p in train_aug.patches])
    tree = fit_tree(extract_matrix(model, D.stack_pixels(train_aug)[:, None]), y_train,
                    TreeParams(**calibration_config["tree"]))
    pred, _ = predict_many(tree, extract_matrix(model, D.stack_pixels(test)[:, None]))
    truth = np.array([p.label for p in test.patches])
    return {"split": split, "train": train, "val": val, "test": test, "model": model, "log": log,
            "tree": tree, "heldout_acc": float(np.mean(pred == truth))}


@pytest.fixture(scope="session")
def calibration_cv(tmp_path_factory):
    """The full 10-fold calibration run through the CLI, executed once per session."""
    import time
    work = tmp_path_factory.mktemp("calibration")
    r = run_cli("synth", "--config", CALIBRATION_CONFIG, "--out", work / "cohort.rsa")
    assert r.returncode == 0, r.stderr
    start = time.perf_counter()
    r = run_cli("cv", "--config", CALIBRATION_CONFIG, "--archive", work / "cohort.rsa",
                "--report-out", work / "cv.json")
    minutes = (time.perf_counter() - start) / 60
    assert r.returncode == 0, r.stderr
    return {"dir": work, "report": json.loads((work / "cv.json").read_text()), "minutes": minutes}
