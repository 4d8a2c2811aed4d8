import csv
import hashlib
import json

import numpy as np
import pytest

from discovery_radiomics.cli import main, read_sequence_csv, sequences_to_csv
from discovery_radiomics.dataset import load_archive
from discovery_radiomics.errors import FormatError
from discovery_radiomics.sequencer import RadiomicSequence

from conftest import run_cli

SYNTH = {"seed": 4, "n_benign_patients": 3, "n_malignant_patients": 3, "lesions_per_patient": 2,
         "patch_size": 18}
# sha256 of the archive written for SYNTH (frozen from the first run)
SYNTH_SHA256 = "cbfa242128bfd72c395ef7db38be28ec19bccfdce21e82c5ab5096138e54552b"

PIPELINE = {
    "synth": {"seed": 2, "n_benign_patients": 10, "n_malignant_patients": 10, "lesions_per_patient": 2},
    "augment": {"malignant_step_deg": 90, "benign_step_deg": 90},
    "sequencer": {"seed": 3, "conv_channels": [4, 6, 8], "epochs": 2, "batch_size": 32},
    "tree": {"max_depth": 4, "min_samples_leaf": 2},
    "split": {"seed": 5, "fractions": [0.8, 0.1, 0.1]},
    "cv": {"seed": 6, "k": 2},
}


def write_config(path, data):
    path.write_text(json.dumps(data))
    return path


def run(capsys, *args):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    lines = out.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- synth --------------------------------------------------------------------

def test_synth_fixed_hash_and_manifest(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"synth": SYNTH})
    code, out, _ = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "a.rsa")
    assert code == 0
    s = summary(out)
    assert s["status"] == "ok" and s["patches"] == 12 and s["patients"] == 6
    assert sha(tmp_path / "a.rsa") == s["sha256"] == SYNTH_SHA256
    rows = list(csv.reader((tmp_path / "a.manifest.csv").open()))
    assert len(rows) - 1 == len(load_archive(tmp_path / "a.rsa"))


def test_synth_missing_output_directory_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"synth": SYNTH})
    code, out, err = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "missing" / "a.rsa")
    assert code == 2 and out == "" and "does not exist" in err


def test_synth_figure(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"synth": SYNTH})
    code, _, _ = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "a.rsa",
                     "--figure", tmp_path / "p.png")
    assert code == 0 and (tmp_path / "p.png").read_bytes()[:4] == b"\x89PNG"


# -- config validation --------------------------------------------------------

@pytest.mark.parametrize("data,needle", [
    ({"synth": dict(SYNTH, colour="red")}, "unknown keys"),
    ({"synth": SYNTH, "extras": {}}, "unknown config sections"),
    ({"synth": {k: v for k, v in SYNTH.items() if k != "seed"}}, "explicit seed"),
    ([1, 2], "JSON object"),
])
def test_bad_configs_exit_2(tmp_path, capsys, data, needle):
    cfg = write_config(tmp_path / "c.json", data)
    code, _, err = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "a.rsa")
    assert code == 2 and needle in err


def test_invalid_json_exits_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{nope")
    code, _, err = run(capsys, "synth", "--config", tmp_path / "c.json", "--out", tmp_path / "a.rsa")
    assert code == 2 and "invalid JSON" in err


def test_missing_synth_section_exits_2(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--out", tmp_path / "a.rsa")
    assert code == 2


def test_corrupt_archive_exits_2(tmp_path, capsys):
    (tmp_path / "bad.rsa").write_bytes(b"NOTANARC" + bytes(40))
    code, _, err = run(capsys, "augment", "--in", tmp_path / "bad.rsa", "--out", tmp_path / "o.rsa")
    assert code == 2 and "offset 0" in err


def test_infeasible_split_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"synth": dict(SYNTH, n_benign_patients=2),
                                             "split": {"seed": 0}})
    assert run(capsys, "synth", "--config", cfg, "--out", tmp_path / "a.rsa")[0] == 0
    code, _, err = run(capsys, "split", "--config", cfg, "--archive", tmp_path / "a.rsa",
                       "--out-dir", tmp_path)
    assert code == 1 and "fewer than" in err


def test_double_augmentation_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"synth": SYNTH})
    run(capsys, "synth", "--config", cfg, "--out", tmp_path / "a.rsa")
    assert run(capsys, "augment", "--in", tmp_path / "a.rsa", "--out", tmp_path / "b.rsa")[0] == 0
    assert run(capsys, "augment", "--in", tmp_path / "b.rsa", "--out", tmp_path / "c.rsa")[0] == 1


def test_version_flag():
    r = run_cli("--version")
    assert r.returncode == 0 and r.stdout.strip()


# -- sequence CSV -------------------------------------------------------------

def test_sequence_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    seqs = [RadiomicSequence(rng.random(5) / 3, f"P{i}", "L0", 0, 1, i % 2) for i in range(4)]
    (tmp_path / "s.csv").write_text(sequences_to_csv(seqs))
    meta, X = read_sequence_csv(tmp_path / "s.csv")
    assert X.tobytes() == np.stack([s.features for s in seqs]).tobytes()
    assert meta[1] == ("P1", "L0", 0, 1, 1)


def test_sequence_csv_errors_carry_line(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("patient_id,lesion_id,rotation_deg,annotator_id,label,f0\nP,L,0,0,1,0.5\nP,L,0,0,1,abc\n")
    with pytest.raises(FormatError) as info:
        read_sequence_csv(p)
    assert info.value.line == 3
    p.write_text("a,b\n")
    with pytest.raises(FormatError):
        read_sequence_csv(p)


# -- full pipeline replay -----------------------------------------------------

def replay(work, capsys):
    """Every subcommand once from a single config; returns artifact hashes."""
    work.mkdir()
    cfg = write_config(work / "run.json", PIPELINE)
    steps = [
        ("synth", "--out", work / "cohort.rsa"),
        ("split", "--archive", work / "cohort.rsa", "--out-dir", work),
        ("augment", "--in", work / "train.rsa", "--out", work / "train_aug.rsa"),
        ("discover", "--train", work / "train_aug.rsa", "--val", work / "val.rsa",
         "--model-out", work / "model.rsm"),
        ("extract", "--model", work / "model.rsm", "--archive", work / "train_aug.rsa",
         "--out", work / "train.csv"),
        ("fit-tree", "--sequences", work / "train.csv", "--tree-out", work / "tree.txt"),
        ("eval", "--model", work / "model.rsm", "--tree", work / "tree.txt",
         "--archive", work / "test.rsa", "--report-out", work / "eval.json"),
        ("cv", "--archive", work / "cohort.rsa", "--report-out", work / "cv.json"),
    ]
    summaries = {}
    for cmd, *args in steps:
        code, out, err = run(capsys, cmd, "--config", cfg, *args)
        assert code == 0, (cmd, err)
        summaries[cmd] = summary(out)
    # no command rewrites its inputs
    assert sha(work / "cohort.rsa") == summaries["synth"]["sha256"]
    assert sha(work / "train_aug.rsa") == summaries["augment"]["sha256"]
    names = ["cohort.rsa", "train.rsa", "val.rsa", "test.rsa", "split.json", "train_aug.rsa",
             "model.rsm", "model.log.csv", "train.csv", "tree.txt", "eval.json", "eval.csv",
             "cv.json", "cv.csv"]
    return {n: sha(work / n) for n in names}, summaries


def test_pipeline_replay_is_byte_identical(tmp_path, capsys):
    first, summaries = replay(tmp_path / "one", capsys)
    second, _ = replay(tmp_path / "two", capsys)
    # the training log records wall time, everything else must match bit for bit
    first.pop("model.log.csv"), second.pop("model.log.csv")
    assert first == second

    one = tmp_path / "one"
    header = (one / "train.csv").read_text().splitlines()[0].split(",")
    assert header == ["patient_id", "lesion_id", "rotation_deg", "annotator_id", "label"] + \
        [f"f{i}" for i in range(8)]
    assert summaries["extract"]["rows"] == len(load_archive(one / "train_aug.rsa"))
    assert (one / "model.log.csv").read_text().startswith("epoch,train_loss,train_acc,val_acc,seconds")
    assert (one / "model.log.png").exists() and (one / "cv.png").exists()
    assert (one / "cv_fold0_training.png").exists()
    report = json.loads((one / "cv.json").read_text())
    assert report["k"] == 2 and len(report["folds"]) == 2
    assert summaries["cv"]["fingerprint"] == report["fingerprint"]
    ev = json.loads((one / "eval.json").read_text())
    assert ev["evaluated_patches"] == ev["archive_patches"]
    assert (one / "eval.csv").read_text().splitlines()[0] == "level,sensitivity,specificity,accuracy"


def test_cv_figures_can_be_skipped(tmp_path, capsys):
    tmp_path.joinpath("w").mkdir()
    w = tmp_path / "w"
    cfg = write_config(w / "run.json", PIPELINE)
    run(capsys, "synth", "--config", cfg, "--out", w / "c.rsa")
    code, out, _ = run(capsys, "cv", "--config", cfg, "--archive", w / "c.rsa", "--report-out",
                       w / "cv.json", "--no-figures", "--jobs", "2")
    assert code == 0 and not (w / "cv.png").exists()
    assert summary(out)["k"] == 2
