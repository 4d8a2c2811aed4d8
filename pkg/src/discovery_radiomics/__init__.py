"""Discovery radiomics: learn a convolutional feature sequencer from labelled
lesion patches, classify its 500-feature sequences with a decision tree, and
evaluate the pipeline by patient-level cross-validation."""

__version__ = "0.1.0"

from .augment import AugmentPolicy, augment_archive, rotate_patch
from .classifier import DecisionTree, TreeParams, fit_tree, load_tree, predict_tree, save_tree
from .dataset import (LesionPatch, PatchArchive, SplitSpec, kfold_patient_partition, load_archive,
                      save_archive, stratified_patient_split, synthesize_cohort)
from .evaluation import CvReport, MetricsReport, aggregate_patient, compute_metrics, run_cv
from .sequencer import (RadiomicSequence, SequencerConfig, SequencerModel, discover,
                        extract_sequences, forward, init_model, load_model, save_model)

__all__ = [
    "AugmentPolicy", "augment_archive", "rotate_patch",
    "DecisionTree", "TreeParams", "fit_tree", "load_tree", "predict_tree", "save_tree",
    "LesionPatch", "PatchArchive", "SplitSpec", "kfold_patient_partition", "load_archive",
    "save_archive", "stratified_patient_split", "synthesize_cohort",
    "CvReport", "MetricsReport", "aggregate_patient", "compute_metrics", "run_cv",
    "RadiomicSequence", "SequencerConfig", "SequencerModel", "discover", "extract_sequences",
    "forward", "init_model", "load_model", "save_model",
]
