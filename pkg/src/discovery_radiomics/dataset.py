"""Lesion patch archives, a synthetic cohort generator and patient-level
dataset partitioning.

Archive binary layout (little-endian)::

    "RSEQARC1"  u32 version=1  u32 patch_size  u64 count
    count x {u16 len, patient_id utf-8; u16 len, lesion_id utf-8;
             u16 rotation_deg; u8 annotator_id; u8 label;
             patch_size**2 float64 pixels, row-major}
    u64 count (repeated, guards against truncation)

A CSV manifest (``patient_id,lesion_id,rotation_deg,annotator_id,label``)
is written next to every saved archive.
"""

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .errors import (BadMagicError, FormatError, InvariantViolation, SplitError,
                     TruncationError, VersionError)
from .io_utils import atomic_write_bytes, atomic_write_text

BENIGN, MALIGNANT = 0, 1
ARCHIVE_MAGIC = b"RSEQARC1"
ARCHIVE_VERSION = 1
DEFAULT_PATCH_SIZE = 18
PARTITIONS = ("train", "val", "test")
MANIFEST_HEADER = ("patient_id", "lesion_id", "rotation_deg", "annotator_id", "label")

_HEAD = struct.Struct("<8sIIQ")
_META = struct.Struct("<HBB")


@dataclass(eq=False)
class LesionPatch:
    pixels: np.ndarray
    label: int
    patient_id: str
    lesion_id: str
    rotation_deg: int = 0
    annotator_id: int = 0

    @property
    def key(self):
        return (self.patient_id, self.lesion_id, self.rotation_deg, self.annotator_id)

    def __eq__(self, other):
        if not isinstance(other, LesionPatch):
            return NotImplemented
        return (self.key == other.key and self.label == other.label
                and self.pixels.shape == other.pixels.shape
                and self.pixels.tobytes() == other.pixels.tobytes())

    def problem(self, patch_size):
        """Describe the first invariant this patch violates, or None."""
        px = self.pixels
        if px.shape != (patch_size, patch_size):
            return f"pixels have shape {px.shape}, archive patch size is {patch_size}"
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            return "pixel values must lie in [0, 1]"
        if self.label not in (BENIGN, MALIGNANT):
            return f"label {self.label} is not 0 (benign) or 1 (malignant)"
        if not 0 <= self.rotation_deg < 360:
            return f"rotation_deg {self.rotation_deg} outside [0, 360)"
        if not 0 <= self.annotator_id <= 255:
            return f"annotator_id {self.annotator_id} outside [0, 255]"
        for name in ("patient_id", "lesion_id"):
            if len(getattr(self, name).encode("utf-8")) > 0xFFFF:
                return f"{name} longer than 65535 bytes"
        return None


@dataclass
class PatchArchive:
    patch_size: int
    patches: List[LesionPatch]
    provenance: str = field(default="", compare=False)

    def __len__(self):
        return len(self.patches)

    def validate(self):
        if not self.patches:
            raise ValueError("archive is empty")
        seen = set()
        for i, p in enumerate(self.patches):
            msg = p.problem(self.patch_size)
            if msg is None and p.key in seen:
                msg = f"duplicate patch key {p.key}"
            if msg is not None:
                raise ValueError(f"patch {i}: {msg}")
            seen.add(p.key)

    def patient_ids(self):
        return sorted({p.patient_id for p in self.patches})

    def select(self, keep):
        """Sub-archive of patches for which ``keep(patch)`` is true, order kept."""
        return PatchArchive(self.patch_size, [p for p in self.patches if keep(p)], self.provenance)


def stack_pixels(archive):
    if not archive.patches:
        return np.zeros((0, archive.patch_size, archive.patch_size))
    return np.stack([p.pixels for p in archive.patches]).astype(np.float64, copy=False)


# -- binary I/O -------------------------------------------------------------

def archive_to_bytes(archive):
    archive.validate()
    buf = io.BytesIO()
    p = archive.patch_size
    buf.write(_HEAD.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, p, len(archive.patches)))
    for patch in archive.patches:
        for text in (patch.patient_id, patch.lesion_id):
            raw = text.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
        buf.write(_META.pack(patch.rotation_deg, patch.annotator_id, patch.label))
        buf.write(np.ascontiguousarray(patch.pixels, dtype="<f8").tobytes())
    buf.write(struct.pack("<Q", len(archive.patches)))
    return buf.getvalue()


def manifest_text(archive):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for p in archive.patches:
        writer.writerow([p.patient_id, p.lesion_id, p.rotation_deg, p.annotator_id, p.label])
    return out.getvalue()


def manifest_path(path):
    return Path(path).with_suffix(".manifest.csv")


def save_archive(archive, path):
    """Write the archive and its CSV manifest, each atomically."""
    data = archive_to_bytes(archive)
    atomic_write_bytes(path, data)
    atomic_write_text(manifest_path(path), manifest_text(archive))


def archive_from_bytes(data, provenance=""):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise TruncationError(f"file ends inside {what}", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if len(data) < len(ARCHIVE_MAGIC) and ARCHIVE_MAGIC.startswith(data):
        raise TruncationError("file ends inside magic", offset=len(data))
    if data[:8] != ARCHIVE_MAGIC:
        raise BadMagicError("not a patch archive (bad magic)", offset=0)
    _, version, p, count = _HEAD.unpack(take(_HEAD.size, "header"))
    if version != ARCHIVE_VERSION:
        raise VersionError(f"unsupported archive version {version}", offset=8)
    if p < 1:
        raise InvariantViolation(f"patch size {p} must be positive", offset=12)
    n_pix = p * p
    patches = []
    seen = set()
    for i in range(count):
        start = pos
        ids = []
        for name in ("patient_id", "lesion_id"):
            (n,) = struct.unpack("<H", take(2, f"patch {i} {name} length"))
            try:
                ids.append(take(n, f"patch {i} {name}").decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise FormatError(f"patch {i} {name} is not UTF-8", offset=pos - n) from exc
        rotation, annotator, label = _META.unpack(take(_META.size, f"patch {i} metadata"))
        pixels = np.frombuffer(take(8 * n_pix, f"patch {i} pixels"), dtype="<f8")
        patch = LesionPatch(pixels.astype(np.float64).reshape(p, p), label, ids[0], ids[1],
                            rotation, annotator)
        msg = patch.problem(p)
        if msg is None and patch.key in seen:
            msg = f"duplicate patch key {patch.key}"
        if msg is not None:
            raise InvariantViolation(f"patch {i}: {msg}", offset=start)
        seen.add(patch.key)
        patches.append(patch)
    (trailer,) = struct.unpack("<Q", take(8, "count trailer"))
    if trailer != count:
        raise TruncationError(f"trailer count {trailer} != header count {count}", offset=pos - 8)
    if pos != len(data):
        raise FormatError("unexpected bytes after trailer", offset=pos)
    if count == 0:
        raise InvariantViolation("archive holds no patches", offset=16)
    return PatchArchive(p, patches, provenance)


def load_archive(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return archive_from_bytes(data, provenance=f"loaded from {Path(path).name}")


# -- synthetic cohort -------------------------------------------------------

# Generator constants. Class mean intensities are equalised per patch so
# that brightness alone does not reveal the label.
_BACKGROUND = 0.15
_TARGET_MEAN = 0.26
_TARGET_JITTER = 0.03
_NOISE_STD = {BENIGN: 0.02, MALIGNANT: 0.06}


def _lesion(rng, label, size):
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = c + rng.uniform(-1.0, 1.0, 2)
    dy, dx = yy - cy, xx - cx
    # elliptical gaussian core
    theta = rng.uniform(0, np.pi)
    sigma = rng.uniform(1.8, 3.6)
    aspect = rng.uniform(0.8, 1.25)
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    shape = np.exp(-0.5 * ((u / (sigma * aspect)) ** 2 + (v * aspect / sigma) ** 2))
    if label == MALIGNANT:
        r = np.hypot(dx, dy)
        for _ in range(rng.integers(4, 9)):
            phi = rng.uniform(0, 2 * np.pi)
            along = dx * np.cos(phi) + dy * np.sin(phi)
            across = -dx * np.sin(phi) + dy * np.cos(phi)
            length = sigma + rng.uniform(2.0, 5.0)
            width = rng.uniform(0.5, 0.8)
            taper = np.clip(1.0 - along / length, 0.0, 1.0) * (along > 0)
            shape = shape + rng.uniform(0.4, 0.7) * taper * np.exp(-0.5 * (across / width) ** 2) * (r > 0.5 * sigma)
    target = _TARGET_MEAN + rng.uniform(-_TARGET_JITTER, _TARGET_JITTER)
    scale = (target - _BACKGROUND) / shape.mean()
    img = _BACKGROUND + scale * shape
    img = img + rng.normal(0.0, _NOISE_STD[label], img.shape)
    return np.clip(img, 0.0, 1.0)


def synthesize_cohort(seed, n_benign_patients, n_malignant_patients, lesions_per_patient,
                      patch_size=DEFAULT_PATCH_SIZE):
    """Deterministic stand-in cohort of benign (smooth) and malignant
    (spiculated, heavily textured) lesion patches.

    Patients are numbered benign first; every lesion of a patient shares the
    patient's label.
    """
    for name, value in (("n_benign_patients", n_benign_patients),
                        ("n_malignant_patients", n_malignant_patients),
                        ("lesions_per_patient", lesions_per_patient)):
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")
    if patch_size < 10:
        raise ValueError(f"patch_size must be at least 10, got {patch_size}")
    labels = [BENIGN] * n_benign_patients + [MALIGNANT] * n_malignant_patients
    patches = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        pid = f"P{i:04d}"
        for j in range(lesions_per_patient):
            patches.append(LesionPatch(_lesion(rng, label, patch_size), label, pid, f"L{j:02d}"))
    provenance = (f"synthetic cohort seed={seed} benign={n_benign_patients} "
                  f"malignant={n_malignant_patients} lesions={lesions_per_patient} size={patch_size}")
    return PatchArchive(patch_size, patches, provenance)


# -- partitioning -----------------------------------------------------------

UNITS = ("patient", "lesion")


@dataclass
class SplitSpec:
    """Assignment of grouping units (patients by default) to folds or partitions."""
    assignment: Dict[Union[str, Tuple[str, str]], Union[int, str]]
    seed: int
    unit: str = "patient"

    def unit_of(self, patch):
        return group_key(patch, self.unit)

    def members(self, part):
        return sorted(g for g, a in self.assignment.items() if a == part)

    def select(self, archive, parts):
        """Patches whose unit is assigned to any of ``parts``."""
        if isinstance(parts, (str, int)):
            parts = (parts,)
        parts = set(parts)
        return archive.select(lambda p: self.assignment[group_key(p, self.unit)] in parts)


def group_key(patch, unit="patient"):
    if unit == "patient":
        return patch.patient_id
    if unit == "lesion":
        return (patch.patient_id, patch.lesion_id)
    raise ValueError(f"unknown split unit {unit!r}; expected one of {UNITS}")


def _groups_by_class(archive, unit):
    """Sorted grouping units per class; a unit is malignant if any patch is."""
    label = {}
    for p in archive.patches:
        g = group_key(p, unit)
        label[g] = max(label.get(g, BENIGN), p.label)
    return {c: sorted(g for g, lab in label.items() if lab == c) for c in (BENIGN, MALIGNANT)}


def _largest_remainder(n, fractions):
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    left = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def stratified_patient_split(archive, fractions, seed, unit="patient"):
    """Assign whole patients to train/val/test, stratified by class."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or max(fractions) <= 0:
        raise ValueError(f"fractions must be three non-negative numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    needed = sum(f > 0 for f in fractions)
    assignment = {}
    for cls, groups in _groups_by_class(archive, unit).items():
        if not groups:
            continue
        if len(groups) < needed:
            raise SplitError(f"class {cls} has {len(groups)} {unit}s, fewer than the "
                             f"{needed} non-empty partitions requested")
        order = np.random.default_rng([seed, cls]).permutation(len(groups))
        counts = _largest_remainder(len(groups), fractions)
        pos = 0
        for part, count in zip(PARTITIONS, counts):
            for idx in order[pos:pos + count]:
                assignment[groups[idx]] = part
            pos += count
    return SplitSpec(assignment, seed, unit)


def kfold_patient_partition(archive, k, seed, unit="patient"):
    """Assign whole patients to ``k`` folds, stratified by class."""
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    assignment = {}
    offset = 0
    for cls, groups in _groups_by_class(archive, unit).items():
        if not groups:
            continue
        if len(groups) < k:
            raise SplitError(f"class {cls} has {len(groups)} {unit}s, fewer than k={k} folds")
        order = np.random.default_rng([seed, cls]).permutation(len(groups))
        for pos, idx in enumerate(order):
            assignment[groups[idx]] = (offset + pos) % k
        # continue the round-robin so class remainders land on different folds
        offset = (offset + len(groups)) % k
    return SplitSpec(assignment, seed, unit)
