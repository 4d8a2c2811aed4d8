"""Rotation augmentation with a per-class angular step.

Malignant lesions are rotated in 45 degree steps (8 variants) and benign ones
in 10 degree steps (36 variants), which roughly balances the two classes.
The 0 degree variant is the original patch itself.
"""

from dataclasses import dataclass

import numpy as np

from .dataset import MALIGNANT, LesionPatch, PatchArchive

# exact (cos, sin) for right angles so those rotations are pure permutations
_RIGHT_ANGLES = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}


@dataclass(frozen=True)
class AugmentPolicy:
    malignant_step_deg: int = 45
    benign_step_deg: int = 10
    interpolation: str = "bilinear"
    fill_value: float = 0.0

    def __post_init__(self):
        for name in ("malignant_step_deg", "benign_step_deg"):
            step = getattr(self, name)
            if int(step) != step or step <= 0 or 360 % step:
                raise ValueError(f"{name} must be a positive divisor of 360, got {step}")
        if self.interpolation != "bilinear":
            raise ValueError(f"unsupported interpolation {self.interpolation!r}")
        if not 0.0 <= self.fill_value <= 1.0:
            raise ValueError("fill_value must lie in [0, 1]")

    def angles(self, label):
        step = self.malignant_step_deg if label == MALIGNANT else self.benign_step_deg
        return list(range(0, 360, step))


def rotate_patch(pixels, degrees, fill_value=0.0):
    """Rotate a square patch about its centre with bilinear resampling.

    Output pixel (y, x) samples the source at the point obtained by rotating
    (x, y) about the centre by ``degrees``; at 90 degrees this gives
    ``out[y, x] == in[x, P-1-y]``. Samples falling outside the patch take
    ``fill_value``.
    """
    degrees = int(degrees) % 360
    pixels = np.asarray(pixels, dtype=np.float64)
    if degrees == 0:
        return pixels.copy()
    size = pixels.shape[0]
    c = (size - 1) / 2.0
    if degrees in _RIGHT_ANGLES:
        cos, sin = _RIGHT_ANGLES[degrees]
    else:
        rad = np.deg2rad(degrees)
        cos, sin = np.cos(rad), np.sin(rad)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u, v = xx - c, yy - c
    sx = c + cos * u - sin * v
    sy = c + sin * u + cos * v
    if degrees in _RIGHT_ANGLES:
        # centre offsets are half-integers or integers, so snap away float noise
        sx, sy = np.rint(sx), np.rint(sy)

    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    padded = np.pad(pixels, 1, constant_values=fill_value)

    def at(yi, xi):
        # one-pixel pad covers neighbours just outside; anything further is fill
        inside = (yi >= -1) & (yi <= size) & (xi >= -1) & (xi <= size)
        vals = padded[np.clip(yi, -1, size) + 1, np.clip(xi, -1, size) + 1]
        return np.where(inside, vals, fill_value)

    out = ((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
           + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)))
    return np.clip(out, 0.0, 1.0)


def augment_archive(archive, policy=AugmentPolicy()):
    """Expand every original patch into its class's rotation variants.

    Output order follows the input, each source patch followed by its
    variants in ascending angle (the 0 degree variant is the source).
    """
    out = []
    for i, patch in enumerate(archive.patches):
        if patch.rotation_deg != 0:
            raise ValueError(f"patch {i} already has rotation {patch.rotation_deg}; "
                             "augment only unrotated archives")
        for angle in policy.angles(patch.label):
            if angle == 0:
                out.append(patch)
                continue
            out.append(LesionPatch(rotate_patch(patch.pixels, angle, policy.fill_value), patch.label,
                                   patch.patient_id, patch.lesion_id, angle, patch.annotator_id))
    provenance = (archive.provenance + f"; rotated malignant/{policy.malignant_step_deg} "
                  f"benign/{policy.benign_step_deg}").lstrip("; ")
    return PatchArchive(archive.patch_size, out, provenance)
