"""K-space motion artefact synthesis.

A motion-corrupted acquisition is modelled as a small number of abrupt
subject movements during the scan: the volume is rigidly transformed once per
movement event, each copy is Fourier-transformed, and k-space is assembled
from contiguous bands along one randomly chosen phase-encode axis, one band
per head pose. Band 0 keeps the untransformed volume and contains the DC
component (unshifted FFT index space), so low frequencies stay anchored to
the reference pose and severity degrades gracefully to the identity.

Severity is a single scalar alpha: each event draws its translation (voxels)
and rotation (degrees) from centred normals with standard deviation 2*alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .augment import rotation_matrix
from .errors import ConfigError, ContractError
from .rng import derive_rng
from .volume_io import Volume

_MOTION_KEY = 0x4D4F54  # stream tag for rng derivation


@dataclass(frozen=True)
class MotionSpec:
    """Severity alpha >= 0, number of movement events, and the seed."""

    alpha: float
    num_events: int = 4
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.num_events < 1:
            raise ConfigError(f"num_events must be >= 1, got {self.num_events}")


def _rigid_copy(img: np.ndarray, degrees, shift) -> np.ndarray:
    """Rotate about the grid centre, then translate by `shift` voxels."""
    R = rotation_matrix(degrees)
    centre = (np.array(img.shape, dtype=np.float64) - 1.0) / 2.0
    matrix = R.T
    offset = centre - matrix @ (centre + np.asarray(shift, dtype=np.float64))
    return ndimage.affine_transform(img, matrix, offset, order=1,
                                    mode="constant", cval=0.0, prefilter=False)


def simulate_motion(volume: Volume, spec: MotionSpec) -> Volume:
    """Return a motion-corrupted copy of a [0, 1]-normalized volume."""
    img = volume.data
    lo, hi = float(img.min()), float(img.max())
    if lo < -1e-5 or hi > 1.0 + 1e-5:
        raise ContractError(
            f"motion simulation expects intensities in [0, 1], got "
            f"[{lo:.4g}, {hi:.4g}]")

    rng = derive_rng(spec.seed, _MOTION_KEY)
    axis = int(rng.integers(0, 3))
    length = img.shape[axis]
    edges = np.round(np.linspace(0, length, spec.num_events + 2)).astype(int)

    k_out = np.empty(img.shape, dtype=np.complex128)
    for event in range(spec.num_events + 1):
        if event == 0:
            copy = img.astype(np.float64)
        else:
            shift = rng.normal(0.0, 2.0 * spec.alpha, 3)
            degrees = rng.normal(0.0, 2.0 * spec.alpha, 3)
            copy = _rigid_copy(img.astype(np.float64), degrees, shift)
        band = [slice(None)] * 3
        band[axis] = slice(edges[event], edges[event + 1])
        band = tuple(band)
        k_out[band] = np.fft.fftn(copy)[band]

    out = np.abs(np.fft.ifftn(k_out))
    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32), volume.affine)
