import numpy as np
import pytest

from lodseg.volume_io import SS4, LabelMap, Volume
from lodseg.synth import image_from_labels, shell_labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_pair():
    """A 32-cube image/label pair on the identity grid (4-class shells)."""
    labels = shell_labels((32, 32, 32), SS4)
    image = image_from_labels(labels, noise_std=0.02, seed=7)
    return image, labels


def random_affine(rng, spacing_range=(0.5, 2.0)) -> np.ndarray:
    """Random axis-aligned affine: signed permutation, anisotropic spacing, offset."""
    perm = rng.permutation(3)
    signs = rng.choice([-1.0, 1.0], size=3)
    spacing = rng.uniform(*spacing_range, size=3)
    aff = np.zeros((4, 4))
    aff[3, 3] = 1.0
    for j, (i, s) in enumerate(zip(perm, signs)):
        aff[i, j] = s * spacing[j]
    aff[:3, 3] = rng.uniform(-20, 20, size=3).round(1)
    return aff
