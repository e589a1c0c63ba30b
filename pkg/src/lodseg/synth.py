"""Synthetic phantoms for demos and tests.

Nested-sphere label maps with class-dependent intensities give cheap,
fully-determined volumes whose segmentations are known exactly.
"""

from __future__ import annotations

import numpy as np

from .rng import derive_rng
from .volume_io import ClassScheme, LabelMap, Volume


def sphere_mask(shape, radius: float, center=None) -> np.ndarray:
    """Boolean ball of the given radius (voxels) on a grid of `shape`."""
    shape = tuple(int(s) for s in shape)
    if center is None:
        center = [(s - 1) / 2.0 for s in shape]
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return d2 <= radius ** 2


def shell_labels(shape, scheme: ClassScheme, radii=None, affine=None) -> LabelMap:
    """Concentric-shell label map: class k occupies the k-th shell from outside.

    `radii` are outer radii per foreground class, decreasing inward; defaults
    spread the classes evenly inside the volume. Background stays outside the
    largest sphere.
    """
    shape = tuple(int(s) for s in shape)
    n_fg = scheme.num_classes - 1 if scheme.has_background else scheme.num_classes
    if radii is None:
        r_max = min(shape) * 0.45
        radii = [r_max * (1 - i / n_fg) for i in range(n_fg)]
    if len(radii) != n_fg:
        raise ValueError(f"need {n_fg} radii, got {len(radii)}")
    offset = 1 if scheme.has_background else 0
    data = np.zeros(shape, dtype=np.int16)
    for i, r in enumerate(radii):
        data[sphere_mask(shape, r)] = i + offset
    if affine is None:
        affine = np.eye(4)
    return LabelMap(data, affine, scheme)


def image_from_labels(labels: LabelMap, noise_std: float = 0.02, seed: int = 0) -> Volume:
    """Render labels into a [0, 1] intensity image with mild gaussian noise.

    Each class gets a distinct mean intensity, spaced across [0.1, 0.9], so a
    segmenter with any capacity at all can recover the labels.
    """
    C = labels.scheme.num_classes
    levels = np.linspace(0.1, 0.9, C, dtype=np.float32)
    img = levels[labels.data]
    if noise_std > 0:
        rng = derive_rng(seed, 0xA11CE)
        img = img + rng.normal(0.0, noise_std, size=img.shape).astype(np.float32)
    return Volume(np.clip(img, 0.0, 1.0), labels.affine)


def synthetic_pairs(n: int, shape, scheme: ClassScheme, seed: int = 0,
                    radius_jitter: float = 0.1) -> list[tuple[Volume, LabelMap]]:
    """A small dataset of shell phantoms with jittered anatomy and noise.

    Each sample perturbs the default shell radii by up to +-radius_jitter
    (relative) and draws fresh image noise, so samples differ but stay easy.
    """
    n_fg = scheme.num_classes - 1 if scheme.has_background else scheme.num_classes
    r_max = min(int(s) for s in shape) * 0.45
    base = np.array([r_max * (1 - i / n_fg) for i in range(n_fg)])
    pairs = []
    for i in range(n):
        rng = derive_rng(seed, 0x5A17, i)
        radii = base * (1 + radius_jitter * rng.uniform(-1, 1, size=n_fg))
        radii = np.sort(radii)[::-1]
        labels = shell_labels(shape, scheme, radii=list(radii))
        image = image_from_labels(labels, seed=int(rng.integers(2 ** 31)))
        pairs.append((image, labels))
    return pairs


def asymmetric_marker(shape=(24, 30, 36)) -> np.ndarray:
    """Float image with a unique hot voxel near one corner, for orientation tests."""
    data = np.zeros(tuple(int(s) for s in shape), dtype=np.float32)
    data[2, 3, 4] = 1.0
    data[-3, -3, -3] = 0.5
    return data
