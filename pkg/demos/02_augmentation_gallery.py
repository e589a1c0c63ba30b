"""
Augmentation gallery
====================

Sample stochastic augmentation plans for a shell phantom and render the
centre slice of each named transform next to the original, plus one fully
random plan as it would be drawn during training.
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from lodseg import (AugmentationSpec, apply_plan, get_scheme, sample_plan)
from lodseg.rng import derive_rng
from lodseg.synth import image_from_labels, shell_labels

out_dir = Path(__file__).parent / "output" / "augment"
out_dir.mkdir(parents=True, exist_ok=True)

scheme = get_scheme("ss4")
labels = shell_labels((64, 64, 64), scheme)
volume = image_from_labels(labels, seed=5)
mid = volume.shape[2] // 2

# One panel per transform row: draw plans until the row of interest
# appears, then run just that step.
spec = AugmentationSpec()
names = [row.name for row in spec.rows]
fig, axes = plt.subplots(2, 7, figsize=(21, 6))
axes = axes.ravel()
axes[0].imshow(volume.data[:, :, mid].T, cmap="gray", origin="lower")
axes[0].set_title("original")
for ax, name in zip(axes[1:], names):
    rng = derive_rng(hash(name) % 2 ** 31)
    step = None
    while step is None:
        plan = sample_plan(spec, rng)
        step = next((s for s in plan if s[0] == name), None)
    moved, _ = apply_plan(volume, None, [step], derive_rng(7))
    ax.imshow(moved.data[:, :, mid].T, cmap="gray", origin="lower")
    ax.set_title(name)
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out_dir / "per_transform.png", dpi=110)
plt.close(fig)

# A training-style draw: the whole table at its default probabilities.
# Geometric steps move the labels along with the image.
plan = sample_plan(spec, derive_rng(42))
print("sampled plan:")
for name, params in plan:
    shown = {k: v for k, v in params.items() if not isinstance(v, list)}
    print(f"  {name}: {shown}")
moved_vol, moved_lab = apply_plan(volume, labels, plan, derive_rng(43))
fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
axes[0].imshow(volume.data[:, :, mid].T, cmap="gray", origin="lower")
axes[0].set_title("image")
axes[1].imshow(moved_vol.data[:, :, mid].T, cmap="gray", origin="lower")
axes[1].set_title("augmented image")
axes[2].imshow(moved_lab.data[:, :, mid].T, origin="lower")
axes[2].set_title("labels follow")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out_dir / "full_plan.png", dpi=110)
print(f"wrote {out_dir}")
