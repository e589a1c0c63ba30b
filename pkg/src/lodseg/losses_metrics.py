"""Dice overlap metric and soft Dice training loss.

The metric operates on hard label maps and follows the usual conventions for
empty classes: a class absent from both maps scores 1.0, a class present in
exactly one scores 0.0. The loss operates on soft per-channel probabilities
(channels last) and is differentiable through torch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, NumericsError
from .volume_io import ClassScheme, LabelMap

EPS = 1e-6


@dataclass(frozen=True)
class DiceResult:
    """Per-class Dice scores keyed by class name, plus their arithmetic mean."""

    per_class: dict[str, float]
    mean: float


def dice_coefficient(pred: LabelMap, gt: LabelMap, scheme: ClassScheme | None = None,
                     include_background: bool = False) -> DiceResult:
    """Hard Dice per class between two label maps on the same grid.

    By default the background class (index 0 of a scheme that has one) is
    left out of both the report and the mean; legacy schemes without a
    background channel score every class.
    """
    if scheme is None:
        scheme = pred.scheme
    if pred.scheme != scheme or gt.scheme != scheme:
        raise ContractError(
            f"scheme mismatch: pred={pred.scheme.names} gt={gt.scheme.names} "
            f"expected={scheme.names}")
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {gt.shape}")

    C = scheme.num_classes
    joint = np.bincount(
        (pred.data.ravel().astype(np.int64) * C + gt.data.ravel()),
        minlength=C * C).reshape(C, C)
    pred_sizes = joint.sum(axis=1)
    gt_sizes = joint.sum(axis=0)
    inter = np.diag(joint)

    start = 1 if (scheme.has_background and not include_background) else 0
    per_class = {}
    for c in range(start, C):
        p, g, i = int(pred_sizes[c]), int(gt_sizes[c]), int(inter[c])
        if p == 0 and g == 0:
            d = 1.0
        elif p == 0 or g == 0:
            d = 0.0
        else:
            d = 2.0 * i / (p + g)
        per_class[scheme.names[c]] = d
    return DiceResult(per_class, float(np.mean(list(per_class.values()))))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def dice_loss(probs, gt_onehot, include_background: bool = True,
              eps: float = EPS) -> torch.Tensor:
    """Soft Dice loss: one minus the mean per-channel overlap.

    Both inputs are (..., C) with the channel axis last; all leading axes are
    pooled into the overlap sums. With probabilities and indicators in [0, 1]
    the loss lands in [0, 1]; smoothing `eps` guards empty channels on both
    sides of the ratio, so an all-empty channel contributes a perfect score.
    Returns a 0-dim tensor that backpropagates to `probs`.
    """
    p = _as_tensor(probs)
    g = _as_tensor(gt_onehot)
    if p.shape != g.shape:
        raise ContractError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    if p.ndim < 2:
        raise ContractError("expected at least (N, C) shaped inputs")
    if torch.isnan(p).any() or torch.isnan(g).any():
        raise NumericsError("NaN in dice loss inputs")
    g = g.to(p.dtype)
    axes = tuple(range(p.ndim - 1))
    num = 2.0 * (p * g).sum(dim=axes) + eps
    den = p.sum(dim=axes) + g.sum(dim=axes) + eps
    per_channel = num / den
    if not include_background:
        if per_channel.shape[0] < 2:
            raise ContractError("cannot drop background from a single-channel loss")
        per_channel = per_channel[1:]
    return 1.0 - per_channel.mean()
