"""Training-time augmentation.

A spec is a table of rows, each naming a transform, its inclusion
probability, and its parameter ranges. Sampling a plan first draws a single
gate (most samples get augmented, some pass through untouched), then walks
the rows in order: geometric transforms, then noise, then scanner artefacts.
Every random parameter is resolved at plan time, so a plan is a plain,
JSON-serializable list of (name, params) steps; only dense noise fields
(salt-and-pepper masks, gaussian noise, bias fields) draw from the generator
at apply time, which keeps plans compact while end-to-end replay of the same
generator stream stays bit-identical.

Geometric transforms move voxels and therefore apply to image and labels
together: the image interpolates linearly, labels by nearest neighbour, and
regions pulled in from outside the grid are zero-filled. Intensity and
artefact transforms touch the image only and clamp the result back to [0, 1].

Default rows and their parameters:

    translation      p=1/3  shift up to +-20 voxels per axis
    rotation         p=1/3  up to +-10 degrees per axis
    grid_distortion  p=1/3  4 cells per axis, cell stretch within +-0.1
    blur             p=1/9  box filter, size limit 3
    salt_pepper      p=1/9  1% of voxels, 0.2 salt / 0.8 pepper
    gaussian_noise   p=1/9  std drawn from [0, 0.2]
    downscale        p=1/9  through-resolution drop to 0.25..0.75
    gamma            p=1/9  exponent within +-0.025 of 1
    contrast         p=1/9  slope 0.5..3.0 about the mean
    ghosting         p=1/9  up to 4 phase-encode ghosts
    slice_spacing    p=1/9  2..5 mm axial slice profile
    inhomogeneity    p=1    order-3 multiplicative polynomial field
    field_bias       p=1/9  5 cosine cycles, amplitude 0.2, 1/2 falloff
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError
from .volume_io import LabelMap, Volume

GEOMETRIC_NAMES = frozenset({"translation", "rotation", "grid_distortion"})
INTENSITY_NAMES = frozenset({
    "blur", "salt_pepper", "gaussian_noise", "downscale", "gamma", "contrast",
    "ghosting", "slice_spacing", "inhomogeneity", "field_bias"})
ALL_NAMES = GEOMETRIC_NAMES | INTENSITY_NAMES


@dataclass(frozen=True)
class AugmentRow:
    name: str
    prob: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ALL_NAMES:
            raise ConfigError(f"unknown transform {self.name!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"{self.name}: probability {self.prob} outside [0, 1]")


def _default_rows() -> tuple[AugmentRow, ...]:
    third, ninth = 1.0 / 3.0, 1.0 / 9.0
    return (
        AugmentRow("translation", third, {"max_shift_voxels": 20.0}),
        AugmentRow("rotation", third, {"max_degrees": 10.0}),
        AugmentRow("grid_distortion", third, {"num_steps": 4, "distort_limit": 0.1}),
        AugmentRow("blur", ninth, {"size_limit": 3}),
        AugmentRow("salt_pepper", ninth, {"amount": 0.01, "salt_fraction": 0.2}),
        AugmentRow("gaussian_noise", ninth, {"amount": 0.2}),
        AugmentRow("downscale", ninth, {"scale_min": 0.25, "scale_max": 0.75}),
        AugmentRow("gamma", ninth, {"clip": 0.025}),
        AugmentRow("contrast", ninth, {"alpha_min": 0.5, "alpha_max": 3.0}),
        AugmentRow("ghosting", ninth, {"max_reps": 4, "strength_min": 0.3,
                                       "strength_max": 0.9}),
        AugmentRow("slice_spacing", ninth, {"spacing_min_mm": 2.0,
                                            "spacing_max_mm": 5.0}),
        AugmentRow("inhomogeneity", 1.0, {"order": 3, "strength": 0.3}),
        AugmentRow("field_bias", ninth, {"num_cycles": 5, "scale_factor": 2.0,
                                         "amplitude": 0.2}),
    )


@dataclass(frozen=True)
class AugmentationSpec:
    """Augmentation table: a global gate plus ordered transform rows."""

    apply_probability: float = 0.9
    rows: tuple[AugmentRow, ...] = field(default_factory=_default_rows)

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigError(
                f"apply_probability {self.apply_probability} outside [0, 1]")
        object.__setattr__(self, "rows", tuple(self.rows))

    def to_dict(self) -> dict:
        return {"apply_probability": self.apply_probability,
                "rows": [{"name": r.name, "prob": r.prob, "params": dict(r.params)}
                         for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        extra = set(d) - {"apply_probability", "rows"}
        if extra:
            raise ConfigError(f"unknown augmentation keys {sorted(extra)}")
        rows = tuple(AugmentRow(r["name"], r["prob"], dict(r.get("params", {})))
                     for r in d.get("rows", []))
        return cls(apply_probability=d.get("apply_probability", 0.9),
                   rows=rows or _default_rows())

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(apply_probability=0.0)


# ---------------------------------------------------------------------------
# plan sampling: all scalar randomness is resolved here

def _resolve(row: AugmentRow, rng: np.random.Generator) -> dict[str, Any]:
    p = row.params
    name = row.name
    if name == "translation":
        m = float(p.get("max_shift_voxels", 20.0))
        return {"shift": [float(s) for s in rng.uniform(-m, m, 3)],
                "max_shift_voxels": m}
    if name == "rotation":
        m = float(p.get("max_degrees", 10.0))
        return {"degrees": [float(d) for d in rng.uniform(-m, m, 3)],
                "max_degrees": m}
    if name == "grid_distortion":
        steps = int(p.get("num_steps", 4))
        lim = float(p.get("distort_limit", 0.1))
        factors = rng.uniform(1.0 - lim, 1.0 + lim, (3, steps))
        if lim == 0.0:
            factors = np.ones((3, steps))
        return {"num_steps": steps, "distort_limit": lim,
                "factors": [[float(f) for f in row_] for row_ in factors]}
    if name == "blur":
        limit = int(p.get("size_limit", 3))
        sizes = list(range(3, limit + 1, 2)) or [3]
        return {"size": int(rng.choice(sizes)), "size_limit": limit}
    if name == "salt_pepper":
        return {"amount": float(p.get("amount", 0.01)),
                "salt_fraction": float(p.get("salt_fraction", 0.2))}
    if name == "gaussian_noise":
        amount = float(p.get("amount", 0.2))
        return {"std": float(rng.uniform(0.0, amount)), "amount": amount}
    if name == "downscale":
        lo, hi = float(p.get("scale_min", 0.25)), float(p.get("scale_max", 0.75))
        return {"scale": float(rng.uniform(lo, hi)),
                "scale_min": lo, "scale_max": hi}
    if name == "gamma":
        clip = float(p.get("clip", 0.025))
        return {"gamma": float(rng.uniform(1.0 - clip, 1.0 + clip)), "clip": clip}
    if name == "contrast":
        lo, hi = float(p.get("alpha_min", 0.5)), float(p.get("alpha_max", 3.0))
        return {"alpha": float(rng.uniform(lo, hi)), "alpha_min": lo, "alpha_max": hi}
    if name == "ghosting":
        max_reps = int(p.get("max_reps", 4))
        lo = float(p.get("strength_min", 0.3))
        hi = float(p.get("strength_max", 0.9))
        return {"reps": int(rng.integers(1, max_reps + 1)),
                "axis": int(rng.integers(0, 3)),
                "strength": float(rng.uniform(lo, hi)), "max_reps": max_reps}
    if name == "slice_spacing":
        lo = float(p.get("spacing_min_mm", 2.0))
        hi = float(p.get("spacing_max_mm", 5.0))
        return {"spacing_mm": float(rng.uniform(lo, hi)),
                "spacing_min_mm": lo, "spacing_max_mm": hi}
    if name == "inhomogeneity":
        return {"order": int(p.get("order", 3)),
                "strength": float(p.get("strength", 0.3))}
    if name == "field_bias":
        return {"num_cycles": int(p.get("num_cycles", 5)),
                "scale_factor": float(p.get("scale_factor", 2.0)),
                "amplitude": float(p.get("amplitude", 0.2))}
    raise ConfigError(f"unknown transform {name!r}")


def sample_plan(spec: AugmentationSpec, rng: np.random.Generator) -> list[tuple[str, dict]]:
    """Draw a resolved plan: [] when the sample passes through unaugmented."""
    if rng.random() >= spec.apply_probability:
        return []
    plan = []
    for row in spec.rows:
        take = True if row.prob >= 1.0 else bool(rng.random() < row.prob)
        if take:
            plan.append((row.name, _resolve(row, rng)))
    return plan


# ---------------------------------------------------------------------------
# geometric transforms (image linear, labels nearest, zero fill)
#
# Consecutive geometric steps compose into one coordinate field and resample
# exactly once, so chained transforms do not stack interpolation loss.

def _validate_geometric(name: str, params: dict) -> None:
    if name == "translation":
        shift = np.asarray(params["shift"], dtype=np.float64)
        limit = float(params.get("max_shift_voxels", np.inf))
        if shift.shape != (3,) or np.any(np.abs(shift) > limit + 1e-9):
            raise ConfigError(f"translation shift {shift} outside +-{limit}")
    elif name == "rotation":
        degrees = np.asarray(params["degrees"], dtype=np.float64)
        limit = float(params.get("max_degrees", np.inf))
        if degrees.shape != (3,) or np.any(np.abs(degrees) > limit + 1e-9):
            raise ConfigError(f"rotation {degrees} outside +-{limit} degrees")
    elif name == "grid_distortion":
        factors = np.asarray(params["factors"], dtype=np.float64)
        lim = float(params.get("distort_limit", np.inf))
        if factors.shape[0] != 3 or np.any(np.abs(factors - 1.0) > lim + 1e-9):
            raise ConfigError("grid distortion factors outside declared limit")
    else:
        raise ConfigError(f"{name!r} is not a geometric transform")


def rotation_matrix(degrees) -> np.ndarray:
    """3x3 rotation from per-axis angles in degrees, applied as Rx @ Ry @ Rz."""
    ax, ay, az = np.deg2rad(degrees)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rx @ Ry @ Rz


def _axis_distortion_map(length: int, factors) -> np.ndarray:
    """Monotone output->input index map with per-cell stretch, endpoints fixed."""
    factors = np.asarray(factors, dtype=np.float64)
    steps = factors.size
    edges_out = np.linspace(0.0, length - 1.0, steps + 1)
    widths_in = (length - 1.0) / steps * factors
    pos_in = np.concatenate([[0.0], np.cumsum(widths_in)])
    pos_in *= (length - 1.0) / pos_in[-1]
    return np.interp(np.arange(length, dtype=np.float64), edges_out, pos_in)


def _pull_coords_through(coords: np.ndarray, name: str, params: dict,
                         shape) -> np.ndarray:
    """Map output-space coordinates to the step's input space (one step)."""
    if name == "translation":
        shift = np.asarray(params["shift"], dtype=coords.dtype)
        return coords - shift[:, None, None, None]
    if name == "rotation":
        centre = ((np.array(shape, dtype=np.float64) - 1.0) / 2.0).astype(coords.dtype)
        Minv = rotation_matrix(params["degrees"]).T.astype(coords.dtype)
        rel = coords - centre[:, None, None, None]
        out = np.einsum("ab,bxyz->axyz", Minv, rel)
        return out + centre[:, None, None, None]
    factors = np.asarray(params["factors"], dtype=np.float64)
    if np.all(factors == 1.0):
        return coords
    out = coords.copy()
    for axis, L in enumerate(shape):
        m = _axis_distortion_map(L, factors[axis])
        out[axis] = np.interp(coords[axis], np.arange(L, dtype=np.float64),
                              m).astype(coords.dtype)
    return out


def _apply_geometric_run(img: np.ndarray, lab: np.ndarray | None,
                         steps: list[tuple[str, dict]]):
    """Compose a run of geometric steps and resample image/labels once."""
    for name, params in steps:
        _validate_geometric(name, params)
    grids = np.meshgrid(*[np.arange(L, dtype=np.float32) for L in img.shape],
                        indexing="ij")
    coords = np.stack(grids)
    # plan order transforms the image step by step; pulling coordinates back
    # walks the steps in reverse
    for name, params in reversed(steps):
        coords = _pull_coords_through(coords, name, params, img.shape)
    out = ndimage.map_coordinates(img, coords, order=1, mode="constant",
                                  cval=0.0, prefilter=False)
    out_lab = None
    if lab is not None:
        out_lab = ndimage.map_coordinates(lab, coords, order=0, mode="constant",
                                          cval=0, prefilter=False)
    return out, out_lab


def apply_geometric(volume: Volume, labels: LabelMap | None, name: str,
                    params: dict) -> tuple[Volume, LabelMap | None]:
    """Apply one geometric step to an image and (optionally) its labels."""
    if name not in GEOMETRIC_NAMES:
        raise ConfigError(f"{name!r} is not a geometric transform")
    lab = labels.data if labels is not None else None
    out, out_lab = _apply_geometric_run(volume.data, lab, [(name, params)])
    new_volume = Volume(out, volume.affine)
    new_labels = None
    if labels is not None:
        new_labels = LabelMap(out_lab, labels.affine, labels.scheme)
    return new_volume, new_labels


# ---------------------------------------------------------------------------
# intensity and artefact transforms (image only)

def _resize(data: np.ndarray, shape, order: int) -> np.ndarray:
    """Endpoint-aligned resize via separable coordinate sampling."""
    maps = []
    for L_in, L_out in zip(data.shape, shape):
        if L_out == 1:
            maps.append(np.array([(L_in - 1) / 2.0]))
        else:
            maps.append(np.linspace(0.0, L_in - 1.0, L_out))
    coords = np.stack(np.meshgrid(*maps, indexing="ij")).astype(np.float32)
    return ndimage.map_coordinates(data, coords, order=order, mode="nearest",
                                   prefilter=False)


def _ghosting(img, reps, axis, strength):
    k = np.fft.fftn(img)
    sel = [slice(None)] * 3
    sel[axis] = slice(0, None, reps)
    dc = [slice(None)] * 3
    dc[axis] = slice(0, 1)
    keep = k[tuple(dc)].copy()
    k[tuple(sel)] *= strength
    k[tuple(dc)] = keep  # DC plane untouched: mean brightness survives
    return np.abs(np.fft.ifftn(k))


def _slice_profile(img, spacing):
    L = img.shape[2]
    n = int(np.floor((L - 1) / spacing)) + 1
    pos = np.arange(n) * spacing
    grid = np.meshgrid(np.arange(img.shape[0]), np.arange(img.shape[1]), pos,
                       indexing="ij")
    coords = np.stack(grid).astype(np.float32)
    thick = ndimage.map_coordinates(img, coords, order=1, mode="nearest",
                                    prefilter=False)
    back_pos = np.arange(L) / spacing
    grid2 = np.meshgrid(np.arange(img.shape[0]), np.arange(img.shape[1]),
                        back_pos, indexing="ij")
    coords2 = np.stack(grid2).astype(np.float32)
    return ndimage.map_coordinates(thick, coords2, order=1, mode="nearest",
                                   prefilter=False)


def _polynomial_field(shape, order, strength, rng):
    axes = [np.linspace(-1.0, 1.0, L, dtype=np.float32) for L in shape]
    terms = [(i, j, k) for i in range(order + 1) for j in range(order + 1)
             for k in range(order + 1) if 0 < i + j + k <= order]
    coeffs = rng.uniform(-1.0, 1.0, len(terms))
    P = np.zeros(shape, dtype=np.float32)
    for (i, j, k), c in zip(terms, coeffs):
        P += np.float32(c) * (axes[0][:, None, None] ** i
                              * axes[1][None, :, None] ** j
                              * axes[2][None, None, :] ** k)
    peak = float(np.max(np.abs(P)))
    if peak > 0:
        P *= strength / peak
    return np.exp(P)


def _cosine_bias(shape, num_cycles, scale_factor, amplitude, rng):
    axes = [np.linspace(0.0, 1.0, L, dtype=np.float32) for L in shape]
    field = np.zeros(shape, dtype=np.float32)
    for c in range(1, num_cycles + 1):
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-12)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        proj = (direction[0] * axes[0][:, None, None]
                + direction[1] * axes[1][None, :, None]
                + direction[2] * axes[2][None, None, :])
        field += scale_factor ** -(c - 1) * np.cos(np.pi * c * proj + phase)
    return 1.0 + amplitude * field


def apply_intensity(volume: Volume, name: str, params: dict,
                    rng: np.random.Generator | None = None) -> Volume:
    """Apply one intensity/artefact step; the result is clamped to [0, 1]."""
    if name not in INTENSITY_NAMES:
        raise ConfigError(f"{name!r} is not an intensity transform")
    img = volume.data.astype(np.float32)
    needs_rng = name in ("salt_pepper", "gaussian_noise", "inhomogeneity",
                         "field_bias")
    if needs_rng and rng is None:
        raise ContractError(f"{name} needs a random generator")

    if name == "blur":
        size = int(params["size"])
        if size < 1 or size % 2 == 0 or size > int(params.get("size_limit", size)):
            raise ConfigError(f"blur size {size} outside declared limit")
        out = ndimage.uniform_filter(img, size=size, mode="nearest")
    elif name == "salt_pepper":
        amount = float(params["amount"])
        frac = float(params["salt_fraction"])
        if not 0.0 <= amount <= 1.0 or not 0.0 <= frac <= 1.0:
            raise ConfigError("salt_pepper fractions outside [0, 1]")
        out = img.copy()
        corrupt = rng.random(img.shape) < amount
        salt = rng.random(img.shape) < frac
        out[corrupt & salt] = 1.0
        out[corrupt & ~salt] = 0.0
    elif name == "gaussian_noise":
        std = float(params["std"])
        if std < 0 or std > float(params.get("amount", np.inf)) + 1e-9:
            raise ConfigError(f"gaussian std {std} outside declared amount")
        out = img if std == 0.0 else img + rng.standard_normal(img.shape).astype(np.float32) * np.float32(std)
    elif name == "downscale":
        scale = float(params["scale"])
        lo = float(params.get("scale_min", 0.0))
        hi = float(params.get("scale_max", 1.0))
        if not lo - 1e-9 <= scale <= hi + 1e-9 or scale <= 0 or scale > 1:
            raise ConfigError(f"downscale {scale} outside [{lo}, {hi}]")
        small_shape = tuple(max(1, int(round(L * scale))) for L in img.shape)
        out = _resize(_resize(img, small_shape, order=1), img.shape, order=1)
    elif name == "gamma":
        gamma = float(params["gamma"])
        clip = float(params.get("clip", np.inf))
        if abs(gamma - 1.0) > clip + 1e-9 or gamma <= 0:
            raise ConfigError(f"gamma {gamma} outside declared clip {clip}")
        out = np.power(np.clip(img, 0.0, 1.0), np.float32(gamma))
    elif name == "contrast":
        alpha = float(params["alpha"])
        lo = float(params.get("alpha_min", 0.0))
        hi = float(params.get("alpha_max", np.inf))
        if not lo - 1e-9 <= alpha <= hi + 1e-9:
            raise ConfigError(f"contrast {alpha} outside [{lo}, {hi}]")
        mean = np.float32(img.mean())
        out = mean + np.float32(alpha) * (img - mean)
    elif name == "ghosting":
        reps = int(params["reps"])
        axis = int(params["axis"])
        if not 1 <= reps <= int(params.get("max_reps", reps)) or axis not in (0, 1, 2):
            raise ConfigError("ghosting params outside declared ranges")
        out = _ghosting(img, reps, axis, float(params["strength"]))
    elif name == "slice_spacing":
        spacing = float(params["spacing_mm"])
        if spacing < 1.0:
            raise ConfigError(f"slice spacing {spacing} below 1 voxel")
        out = _slice_profile(img, spacing)
    elif name == "inhomogeneity":
        order = int(params["order"])
        strength = float(params["strength"])
        if order < 1 or strength < 0:
            raise ConfigError("inhomogeneity params outside declared ranges")
        out = img * _polynomial_field(img.shape, order, strength, rng)
    else:  # field_bias
        cycles = int(params["num_cycles"])
        scale = float(params["scale_factor"])
        amp = float(params["amplitude"])
        if cycles < 1 or scale <= 0 or amp < 0:
            raise ConfigError("field_bias params outside declared ranges")
        out = img * _cosine_bias(img.shape, cycles, scale, amp, rng)

    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32), volume.affine)


# ---------------------------------------------------------------------------
# whole-plan application

def apply_plan(volume: Volume, labels: LabelMap | None,
               plan: list[tuple[str, dict]],
               rng: np.random.Generator | None = None) -> tuple[Volume, LabelMap | None]:
    """Run a resolved plan in order; geometric steps move labels along.

    Consecutive geometric steps collapse into a single resampling pass.
    """
    i = 0
    while i < len(plan):
        name, params = plan[i]
        if name in GEOMETRIC_NAMES:
            j = i
            while j < len(plan) and plan[j][0] in GEOMETRIC_NAMES:
                j += 1
            run = [(n, p) for n, p in plan[i:j]]
            lab = labels.data if labels is not None else None
            out, out_lab = _apply_geometric_run(volume.data, lab, run)
            volume = Volume(out, volume.affine)
            if labels is not None:
                labels = LabelMap(out_lab, labels.affine, labels.scheme)
            i = j
        else:
            volume = apply_intensity(volume, name, params, rng)
            i += 1
    return volume, labels


def augment_sample(volume: Volume, labels: LabelMap | None,
                   spec: AugmentationSpec, rng: np.random.Generator
                   ) -> tuple[Volume, LabelMap | None, list[tuple[str, dict]]]:
    """Sample a plan from the spec and apply it; returns the plan too."""
    plan = sample_plan(spec, rng)
    volume, labels = apply_plan(volume, labels, plan, rng)
    return volume, labels, plan
