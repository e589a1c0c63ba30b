"""Augmentation planning and transform tests."""

import json

import numpy as np
import pytest
from scipy import ndimage

from lodseg.augment import (
    GEOMETRIC_NAMES,
    AugmentationSpec,
    AugmentRow,
    apply_geometric,
    apply_intensity,
    apply_plan,
    augment_sample,
    sample_plan,
)
from lodseg.errors import ConfigError, ContractError
from lodseg.rng import derive_rng
from lodseg.volume_io import SS4, ClassScheme, LabelMap, Volume

BINARY = ClassScheme(("background", "blob"))


# ---------------------------------------------------------------------------
# plan sampling statistics and determinism

def test_plan_row_rates_over_many_draws():
    spec = AugmentationSpec()
    rng = derive_rng(202, 1)
    n = 10_000
    counts = {row.name: 0 for row in spec.rows}
    empty = 0
    for _ in range(n):
        plan = sample_plan(spec, rng)
        if not plan:
            empty += 1
            continue
        names = [name for name, _ in plan]
        assert "inhomogeneity" in names  # always present when augmenting
        for name in names:
            counts[name] += 1
    assert abs(empty / n - 0.1) <= 0.01
    for name in ("translation", "rotation", "grid_distortion"):
        assert abs(counts[name] / n - 0.30) <= 0.02, name
    for name in ("blur", "salt_pepper", "gaussian_noise", "downscale",
                 "gamma", "contrast", "ghosting", "slice_spacing", "field_bias"):
        assert abs(counts[name] / n - 0.10) <= 0.01, name
    assert counts["inhomogeneity"] == n - empty


def test_plan_order_geometric_then_noise_then_artefacts():
    spec = AugmentationSpec(apply_probability=1.0)
    rng = derive_rng(7)
    row_order = [r.name for r in spec.rows]
    for _ in range(50):
        plan = sample_plan(spec, rng)
        names = [name for name, _ in plan]
        assert names == sorted(names, key=row_order.index)
        geo = [i for i, n in enumerate(names) if n in GEOMETRIC_NAMES]
        non_geo = [i for i, n in enumerate(names) if n not in GEOMETRIC_NAMES]
        assert not geo or not non_geo or max(geo) < min(non_geo)


def test_augment_deterministic_under_seed(small_pair):
    v, l = small_pair
    spec = AugmentationSpec(apply_probability=1.0)
    va, la, plan_a = augment_sample(v, l, spec, derive_rng(99, 3))
    vb, lb, plan_b = augment_sample(v, l, spec, derive_rng(99, 3))
    vc, _, plan_c = augment_sample(v, l, spec, derive_rng(99, 4))
    assert plan_a == plan_b
    assert np.array_equal(va.data, vb.data)
    assert np.array_equal(la.data, lb.data)
    assert plan_a != plan_c or not np.array_equal(va.data, vc.data)


def test_plan_is_json_serializable(small_pair):
    v, l = small_pair
    spec = AugmentationSpec(apply_probability=1.0)
    plan = sample_plan(spec, derive_rng(5))
    restored = json.loads(json.dumps(plan))
    restored = [(name, params) for name, params in restored]
    va, _ = apply_plan(v, l, plan, derive_rng(11))
    vb, _ = apply_plan(v, l, restored, derive_rng(11))
    assert np.array_equal(va.data, vb.data)


def test_spec_serialization_roundtrip():
    spec = AugmentationSpec()
    back = AugmentationSpec.from_dict(spec.to_dict())
    assert back == spec
    with pytest.raises(ConfigError, match="unknown augmentation keys"):
        AugmentationSpec.from_dict({"apply_probability": 0.5, "extra": 1})
    with pytest.raises(ConfigError, match="unknown transform"):
        AugmentRow("sharpen", 0.5)
    with pytest.raises(ConfigError, match="probability"):
        AugmentRow("blur", 1.5)


def test_disabled_spec_never_augments(small_pair):
    v, l = small_pair
    spec = AugmentationSpec.disabled()
    for k in range(20):
        assert sample_plan(spec, derive_rng(1, k)) == []


# ---------------------------------------------------------------------------
# geometric transforms

def test_translation_moves_impulse_exactly():
    img = np.zeros((24, 24, 24), dtype=np.float32)
    img[10, 10, 10] = 1.0
    v = Volume(img, np.eye(4))
    out, _ = apply_geometric(v, None, "translation",
                             {"shift": [5.0, 0.0, 0.0], "max_shift_voxels": 20})
    assert out.data[15, 10, 10] == pytest.approx(1.0, abs=1e-6)
    assert out.data[10, 10, 10] == pytest.approx(0.0, abs=1e-6)


def test_translation_zero_is_identity(small_pair):
    v, l = small_pair
    out, lab = apply_geometric(v, l, "translation",
                               {"shift": [0.0, 0.0, 0.0], "max_shift_voxels": 20})
    assert np.allclose(out.data, v.data, atol=1e-6)
    assert np.array_equal(lab.data, l.data)


def test_rotation_zero_is_identity(small_pair):
    v, l = small_pair
    out, lab = apply_geometric(v, l, "rotation",
                               {"degrees": [0.0, 0.0, 0.0], "max_degrees": 10})
    assert np.allclose(out.data, v.data, atol=1e-6)
    assert np.array_equal(lab.data, l.data)


def test_grid_distortion_zero_limit_is_identity(small_pair):
    v, l = small_pair
    out, lab = apply_geometric(v, l, "grid_distortion",
                               {"factors": [[1.0] * 4] * 3, "num_steps": 4,
                                "distort_limit": 0.1})
    assert np.array_equal(out.data, v.data)
    assert np.array_equal(lab.data, l.data)


def test_rotation_90_matches_numpy_rot(small_pair):
    # rotating the grid by 90 degrees about x must agree with np.rot90
    img = np.zeros((17, 17, 17), dtype=np.float32)
    img[5:12, 3:8, 6:14] = 1.0
    v = Volume(img, np.eye(4))
    out, _ = apply_geometric(v, None, "rotation",
                             {"degrees": [90.0, 0.0, 0.0], "max_degrees": 90})
    want = ndimage.rotate(img, 90, axes=(1, 2), reshape=False, order=1)
    # same voxels on/off apart from interpolation dust at the edges
    assert np.mean(np.abs((out.data > 0.5) ^ (want > 0.5))) < 0.01


def test_labels_keep_class_set(small_pair):
    v, l = small_pair
    spec = AugmentationSpec(apply_probability=1.0)
    before = set(np.unique(l.data))
    for k in range(10):
        _, lab, _ = augment_sample(v, l, spec, derive_rng(31, k))
        after = set(np.unique(lab.data))
        assert after <= before | {0}
        assert lab.data.dtype == np.int16


def random_ellipsoid(shape, rng, semi_range=(22, 30)):
    """Brain-scale binary blob: big enough that boundary quantization is small."""
    semi = rng.uniform(*semi_range, 3)
    centre = [(s - 1) / 2 + rng.uniform(-3, 3) for s in shape]
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    d = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, centre, semi))
    return (d <= 1.0).astype(np.int16)


def test_mask_transform_consistency():
    from lodseg.losses_metrics import dice_coefficient
    spec = AugmentationSpec(apply_probability=1.0)
    for k in range(10):
        rng = derive_rng(808, k)
        plan = []
        while not plan:
            plan = [step for step in sample_plan(spec, rng)
                    if step[0] in GEOMETRIC_NAMES]
        mask = random_ellipsoid((80, 80, 80), rng)
        v = Volume(mask.astype(np.float32), np.eye(4))
        l = LabelMap(mask, np.eye(4), BINARY)
        _, lab = apply_plan(v, l, plan, derive_rng(1))
        img_route, _ = apply_plan(v, None, plan, derive_rng(1))
        mask_from_image = LabelMap((img_route.data > 0.5).astype(np.int16),
                                   np.eye(4), BINARY)
        d = dice_coefficient(mask_from_image, lab)
        assert d.per_class["blob"] > 0.98, (k, d)


def test_geometric_param_validation(small_pair):
    v, l = small_pair
    with pytest.raises(ConfigError, match="outside"):
        apply_geometric(v, l, "translation",
                        {"shift": [30.0, 0, 0], "max_shift_voxels": 20})
    with pytest.raises(ConfigError, match="outside"):
        apply_geometric(v, l, "rotation",
                        {"degrees": [15.0, 0, 0], "max_degrees": 10})
    with pytest.raises(ConfigError, match="not a geometric"):
        apply_geometric(v, l, "blur", {"size": 3})


# ---------------------------------------------------------------------------
# intensity transforms

def test_salt_pepper_fractions(small_pair):
    v, _ = small_pair
    out = apply_intensity(v, "salt_pepper",
                          {"amount": 0.01, "salt_fraction": 0.2},
                          derive_rng(77))
    changed = out.data != v.data
    frac = changed.mean()
    assert abs(frac - 0.01) <= 0.002
    salt = (out.data == 1.0) & changed
    pepper = (out.data == 0.0) & changed
    salt_frac = salt.sum() / max(1, changed.sum())
    assert abs(salt_frac - 0.2) <= 0.05
    assert (salt.sum() + pepper.sum()) >= 0.95 * changed.sum()


def test_gaussian_noise_zero_amount_is_identity(small_pair):
    v, _ = small_pair
    out = apply_intensity(v, "gaussian_noise", {"std": 0.0, "amount": 0.2},
                          derive_rng(1))
    assert np.array_equal(out.data, v.data)
    noisy = apply_intensity(v, "gaussian_noise", {"std": 0.1, "amount": 0.2},
                            derive_rng(1))
    assert not np.array_equal(noisy.data, v.data)


def test_contrast_identity_and_direction(small_pair):
    v, _ = small_pair
    same = apply_intensity(v, "contrast",
                           {"alpha": 1.0, "alpha_min": 0.5, "alpha_max": 3.0})
    assert np.allclose(same.data, v.data, atol=1e-6)
    strong = apply_intensity(v, "contrast",
                             {"alpha": 2.0, "alpha_min": 0.5, "alpha_max": 3.0})
    assert strong.data.std() > v.data.std()


def test_gamma_identity_at_one(small_pair):
    v, _ = small_pair
    out = apply_intensity(v, "gamma", {"gamma": 1.0, "clip": 0.025})
    assert np.allclose(out.data, v.data, atol=1e-6)


def test_blur_smooths(small_pair):
    v, _ = small_pair
    out = apply_intensity(v, "blur", {"size": 3, "size_limit": 3})
    grad_in = np.abs(np.diff(v.data, axis=0)).mean()
    grad_out = np.abs(np.diff(out.data, axis=0)).mean()
    assert grad_out < grad_in


def test_downscale_matches_two_step_oracle(small_pair):
    v, _ = small_pair
    scale = 0.5
    out = apply_intensity(v, "downscale",
                          {"scale": scale, "scale_min": 0.25, "scale_max": 0.75})

    def resize_oracle(data, shape):
        maps = [np.linspace(0, s_in - 1, s_out)
                for s_in, s_out in zip(data.shape, shape)]
        coords = np.stack(np.meshgrid(*maps, indexing="ij")).astype(np.float32)
        return ndimage.map_coordinates(data, coords, order=1, mode="nearest",
                                       prefilter=False)

    small_shape = tuple(int(round(L * scale)) for L in v.shape)
    want = resize_oracle(resize_oracle(v.data, small_shape), v.shape)
    assert np.max(np.abs(out.data - np.clip(want, 0, 1))) < 1e-5
    # a genuinely lossy operation on noisy data
    assert not np.allclose(out.data, v.data, atol=1e-3)


def test_ghosting_keeps_mean_brightness(small_pair):
    v, _ = small_pair
    out = apply_intensity(v, "ghosting",
                          {"reps": 3, "axis": 1, "strength": 0.5, "max_reps": 4})
    assert abs(float(out.data.mean()) - float(v.data.mean())) < 0.02
    assert not np.allclose(out.data, v.data, atol=1e-3)


def test_slice_spacing_degrades_fine_detail():
    z = np.zeros((16, 16, 32), dtype=np.float32)
    z[..., ::2] = 1.0  # alternating axial slices
    v = Volume(z, np.eye(4))
    out = apply_intensity(v, "slice_spacing",
                          {"spacing_mm": 4.0, "spacing_min_mm": 2.0,
                           "spacing_max_mm": 5.0})
    assert out.shape == v.shape
    assert out.data.std() < 0.25  # the 1-voxel alternation cannot survive 4mm slices


def test_inhomogeneity_field_is_bounded(small_pair):
    v, _ = small_pair
    strength = 0.3
    out = apply_intensity(v, "inhomogeneity",
                          {"order": 3, "strength": strength}, derive_rng(13))
    sel = (v.data > 0.2) & (out.data < 0.999)
    ratio = out.data[sel] / v.data[sel]
    assert ratio.min() >= np.exp(-strength) - 1e-3
    assert ratio.max() <= np.exp(strength) + 1e-3


def test_field_bias_bounded_and_multiplicative(small_pair):
    v, _ = small_pair
    out = apply_intensity(v, "field_bias",
                          {"num_cycles": 5, "scale_factor": 2.0,
                           "amplitude": 0.2}, derive_rng(17))
    # amplitude 0.2 with 1/2 falloff bounds the field by 1 +- 0.4
    sel = (v.data > 0.2) & (out.data < 0.999)
    ratio = out.data[sel] / v.data[sel]
    assert ratio.min() >= 0.55 and ratio.max() <= 1.45
    assert np.all(out.data[v.data == 0.0] == 0.0)


def test_intensity_outputs_stay_in_range(small_pair):
    v, l = small_pair
    spec = AugmentationSpec(apply_probability=1.0)
    for k in range(8):
        out, lab, _ = augment_sample(v, l, spec, derive_rng(23, k))
        assert out.data.dtype == np.float32
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
        assert np.array_equal(out.affine, v.affine)


def test_intensity_never_touches_labels(small_pair):
    v, l = small_pair
    plan = [("gaussian_noise", {"std": 0.1, "amount": 0.2}),
            ("contrast", {"alpha": 2.0, "alpha_min": 0.5, "alpha_max": 3.0})]
    _, lab = apply_plan(v, l, plan, derive_rng(3))
    assert lab is l


def test_intensity_param_validation(small_pair):
    v, _ = small_pair
    with pytest.raises(ContractError, match="generator"):
        apply_intensity(v, "salt_pepper", {"amount": 0.01, "salt_fraction": 0.2})
    with pytest.raises(ConfigError, match="outside"):
        apply_intensity(v, "gamma", {"gamma": 2.0, "clip": 0.025})
    with pytest.raises(ConfigError, match="not an intensity"):
        apply_intensity(v, "translation", {"shift": [1, 1, 1]})
    with pytest.raises(ConfigError, match="blur size"):
        apply_intensity(v, "blur", {"size": 4, "size_limit": 5})
