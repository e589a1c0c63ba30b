"""Container, NIfTI I/O, conformance, and intensity tests."""

import struct
import subprocess

import numpy as np
import pytest

from lodseg.errors import (
    ConfigError,
    ContractError,
    FormatError,
    GeometryError,
    SanitationError,
)
from lodseg.synth import asymmetric_marker
from lodseg.volume_io import (
    RAW7,
    RAW8,
    SS4,
    ClassScheme,
    LabelMap,
    Volume,
    _to_ras,
    check_paired,
    conform,
    get_scheme,
    load_labels,
    load_volume,
    normalize_intensity,
    one_hot,
    save_labels,
    save_volume,
)

from conftest import random_affine


# ---------------------------------------------------------------------------
# hand-packed NIfTI bytes: an oracle independent of the package's writer

def pack_nifti(data, srow=None, quat=None, pixdim=(1, 1, 1, 1, 0, 0, 0, 0),
               dim=None, dim0=None, datatype=16, scl=(0.0, 0.0),
               magic=b"n+1\x00", vox_offset=352.0):
    """Assemble NIfTI-1 bytes field by field at the published byte offsets."""
    h = bytearray(348)
    struct.pack_into("<i", h, 0, 348)
    if dim is None:
        dim = data.shape
    nd = dim0 if dim0 is not None else len(dim)
    dims = list(dim) + [1] * (7 - len(dim))
    struct.pack_into("<8h", h, 40, nd, *dims)
    struct.pack_into("<h", h, 70, datatype)
    struct.pack_into("<h", h, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", h, 76, *pixdim)
    struct.pack_into("<f", h, 108, vox_offset)
    struct.pack_into("<2f", h, 112, *scl)
    if srow is not None:
        struct.pack_into("<h", h, 254, 1)
        struct.pack_into("<4f", h, 280, *srow[0])
        struct.pack_into("<4f", h, 296, *srow[1])
        struct.pack_into("<4f", h, 312, *srow[2])
    if quat is not None:
        struct.pack_into("<h", h, 252, 1)
        struct.pack_into("<6f", h, 256, *quat)
    h[344:348] = magic
    return bytes(h) + b"\x00" * 4 + data.tobytes(order="F")


def test_reader_against_handpacked_bytes(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    srow = [(1.0, 0, 0, -5.0), (0, 2.0, 0, 7.0), (0, 0, 3.0, 0.5)]
    path = tmp_path / "hand.nii"
    path.write_bytes(pack_nifti(data, srow=srow))
    v = load_volume(path)
    assert np.array_equal(v.data, data)
    expected = np.eye(4)
    expected[0], expected[1], expected[2] = srow
    assert np.array_equal(v.affine, expected)


def test_reader_qform_fallback(tmp_path):
    data = np.zeros((3, 3, 3), dtype=np.float32)
    # identity rotation quaternion, anisotropic spacing, explicit offset
    path = tmp_path / "q.nii"
    path.write_bytes(pack_nifti(data, quat=(0, 0, 0, 10.0, 20.0, 30.0),
                                pixdim=(1, 2, 3, 4, 0, 0, 0, 0)))
    v = load_volume(path)
    expected = np.diag([2.0, 3.0, 4.0, 1.0])
    expected[:3, 3] = (10, 20, 30)
    assert np.allclose(v.affine, expected, atol=1e-6)


def test_reader_pixdim_fallback_when_no_forms(tmp_path):
    data = np.zeros((3, 3, 3), dtype=np.float32)
    path = tmp_path / "p.nii"
    path.write_bytes(pack_nifti(data, pixdim=(1, 2, 2, 2, 0, 0, 0, 0)))
    v = load_volume(path)
    assert np.allclose(v.affine, np.diag([2.0, 2.0, 2.0, 1.0]))


def test_save_creates_parent_dirs(tmp_path, rng):
    data = rng.random((4, 4, 4), dtype=np.float32)
    path = tmp_path / "deep" / "nested" / "v.nii.gz"
    save_volume(Volume(data, np.eye(4)), path)
    assert np.array_equal(load_volume(path).data, data)


def test_roundtrip_bitexact_uncompressed(tmp_path, rng):
    data = rng.random((7, 6, 5), dtype=np.float32)
    affine = np.diag([1.0, 1.0, 1.0, 1.0])
    affine[:3, 3] = (-12.5, 4.0, 98.5)  # float32-representable entries
    path = tmp_path / "v.nii"
    save_volume(Volume(data, affine), path)
    back = load_volume(path)
    assert np.array_equal(back.data, data)
    assert np.array_equal(back.affine, affine)


def test_labels_roundtrip(tmp_path, rng):
    data = rng.integers(0, 4, size=(6, 5, 4), dtype=np.int16)
    lm = LabelMap(data, np.eye(4), SS4)
    path = tmp_path / "l.nii.gz"
    save_labels(lm, path)
    back = load_labels(path, SS4)
    assert np.array_equal(back.data, data)
    assert back.scheme == SS4


def test_gz_twin_matches_external_gzip(tmp_path, rng):
    data = rng.random((5, 5, 5), dtype=np.float32)
    v = Volume(data, np.eye(4))
    plain = tmp_path / "twin.nii"
    save_volume(v, plain)
    subprocess.run(["gzip", "-k", str(plain)], check=True)
    a = load_volume(plain)
    b = load_volume(tmp_path / "twin.nii.gz")
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(a.affine, b.affine)


def test_four_dim_two_timepoints_rejected(tmp_path):
    data = np.zeros((2, 3, 4, 2), dtype=np.float32)
    path = tmp_path / "t2.nii"
    path.write_bytes(pack_nifti(data, dim=(2, 3, 4, 2)))
    with pytest.raises(FormatError, match="non-3D"):
        load_volume(path)


def test_four_dim_singleton_squeezed(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4, 1)
    path = tmp_path / "t1.nii"
    path.write_bytes(pack_nifti(data, dim=(2, 3, 4, 1)))
    v = load_volume(path)
    assert v.shape == (2, 3, 4)


def test_nan_voxels_rejected_with_count(tmp_path):
    data = np.zeros((4, 4, 4), dtype=np.float32)
    data[0, 0, 0] = np.nan
    data[1, 2, 3] = np.nan
    data[2, 2, 2] = np.inf
    path = tmp_path / "nan.nii"
    path.write_bytes(pack_nifti(data))
    with pytest.raises(SanitationError, match="3 non-finite"):
        load_volume(path)


def test_scl_slope_applied(tmp_path):
    data = np.full((2, 2, 2), 10, dtype=np.int16)
    path = tmp_path / "s.nii"
    path.write_bytes(pack_nifti(data, datatype=4, scl=(2.0, 1.0)))
    v = load_volume(path)
    assert np.all(v.data == 21.0)


def test_scaled_label_file_rejected(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.int16)
    path = tmp_path / "sl.nii"
    path.write_bytes(pack_nifti(data, datatype=4, scl=(2.0, 0.0)))
    with pytest.raises(FormatError, match="scaling"):
        load_labels(path, SS4)


def test_bad_magic_rejected(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.float32)
    path = tmp_path / "bad.nii"
    path.write_bytes(pack_nifti(data, magic=b"xxxx"))
    with pytest.raises(FormatError, match="magic"):
        load_volume(path)


def test_hdr_img_pair_rejected(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.float32)
    path = tmp_path / "pair.nii"
    path.write_bytes(pack_nifti(data, magic=b"ni1\x00"))
    with pytest.raises(FormatError, match="detached"):
        load_volume(path)


def test_big_endian_rejected(tmp_path):
    path = tmp_path / "be.nii"
    path.write_bytes(struct.pack(">i", 348) + b"\x00" * 400)
    with pytest.raises(FormatError, match="big-endian"):
        load_volume(path)


def test_truncated_data_rejected(tmp_path):
    data = np.zeros((8, 8, 8), dtype=np.float32)
    full = pack_nifti(data)
    path = tmp_path / "trunc.nii"
    path.write_bytes(full[:-100])
    with pytest.raises(FormatError, match="truncated"):
        load_volume(path)


def test_label_range_validated_on_load(tmp_path):
    data = np.full((2, 2, 2), 9, dtype=np.int16)
    path = tmp_path / "hot.nii"
    path.write_bytes(pack_nifti(data, datatype=4))
    with pytest.raises(ContractError, match="9"):
        load_labels(path, SS4)


def test_float_label_file_integral_ok_nonintegral_rejected(tmp_path):
    good = np.ones((2, 2, 2), dtype=np.float32)
    path = tmp_path / "f.nii"
    path.write_bytes(pack_nifti(good))
    lm = load_labels(path, SS4)
    assert lm.data.dtype == np.int16
    bad = np.full((2, 2, 2), 0.5, dtype=np.float32)
    path2 = tmp_path / "f2.nii"
    path2.write_bytes(pack_nifti(bad))
    with pytest.raises(ContractError, match="non-integral"):
        load_labels(path2, SS4)


# ---------------------------------------------------------------------------
# schemes and containers

def test_scheme_background_enforced():
    with pytest.raises(ContractError, match="background"):
        ClassScheme(("grey_matter", "white_matter"))
    legacy = ClassScheme.without_background(("grey_matter", "white_matter"))
    assert not legacy.has_background


def test_scheme_duplicates_and_empty_rejected():
    with pytest.raises(ContractError, match="duplicate"):
        ClassScheme(("background", "a", "a"))
    with pytest.raises(ContractError):
        ClassScheme(())


def test_scheme_presets():
    assert RAW8.num_classes == 8 and RAW8.has_background
    assert RAW7.num_classes == 7 and not RAW7.has_background
    assert SS4.num_classes == 4
    assert RAW8.names[1:] == RAW7.names
    assert get_scheme("ss4") is SS4
    with pytest.raises(ConfigError, match="unknown scheme"):
        get_scheme("nope")
    assert SS4.index("csf") == 1
    with pytest.raises(ContractError):
        SS4.index("cortex")


def test_volume_contracts():
    with pytest.raises(ContractError, match="3D"):
        Volume(np.zeros((4, 4)), np.eye(4))
    singular = np.eye(4)
    singular[0, 0] = 0.0
    with pytest.raises(GeometryError):
        Volume(np.zeros((2, 2, 2)), singular)
    v = Volume(np.zeros((2, 2, 2), dtype=np.float64), np.eye(4))
    assert v.data.dtype == np.float32


def test_labelmap_contracts():
    with pytest.raises(ContractError, match="integer"):
        LabelMap(np.zeros((2, 2, 2), dtype=np.float32), np.eye(4), SS4)
    with pytest.raises(ContractError, match="classes"):
        LabelMap(np.full((2, 2, 2), 4, dtype=np.int16), np.eye(4), SS4)
    with pytest.raises(ContractError):
        LabelMap(np.full((2, 2, 2), -1, dtype=np.int16), np.eye(4), SS4)


def test_check_paired():
    v = Volume(np.zeros((3, 3, 3)), np.eye(4))
    check_paired(v, LabelMap(np.zeros((3, 3, 3), np.int16), np.eye(4), SS4))
    with pytest.raises(ContractError, match="shape"):
        check_paired(v, LabelMap(np.zeros((2, 3, 3), np.int16), np.eye(4), SS4))
    off = np.eye(4)
    off[0, 3] = 1.0
    with pytest.raises(ContractError, match="affine"):
        check_paired(v, LabelMap(np.zeros((3, 3, 3), np.int16), off, SS4))


# ---------------------------------------------------------------------------
# orientation and conformance

def test_to_ras_preserves_marker_world_coords(rng):
    data = asymmetric_marker()
    for _ in range(25):
        affine = random_affine(rng)
        out, out_aff = _to_ras(data, affine)
        # output axes point along +R,+A,+S: positive diagonal, zero off-diagonal
        R = out_aff[:3, :3]
        assert np.all(np.diag(R) > 0)
        assert np.allclose(R - np.diag(np.diag(R)), 0)
        idx_in = np.unravel_index(np.argmax(data), data.shape)
        idx_out = np.unravel_index(np.argmax(out), out.shape)
        world_in = affine @ np.array([*idx_in, 1.0])
        world_out = out_aff @ np.array([*idx_out, 1.0])
        assert np.allclose(world_in, world_out, atol=1e-12)


def test_to_ras_identity_on_ras_input():
    data = asymmetric_marker()
    out, out_aff = _to_ras(data, np.eye(4))
    assert np.array_equal(out, data)
    assert np.array_equal(out_aff, np.eye(4))


def test_conform_las_marker_lands_at_same_world_position():
    data = asymmetric_marker((24, 30, 36))
    affine = np.eye(4)
    affine[0, 0] = -1.0
    affine[:3, 3] = (20.0, -5.0, 3.0)
    v = Volume(data, affine)
    out = conform(v, target_mm=1.0, target_shape=64, interp="nearest")
    assert out.shape == (64, 64, 64)
    marker_world = affine @ np.array([2, 3, 4, 1.0])
    idx = np.unravel_index(np.argmax(out.data), out.shape)
    assert out.data[idx] == 1.0
    assert np.allclose(out.affine @ np.array([*idx, 1.0]), marker_world)
    # linear interpolation agrees on this aligned grid
    out_lin = conform(v, target_mm=1.0, target_shape=64, interp="linear")
    idx_lin = np.unravel_index(np.argmax(out_lin.data), out_lin.shape)
    assert idx_lin == idx
    assert out_lin.data[idx_lin] > 0.999


def test_conform_world_center_within_one_voxel(rng):
    data = rng.random((50, 41, 33), dtype=np.float32)
    affine = np.diag([0.8, 0.8, 0.8, 1.0])
    affine[:3, 3] = (-11.0, 7.0, 2.0)
    out = conform(Volume(data, affine), target_mm=1.0, target_shape=64)
    c_in = affine @ np.array([(50 - 1) / 2, (41 - 1) / 2, (33 - 1) / 2, 1.0])
    c_out = out.affine @ np.array([31.5, 31.5, 31.5, 1.0])
    assert np.linalg.norm(c_in[:3] - c_out[:3]) <= 1.0


def test_conform_idempotent(rng):
    from scipy.ndimage import gaussian_filter
    data = gaussian_filter(rng.random((50, 41, 33)), 2.0).astype(np.float32)
    affine = np.diag([0.8, -0.8, 1.1, 1.0])
    affine[:3, 3] = (4.0, 2.0, -9.0)
    once = conform(Volume(data, affine), target_shape=48)
    twice = conform(once, target_shape=48)
    assert np.max(np.abs(twice.data - once.data)) <= 1e-6
    assert np.array_equal(once.affine, twice.affine)

    lab = (data > 0.5).astype(np.int16)
    lm = LabelMap(lab, affine, SS4)
    lonce = conform(lm, target_shape=48)
    ltwice = conform(lonce, target_shape=48)
    assert np.array_equal(lonce.data, ltwice.data)


def test_conform_pads_with_zeros(rng):
    data = rng.random((10, 10, 10), dtype=np.float32) + 1.0
    out = conform(Volume(data, np.eye(4)), target_shape=32)
    assert out.data[0, 0, 0] == 0.0
    assert out.data[16, 16, 16] > 0.0
    corner = out.data[:8, :8, :8]
    assert np.all(corner == 0.0)


def test_conform_validation():
    v = Volume(np.zeros((4, 4, 4)), np.eye(4))
    lm = LabelMap(np.zeros((4, 4, 4), np.int16), np.eye(4), SS4)
    with pytest.raises(ContractError, match="nearest"):
        conform(lm, interp="linear")
    with pytest.raises(ConfigError):
        conform(v, interp="cubic")
    with pytest.raises(ConfigError):
        conform(v, target_mm=0.0)
    with pytest.raises(ConfigError):
        conform(v, target_shape=(0, 4, 4))
    with pytest.raises(ContractError):
        conform(np.zeros((4, 4, 4)))


# ---------------------------------------------------------------------------
# intensity normalization and one-hot encoding

def manual_percentile(values, q):
    """Sorted linear-interpolation percentile, written out the long way."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    pos = (q / 100.0) * (v.size - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    return v[lo] * (1 - frac) + v[hi] * frac


def test_normalize_matches_manual_percentiles(rng):
    data = rng.normal(50.0, 10.0, size=(17, 13, 11)).astype(np.float32)
    v = normalize_intensity(Volume(data, np.eye(4)))
    lo = manual_percentile(data, 0.5)
    hi = manual_percentile(data, 99.5)
    expected = (np.clip(data, lo, hi) - lo) / (hi - lo)
    assert np.allclose(v.data, expected, atol=1e-6)
    assert v.data.min() >= 0.0 and v.data.max() <= 1.0


def test_normalize_robust_to_outlier(rng):
    data = rng.uniform(0.0, 100.0, size=(20, 20, 20)).astype(np.float32)
    spiked = data.copy()
    spiked[0, 0, 0] = 1e6
    a = normalize_intensity(Volume(data, np.eye(4)))
    b = normalize_intensity(Volume(spiked, np.eye(4)))
    # one hot voxel saturates to 1 but barely moves everyone else
    assert b.data[0, 0, 0] == 1.0
    assert np.median(np.abs(a.data - b.data)) < 0.02


def test_normalize_flat_volume_warns_and_zeros():
    v = Volume(np.full((5, 5, 5), 3.0, dtype=np.float32), np.eye(4))
    with pytest.warns(UserWarning, match="flat"):
        out = normalize_intensity(v)
    assert np.all(out.data == 0.0)


def test_one_hot_roundtrip(rng):
    data = rng.integers(0, 4, size=(9, 8, 7), dtype=np.int16)
    lm = LabelMap(data, np.eye(4), SS4)
    enc = one_hot(lm)
    assert enc.shape == (9, 8, 7, 4)
    assert enc.dtype == np.float32
    assert np.all(enc.sum(axis=-1) == 1.0)
    assert np.array_equal(np.argmax(enc, axis=-1), data)
