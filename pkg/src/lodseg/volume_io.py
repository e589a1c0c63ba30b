"""Volume and label-map containers, NIfTI-1 I/O, and geometry conformance.

The on-disk format is single-file NIfTI-1 (.nii or .nii.gz), little-endian.
Reading prefers the sform affine and falls back to the qform quaternion, then
to a plain pixdim diagonal. Writing stores the affine in the sform rows;
NIfTI-1 keeps those rows as float32, so affine round-trips are bit-exact only
for affines whose entries are float32-representable (true for every grid this
package produces).

Conformance resamples any input onto an axis-aligned RAS+ grid with isotropic
spacing, cropping or zero-padding symmetrically about the input's world
center. Images interpolate linearly, label maps by nearest neighbour.
"""

from __future__ import annotations

import gzip
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, FormatError, GeometryError, SanitationError


# ---------------------------------------------------------------------------
# class schemes

@dataclass(frozen=True, eq=True)
class ClassScheme:
    """Ordered segmentation class names; index in the tuple is the label value.

    Index 0 is the background class by convention. The legacy seven-tissue
    preset predates that convention, so it can be constructed through
    without_background() and is accepted wherever a scheme is accepted, but
    new schemes should start with "background".
    """

    names: tuple[str, ...]
    background_optional: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ContractError("class scheme needs at least one class")
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate class names: {names}")
        if any(not n for n in names):
            raise ContractError("class names must be non-empty")
        if names[0] != "background" and not self.background_optional:
            raise ContractError(
                f"index 0 must be 'background', got {names[0]!r} "
                "(use ClassScheme.without_background for legacy schemes)")

    @classmethod
    def without_background(cls, names) -> "ClassScheme":
        """Build a legacy scheme whose index 0 is a real tissue class."""
        return cls(tuple(names), background_optional=True)

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def has_background(self) -> bool:
        return self.names[0] == "background"

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ContractError(f"unknown class {name!r}; scheme has {self.names}") from None


_TISSUES7 = ("grey_matter", "white_matter", "csf", "ventricles",
             "cerebellum", "brainstem", "basal_ganglia")

#: Adult scheme: background plus the seven tissue classes. Default for training.
RAW8 = ClassScheme(("background",) + _TISSUES7)
#: Legacy seven-class adult scheme without an explicit background channel.
RAW7 = ClassScheme.without_background(_TISSUES7)
#: Skull-stripped infant scheme.
SS4 = ClassScheme(("background", "csf", "grey_matter", "white_matter"))

SCHEMES = {"raw8": RAW8, "raw7": RAW7, "ss4": SS4}


def get_scheme(name: str) -> ClassScheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ConfigError(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}") from None


# ---------------------------------------------------------------------------
# containers

def _check_affine(affine) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ContractError(f"affine must be 4x4, got {affine.shape}")
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise GeometryError("degenerate affine (determinant ~ 0)")
    return affine


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image plus its voxel-to-world affine (float32 data, mm units)."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ContractError(f"volume data must be 3D, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", _check_affine(self.affine))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LabelMap:
    """A 3D integer label image tied to a ClassScheme."""

    data: np.ndarray
    affine: np.ndarray
    scheme: ClassScheme

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ContractError(f"label data must be 3D, got shape {data.shape}")
        if data.dtype.kind not in "iub":
            raise ContractError(f"labels must be integer-typed, got {data.dtype}")
        lo = int(data.min()) if data.size else 0
        hi = int(data.max()) if data.size else 0
        if lo < 0 or hi >= self.scheme.num_classes:
            raise ContractError(
                f"label values span [{lo}, {hi}] but scheme has "
                f"{self.scheme.num_classes} classes")
        object.__setattr__(self, "data", np.ascontiguousarray(data, dtype=np.int16))
        object.__setattr__(self, "affine", _check_affine(self.affine))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def check_paired(volume: Volume, labels: LabelMap) -> None:
    """Raise unless the pair shares grid shape and affine exactly."""
    if volume.shape != labels.shape:
        raise ContractError(f"shape mismatch: {volume.shape} vs {labels.shape}")
    if not np.array_equal(volume.affine, labels.affine):
        raise ContractError("affine mismatch between volume and labels")


# ---------------------------------------------------------------------------
# NIfTI-1 header plumbing

_HEADER_FIELDS = (
    ("sizeof_hdr", "i", 1), ("data_type", "10s", 1), ("db_name", "18s", 1),
    ("extents", "i", 1), ("session_error", "h", 1), ("regular", "B", 1),
    ("dim_info", "B", 1), ("dim", "h", 8),
    ("intent_p1", "f", 1), ("intent_p2", "f", 1), ("intent_p3", "f", 1),
    ("intent_code", "h", 1), ("datatype", "h", 1), ("bitpix", "h", 1),
    ("slice_start", "h", 1), ("pixdim", "f", 8), ("vox_offset", "f", 1),
    ("scl_slope", "f", 1), ("scl_inter", "f", 1), ("slice_end", "h", 1),
    ("slice_code", "B", 1), ("xyzt_units", "B", 1), ("cal_max", "f", 1),
    ("cal_min", "f", 1), ("slice_duration", "f", 1), ("toffset", "f", 1),
    ("glmax", "i", 1), ("glmin", "i", 1), ("descrip", "80s", 1),
    ("aux_file", "24s", 1), ("qform_code", "h", 1), ("sform_code", "h", 1),
    ("quatern_b", "f", 1), ("quatern_c", "f", 1), ("quatern_d", "f", 1),
    ("qoffset_x", "f", 1), ("qoffset_y", "f", 1), ("qoffset_z", "f", 1),
    ("srow_x", "f", 4), ("srow_y", "f", 4), ("srow_z", "f", 4),
    ("intent_name", "16s", 1), ("magic", "4s", 1),
)

_HEADER_STRUCT = struct.Struct(
    "<" + "".join(f"{n if n > 1 else ''}{f}" if f[-1] != "s" else f
                  for _, f, n in _HEADER_FIELDS))
assert _HEADER_STRUCT.size == 348

# NIfTI datatype code -> numpy dtype (little-endian enforced at parse time)
_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
           64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32,
           1024: np.int64, 1280: np.uint64}


def _parse_header(raw: bytes) -> dict:
    values = _HEADER_STRUCT.unpack(raw[:348])
    out, i = {}, 0
    for name, _, count in _HEADER_FIELDS:
        out[name] = values[i] if count == 1 else tuple(values[i:i + count])
        i += count
    return out


def _pack_header(h: dict) -> bytes:
    flat = []
    for name, _, count in _HEADER_FIELDS:
        v = h[name]
        flat.extend(v) if count > 1 else flat.append(v)
    return _HEADER_STRUCT.pack(*flat)


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _write_bytes(path: Path, payload: bytes) -> None:
    # write to a sibling temp file, then atomically rename into place
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if path.name.endswith(".gz"):
        with open(tmp, "wb") as f:
            # mtime pinned so identical content gives identical bytes
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(tmp, "wb") as f:
            f.write(payload)
    os.replace(tmp, path)


def _quaternion_affine(h: dict) -> np.ndarray:
    b, c, d = h["quatern_b"], h["quatern_c"], h["quatern_d"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    R = np.array([
        [a*a + b*b - c*c - d*d, 2*b*c - 2*a*d,        2*b*d + 2*a*c],
        [2*b*c + 2*a*d,        a*a + c*c - b*b - d*d, 2*c*d - 2*a*b],
        [2*b*d - 2*a*c,        2*c*d + 2*a*b,        a*a + d*d - b*b - c*c],
    ])
    pix = h["pixdim"]
    qfac = -1.0 if pix[0] < 0 else 1.0
    scale = np.array([pix[1], pix[2], pix[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = R * scale
    aff[:3, 3] = (h["qoffset_x"], h["qoffset_y"], h["qoffset_z"])
    return aff


def _affine_from_header(h: dict) -> np.ndarray:
    if h["sform_code"] > 0:
        aff = np.eye(4)
        aff[0], aff[1], aff[2] = h["srow_x"], h["srow_y"], h["srow_z"]
        return aff
    if h["qform_code"] > 0:
        return _quaternion_affine(h)
    aff = np.eye(4)
    for i in range(3):
        p = h["pixdim"][i + 1]
        aff[i, i] = p if p != 0 else 1.0
    return aff


def _read_nifti(path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 352:
        raise FormatError(f"{path}: too short to be a NIfTI-1 file")
    if struct.unpack("<i", raw[:4])[0] != 348:
        if struct.unpack(">i", raw[:4])[0] == 348:
            raise FormatError(f"{path}: big-endian NIfTI is not supported")
        raise FormatError(f"{path}: not a NIfTI-1 file (bad header size)")
    h = _parse_header(raw)
    if h["magic"] not in (b"n+1\x00",):
        if h["magic"] == b"ni1\x00":
            raise FormatError(f"{path}: detached .hdr/.img pairs are not supported")
        raise FormatError(f"{path}: bad NIfTI magic {h['magic']!r}")
    nd = h["dim"][0]
    if not 1 <= nd <= 7:
        raise FormatError(f"{path}: invalid dim[0]={nd}")
    shape = list(h["dim"][1:1 + nd])
    while len(shape) > 3 and shape[-1] == 1:
        shape.pop()
    if len(shape) != 3:
        raise FormatError(f"{path}: non-3D payload with shape {tuple(shape)}")
    if any(s < 1 for s in shape):
        raise FormatError(f"{path}: invalid shape {tuple(shape)}")
    try:
        dt = np.dtype(_DTYPES[h["datatype"]]).newbyteorder("<")
    except KeyError:
        raise FormatError(f"{path}: unsupported datatype code {h['datatype']}") from None
    offset = int(round(h["vox_offset"]))
    n = int(np.prod(shape))
    if offset < 348 or len(raw) < offset + n * dt.itemsize:
        raise FormatError(f"{path}: truncated data section")
    flat = np.frombuffer(raw, dtype=dt, count=n, offset=offset)
    data = flat.reshape(shape, order="F")
    slope, inter = h["scl_slope"], h["scl_inter"]
    h["scaled"] = (np.isfinite(slope) and np.isfinite(inter)
                   and (slope not in (0.0, 1.0) or inter != 0.0))
    return data, _affine_from_header(h), h


def _blank_header() -> dict:
    h = {name: (0,) * count if count > 1 else 0 for name, _, count in _HEADER_FIELDS}
    for name in ("data_type", "db_name", "descrip", "aux_file", "intent_name"):
        h[name] = b""
    h["sizeof_hdr"] = 348
    h["regular"] = ord("r")
    h["magic"] = b"n+1\x00"
    return h


def _write_nifti(path, data: np.ndarray, affine: np.ndarray, datatype: int) -> None:
    path = Path(path)
    affine = np.asarray(affine, dtype=np.float64)
    h = _blank_header()
    h["dim"] = (3, *data.shape, 1, 1, 1, 1)
    h["datatype"] = datatype
    h["bitpix"] = data.dtype.itemsize * 8
    zooms = np.sqrt((affine[:3, :3] ** 2).sum(axis=0))
    h["pixdim"] = (1.0, *(float(z) for z in zooms), 0.0, 0.0, 0.0, 0.0)
    h["vox_offset"] = 352.0
    h["scl_slope"] = 1.0
    h["xyzt_units"] = 2  # millimetres
    h["descrip"] = b"lodseg"
    h["sform_code"] = 2
    h["srow_x"] = tuple(float(v) for v in affine[0])
    h["srow_y"] = tuple(float(v) for v in affine[1])
    h["srow_z"] = tuple(float(v) for v in affine[2])
    payload = _pack_header(h) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    _write_bytes(path, payload)


def load_volume(path) -> Volume:
    """Load a scalar volume, applying any intensity scaling from the header."""
    data, affine, h = _read_nifti(path)
    data = data.astype(np.float32, copy=True)
    if h["scaled"]:
        data = data * np.float32(h["scl_slope"]) + np.float32(h["scl_inter"])
    bad = int(data.size - np.isfinite(data).sum())
    if bad:
        raise SanitationError(f"{path}: {bad} non-finite voxels")
    return Volume(data, affine)


def load_labels(path, scheme: ClassScheme) -> LabelMap:
    """Load an integer label map and validate it against the scheme."""
    data, affine, h = _read_nifti(path)
    if h["scaled"]:
        raise FormatError(f"{path}: label file carries intensity scaling")
    if data.dtype.kind == "f":
        bad = int(data.size - np.isfinite(data).sum())
        if bad:
            raise SanitationError(f"{path}: {bad} non-finite voxels")
        rounded = np.rint(data)
        if not np.array_equal(rounded, data):
            raise ContractError(f"{path}: float-typed label file with non-integral values")
        data = rounded
    data = np.asarray(data)
    lo, hi = int(data.min()), int(data.max())
    if lo < 0 or hi >= scheme.num_classes:
        raise ContractError(
            f"{path}: labels span [{lo}, {hi}] but scheme "
            f"{scheme.names} has {scheme.num_classes} classes")
    return LabelMap(data.astype(np.int16), affine, scheme)


def save_volume(volume: Volume, path) -> None:
    """Write float32 NIfTI-1 (gzipped when the path ends in .gz)."""
    _write_nifti(path, volume.data, volume.affine, datatype=16)


def save_labels(labels: LabelMap, path) -> None:
    """Write int16 NIfTI-1 (gzipped when the path ends in .gz)."""
    _write_nifti(path, labels.data, labels.affine, datatype=4)


def nifti_stem(path) -> str:
    """Volume id of a NIfTI path: the filename without .nii / .nii.gz."""
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def list_nifti(directory) -> list:
    """NIfTI files in a directory, sorted. Ignores sidecars like manifests."""
    return sorted(p for p in Path(directory).iterdir()
                  if p.is_file() and p.name.endswith((".nii", ".nii.gz")))


# ---------------------------------------------------------------------------
# orientation and conformance

def _axis_assignment(affine) -> tuple[list[int], list[float]]:
    """For each input axis j, the world axis it mostly points along and the sign.

    Assignment is greedy on |direction cosine|, largest first, so every input
    axis claims a distinct world axis even for oblique affines.
    """
    R = np.asarray(affine, dtype=np.float64)[:3, :3]
    if abs(np.linalg.det(R)) < 1e-12:
        raise GeometryError("degenerate affine (determinant ~ 0)")
    A = np.abs(R.copy())
    world_of = [-1, -1, -1]
    sign = [0.0, 0.0, 0.0]
    for _ in range(3):
        i, j = np.unravel_index(int(np.argmax(A)), A.shape)
        if A[i, j] <= 0:
            raise GeometryError("affine has a zero direction column")
        world_of[j] = int(i)
        sign[j] = 1.0 if R[i, j] > 0 else -1.0
        A[i, :] = -1.0
        A[:, j] = -1.0
    return world_of, sign


def _to_ras(data: np.ndarray, affine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Permute and flip axes so voxel axes run along +R, +A, +S."""
    world_of, sign = _axis_assignment(affine)
    perm = [world_of.index(i) for i in range(3)]  # input axis feeding world axis i
    out = np.transpose(data, perm)
    flips = [i for i in range(3) if sign[perm[i]] < 0]
    if flips:
        out = np.flip(out, flips)
    out = np.ascontiguousarray(out)
    # voxel map from new indices back to old: old = T[:3,:3] @ new + T[:3,3]
    T = np.eye(4)
    T[:3, :3] = 0.0
    for i in range(3):
        j = perm[i]
        if sign[j] > 0:
            T[j, i] = 1.0
        else:
            T[j, i] = -1.0
            T[j, 3] = data.shape[j] - 1
    return out, affine @ T


def _resample_to_grid(data, affine, out_affine, out_shape, order) -> np.ndarray:
    vox_map = np.linalg.inv(affine) @ out_affine
    if data.shape == tuple(out_shape) and np.allclose(vox_map, np.eye(4), atol=1e-9):
        return data.copy()
    return ndimage.affine_transform(
        data, vox_map[:3, :3], vox_map[:3, 3], output_shape=tuple(out_shape),
        order=order, mode="constant", cval=0.0, prefilter=False)


def conform(obj, target_mm: float = 1.0, target_shape=(256, 256, 256), interp: str | None = None):
    """Resample onto an axis-aligned RAS+ grid with isotropic spacing.

    The output grid is centred on the input's world centre; regions outside
    the input are zero-filled. Volumes default to linear interpolation, label
    maps must use nearest (requesting linear for labels is an error).
    Conforming an already-conformed object is the identity.
    """
    if isinstance(target_shape, (int, np.integer)):
        target_shape = (int(target_shape),) * 3
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or any(s < 1 for s in target_shape):
        raise ConfigError(f"bad target shape {target_shape}")
    if not target_mm > 0:
        raise ConfigError(f"target spacing must be positive, got {target_mm}")
    is_labels = isinstance(obj, LabelMap)
    if not is_labels and not isinstance(obj, Volume):
        raise ContractError(f"conform expects Volume or LabelMap, got {type(obj).__name__}")
    if interp is None:
        interp = "nearest" if is_labels else "linear"
    if interp not in ("linear", "nearest"):
        raise ConfigError(f"interp must be 'linear' or 'nearest', got {interp!r}")
    if is_labels and interp != "nearest":
        raise ContractError("label maps must be conformed with nearest interpolation")

    data, affine = _to_ras(obj.data, obj.affine)
    centre_vox = (np.array(data.shape, dtype=np.float64) - 1.0) / 2.0
    world_centre = (affine @ np.array([*centre_vox, 1.0]))[:3]
    out_affine = np.eye(4)
    out_affine[:3, :3] *= target_mm
    out_affine[:3, 3] = world_centre - target_mm * (np.array(target_shape) - 1.0) / 2.0

    order = 1 if interp == "linear" else 0
    out = _resample_to_grid(data, affine, out_affine, target_shape, order)
    if is_labels:
        return LabelMap(out, out_affine, obj.scheme)
    return Volume(out, out_affine)


# ---------------------------------------------------------------------------
# intensity and encoding

def normalize_intensity(volume: Volume) -> Volume:
    """Clip to the [0.5, 99.5] intensity percentiles and rescale to [0, 1].

    A flat volume (the two percentiles coincide) maps to all zeros with a
    warning rather than dividing by zero.
    """
    lo, hi = np.percentile(volume.data, (0.5, 99.5))
    if not hi > lo:
        warnings.warn("flat intensity distribution; normalizing to zeros", stacklevel=2)
        return Volume(np.zeros_like(volume.data), volume.affine)
    out = (np.clip(volume.data, lo, hi) - lo) / (hi - lo)
    return Volume(out.astype(np.float32), volume.affine)


def one_hot(labels: LabelMap) -> np.ndarray:
    """Encode labels as a float32 (X, Y, Z, C) array of indicator channels."""
    C = labels.scheme.num_classes
    hi = int(labels.data.max()) if labels.data.size else 0
    if hi >= C:
        raise ContractError(f"label value {hi} out of range for {C} classes")
    return np.eye(C, dtype=np.float32)[labels.data]
