"""NIfTI-1 reading and writing (single ``.nii``/``.nii.gz`` files and ``.hdr``/``.img`` pairs).

Only the header fields needed to recover a scalar 3D volume and its geometry
are interpreted. Geometry comes from the sform when ``sform_code > 0``, else
from the qform, else from ``pixdim`` alone.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, LabelDomainError, NiftiFormatError, UnsupportedDatatypeError
from .volume import Geometry, LabelVolume, Volume

HEADER_SIZE = 348

DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
    512: np.dtype("u2"),
}
_INTEGER_CODES = {2, 4, 8, 512}
_CODE_FOR_DTYPE = {v: k for k, v in DATATYPES.items()}

# (name, struct format) in file order; totals 348 bytes
_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FORMAT = "".join(f for _, f in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


@dataclass
class NiftiHeader:
    dim: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    datatype: int = 16
    bitpix: int = 32
    vox_offset: float = 352.0
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0, 0.0, 0.0)
    qoffset: tuple = (0.0, 0.0, 0.0)
    srow: np.ndarray = field(default_factory=lambda: np.zeros((3, 4)))
    magic: bytes = b"n+1\x00"
    xyzt_units: int = 2  # mm
    descrip: bytes = b""
    byteorder: str = "<"

    @classmethod
    def from_bytes(cls, raw: bytes) -> "NiftiHeader":
        if len(raw) < HEADER_SIZE:
            raise CorruptFileError(f"header truncated ({len(raw)} < {HEADER_SIZE} bytes)")
        order = "<"
        dim0 = struct.unpack("<h", raw[40:42])[0]
        if not 1 <= dim0 <= 7:
            order = ">"
            dim0 = struct.unpack(">h", raw[40:42])[0]
            if not 1 <= dim0 <= 7:
                raise NiftiFormatError(f"invalid dim[0] in either byte order")
        values = struct.unpack(order + _FORMAT, raw[:HEADER_SIZE])
        fields = {}
        pos = 0
        for name, fmt in _FIELDS:
            n = 1
            if fmt[:-1].isdigit() and fmt[-1] != "s":
                n = int(fmt[:-1])
            chunk = values[pos : pos + n]
            fields[name] = chunk if n > 1 else chunk[0]
            pos += n
        if fields["sizeof_hdr"] != HEADER_SIZE:
            raise NiftiFormatError(f"sizeof_hdr is {fields['sizeof_hdr']}, expected 348")
        if fields["magic"] not in (b"n+1\x00", b"ni1\x00"):
            raise NiftiFormatError(f"bad magic {fields['magic']!r}")
        return cls(
            dim=tuple(fields["dim"]),
            pixdim=tuple(fields["pixdim"]),
            datatype=fields["datatype"],
            bitpix=fields["bitpix"],
            vox_offset=fields["vox_offset"],
            scl_slope=fields["scl_slope"],
            scl_inter=fields["scl_inter"],
            qform_code=fields["qform_code"],
            sform_code=fields["sform_code"],
            quatern=(fields["quatern_b"], fields["quatern_c"], fields["quatern_d"]),
            qoffset=(fields["qoffset_x"], fields["qoffset_y"], fields["qoffset_z"]),
            srow=np.array([fields["srow_x"], fields["srow_y"], fields["srow_z"]], dtype=np.float64),
            magic=fields["magic"],
            xyzt_units=fields["xyzt_units"],
            descrip=fields["descrip"].rstrip(b"\x00"),
            byteorder=order,
        )

    def to_bytes(self) -> bytes:
        values = dict(
            sizeof_hdr=HEADER_SIZE,
            data_type=b"",
            db_name=b"",
            extents=0,
            session_error=0,
            regular=b"r",
            dim_info=0,
            dim=self.dim,
            intent_p1=0.0,
            intent_p2=0.0,
            intent_p3=0.0,
            intent_code=0,
            datatype=self.datatype,
            bitpix=self.bitpix,
            slice_start=0,
            pixdim=self.pixdim,
            vox_offset=self.vox_offset,
            scl_slope=self.scl_slope,
            scl_inter=self.scl_inter,
            slice_end=0,
            slice_code=0,
            xyzt_units=self.xyzt_units,
            cal_max=0.0,
            cal_min=0.0,
            slice_duration=0.0,
            toffset=0.0,
            glmax=0,
            glmin=0,
            descrip=self.descrip[:80],
            aux_file=b"",
            qform_code=self.qform_code,
            sform_code=self.sform_code,
            quatern_b=self.quatern[0],
            quatern_c=self.quatern[1],
            quatern_d=self.quatern[2],
            qoffset_x=self.qoffset[0],
            qoffset_y=self.qoffset[1],
            qoffset_z=self.qoffset[2],
            srow_x=tuple(self.srow[0]),
            srow_y=tuple(self.srow[1]),
            srow_z=tuple(self.srow[2]),
            intent_name=b"",
            magic=self.magic,
        )
        flat = []
        for name, fmt in _FIELDS:
            v = values[name]
            if isinstance(v, (tuple, list)):
                flat.extend(v)
            else:
                flat.append(v)
        return struct.pack(self.byteorder + _FORMAT, *flat)

    def qform_affine(self) -> np.ndarray:
        b, c, d = (float(x) for x in self.quatern)
        a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        r = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ]
        )
        qfac = -1.0 if self.pixdim[0] < 0 else 1.0
        r[:, 2] *= qfac
        affine = np.eye(4)
        affine[:3, :3] = r * np.abs(np.asarray(self.pixdim[1:4], dtype=np.float64))[None, :]
        affine[:3, 3] = self.qoffset
        return affine

    def geometry(self) -> Geometry:
        dims = tuple(max(1, int(n)) for n in self.dim[1:4])
        if self.sform_code > 0:
            affine = np.eye(4)
            affine[:3, :] = self.srow
        elif self.qform_code > 0:
            affine = self.qform_affine()
        else:
            spacing = [abs(float(p)) or 1.0 for p in self.pixdim[1:4]]
            return Geometry(dims, spacing)
        return geometry_from_affine(dims, affine)


def geometry_from_affine(dims, affine: np.ndarray) -> Geometry:
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    spacing = np.linalg.norm(m, axis=0)
    if np.any(spacing <= 0):
        raise NiftiFormatError("degenerate voxel-to-world matrix")
    direction = m / spacing[None, :]
    # stored matrices are float32; tolerate that rounding, reject real shear
    if not np.allclose(direction.T @ direction, np.eye(3), atol=1e-4, rtol=0):
        raise NiftiFormatError("voxel-to-world matrix has shear (non-orthonormal direction)")
    u, _, vt = np.linalg.svd(direction)
    direction = u @ vt
    return Geometry(dims, tuple(spacing), tuple(affine[:3, 3]), direction)


def _quaternion_from_rotation(r: np.ndarray) -> tuple[tuple[float, float, float], float]:
    """Quaternion (b, c, d) and qfac for a 3x3 orthonormal matrix."""
    r = np.array(r, dtype=np.float64)
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] *= -1
    trace = np.trace(r)
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        a = 0.25 / s
        b = (r[2, 1] - r[1, 2]) * s
        c = (r[0, 2] - r[2, 0]) * s
        d = (r[1, 0] - r[0, 1]) * s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        a = (r[2, 1] - r[1, 2]) / s
        b = 0.25 * s
        c = (r[0, 1] + r[1, 0]) / s
        d = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        a = (r[0, 2] - r[2, 0]) / s
        b = (r[0, 1] + r[1, 0]) / s
        c = 0.25 * s
        d = (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        a = (r[1, 0] - r[0, 1]) / s
        b = (r[0, 2] + r[2, 0]) / s
        c = (r[1, 2] + r[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return (float(b), float(c), float(d)), qfac


def _is_gzip(raw: bytes) -> bool:
    return raw[:2] == b"\x1f\x8b"


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if _is_gzip(raw):
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptFileError(f"{path}: damaged gzip stream ({exc})") from exc
    return raw


def _load(path) -> tuple[NiftiHeader, np.ndarray]:
    path = Path(path)
    raw = _read_bytes(path)
    header = NiftiHeader.from_bytes(raw)
    if header.magic == b"ni1\x00":
        img = path.with_suffix(".img")
        if not img.exists():
            img = Path(str(path).replace(".hdr", ".img"))
        payload = _read_bytes(img)
        offset = int(header.vox_offset)
    else:
        payload = raw
        offset = int(header.vox_offset) if header.vox_offset >= HEADER_SIZE else 352
    ndim = header.dim[0]
    if ndim not in (3, 4) or (ndim == 4 and header.dim[4] > 1):
        raise NiftiFormatError(f"{path}: only 3D scalar volumes supported (dim={header.dim[:5]})")
    if header.datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported NIfTI datatype {header.datatype}")
    dtype = DATATYPES[header.datatype].newbyteorder(header.byteorder)
    dims = tuple(int(n) for n in header.dim[1:4])
    count = int(np.prod(dims))
    nbytes = count * dtype.itemsize
    if len(payload) < offset + nbytes:
        raise CorruptFileError(
            f"{path}: data section truncated ({len(payload) - offset} of {nbytes} bytes)"
        )
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    data = data.astype(dtype.newbyteorder("="), copy=False).reshape(dims, order="F")
    return header, data


def _scaled(header: NiftiHeader, data: np.ndarray) -> np.ndarray:
    slope = float(header.scl_slope)
    if slope != 0.0 and np.isfinite(slope):
        inter = float(header.scl_inter) if np.isfinite(header.scl_inter) else 0.0
        return data.astype(np.float64) * slope + inter
    return data


def read_header(path) -> NiftiHeader:
    return NiftiHeader.from_bytes(_read_bytes(Path(path))[:HEADER_SIZE])


def read_volume(path) -> Volume:
    """Read a scalar NIfTI-1 image as a float32 :class:`Volume`."""
    header, data = _load(path)
    values = _scaled(header, data).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise CorruptFileError(f"{path}: non-finite intensities")
    return Volume(header.geometry(), values)


def read_labels(path) -> LabelVolume:
    """Read a tissue label map; values must be integers in {0, 1, 2, 3}."""
    header, data = _load(path)
    values = _scaled(header, data)
    if header.datatype not in _INTEGER_CODES or values.dtype.kind == "f":
        if not np.all(np.isfinite(values)) or np.any(values != np.round(values)):
            raise LabelDomainError(f"{path}: label map contains non-integer values")
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() > 3):
        raise LabelDomainError(f"{path}: labels outside {{0,1,2,3}}")
    return LabelVolume(header.geometry(), values.astype(np.uint8))


def _header_for(geometry: Geometry, dtype: np.dtype) -> NiftiHeader:
    affine = geometry.index_to_world_matrix()
    quatern, qfac = _quaternion_from_rotation(geometry.direction)
    return NiftiHeader(
        dim=(3, *geometry.dims, 1, 1, 1, 1),
        pixdim=(qfac, *geometry.spacing, 1.0, 0.0, 0.0, 0.0),
        datatype=_CODE_FOR_DTYPE[dtype],
        bitpix=dtype.itemsize * 8,
        qform_code=1,
        sform_code=1,
        quatern=quatern,
        qoffset=tuple(geometry.origin),
        srow=affine[:3, :],
    )


def _write(path, header: NiftiHeader, data: np.ndarray):
    path = Path(path)
    payload = (
        header.to_bytes()
        + b"\x00\x00\x00\x00"
        + np.ascontiguousarray(data.ravel(order="F")).astype(data.dtype.newbyteorder(header.byteorder)).tobytes()
    )
    try:
        if path.name.endswith(".gz"):
            # mtime=0 keeps repeated writes byte-identical
            with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0, filename="") as gz:
                gz.write(payload)
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_volume(volume: Volume, path):
    """Write as float32 NIfTI-1; gzip when ``path`` ends with ``.gz``."""
    data = np.asarray(volume.data, dtype=np.float32)
    _write(path, _header_for(volume.geometry, data.dtype), data)


def write_labels(labels: LabelVolume, path):
    data = np.asarray(labels.data, dtype=np.uint8)
    _write(path, _header_for(labels.geometry, data.dtype), data)


def write_array(data: np.ndarray, geometry: Geometry, path, scl_slope: float = 0.0, scl_inter: float = 0.0,
                byteorder: str = "<"):
    """Write raw ``data`` with its own datatype; used for fixtures and exports."""
    data = np.asarray(data)
    dtype = data.dtype.newbyteorder("=")
    if dtype not in _CODE_FOR_DTYPE:
        raise UnsupportedDatatypeError(f"cannot store dtype {data.dtype}")
    header = _header_for(geometry, dtype)
    header.scl_slope = scl_slope
    header.scl_inter = scl_inter
    header.byteorder = byteorder
    _write(path, header, data.astype(dtype, copy=False))
