"""Loading CT volumes from DICOM slice series and from the raw test format.

Volumes are held as numpy arrays indexed ``data[z, y, x]`` (x varies fastest
in memory), in Hounsfield units. The z axis is the scanner bed axis.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DicomError,
    HeaderParse,
    InconsistentGeometry,
    MissingMagic,
    MissingRequiredTag,
    NonUniformSpacing,
    PayloadSizeMismatch,
    TooFewSlices,
    TruncatedPixelData,
    UnsupportedTransferSyntax,
)

EXPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2.1"

# (group, element) -> keyword, for the tags the loader needs.
REQUIRED_TAGS = {
    (0x0028, 0x0010): "Rows",
    (0x0028, 0x0011): "Columns",
    (0x0028, 0x0030): "PixelSpacing",
    (0x0020, 0x0032): "ImagePositionPatient",
    (0x0020, 0x0013): "InstanceNumber",
    (0x0028, 0x1053): "RescaleSlope",
    (0x0028, 0x1052): "RescaleIntercept",
    (0x0028, 0x0100): "BitsAllocated",
    (0x0028, 0x0103): "PixelRepresentation",
    (0x7FE0, 0x0010): "PixelData",
}

# Acquisition parameters kept verbatim as metadata. Never used in computation.
ACQUISITION_TAGS = {
    (0x0018, 0x0050): "SliceThickness",
    (0x0018, 0x0060): "KVP",
    (0x0018, 0x1100): "ReconstructionDiameter",
    (0x0018, 0x1150): "ExposureTime",
    (0x0018, 0x1151): "XRayTubeCurrent",
    (0x0018, 0x1210): "ConvolutionKernel",
    (0x0018, 0x9311): "SpiralPitchFactor",
}

_TRANSFER_SYNTAX = (0x0002, 0x0010)
_PIXEL_DATA = (0x7FE0, 0x0010)
_ITEM = (0xFFFE, 0xE000)
_ITEM_END = (0xFFFE, 0xE00D)
_SEQUENCE_END = (0xFFFE, 0xE0DD)
_UNDEFINED = 0xFFFFFFFF
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}


def tag_name(tag: tuple[int, int]) -> str:
    name = REQUIRED_TAGS.get(tag) or ACQUISITION_TAGS.get(tag)
    text = f"({tag[0]:04X},{tag[1]:04X})"
    return f"{name} {text}" if name else text


@dataclass(frozen=True)
class ScanMetadata:
    packet_id: str = ""
    source: str = "RawVolume"  # "DicomSeries" or "RawVolume"
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    acquisition_tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("DicomSeries", "RawVolume"):
            raise ValueError(f"unknown volume source {self.source!r}")
        if self.rescale_slope == 0:
            raise ValueError("rescale_slope must be non-zero")


@dataclass(frozen=True, eq=False)
class ScanVolume:
    """Immutable CT volume in HU.

    ``data`` has shape ``(nz, ny, nx)``; ``dims``, ``spacing`` and ``origin``
    are all given in (x, y, z) order. ``origin`` is the mm position of the
    centre of voxel (0, 0, 0).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    metadata: ScanMetadata = field(default_factory=ScanMetadata)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3-D and non-empty, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if data.flags.writeable:
            data = data.copy()
            data.setflags(write=False)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if len(origin) != 3:
            raise ValueError("origin must have three components")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def packet_id(self) -> str:
        return self.metadata.packet_id

    def same_as(self, other: "ScanVolume") -> bool:
        """Geometry, metadata and voxel-exact equality."""
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.metadata == other.metadata
            and np.array_equal(self.data, other.data)
        )

    __eq__ = same_as
    __hash__ = None


@dataclass(eq=False)
class SliceRecord:
    """One decoded axial slice. ``pixels`` holds stored values, shape (rows, cols)."""

    instance_number: int
    position_z: float
    pixel_spacing: tuple[float, float]  # (dx, dy): column spacing, row spacing
    rows: int
    cols: int
    pixels: np.ndarray
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    position_xy: tuple[float, float] = (0.0, 0.0)
    pixel_representation: int = 1
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels).reshape(self.rows, self.cols)

    def __eq__(self, other):
        if not isinstance(other, SliceRecord):
            return NotImplemented
        return (
            self.instance_number == other.instance_number
            and self.position_z == other.position_z
            and tuple(self.pixel_spacing) == tuple(other.pixel_spacing)
            and (self.rows, self.cols) == (other.rows, other.cols)
            and self.rescale_slope == other.rescale_slope
            and self.rescale_intercept == other.rescale_intercept
            and tuple(self.position_xy) == tuple(other.position_xy)
            and self.pixel_representation == other.pixel_representation
            and self.tags == other.tags
            and np.array_equal(self.pixels, other.pixels)
        )


# -- DICOM ------------------------------------------------------------------


def _iter_elements(buf, pos, end, source, explicit=True):
    """Yield ``(tag, vr, value_offset, length)`` for elements in ``buf[pos:end]``.

    Sequences of undefined length are skipped; their content is never yielded.
    Iteration stops at an item delimiter, returning control to the caller.
    """
    while pos < end:
        if pos + 8 > end:
            raise DicomError("truncated element header", source)
        group, elem = struct.unpack_from("<HH", buf, pos)
        tag = (group, elem)
        if group == 0xFFFE:
            (length,) = struct.unpack_from("<I", buf, pos + 4)
            pos += 8
            if tag in (_ITEM_END, _SEQUENCE_END):
                yield tag, None, pos, 0
                return
            # stray item outside a sequence; skip it
            if length != _UNDEFINED:
                pos += length
            continue
        vr = bytes(buf[pos + 4 : pos + 6])
        if vr in _LONG_VRS:
            if pos + 12 > end:
                raise DicomError("truncated element header", source, tag_name(tag))
            (length,) = struct.unpack_from("<I", buf, pos + 8)
            pos += 12
        else:
            (length,) = struct.unpack_from("<H", buf, pos + 6)
            pos += 8
        if length == _UNDEFINED:
            if tag == _PIXEL_DATA:
                raise UnsupportedTransferSyntax("encapsulated (compressed) PixelData", source, tag_name(tag))
            pos = _skip_undefined_sequence(buf, pos, end, source)
            continue
        if tag != _PIXEL_DATA and pos + length > end:
            raise DicomError(f"element length {length} runs past end of file", source, tag_name(tag))
        yield tag, vr, pos, length
        pos += length


def _skip_undefined_sequence(buf, pos, end, source):
    while True:
        if pos + 8 > end:
            raise DicomError("unterminated sequence", source)
        tag = struct.unpack_from("<HH", buf, pos)
        (length,) = struct.unpack_from("<I", buf, pos + 4)
        pos += 8
        if tag == _SEQUENCE_END:
            return pos
        if tag != _ITEM:
            raise DicomError("malformed sequence item", source, tag_name(tag))
        if length != _UNDEFINED:
            pos += length
            continue
        # nested dataset ends with an item delimiter
        last = pos
        for t, _, value_pos, n in _iter_elements(buf, pos, end, source):
            last = value_pos + n
            if t == _ITEM_END:
                break
        else:
            raise DicomError("unterminated sequence item", source)
        pos = last


def _text(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").strip("\x00 ")


def _numbers(raw: bytes, source, tag) -> list[float]:
    try:
        return [float(part) for part in _text(raw).split("\\")]
    except ValueError:
        raise DicomError(f"cannot parse numeric value {_text(raw)!r}", source, tag_name(tag)) from None


def parse_dicom_file(data: bytes, source: str = "<bytes>") -> SliceRecord:
    """Decode one explicit-VR little-endian, uncompressed 16-bit DICOM slice."""
    buf = memoryview(data)
    if len(buf) < 132 or bytes(buf[128:132]) != b"DICM":
        raise MissingMagic("missing 128-byte preamble and DICM magic", source)

    values: dict[tuple[int, int], bytes] = {}
    pixel_span = None
    for tag, vr, pos, length in _iter_elements(buf, 132, len(buf), source):
        if tag[0] == 0x0002 and tag == _TRANSFER_SYNTAX:
            syntax = _text(bytes(buf[pos : pos + length]))
            if syntax != EXPLICIT_VR_LITTLE_ENDIAN:
                raise UnsupportedTransferSyntax(f"transfer syntax {syntax!r}", source, tag_name(tag))
            values[tag] = syntax.encode()
        elif tag == _PIXEL_DATA:
            pixel_span = (pos, length)
            break
        elif tag in REQUIRED_TAGS or tag in ACQUISITION_TAGS:
            values[tag] = bytes(buf[pos : pos + length])

    if _TRANSFER_SYNTAX not in values:
        raise UnsupportedTransferSyntax("no transfer syntax in file meta information", source)
    for tag, name in REQUIRED_TAGS.items():
        if tag == _PIXEL_DATA:
            if pixel_span is None:
                raise MissingRequiredTag("required tag missing", source, tag_name(tag))
        elif tag not in values:
            raise MissingRequiredTag("required tag missing", source, tag_name(tag))

    def us(tag):
        raw = values[tag]
        if len(raw) < 2:
            raise DicomError("short US value", source, tag_name(tag))
        return struct.unpack_from("<H", raw)[0]

    rows, cols = us((0x0028, 0x0010)), us((0x0028, 0x0011))
    bits = us((0x0028, 0x0100))
    representation = us((0x0028, 0x0103))
    if bits != 16:
        raise UnsupportedTransferSyntax(f"BitsAllocated={bits}; only 16 is supported", source, "BitsAllocated")
    if representation not in (0, 1):
        raise DicomError(f"PixelRepresentation={representation}", source, "PixelRepresentation")

    row_spacing, col_spacing = _numbers(values[(0x0028, 0x0030)], source, (0x0028, 0x0030))[:2]
    position = _numbers(values[(0x0020, 0x0032)], source, (0x0020, 0x0032))
    if len(position) != 3:
        raise DicomError("ImagePositionPatient needs three values", source, "ImagePositionPatient")
    instance = int(_numbers(values[(0x0020, 0x0013)], source, (0x0020, 0x0013))[0])
    slope = _numbers(values[(0x0028, 0x1053)], source, (0x0028, 0x1053))[0]
    intercept = _numbers(values[(0x0028, 0x1052)], source, (0x0028, 0x1052))[0]

    pos, length = pixel_span
    needed = rows * cols * 2
    available = min(length, len(buf) - pos)
    if available < needed:
        raise TruncatedPixelData(f"{available} bytes of PixelData, need {needed}", source, tag_name(_PIXEL_DATA))
    dtype = "<i2" if representation == 1 else "<u2"
    pixels = np.frombuffer(buf[pos : pos + needed], dtype=dtype).reshape(rows, cols).copy()

    tags = {ACQUISITION_TAGS[t]: _text(v) for t, v in values.items() if t in ACQUISITION_TAGS}
    return SliceRecord(
        instance_number=instance,
        position_z=position[2],
        pixel_spacing=(col_spacing, row_spacing),
        rows=rows,
        cols=cols,
        pixels=pixels,
        rescale_slope=slope,
        rescale_intercept=intercept,
        position_xy=(position[0], position[1]),
        pixel_representation=representation,
        tags=tags,
    )


def _to_hu(stored: np.ndarray, slope: float, intercept: float) -> np.ndarray:
    # integral rescale keeps 16-bit inputs exact in float32
    exact32 = float(slope).is_integer() and float(intercept).is_integer() and abs(slope) <= 256
    dtype = np.float32 if exact32 else np.float64
    return (stored.astype(np.float64) * slope + intercept).astype(dtype)


def load_series(
    slice_files: Sequence[bytes],
    packet_id: str = "",
    names: Sequence[str] | None = None,
    spacing_tolerance: float = 0.10,
) -> ScanVolume:
    """Assemble a volume from the encoded slices of one series, in any order."""
    if len(slice_files) < 2:
        raise TooFewSlices(f"need at least 2 slices, got {len(slice_files)}")
    names = list(names) if names is not None else [f"slice[{i}]" for i in range(len(slice_files))]
    records = [parse_dicom_file(b, source=n) for b, n in zip(slice_files, names)]

    first = records[0]
    for rec, name in zip(records[1:], names[1:]):
        if (rec.rows, rec.cols) != (first.rows, first.cols):
            raise InconsistentGeometry(f"{name}: {rec.rows}x{rec.cols} differs from {first.rows}x{first.cols}")
        if not all(math.isclose(a, b, rel_tol=1e-6) for a, b in zip(rec.pixel_spacing, first.pixel_spacing)):
            raise InconsistentGeometry(f"{name}: pixel spacing {rec.pixel_spacing} differs from {first.pixel_spacing}")
        if (rec.rescale_slope, rec.rescale_intercept) != (first.rescale_slope, first.rescale_intercept):
            raise InconsistentGeometry(f"{name}: rescale parameters differ from first slice")

    records.sort(key=lambda r: (r.position_z, r.instance_number))
    z = np.array([r.position_z for r in records])
    gaps = np.diff(z)
    dz = float(np.median(gaps))
    if dz <= 0:
        raise NonUniformSpacing("median slice gap is zero (duplicate slice positions)")
    bad = np.flatnonzero(np.abs(gaps - dz) > spacing_tolerance * dz)
    if bad.size:
        i = int(bad[0])
        raise NonUniformSpacing(
            f"gap {gaps[i]:.4g} mm between sorted slices {i} and {i + 1} deviates from median {dz:.4g} mm",
            slice_indices=[(int(k), int(k) + 1) for k in bad],
        )

    stored = np.stack([r.pixels for r in records])
    data = _to_hu(stored, first.rescale_slope, first.rescale_intercept)
    dx, dy = first.pixel_spacing
    metadata = ScanMetadata(
        packet_id=packet_id,
        source="DicomSeries",
        rescale_slope=first.rescale_slope,
        rescale_intercept=first.rescale_intercept,
        acquisition_tags=dict(first.tags),
    )
    origin = (records[0].position_xy[0], records[0].position_xy[1], float(z[0]))
    return ScanVolume(data, (dx, dy, dz), origin, metadata)


def read_dicom_dir(path, packet_id: str | None = None) -> ScanVolume:
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() == ".dcm")
    return load_series(
        [p.read_bytes() for p in files],
        packet_id=path.name if packet_id is None else packet_id,
        names=[str(p) for p in files],
    )


# -- raw test format --------------------------------------------------------


def load_raw_volume(header: str, payload: bytes) -> ScanVolume:
    """Build a volume from a JSON header and an int16 little-endian payload.

    Header keys: ``dims`` [nx, ny, nz], ``spacing_mm`` [dx, dy, dz],
    ``packet_id``, optionally ``origin_mm``, ``scalar_type`` (must be
    ``"int16le"``) and ``acquisition_tags``.
    """
    try:
        meta = json.loads(header)
    except json.JSONDecodeError as exc:
        raise HeaderParse(f"header is not valid JSON: {exc}") from None
    if not isinstance(meta, dict):
        raise HeaderParse("header must be a JSON object")
    for key in ("dims", "spacing_mm", "packet_id"):
        if key not in meta:
            raise HeaderParse(f"missing header key {key!r}")
    scalar = meta.get("scalar_type", "int16le")
    if scalar != "int16le":
        raise HeaderParse(f"unsupported scalar_type {scalar!r}")
    try:
        nx, ny, nz = (int(v) for v in meta["dims"])
        spacing = tuple(float(v) for v in meta["spacing_mm"])
        origin = tuple(float(v) for v in meta.get("origin_mm", (0.0, 0.0, 0.0)))
        tags = {str(k): str(v) for k, v in dict(meta.get("acquisition_tags", {})).items()}
    except (TypeError, ValueError) as exc:
        raise HeaderParse(f"bad header value: {exc}") from None
    if min(nx, ny, nz) < 1 or len(spacing) != 3 or min(spacing) <= 0 or len(origin) != 3:
        raise HeaderParse("dims must be >= 1 and spacing_mm three positive values")

    expected = nx * ny * nz * 2
    if len(payload) != expected:
        raise PayloadSizeMismatch(f"payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<i2").reshape(nz, ny, nx).astype(np.float32)
    metadata = ScanMetadata(packet_id=str(meta["packet_id"]), source="RawVolume", acquisition_tags=tags)
    return ScanVolume(data, spacing, origin, metadata)


def encode_raw_volume(vol: ScanVolume) -> tuple[str, bytes]:
    """Inverse of :func:`load_raw_volume`. Voxel values must be integral int16."""
    data = np.asarray(vol.data)
    if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
        raise ValueError("raw format stores integral HU only")
    if data.min() < -32768 or data.max() > 32767:
        raise ValueError("HU values exceed int16 range")
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "packet_id": vol.metadata.packet_id,
        "scalar_type": "int16le",
    }
    if vol.metadata.acquisition_tags:
        header["acquisition_tags"] = dict(vol.metadata.acquisition_tags)
    return json.dumps(header, indent=2, sort_keys=True) + "\n", data.astype("<i2").tobytes()


def raw_paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix == ".rawvol":
        stem = stem.with_suffix("")
    payload = stem.with_name(stem.name + ".rawvol")
    return payload, payload.with_name(payload.name + ".json")


def read_raw_file(path) -> ScanVolume:
    payload_path, header_path = raw_paths(path)
    try:
        header = header_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise HeaderParse(f"missing header file {header_path}") from None
    return load_raw_volume(header, payload_path.read_bytes())


def write_raw_file(stem, vol: ScanVolume) -> Path:
    payload_path, header_path = raw_paths(stem)
    header, payload = encode_raw_volume(vol)
    payload_path.write_bytes(payload)
    header_path.write_text(header, encoding="utf-8")
    return payload_path
