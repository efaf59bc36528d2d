"""Synthetic CT volumes with exactly known geometry, for testing.

Voxels are point-sampled at their centres: a voxel takes ``inside_hu`` when
its centre lies in the solid and ``outside_hu`` otherwise. Hollow cylinders
have their axis along z, like long-bone shafts laid along the scanner bed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import OverlapViolation, ShapeOutOfBounds
from .manifest import Direction, PacketEntry, assignment_order
from .segmentation import ChopBox
from .volume_io import (
    ACQUISITION_TAGS,
    EXPLICIT_VR_LITTLE_ENDIAN,
    ScanMetadata,
    ScanVolume,
    SliceRecord,
    encode_raw_volume,
    write_raw_file,
)

CT_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.2"


@dataclass(frozen=True)
class Sphere:
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def half_extent(self):
        return (self.radius,) * 3

    def contains(self, dx, dy, dz):
        return dx * dx + dy * dy + dz * dz <= self.radius**2


@dataclass(frozen=True)
class HollowCylinder:
    r_outer: float
    r_inner: float
    length: float

    def __post_init__(self):
        if not (0 <= self.r_inner < self.r_outer) or self.length <= 0:
            raise ValueError("need 0 <= r_inner < r_outer and length > 0")

    def half_extent(self):
        return (self.r_outer, self.r_outer, self.length / 2)

    def contains(self, dx, dy, dz):
        rho2 = dx * dx + dy * dy
        along = np.abs(dz) <= self.length / 2
        return (rho2 <= self.r_outer**2) & (rho2 > self.r_inner**2) & along


@dataclass(frozen=True)
class Box:
    wx: float
    wy: float
    wz: float

    def __post_init__(self):
        if min(self.wx, self.wy, self.wz) <= 0:
            raise ValueError("box widths must be positive")

    def half_extent(self):
        return (self.wx / 2, self.wy / 2, self.wz / 2)

    def contains(self, dx, dy, dz):
        # half-open so that a box one voxel wide covers exactly one voxel centre
        hx, hy, hz = self.half_extent()
        return (-hx <= dx) & (dx < hx) & (-hy <= dy) & (dy < hy) & (-hz <= dz) & (dz < hz)


Shape = Union[Sphere, HollowCylinder, Box]


@dataclass(frozen=True)
class PhantomSpec:
    shape: Shape
    center: tuple[float, float, float]
    inside_hu: float = 3000.0
    outside_hu: float = 0.0

    def __post_init__(self):
        if not self.inside_hu > self.outside_hu:
            raise ValueError("inside_hu must exceed outside_hu")

    def z_extent(self) -> tuple[float, float]:
        h = self.shape.half_extent()[2]
        return self.center[2] - h, self.center[2] + h


def _axes(dims, spacing, origin):
    return [origin[a] + np.arange(dims[a]) * spacing[a] for a in range(3)]


def inside_mask(spec: PhantomSpec, dims, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Boolean ``(nz, ny, nx)`` mask of voxel centres inside the solid."""
    dims = tuple(int(d) for d in dims)
    for a in range(3):
        lo_edge = origin[a] - spacing[a] / 2
        hi_edge = origin[a] + (dims[a] - 0.5) * spacing[a]
        h = spec.shape.half_extent()[a]
        if spec.center[a] - h < lo_edge or spec.center[a] + h > hi_edge:
            raise ShapeOutOfBounds(
                f"shape spans [{spec.center[a] - h:g}, {spec.center[a] + h:g}] mm on axis {'xyz'[a]}, "
                f"volume covers [{lo_edge:g}, {hi_edge:g}] mm"
            )
    mask = np.zeros(dims[::-1], dtype=bool)
    # only evaluate the index range the shape's bounding box can touch
    window = []
    for a in range(3):
        h = spec.shape.half_extent()[a]
        lo = max(int(math.floor((spec.center[a] - h - origin[a]) / spacing[a])) - 1, 0)
        hi = min(int(math.ceil((spec.center[a] + h - origin[a]) / spacing[a])) + 2, dims[a])
        window.append((lo, hi))
    (x0, x1), (y0, y1), (z0, z1) = window
    xs = origin[0] + np.arange(x0, x1) * spacing[0] - spec.center[0]
    ys = origin[1] + np.arange(y0, y1) * spacing[1] - spec.center[1]
    zs = origin[2] + np.arange(z0, z1) * spacing[2] - spec.center[2]
    mask[z0:z1, y0:y1, x0:x1] = spec.shape.contains(xs[None, None, :], ys[None, :, None], zs[:, None, None])
    return mask


def rasterize(spec: PhantomSpec, dims, spacing, origin=(0.0, 0.0, 0.0), packet_id: str = "") -> ScanVolume:
    mask = inside_mask(spec, dims, spacing, origin)
    data = np.where(mask, np.float32(spec.inside_hu), np.float32(spec.outside_hu)).astype(np.float32)
    return ScanVolume(data, spacing, origin, ScanMetadata(packet_id=packet_id))


def tight_box(mask: np.ndarray):
    """Half-open ``(z0, z1, y0, y1, x0, x1)`` bounds of the set voxels."""
    bounds = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(mask.any(axis=other))
        if idx.size == 0:
            return None
        bounds += [int(idx[0]), int(idx[-1]) + 1]
    return tuple(bounds)


@dataclass
class PacketPhantom:
    specs: Sequence[PhantomSpec]
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    packet_id: str = "P1"
    direction: Direction = Direction.L2R
    specimen_ids: Sequence[str] | None = None
    clearance_mm: float = 0.0
    background_hu: float = 0.0
    ground_truth_boxes: list = field(default_factory=list)


def build_packet(phantom: PacketPhantom) -> tuple[ScanVolume, PacketEntry, list[ChopBox]]:
    """Render all shapes into one packet volume.

    Returns the volume, a manifest entry and one tight ground-truth box per
    shape in ascending z, bound to specimen ids the way the manifest would.
    """
    specs = sorted(phantom.specs, key=lambda s: s.center[2])
    for a, b in zip(specs, specs[1:]):
        gap = b.z_extent()[0] - a.z_extent()[1]
        if gap < phantom.clearance_mm or gap <= 0:
            raise OverlapViolation(
                f"shapes at z={a.center[2]:g} and z={b.center[2]:g} mm are {gap:g} mm apart "
                f"(clearance {phantom.clearance_mm:g} mm)"
            )
    ids = list(phantom.specimen_ids) if phantom.specimen_ids is not None else [
        f"{phantom.packet_id}-F{k + 1}" for k in range(len(specs))
    ]
    if len(ids) != len(specs):
        raise ValueError("specimen_ids must match the number of shapes")
    entry = PacketEntry(phantom.packet_id, Direction(phantom.direction), tuple(ids))

    data = np.full(tuple(phantom.dims)[::-1], np.float32(phantom.background_hu), dtype=np.float32)
    masks = []
    for spec in specs:
        mask = inside_mask(spec, phantom.dims, phantom.spacing, phantom.origin)
        data[mask] = spec.inside_hu
        masks.append(mask)
    order = assignment_order(entry)
    boxes = [ChopBox(phantom.packet_id, k, order[k], *tight_box(m)) for k, m in enumerate(masks)]
    phantom.ground_truth_boxes = boxes
    vol = ScanVolume(data, phantom.spacing, phantom.origin, ScanMetadata(packet_id=phantom.packet_id))
    return vol, entry, boxes


# -- export -----------------------------------------------------------------


def export_raw(vol: ScanVolume) -> tuple[str, bytes]:
    """Header text and payload in the raw test format."""
    return encode_raw_volume(vol)


def _pad_even(raw: bytes, fill: bytes) -> bytes:
    return raw + fill if len(raw) % 2 else raw


def _element(group, elem, vr, value: bytes) -> bytes:
    if vr in ("OB", "OW", "UN", "UT", "SQ"):
        return struct.pack("<HH2s2xI", group, elem, vr.encode(), len(value)) + value
    return struct.pack("<HH2sH", group, elem, vr.encode(), len(value)) + value


def _ds(*values) -> bytes:
    return _pad_even("\\".join(repr(float(v)) for v in values).encode("ascii"), b" ")


def _text(value, fill=b" ") -> bytes:
    return _pad_even(str(value).encode("ascii"), fill)


def write_dicom_slice(rec: SliceRecord, sop_instance: str | None = None) -> bytes:
    """Encode a slice in the explicit-VR little-endian subset the loader reads."""
    sop_instance = sop_instance or f"2.25.{rec.instance_number + 1}"
    meta_body = b"".join(
        [
            _element(0x0002, 0x0001, "OB", b"\x00\x01"),
            _element(0x0002, 0x0002, "UI", _text(CT_IMAGE_STORAGE, b"\x00")),
            _element(0x0002, 0x0003, "UI", _text(sop_instance, b"\x00")),
            _element(0x0002, 0x0010, "UI", _text(EXPLICIT_VR_LITTLE_ENDIAN, b"\x00")),
        ]
    )
    meta = _element(0x0002, 0x0000, "UL", struct.pack("<I", len(meta_body))) + meta_body

    names = {v: k for k, v in ACQUISITION_TAGS.items()}
    elements = [
        ((0x0008, 0x0016), "UI", _text(CT_IMAGE_STORAGE, b"\x00")),
        ((0x0008, 0x0018), "UI", _text(sop_instance, b"\x00")),
        ((0x0008, 0x0060), "CS", _text("CT")),
        ((0x0020, 0x0013), "IS", _text(int(rec.instance_number))),
        ((0x0020, 0x0032), "DS", _ds(rec.position_xy[0], rec.position_xy[1], rec.position_z)),
        ((0x0028, 0x0002), "US", struct.pack("<H", 1)),
        ((0x0028, 0x0004), "CS", _text("MONOCHROME2")),
        ((0x0028, 0x0010), "US", struct.pack("<H", rec.rows)),
        ((0x0028, 0x0011), "US", struct.pack("<H", rec.cols)),
        ((0x0028, 0x0030), "DS", _ds(rec.pixel_spacing[1], rec.pixel_spacing[0])),
        ((0x0028, 0x0100), "US", struct.pack("<H", 16)),
        ((0x0028, 0x0101), "US", struct.pack("<H", 16)),
        ((0x0028, 0x0102), "US", struct.pack("<H", 15)),
        ((0x0028, 0x0103), "US", struct.pack("<H", rec.pixel_representation)),
        ((0x0028, 0x1052), "DS", _ds(rec.rescale_intercept)),
        ((0x0028, 0x1053), "DS", _ds(rec.rescale_slope)),
    ]
    for name, value in rec.tags.items():
        tag = names.get(name)
        if tag is not None:
            vr = "LO" if name == "ConvolutionKernel" else "DS"
            elements.append((tag, vr, _text(value)))
    dtype = "<i2" if rec.pixel_representation == 1 else "<u2"
    pixels = np.asarray(rec.pixels)
    if pixels.min(initial=0) < np.iinfo(dtype).min or pixels.max(initial=0) > np.iinfo(dtype).max:
        raise ValueError("stored pixel values do not fit 16 bits")
    elements.append(((0x7FE0, 0x0010), "OW", pixels.astype(dtype).tobytes()))
    elements.sort(key=lambda e: e[0])
    body = b"".join(_element(g, e, vr, value) for (g, e), vr, value in elements)
    return bytes(128) + b"DICM" + meta + body


def slice_records(vol: ScanVolume, intercept: float = -1024.0) -> list[SliceRecord]:
    """Split a volume into slices stored as ``HU - intercept`` (slope 1, signed)."""
    data = np.asarray(vol.data)
    stored = data.astype(np.float64) - intercept
    if not np.array_equal(stored, np.round(stored)):
        raise ValueError("DICOM export needs integral HU values")
    if stored.min() < -32768 or stored.max() > 32767:
        raise ValueError("HU range does not fit signed 16-bit storage")
    stored = stored.astype(np.int16)
    dx, dy, dz = vol.spacing
    x0, y0, z0 = vol.origin
    nx, ny, nz = vol.dims
    return [
        SliceRecord(
            instance_number=k + 1,
            position_z=z0 + k * dz,
            pixel_spacing=(dx, dy),
            rows=ny,
            cols=nx,
            pixels=stored[k],
            rescale_slope=1.0,
            rescale_intercept=float(intercept),
            position_xy=(x0, y0),
            pixel_representation=1,
            tags=dict(vol.metadata.acquisition_tags),
        )
        for k in range(nz)
    ]


def export_dicom_series(vol: ScanVolume, intercept: float = -1024.0) -> list[bytes]:
    """One encoded DICOM file per z slice, in slice order."""
    return [write_dicom_slice(rec) for rec in slice_records(vol, intercept)]


def write_dicom_dir(directory, vol: ScanVolume, intercept: float = -1024.0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, blob in enumerate(export_dicom_series(vol, intercept)):
        path = directory / f"slice_{k:04d}.dcm"
        path.write_bytes(blob)
        paths.append(path)
    return paths


def write_raw(stem, vol: ScanVolume) -> Path:
    return write_raw_file(stem, vol)
