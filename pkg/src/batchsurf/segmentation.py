"""Chopping a packet scan into one bounding box per fragment.

Fragments are laid end to end along the bed, so they are separated along z.
The volume is thresholded, the occupied voxels are counted per slice, and runs
of occupied slices become fragments. The x/y extent of each box is the tight
rectangle of the fragment's voxels, and every bound is padded.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import BadBounds, BadHeader, OverlappingZ
from .manifest import PacketEntry, assignment_order
from .volume_io import ScanVolume

UNASSIGNED = "?"
CHOP_HEADER = ["packet", "frag_index", "specimen_id", "z0", "z1", "y0", "y1", "x0", "x1"]
PREVIEW_WINDOW_HU = (-200.0, 2500.0)


@dataclass(frozen=True)
class SegmentationParams:
    threshold_hu: float = 2000.0
    padding_vox: int = 5
    min_component_vox: int = 50
    close_gap_vox: int = 3

    def __post_init__(self):
        if not math.isfinite(self.threshold_hu):
            raise ValueError("threshold_hu must be finite")
        for name in ("padding_vox", "min_component_vox", "close_gap_vox"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True, order=True)
class ChopBox:
    """Half-open voxel-index box ``[z0, z1) x [y0, y1) x [x0, x1)``."""

    packet_id: str
    frag_index: int
    specimen_id: str
    z0: int
    z1: int
    y0: int
    y1: int
    x0: int
    x1: int

    def __post_init__(self):
        for axis in "zyx":
            lo, hi = getattr(self, axis + "0"), getattr(self, axis + "1")
            if lo < 0 or lo >= hi:
                raise BadBounds(f"{axis} bounds [{lo}, {hi}) are empty or negative")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        """Index into a ``data[z, y, x]`` array."""
        return slice(self.z0, self.z1), slice(self.y0, self.y1), slice(self.x0, self.x1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.z1 - self.z0, self.y1 - self.y0, self.x1 - self.x0

    def fits(self, dims) -> bool:
        nx, ny, nz = dims
        return self.z1 <= nz and self.y1 <= ny and self.x1 <= nx


@dataclass(frozen=True)
class CountMismatch:
    """More or fewer fragments were found than the manifest lists."""

    packet_id: str
    found: int
    expected: int

    def __str__(self):
        return (
            f"CountMismatch: packet {self.packet_id} has {self.found} components, "
            f"manifest lists {self.expected}"
        )


def threshold_volume(vol: ScanVolume, threshold_hu: float) -> np.ndarray:
    """Boolean ``(nz, ny, nx)`` mask of voxels at or above the threshold."""
    return np.asarray(vol.data) >= threshold_hu


def project_occupancy(binary: np.ndarray) -> np.ndarray:
    """Number of set voxels in every z slice."""
    return np.count_nonzero(binary.reshape(binary.shape[0], -1), axis=1)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate(([False], mask, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def find_z_components(profile, params: SegmentationParams | None = None) -> list[tuple[int, int]]:
    """Half-open z intervals of occupied slice runs, ascending.

    Interior gaps of at most ``close_gap_vox`` empty slices are bridged, and
    runs holding fewer than ``min_component_vox`` voxels are dropped.
    """
    params = params or SegmentationParams()
    profile = np.asarray(profile)
    occupied = profile > 0
    closed = occupied.copy()
    gaps = _runs(~occupied)
    for lo, hi in gaps:
        if lo > 0 and hi < len(profile) and hi - lo <= params.close_gap_vox:
            closed[lo:hi] = True
    out = []
    for lo, hi in _runs(closed):
        if profile[lo:hi].sum() >= params.min_component_vox:
            out.append((lo, hi))
    return out


def compute_chop_boxes(
    vol: ScanVolume,
    entry: PacketEntry,
    params: SegmentationParams | None = None,
    binary: np.ndarray | None = None,
) -> tuple[list[ChopBox], list[CountMismatch]]:
    """Detect fragments and bind them to the entry's specimens.

    Returns the boxes (ascending z) and any diagnostics. When the number of
    fragments does not match the manifest every box gets specimen id ``"?"``.
    """
    params = params or SegmentationParams()
    if vol.packet_id and vol.packet_id != entry.packet_id:
        raise ValueError(f"volume is packet {vol.packet_id!r}, manifest entry is {entry.packet_id!r}")
    if binary is None:
        binary = threshold_volume(vol, params.threshold_hu)
    intervals = find_z_components(project_occupancy(binary), params)

    nx, ny, nz = vol.dims
    pad = params.padding_vox
    z_bounds = [[max(lo - pad, 0), min(hi + pad, nz)] for lo, hi in intervals]
    # padding must not make neighbouring boxes overlap; split the gap instead
    for i in range(len(intervals) - 1):
        if z_bounds[i][1] > z_bounds[i + 1][0]:
            mid = (intervals[i][1] + intervals[i + 1][0]) // 2
            z_bounds[i][1] = mid
            z_bounds[i + 1][0] = mid

    order = assignment_order(entry)
    diagnostics = []
    if len(intervals) != len(order):
        diagnostics.append(CountMismatch(entry.packet_id, len(intervals), len(order)))
        ids = [UNASSIGNED] * len(intervals)
    else:
        ids = order

    boxes = []
    for k, ((lo, hi), (bz0, bz1)) in enumerate(zip(intervals, z_bounds)):
        footprint = binary[lo:hi].any(axis=0)
        ys = np.flatnonzero(footprint.any(axis=1))
        xs = np.flatnonzero(footprint.any(axis=0))
        boxes.append(
            ChopBox(
                entry.packet_id,
                k,
                ids[k],
                bz0,
                bz1,
                max(int(ys[0]) - pad, 0),
                min(int(ys[-1]) + 1 + pad, ny),
                max(int(xs[0]) - pad, 0),
                min(int(xs[-1]) + 1 + pad, nx),
            )
        )
    return boxes, diagnostics


# -- ChopLocations.csv ------------------------------------------------------


def natural_key(text: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", text)]


def _sort_key(box: ChopBox):
    return natural_key(box.packet_id), box.frag_index


def write_chop_csv(boxes) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CHOP_HEADER)
    for b in sorted(boxes, key=_sort_key):
        writer.writerow([b.packet_id, b.frag_index, b.specimen_id, b.z0, b.z1, b.y0, b.y1, b.x0, b.x1])
    return out.getvalue()


@dataclass
class ChopTable:
    """Boxes read from a possibly hand-edited CSV, with per-row problems."""

    boxes: list[ChopBox] = field(default_factory=list)
    problems: list[Exception] = field(default_factory=list)
    rows: dict = field(default_factory=dict)  # box -> CSV row number

    def packet_ids(self) -> list[str]:
        return sorted({b.packet_id for b in self.boxes}, key=natural_key)

    def for_packet(self, packet_id: str) -> list[ChopBox]:
        return sorted((b for b in self.boxes if b.packet_id == packet_id), key=lambda b: b.z0)


def parse_chop_rows(text: str) -> ChopTable:
    """Lenient reader: invalid rows are reported in ``problems`` and skipped."""
    rows = list(csv.reader(io.StringIO(text.lstrip("\ufeff"))))
    if not rows or [c.strip() for c in rows[0]] != CHOP_HEADER:
        raise BadHeader("ChopLocations header must be " + ",".join(CHOP_HEADER), row=1)
    table = ChopTable()
    seen = {}
    for row_no, raw in enumerate(rows[1:], start=2):
        cells = [c.strip() for c in raw]
        if not any(cells):
            continue
        if len(cells) != len(CHOP_HEADER):
            table.problems.append(BadBounds(f"expected {len(CHOP_HEADER)} cells, got {len(cells)}", row=row_no))
            continue
        packet, index, specimen = cells[:3]
        try:
            numbers = [int(c) for c in cells[3:]]
            box = ChopBox(packet, int(index), specimen, *numbers)
        except ValueError as exc:
            table.problems.append(BadBounds(f"packet {packet}: {exc}", row=row_no))
            continue
        except BadBounds as exc:
            table.problems.append(BadBounds(f"packet {packet}: {exc}", row=row_no))
            continue
        if not packet or not specimen:
            table.problems.append(BadBounds("packet and specimen_id must be non-empty", row=row_no))
            continue
        key = (packet, box.frag_index)
        if key in seen:
            table.problems.append(
                BadBounds(f"packet {packet}: frag_index {box.frag_index} repeats row {seen[key]}", row=row_no)
            )
            continue
        seen[key] = row_no
        table.boxes.append(box)
        table.rows[box] = row_no

    overlapping = set()
    for packet in table.packet_ids():
        group = table.for_packet(packet)
        for i, a in enumerate(group):
            for b in group[i + 1 :]:
                if b.z0 >= a.z1:
                    break
                pair = sorted((table.rows[a], table.rows[b]))
                table.problems.append(
                    OverlappingZ(f"packet {packet}: z [{a.z0},{a.z1}) overlaps [{b.z0},{b.z1})", rows=pair)
                )
                overlapping.update((a, b))
    if overlapping:
        table.boxes = [b for b in table.boxes if b not in overlapping]
    table.problems.sort(key=lambda e: (e.row or 0))
    return table


def read_chop_csv(text: str) -> list[ChopBox]:
    """Strict reader: raises on the first invalid row."""
    table = parse_chop_rows(text)
    if table.problems:
        raise table.problems[0]
    return sorted(table.boxes, key=_sort_key)


def check_against_dims(box: ChopBox, dims) -> None:
    if not box.fits(dims):
        nx, ny, nz = dims
        raise BadBounds(
            f"packet {box.packet_id} fragment {box.frag_index}: box exceeds volume dims "
            f"(nx={nx}, ny={ny}, nz={nz})"
        )


# -- previews ---------------------------------------------------------------


def _window(mip: np.ndarray) -> np.ndarray:
    lo, hi = PREVIEW_WINDOW_HU
    scaled = (mip.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return np.rint(np.clip(scaled, 0, 255)).astype(np.uint8)


def _outline(img: np.ndarray, r0, r1, c0, c1) -> None:
    r1 = min(r1, img.shape[0]) - 1
    c1 = min(c1, img.shape[1]) - 1
    img[r0, c0 : c1 + 1] = 255
    img[r1, c0 : c1 + 1] = 255
    img[r0 : r1 + 1, c0] = 255
    img[r0 : r1 + 1, c1] = 255


def render_preview(vol: ScanVolume, boxes=()) -> tuple[np.ndarray, np.ndarray]:
    """Maximum-intensity projections with box outlines.

    Returns ``(xz, yz)`` uint8 images. In both, the column index is the slice
    index z so the bed runs left to right; rows are x (for ``xz``) or y (for
    ``yz``). A box covers rows ``[x0, x1)`` / ``[y0, y1)`` and columns
    ``[z0, z1)``; its outline is drawn on the border pixels of that range.
    """
    data = np.asarray(vol.data)
    xz = _window(data.max(axis=1).T).copy()
    yz = _window(data.max(axis=2).T).copy()
    for b in boxes:
        _outline(xz, b.x0, b.x1, b.z0, b.z1)
        _outline(yz, b.y0, b.y1, b.z0, b.z1)
    return xz, yz


def encode_pgm(img: np.ndarray) -> bytes:
    """Binary 8-bit PGM (P5)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError("not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
