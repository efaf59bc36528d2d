"""Isosurface extraction, mesh scaling, statistics and mesh file output."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BoxOutOfRange, EmptyMesh
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRIANGLE_TABLE
from .segmentation import ChopBox
from .volume_io import ScanVolume

PAD_HU = -10000.0

_TRI = np.full((256, 15), -1, dtype=np.int8)
for _case, _row in enumerate(TRIANGLE_TABLE):
    _TRI[_case, : len(_row)] = _row
del _case, _row

# For each cube edge: axis (0=x, 1=y, 2=z) and the (x, y, z) offset of its low corner.
_EDGE_AXIS = []
_EDGE_BASE = []
for _a, _b in EDGE_CORNERS:
    _pa, _pb = np.array(CORNER_OFFSETS[_a]), np.array(CORNER_OFFSETS[_b])
    _EDGE_AXIS.append(int(np.flatnonzero(_pa != _pb)[0]))
    _EDGE_BASE.append(tuple(int(v) for v in np.minimum(_pa, _pb)))
del _a, _b, _pa, _pb


@dataclass(frozen=True)
class SurfaceParams:
    iso_hu: float = 2500.0
    pad_closed: bool = True
    weld_epsilon: float = 1e-6

    def __post_init__(self):
        if not math.isfinite(self.iso_hu):
            raise ValueError("iso_hu must be finite")
        if self.weld_epsilon < 0:
            raise ValueError("weld_epsilon must be >= 0")


@dataclass(eq=False)
class TriangleMesh:
    """Vertices ``(V, 3)`` as (x, y, z) and triangles ``(F, 3)``, wound
    counter-clockwise seen from outside."""

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    name: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle index out of range")
            t = self.triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ValueError("degenerate triangle (repeated vertex index)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return (
            self.name == other.name
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
        )


@dataclass(frozen=True)
class MeshStats:
    n_vertices: int
    n_triangles: int
    bbox_mm: tuple
    area_mm2: float
    volume_mm3: float
    euler_characteristic: int
    watertight: bool

    def as_dict(self) -> dict:
        return {
            "n_vertices": self.n_vertices,
            "n_triangles": self.n_triangles,
            "bbox_mm": [list(self.bbox_mm[0]), list(self.bbox_mm[1])],
            "area_mm2": self.area_mm2,
            "volume_mm3": self.volume_mm3,
            "euler_characteristic": self.euler_characteristic,
            "watertight": self.watertight,
        }


def extract_subvolume(vol: ScanVolume, box: ChopBox) -> ScanVolume:
    """Copy of the boxed region; its origin keeps mm coordinates aligned with ``vol``."""
    if not box.fits(vol.dims):
        raise BoxOutOfRange(f"box {box.shape[::-1]} at ({box.x0},{box.y0},{box.z0}) exceeds dims {vol.dims}")
    data = np.array(vol.data[box.slices])
    dx, dy, dz = vol.spacing
    x0, y0, z0 = vol.origin
    origin = (x0 + box.x0 * dx, y0 + box.y0 * dy, z0 + box.z0 * dz)
    return ScanVolume(data, vol.spacing, origin, vol.metadata)


def marching_cubes(vol: ScanVolume, params: SurfaceParams | None = None) -> TriangleMesh:
    """Triangulate the ``HU == iso_hu`` surface of ``vol``.

    Vertices are in voxel-index coordinates (x, y, z); use :func:`scale_mesh`
    for millimetres. Voxels with ``HU >= iso_hu`` are inside. Each grid edge
    owns at most one vertex, so neighbouring cells share vertices exactly.
    """
    params = params or SurfaceParams()
    iso = float(params.iso_hu)
    field_ = np.asarray(vol.data)
    if params.pad_closed:
        field_ = np.pad(field_, 1, mode="constant", constant_values=PAD_HU)
        shift = -1.0
    else:
        if min(field_.shape) < 2:
            raise ValueError("marching cubes needs at least 2 voxels along each axis")
        shift = 0.0
    inside = field_ >= iso
    if not inside.any():
        raise EmptyMesh(f"no voxel reaches iso {iso:g} HU")

    nz, ny, nx = field_.shape
    below = (~inside).view(np.uint8)
    cases = np.zeros((nz - 1, ny - 1, nx - 1), dtype=np.uint8)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        cases |= below[oz : oz + nz - 1, oy : oy + ny - 1, ox : ox + nx - 1] << np.uint8(bit)
    cz, cy, cx = np.nonzero((cases != 0) & (cases != 255))
    if cz.size == 0:
        raise EmptyMesh(f"iso {iso:g} HU surface does not cross any cell")
    cell_cases = cases[cz, cy, cx]
    del cases, below

    # one vertex per crossing grid edge, numbered x-edges, then y, then z
    spacing = vol.spacing
    min_spacing = min(spacing)
    vertex_id = []
    positions = []
    snapped_keys = []
    next_id = 0
    for axis in range(3):
        step = [0, 0, 0]
        step[2 - axis] = 1
        lo = inside[: nz - step[0], : ny - step[1], : nx - step[2]]
        hi = inside[step[0] :, step[1] :, step[2] :]
        crossing = lo != hi
        ez, ey, ex = np.nonzero(crossing)
        ids = np.full(crossing.shape, -1, dtype=np.int64)
        ids[ez, ey, ex] = np.arange(next_id, next_id + ez.size)
        next_id += ez.size
        vertex_id.append(ids)

        v0 = field_[ez, ey, ex].astype(np.float64)
        v1 = field_[ez + step[0], ey + step[1], ex + step[2]].astype(np.float64)
        t = (iso - v0) / (v1 - v0)
        pos = np.stack([ex, ey, ez], axis=1).astype(np.float64)
        pos[:, axis] += t

        # weld vertices that sit (within tolerance) on a grid corner
        tol = params.weld_epsilon * min_spacing / spacing[axis]
        at_lo = t <= tol
        at_hi = (1.0 - t) <= tol
        key = np.full(ez.size, -1, dtype=np.int64)
        if at_lo.any() or at_hi.any():
            cx_ = ex + at_hi * step[2]
            cy_ = ey + at_hi * step[1]
            cz_ = ez + at_hi * step[0]
            snap = at_lo | at_hi
            key[snap] = (cz_[snap] * ny + cy_[snap]) * nx + cx_[snap]
            pos[snap] = np.stack([cx_[snap], cy_[snap], cz_[snap]], axis=1)
        snapped_keys.append(key)
        positions.append(pos)

    positions = np.concatenate(positions) if positions else np.zeros((0, 3))
    corner_key = np.concatenate(snapped_keys)

    # local cube edge -> global vertex id, for every active cell
    edge_vertex = np.empty((cz.size, 12), dtype=np.int64)
    for e in range(12):
        bx, by, bz = _EDGE_BASE[e]
        edge_vertex[:, e] = vertex_id[_EDGE_AXIS[e]][cz + bz, cy + by, cx + bx]
    del vertex_id

    table = _TRI[cell_cases].astype(np.int64)
    valid = table >= 0
    corners = np.take_along_axis(edge_vertex, np.where(valid, table, 0), axis=1)
    corners[~valid] = -1
    corners = corners.reshape(-1, 5, 3)
    # with the below-iso bit convention the table already winds outward
    triangles = corners[corners[:, :, 0] >= 0]

    if np.any(corner_key >= 0):
        # vertices snapped to the same grid corner become one vertex
        weld_key = np.where(corner_key >= 0, next_id + corner_key, np.arange(next_id))
        uniq, first, inverse = np.unique(weld_key, return_index=True, return_inverse=True)
        positions = positions[first]
        triangles = inverse[triangles]
        t = triangles
        keep = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
        triangles = triangles[keep]

    used = np.zeros(len(positions), dtype=bool)
    used[triangles.ravel()] = True
    if not used.all():
        remap = np.cumsum(used) - 1
        positions = positions[used]
        triangles = remap[triangles]
    if len(triangles) == 0:
        raise EmptyMesh(f"iso {iso:g} HU surface is degenerate")

    positions += shift
    return TriangleMesh(positions, triangles, vol.metadata.packet_id)


def scale_mesh(mesh: TriangleMesh, spacing, origin=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Map voxel-index vertices to mm: ``origin + v * spacing`` per axis."""
    verts = np.asarray(origin, dtype=np.float64) + mesh.vertices * np.asarray(spacing, dtype=np.float64)
    return TriangleMesh(verts, mesh.triangles.copy(), mesh.name)


def surface_volume(vol: ScanVolume, params: SurfaceParams | None = None, name: str | None = None) -> TriangleMesh:
    """Marching cubes followed by scaling to the volume's mm frame."""
    mesh = scale_mesh(marching_cubes(vol, params), vol.spacing, vol.origin)
    if name is not None:
        mesh.name = name
    return mesh


def signed_volume(mesh: TriangleMesh) -> float:
    tri = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def _undirected_edges(triangles: np.ndarray) -> np.ndarray:
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    return np.sort(e, axis=1)


def compute_stats(mesh: TriangleMesh) -> MeshStats:
    v, t = mesh.vertices, mesh.triangles
    if len(v):
        bbox = (tuple(float(a) for a in v.min(axis=0)), tuple(float(a) for a in v.max(axis=0)))
    else:
        bbox = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    if len(t) == 0:
        return MeshStats(len(v), 0, bbox, 0.0, 0.0, len(v), False)
    tri = v[t]
    area = float(0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1).sum())
    _, counts = np.unique(_undirected_edges(t), axis=0, return_counts=True)
    n_edges = len(counts)
    return MeshStats(
        n_vertices=len(v),
        n_triangles=len(t),
        bbox_mm=bbox,
        area_mm2=area,
        volume_mm3=abs(signed_volume(mesh)),
        euler_characteristic=int(len(v) - n_edges + len(t)),
        watertight=bool(np.all(counts == 2)),
    )


def orientation_consistent(mesh: TriangleMesh) -> bool:
    """Every directed edge occurs once and is matched by its reverse."""
    t = mesh.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    uniq = np.unique(directed, axis=0)
    if len(uniq) != len(directed):
        return False
    fwd = uniq[:, 0] * (len(mesh.vertices) + 1) + uniq[:, 1]
    rev = directed[:, 1] * (len(mesh.vertices) + 1) + directed[:, 0]
    return bool(np.isin(rev, fwd).all())


# -- PLY --------------------------------------------------------------------


def write_ply(mesh: TriangleMesh) -> bytes:
    """Binary little-endian PLY with float32 vertices and int32 face indices."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        f"element face {mesh.n_triangles}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    ).encode("ascii")
    verts = np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes()
    faces = np.empty(mesh.n_triangles, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    return header + verts + faces.tobytes()
