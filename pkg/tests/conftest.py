import struct
from pathlib import Path

import numpy as np
import pytest

from batchsurf.manifest import write_manifest
from batchsurf.phantom import Box, HollowCylinder, PacketPhantom, PhantomSpec, Sphere, build_packet, write_raw
from batchsurf.surfacing import TriangleMesh

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def read_ply_minimal(data: bytes):
    """Independent reader for the binary PLY subset the writer emits."""
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    assert lines[0] == "ply"
    assert lines[1] == "format binary_little_endian 1.0"
    n_vert = n_face = None
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        if parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
    pos = end
    verts = []
    for _ in range(n_vert):
        verts.append(struct.unpack_from("<fff", data, pos))
        pos += 12
    faces = []
    for _ in range(n_face):
        (count,) = struct.unpack_from("<B", data, pos)
        pos += 1
        faces.append(struct.unpack_from(f"<{count}i", data, pos))
        pos += 4 * count
    assert pos == len(data)
    return np.array(verts, dtype=np.float32).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), end


def unit_cube_mesh():
    v = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
    t = [
        [0, 2, 1], [0, 3, 2],  # bottom, normal -z
        [4, 5, 6], [4, 6, 7],  # top, +z
        [0, 1, 5], [0, 5, 4],  # y = 0, -y
        [1, 2, 6], [1, 6, 5],  # x = 1, +x
        [2, 3, 7], [2, 7, 6],  # y = 1, +y
        [3, 0, 4], [3, 4, 7],  # x = 0, -x
    ]
    return TriangleMesh(np.array(v, float), np.array(t), "cube")


@pytest.fixture
def cube_mesh():
    return unit_cube_mesh()


def packet_corpus(root: Path, n_packets=2, per_packet=4, radius=4.0, spacing=(0.5, 0.5, 0.5)):
    """Write ``n_packets`` raw phantom packets plus a manifest under ``root``.

    Returns (input_dir, manifest_path, {packet_id: ground-truth boxes}).
    """
    input_dir = root / "in"
    input_dir.mkdir(parents=True, exist_ok=True)
    entries, truth = [], {}
    for p in range(n_packets):
        pid = str(8 + 2 * p)
        step = 2 * radius + 12.0
        specs = []
        for k in range(per_packet):
            shape = [Sphere(radius), Box(2 * radius, 1.5 * radius, 1.8 * radius), HollowCylinder(radius, radius / 2, 2 * radius)][k % 3]
            specs.append(PhantomSpec(shape, (radius + 4, radius + 4, radius + 6 + k * step)))
        nz = int(np.ceil((per_packet * step + 6) / spacing[2]))
        nxy = int(np.ceil((2 * radius + 8) / spacing[0]))
        phantom = PacketPhantom(
            specs, (nxy, nxy, nz), spacing, packet_id=pid, direction="L2R" if p % 2 == 0 else "R2L"
        )
        vol, entry, boxes = build_packet(phantom)
        write_raw(input_dir / f"scan{pid}", vol)
        entries.append(entry)
        truth[pid] = boxes
    manifest = root / "manifest.csv"
    manifest.write_text(write_manifest(entries))
    return input_dir, manifest, truth
