"""Turntable animations of a mesh as animated grayscale GIFs.

Frames are orthographic views looking along +y with z up, the mesh spinning
about the vertical axis through its centroid. Faces are flat shaded from a
fixed light, and hidden surfaces are removed with a depth buffer filled by
dense barycentric sampling of every projected triangle.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .errors import EmptyMeshRender
from .surfacing import TriangleMesh, compute_stats

LIGHT = np.array([-0.4, -1.0, 0.6]) / np.linalg.norm([-0.4, -1.0, 0.6])
AMBIENT = 0.15
_MAX_SAMPLES = 2_000_000


def _barycentric_grid(k: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    keep = i + j <= k
    i, j = i[keep], j[keep]
    return np.stack([k - i - j, i, j], axis=1).astype(np.float64) / k


def _rasterize(tri: np.ndarray, shade: np.ndarray, size: int) -> np.ndarray:
    """Depth-buffered fill. ``tri`` is (F, 3, 3) as (column, row, depth)."""
    img = np.zeros(size * size, dtype=np.uint8)
    edge = np.linalg.norm(tri[:, [1, 2, 0], :2] - tri[:, :, :2], axis=2).max(axis=1)
    level = np.maximum(1, np.ceil(edge / 0.7)).astype(np.int64)
    pix_all, depth_all, value_all = [], [], []
    for k in np.unique(level):
        weights = _barycentric_grid(int(k))
        idx = np.flatnonzero(level == k)
        chunk = max(1, _MAX_SAMPLES // len(weights))
        for start in range(0, len(idx), chunk):
            sel = idx[start : start + chunk]
            pts = np.matmul(weights, tri[sel])
            col = np.floor(pts[..., 0]).astype(np.int64)
            row = np.floor(pts[..., 1]).astype(np.int64)
            ok = (col >= 0) & (col < size) & (row >= 0) & (row < size)
            pix_all.append((row * size + col)[ok])
            depth_all.append(pts[..., 2][ok])
            value_all.append(np.broadcast_to(shade[sel][:, None], col.shape)[ok])
    if not pix_all:
        return img.reshape(size, size)
    pix = np.concatenate(pix_all)
    depth = np.concatenate(depth_all)
    value = np.concatenate(value_all)
    zbuf = np.full(size * size, np.inf)
    np.minimum.at(zbuf, pix, depth)
    nearest = depth == zbuf[pix]
    img[pix[nearest]] = value[nearest]
    return img.reshape(size, size)


def render_frames(mesh: TriangleMesh, n_frames: int = 36, size: int = 256) -> list[np.ndarray]:
    """Grayscale frames; background is 0 and every covered pixel is >= 1."""
    if mesh.n_triangles == 0:
        raise EmptyMeshRender("cannot render a mesh without triangles")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    # back faces of a closed mesh are never visible
    cull = compute_stats(mesh).watertight
    verts = mesh.vertices - mesh.vertices.mean(axis=0)
    reach = max(np.hypot(verts[:, 0], verts[:, 1]).max(), np.abs(verts[:, 2]).max(), 1e-12)
    scale = (size / 2 - 2) / reach
    frames = []
    for k in range(n_frames):
        theta = 2 * np.pi * k / n_frames
        c, s = np.cos(theta), np.sin(theta)
        x = c * verts[:, 0] - s * verts[:, 1]
        y = s * verts[:, 0] + c * verts[:, 1]
        z = verts[:, 2]
        rotated = np.stack([x, y, z], axis=1)[mesh.triangles]
        normal = np.cross(rotated[:, 1] - rotated[:, 0], rotated[:, 2] - rotated[:, 0])
        length = np.linalg.norm(normal, axis=1)
        normal = normal / np.where(length > 0, length, 1.0)[:, None]
        lambert = np.clip(normal @ LIGHT, 0.0, 1.0)
        shade = (1 + np.rint(254 * (AMBIENT + (1 - AMBIENT) * lambert))).astype(np.uint8)
        screen = np.stack(
            [size / 2 + scale * rotated[..., 0], size / 2 - scale * rotated[..., 2], rotated[..., 1]],
            axis=2,
        )
        if cull:
            front = normal[:, 1] <= 0
            screen, shade = screen[front], shade[front]
        frames.append(_rasterize(screen, shade, size))
    return frames


def encode_gif(frames, frame_ms: int = 80) -> bytes:
    """Animated GIF89a with a 256-level gray palette, looping forever."""
    palette = [v for g in range(256) for v in (g, g, g)]
    images = []
    for f in frames:
        im = Image.fromarray(np.asarray(f, dtype=np.uint8), mode="P")
        im.putpalette(palette)
        images.append(im)
    buf = io.BytesIO()
    images[0].save(
        buf,
        format="GIF",
        save_all=True,
        append_images=images[1:],
        duration=frame_ms,
        loop=0,
        optimize=False,
        disposal=1,
    )
    return buf.getvalue()


def render_turntable(mesh: TriangleMesh, n_frames: int = 36, size: int = 256) -> bytes:
    return encode_gif(render_frames(mesh, n_frames, size))
