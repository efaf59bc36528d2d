"""Matplotlib summary figures written next to the CSV outputs.

Figures are drawn on bare ``Figure`` objects with the Agg canvas, so worker
threads never touch pyplot's global state. PNG metadata is stripped to keep
files byte-stable between runs.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_PNG_METADATA = {"Software": None}


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_METADATA)


def plot_z_profile(path, profile, boxes=(), dz: float = 1.0, threshold_hu: float | None = None, title: str = ""):
    """Per-slice occupied-voxel counts along the bed, with chop intervals shaded."""
    profile = np.asarray(profile)
    z_mm = np.arange(len(profile)) * dz
    fig = Figure(figsize=(8, 3))
    ax = fig.add_subplot(1, 1, 1)
    ax.fill_between(z_mm, profile, step="mid", color="0.35", linewidth=0)
    for b in boxes:
        ax.axvspan((b.z0 - 0.5) * dz, (b.z1 - 0.5) * dz, color="tab:orange", alpha=0.25, linewidth=0)
        ax.text(
            (b.z0 + b.z1 - 1) * dz / 2,
            1.0,
            b.specimen_id,
            transform=ax.get_xaxis_transform(),
            ha="center",
            va="bottom",
            fontsize=7,
        )
    ax.set_xlim(-0.5 * dz, (len(profile) - 0.5) * dz)
    ax.set_xlabel("bed position z (mm from first slice)")
    label = "voxels per slice"
    if threshold_hu is not None:
        label += f" (HU >= {threshold_hu:g})"
    ax.set_ylabel(label)
    if title:
        ax.set_title(title, fontsize=9, pad=14)
    fig.tight_layout()
    _save(fig, path)


def plot_mesh_stats(path, records):
    """Bar chart of mesh volume and area per surfaced fragment.

    ``records`` is a sequence of ``(specimen_id, MeshStats)``; bars for meshes
    that are not watertight are hatched.
    """
    records = list(records)
    fig = Figure(figsize=(max(4, 0.5 * len(records) + 2), 4.5))
    ax_v = fig.add_subplot(2, 1, 1)
    ax_a = fig.add_subplot(2, 1, 2, sharex=ax_v)
    x = np.arange(len(records))
    names = [r[0] for r in records]
    vols = [r[1].volume_mm3 for r in records]
    areas = [r[1].area_mm2 for r in records]
    hatch = ["" if r[1].watertight else "//" for r in records]
    for ax, values, label in ((ax_v, vols, "volume (mm³)"), (ax_a, areas, "area (mm²)")):
        bars = ax.bar(x, values, color="0.5")
        for bar, h in zip(bars, hatch):
            bar.set_hatch(h)
        ax.set_ylabel(label)
    ax_a.set_xticks(x)
    ax_a.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    fig.tight_layout()
    _save(fig, path)
