"""Batch CT packet chopping and isosurface meshing."""

from .manifest import Direction, PacketEntry, PacketManifest, assignment_order, parse_manifest
from .segmentation import ChopBox, SegmentationParams, compute_chop_boxes, read_chop_csv, write_chop_csv
from .surfacing import (
    MeshStats,
    SurfaceParams,
    TriangleMesh,
    compute_stats,
    extract_subvolume,
    marching_cubes,
    scale_mesh,
    surface_volume,
    write_ply,
)
from .volume_io import ScanMetadata, ScanVolume, SliceRecord, load_raw_volume, load_series, parse_dicom_file

__version__ = "0.1.0"

__all__ = [
    "ChopBox",
    "Direction",
    "MeshStats",
    "PacketEntry",
    "PacketManifest",
    "ScanMetadata",
    "ScanVolume",
    "SegmentationParams",
    "SliceRecord",
    "SurfaceParams",
    "TriangleMesh",
    "assignment_order",
    "compute_chop_boxes",
    "compute_stats",
    "extract_subvolume",
    "load_raw_volume",
    "load_series",
    "marching_cubes",
    "parse_dicom_file",
    "parse_manifest",
    "read_chop_csv",
    "scale_mesh",
    "surface_volume",
    "write_chop_csv",
    "write_ply",
]
