"""The three batch stages: firstpass, refine and surface.

``firstpass`` detects fragments in every packet scan and writes
``ChopLocations.csv`` plus previews. A person may edit that CSV; ``refine``
re-validates it and redraws the previews. ``surface`` turns every box into a
mesh file. Every stage writes ``run_report_<stage>.json``.

Input directory layout: one ``<name>.rawvol`` (+ ``.rawvol.json`` header) per
packet, or one sub-directory of ``*.dcm`` slices per packet, named after the
packet id.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

from . import figures
from .errors import BadBounds, BadValue, BatchSurfError, ConfigError, DuplicateOutputName, UnknownKey
from .manifest import PacketManifest, read_manifest
from .render import render_turntable
from .segmentation import (
    UNASSIGNED,
    ChopBox,
    SegmentationParams,
    check_against_dims,
    compute_chop_boxes,
    encode_pgm,
    natural_key,
    parse_chop_rows,
    project_occupancy,
    render_preview,
    threshold_volume,
    write_chop_csv,
)
from .surfacing import MeshStats, SurfaceParams, compute_stats, extract_subvolume, surface_volume, write_ply
from .volume_io import ScanVolume, read_dicom_dir, read_raw_file

log = logging.getLogger("batchsurf")

CHOP_FILE = "ChopLocations.csv"
MESH_STATS_FILE = "MeshStats.csv"
ISO_OVERRIDE_PREFIX = "iso_override."


class FatalError(BatchSurfError):
    """The stage cannot start; nothing further is attempted."""


# -- configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    input_dir: Path | None = None
    output_dir: Path | None = None
    manifest_path: Path | None = None
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    surface: SurfaceParams = field(default_factory=SurfaceParams)
    per_fragment_iso_overrides: dict = field(default_factory=dict)
    parallelism: int = 1
    emit_gifs: bool = False
    gif_frames: int = 36
    emit_figures: bool = True

    def require(self, *names: str) -> None:
        for name in names:
            if not getattr(self, name):
                raise FatalError(f"{name} is not set (config file or command-line flag)")
        if self.parallelism < 1:
            raise FatalError("parallelism must be >= 1")

    def iso_for(self, specimen_id: str) -> float:
        return float(self.per_fragment_iso_overrides.get(specimen_id, self.surface.iso_hu))


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _finite(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("must be finite")
    return value


def _count(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError("must be >= 0")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError("must be >= 1")
    return value


# key -> (section, field, converter); section None means a RunConfig field
_KEYS: dict[str, tuple[str | None, str, Callable]] = {
    "input_dir": (None, "input_dir", str),
    "output_dir": (None, "output_dir", str),
    "manifest_path": (None, "manifest_path", str),
    "threshold_hu": ("segmentation", "threshold_hu", _finite),
    "padding_vox": ("segmentation", "padding_vox", _count),
    "min_component_vox": ("segmentation", "min_component_vox", _count),
    "close_gap_vox": ("segmentation", "close_gap_vox", _count),
    "iso_hu": ("surface", "iso_hu", _finite),
    "pad_closed": ("surface", "pad_closed", _bool),
    "weld_epsilon": ("surface", "weld_epsilon", _finite),
    "parallelism": (None, "parallelism", _positive),
    "emit_gifs": (None, "emit_gifs", _bool),
    "gif_frames": (None, "gif_frames", _positive),
    "emit_figures": (None, "emit_figures", _bool),
}


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    """Parse ``key = value`` lines. ``#`` starts a comment; relative paths
    are taken relative to ``base_dir``."""
    base_dir = Path(base_dir)
    top: dict = {}
    sections: dict = {"segmentation": {}, "surface": {}}
    overrides: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadValue(f"expected 'key = value', got {raw.strip()!r}", line=line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith(ISO_OVERRIDE_PREFIX) and len(key) > len(ISO_OVERRIDE_PREFIX):
            try:
                overrides[key[len(ISO_OVERRIDE_PREFIX) :]] = _finite(value)
            except ValueError as exc:
                raise BadValue(f"{key}: {exc}", line=line_no) from None
            continue
        if key not in _KEYS:
            raise UnknownKey(f"unknown key {key!r}", line=line_no)
        section, name, convert = _KEYS[key]
        try:
            converted = convert(value)
        except ValueError as exc:
            raise BadValue(f"{key}: {exc}", line=line_no) from None
        if section is None:
            if name.endswith(("_dir", "_path")):
                converted = base_dir / converted if converted else None
            top[name] = converted
        else:
            sections[section][name] = converted
    try:
        seg = SegmentationParams(**sections["segmentation"])
        surf = SurfaceParams(**sections["surface"])
    except ValueError as exc:
        raise BadValue(str(exc)) from None
    return RunConfig(segmentation=seg, surface=surf, per_fragment_iso_overrides=overrides, **top)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent)


def with_overrides(config: RunConfig, **kwargs) -> RunConfig:
    """Apply command-line style overrides; ``None`` values are ignored."""
    kwargs = {k: v for k, v in kwargs.items() if v is not None}
    seg = {k: kwargs.pop(k) for k in [f.name for f in fields(SegmentationParams)] if k in kwargs}
    surf = {k: kwargs.pop(k) for k in [f.name for f in fields(SurfaceParams)] if k in kwargs}
    for key in ("input_dir", "output_dir", "manifest_path"):
        if key in kwargs:
            kwargs[key] = Path(kwargs[key])
    return replace(
        config,
        segmentation=replace(config.segmentation, **seg),
        surface=replace(config.surface, **surf),
        **kwargs,
    )


# -- reports ----------------------------------------------------------------


@dataclass
class PacketRecord:
    packet_id: str
    status: str  # segmented | mismatch | refined | surfaced | failed
    n_components: int | None = None
    diagnostics: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


@dataclass
class FragmentRecord:
    packet_id: str
    frag_index: int | None
    specimen_id: str
    status: str  # ok | failed
    iso_hu: float | None = None
    error: str | None = None
    stats: dict | None = None
    outputs: list = field(default_factory=list)
    wall_time_s: float = 0.0


@dataclass
class RunReport:
    stage: str
    packets: list = field(default_factory=list)
    fragments: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    notes: list = field(default_factory=list)  # informational, never affects the exit code
    elapsed_s: float = 0.0

    @property
    def failures(self) -> int:
        return sum(p.status == "failed" for p in self.packets) + sum(f.status == "failed" for f in self.fragments)

    @property
    def fragments_surfaced(self) -> int:
        return sum(f.status == "ok" for f in self.fragments)

    @property
    def warning_count(self) -> int:
        return len(self.warnings) + sum(len(p.diagnostics) for p in self.packets)

    def totals(self) -> dict:
        return {
            "packets": len(self.packets),
            "packets_failed": sum(p.status == "failed" for p in self.packets),
            "fragments_surfaced": self.fragments_surfaced,
            "fragment_failures": sum(f.status == "failed" for f in self.fragments),
            "failures": self.failures,
            "warnings": self.warning_count,
            "elapsed_s": self.elapsed_s,
        }

    def exit_code(self) -> int:
        return 0 if self.failures == 0 and self.warning_count == 0 else 1

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "packets": [vars(p) for p in self.packets],
            "fragments": [vars(f) for f in self.fragments],
            "warnings": list(self.warnings),
            "notes": list(self.notes),
            "totals": self.totals(),
        }

    def write(self, output_dir: Path) -> Path:
        path = Path(output_dir) / f"run_report_{self.stage}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# -- inputs -----------------------------------------------------------------


@dataclass(frozen=True)
class PacketSource:
    packet_id: str
    path: Path
    kind: str  # "raw" | "dicom"

    def load(self) -> ScanVolume:
        if self.kind == "raw":
            vol = read_raw_file(self.path)
        else:
            vol = read_dicom_dir(self.path, packet_id=self.packet_id)
        if vol.packet_id != self.packet_id:
            vol = ScanVolume(vol.data, vol.spacing, vol.origin, replace(vol.metadata, packet_id=self.packet_id))
        return vol


def _raw_packet_id(path: Path) -> str:
    try:
        header = json.loads(path.with_name(path.name + ".json").read_text(encoding="utf-8"))
        return str(header["packet_id"])
    except (OSError, ValueError, KeyError, TypeError):
        return path.stem


def discover_packets(input_dir) -> list[PacketSource]:
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise FatalError(f"input directory {input_dir} does not exist")
    found: dict[str, PacketSource] = {}
    for path in sorted(input_dir.iterdir()):
        if path.is_file() and path.suffix == ".rawvol":
            source = PacketSource(_raw_packet_id(path), path, "raw")
        elif path.is_dir() and any(p.suffix.lower() == ".dcm" for p in path.iterdir()):
            source = PacketSource(path.name, path, "dicom")
        else:
            continue
        if source.packet_id in found:
            raise FatalError(f"packet {source.packet_id} found twice: {found[source.packet_id].path} and {path}")
        found[source.packet_id] = source
    return sorted(found.values(), key=lambda s: natural_key(s.packet_id))


def _read_manifest(config: RunConfig) -> PacketManifest:
    try:
        return read_manifest(config.manifest_path)
    except (OSError, BatchSurfError) as exc:
        raise FatalError(f"manifest {config.manifest_path}: {exc}") from exc


def _read_chop_table(config: RunConfig):
    path = Path(config.output_dir) / CHOP_FILE
    try:
        return parse_chop_rows(path.read_text(encoding="utf-8"))
    except (OSError, BatchSurfError) as exc:
        raise FatalError(f"{path}: {exc}") from exc


def _map(config: RunConfig, fn, items):
    """Ordered map over a bounded thread pool."""
    items = list(items)
    if config.parallelism == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        return list(pool.map(fn, items))


def _write_previews(config: RunConfig, vol: ScanVolume, boxes, binary=None) -> list[str]:
    out = Path(config.output_dir)
    xz, yz = render_preview(vol, boxes)
    names = [f"{vol.packet_id}_xz.pgm", f"{vol.packet_id}_yz.pgm"]
    (out / names[0]).write_bytes(encode_pgm(xz))
    (out / names[1]).write_bytes(encode_pgm(yz))
    if config.emit_figures:
        if binary is None:
            binary = threshold_volume(vol, config.segmentation.threshold_hu)
        name = f"{vol.packet_id}_profile.png"
        figures.plot_z_profile(
            out / name,
            project_occupancy(binary),
            sorted(boxes, key=lambda b: b.z0),
            dz=vol.spacing[2],
            threshold_hu=config.segmentation.threshold_hu,
            title=f"packet {vol.packet_id}",
        )
        names.append(name)
    return names


# -- stages -----------------------------------------------------------------


def cmd_firstpass(config: RunConfig) -> RunReport:
    """Detect fragments in every packet and write ChopLocations.csv and previews."""
    start = time.perf_counter()
    config.require("input_dir", "output_dir", "manifest_path")
    manifest = _read_manifest(config)
    sources = discover_packets(config.input_dir)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    report = RunReport("firstpass")
    present = {s.packet_id for s in sources}
    for entry in manifest:
        if entry.packet_id not in present:
            report.notes.append(f"packet {entry.packet_id} is in the manifest but has no scan data")

    def run(source: PacketSource):
        entry = manifest.get(source.packet_id)
        if entry is None:
            return PacketRecord(source.packet_id, "failed", diagnostics=["packet not listed in manifest"]), []
        try:
            vol = source.load()
            binary = threshold_volume(vol, config.segmentation.threshold_hu)
            boxes, diagnostics = compute_chop_boxes(vol, entry, config.segmentation, binary=binary)
            outputs = _write_previews(config, vol, boxes, binary)
        except (OSError, BatchSurfError, ValueError) as exc:
            log.warning("packet %s: failed: %s", source.packet_id, exc)
            return PacketRecord(source.packet_id, "failed", diagnostics=[f"{type(exc).__name__}: {exc}"]), []
        status = "mismatch" if diagnostics else "segmented"
        log.info("packet %s: %d fragments (%s)", source.packet_id, len(boxes), status)
        return PacketRecord(source.packet_id, status, len(boxes), [str(d) for d in diagnostics], outputs), boxes

    all_boxes = []
    for record, boxes in _map(config, run, sources):
        report.packets.append(record)
        all_boxes.extend(boxes)
    (Path(config.output_dir) / CHOP_FILE).write_text(write_chop_csv(all_boxes), encoding="utf-8")
    report.elapsed_s = time.perf_counter() - start
    report.write(config.output_dir)
    return report


def cmd_refine(config: RunConfig) -> RunReport:
    """Re-validate a (possibly hand-edited) ChopLocations.csv and redraw previews."""
    start = time.perf_counter()
    config.require("input_dir", "output_dir")
    table = _read_chop_table(config)
    sources = {s.packet_id: s for s in discover_packets(config.input_dir)}
    report = RunReport("refine")
    for problem in table.problems:
        report.warnings.append(f"{type(problem).__name__}: {problem}")

    def run(packet_id: str):
        boxes = table.for_packet(packet_id)
        source = sources.get(packet_id)
        if source is None:
            return PacketRecord(packet_id, "failed", diagnostics=["no scan data for packet"])
        try:
            vol = source.load()
            diagnostics, valid = [], []
            for box in boxes:
                try:
                    check_against_dims(box, vol.dims)
                    valid.append(box)
                except BadBounds as exc:
                    diagnostics.append(f"BadBounds: row {table.rows[box]}: {exc}")
            outputs = _write_previews(config, vol, valid)
        except (OSError, BatchSurfError, ValueError) as exc:
            log.warning("packet %s: failed: %s", packet_id, exc)
            return PacketRecord(packet_id, "failed", diagnostics=[f"{type(exc).__name__}: {exc}"])
        log.info("packet %s: %d boxes redrawn", packet_id, len(valid))
        return PacketRecord(packet_id, "refined", len(valid), diagnostics, outputs)

    report.packets = _map(config, run, table.packet_ids())
    report.elapsed_s = time.perf_counter() - start
    report.write(config.output_dir)
    return report


def _bad_output_name(name: str) -> bool:
    return name in ("", ".", "..", UNASSIGNED) or any(c in name for c in "/\\\x00")


def cmd_surface(config: RunConfig) -> RunReport:
    """Mesh every box in ChopLocations.csv and write ``<specimen_id>.ply``."""
    start = time.perf_counter()
    config.require("input_dir", "output_dir")
    table = _read_chop_table(config)
    out = Path(config.output_dir)
    report = RunReport("surface")
    for problem in table.problems:
        report.fragments.append(
            FragmentRecord("", None, "", "failed", error=f"{type(problem).__name__}: {problem}")
        )

    seen: dict[str, ChopBox] = {}
    for box in table.boxes:
        if box.specimen_id == UNASSIGNED:
            continue
        if box.specimen_id in seen:
            other = seen[box.specimen_id]
            raise DuplicateOutputName(
                f"specimen {box.specimen_id!r} appears in packet {other.packet_id} and packet {box.packet_id}"
            )
        seen[box.specimen_id] = box

    sources = {s.packet_id: s for s in discover_packets(config.input_dir)}
    for packet_id in table.packet_ids():
        boxes = table.for_packet(packet_id)
        source = sources.get(packet_id)
        try:
            if source is None:
                raise FileNotFoundError(f"no scan data for packet {packet_id}")
            vol = source.load()
        except (OSError, BatchSurfError, ValueError) as exc:
            log.warning("packet %s: failed: %s", packet_id, exc)
            report.packets.append(PacketRecord(packet_id, "failed", diagnostics=[f"{type(exc).__name__}: {exc}"]))
            for box in boxes:
                report.fragments.append(
                    FragmentRecord(packet_id, box.frag_index, box.specimen_id, "failed", error="packet failed to load")
                )
            continue

        def run(box: ChopBox, vol=vol) -> FragmentRecord:
            t0 = time.perf_counter()
            iso = config.iso_for(box.specimen_id)
            record = FragmentRecord(box.packet_id, box.frag_index, box.specimen_id, "failed", iso_hu=iso)
            try:
                if _bad_output_name(box.specimen_id):
                    raise BadValue(f"specimen id {box.specimen_id!r} cannot be used as a file name")
                sub = extract_subvolume(vol, box)
                mesh = surface_volume(sub, replace(config.surface, iso_hu=iso), name=box.specimen_id)
                stats = compute_stats(mesh)
                ply = out / f"{box.specimen_id}.ply"
                ply.write_bytes(write_ply(mesh))
                record.outputs.append(ply.name)
                if config.emit_gifs:
                    gif = out / f"{box.specimen_id}.gif"
                    gif.write_bytes(render_turntable(mesh, config.gif_frames))
                    record.outputs.append(gif.name)
                record.status = "ok"
                record.stats = stats.as_dict()
            except (OSError, BatchSurfError, ValueError) as exc:
                record.error = f"{type(exc).__name__}: {exc}"
                log.warning("packet %s fragment %s: %s", box.packet_id, box.specimen_id, record.error)
            record.wall_time_s = time.perf_counter() - t0
            return record

        records = _map(config, run, boxes)
        report.fragments.extend(records)
        ok = sum(r.status == "ok" for r in records)
        log.info("packet %s: %d/%d fragments surfaced", packet_id, ok, len(records))
        report.packets.append(PacketRecord(packet_id, "surfaced", len(boxes)))

    surfaced = [f for f in report.fragments if f.status == "ok"]
    _write_mesh_stats(out, surfaced)
    if config.emit_figures and surfaced:
        figures.plot_mesh_stats(
            out / "mesh_stats.png",
            [(f.specimen_id, _stats_from_dict(f.stats)) for f in surfaced],
        )
    report.elapsed_s = time.perf_counter() - start
    report.write(out)
    return report


def _stats_from_dict(d: dict) -> MeshStats:
    return MeshStats(
        d["n_vertices"],
        d["n_triangles"],
        tuple(tuple(v) for v in d["bbox_mm"]),
        d["area_mm2"],
        d["volume_mm3"],
        d["euler_characteristic"],
        d["watertight"],
    )


def _write_mesh_stats(out: Path, fragments) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["packet", "frag_index", "specimen_id", "iso_hu", "n_vertices", "n_triangles", "area_mm2", "volume_mm3",
         "euler_characteristic", "watertight"]
    )
    for f in fragments:
        s = f.stats
        writer.writerow(
            [f.packet_id, f.frag_index, f.specimen_id, repr(f.iso_hu), s["n_vertices"], s["n_triangles"],
             f"{s['area_mm2']:.6f}", f"{s['volume_mm3']:.6f}", s["euler_characteristic"], int(s["watertight"])]
        )
    (out / MESH_STATS_FILE).write_text(buf.getvalue(), encoding="utf-8")


STAGES = {"firstpass": cmd_firstpass, "refine": cmd_refine, "surface": cmd_surface}
