"""Packet manifest CSV: which specimens sit in which scan packet, and in what order.

The header is ``PacketID,CTHead2Tail,Specimen1,Specimen2,...``. Specimens are
listed head to foot; ``CTHead2Tail`` is ``L2R`` when the packet went into the
scanner head first and ``R2L`` when it went in backwards.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from enum import Enum

from .errors import BadDirection, BadHeader, DuplicatePacketId, DuplicateSpecimen, EmptyPacket


class Direction(str, Enum):
    L2R = "L2R"
    R2L = "R2L"


@dataclass(frozen=True)
class PacketEntry:
    packet_id: str
    direction: Direction
    specimen_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "specimen_ids", tuple(self.specimen_ids))
        if not self.specimen_ids:
            raise EmptyPacket(f"packet {self.packet_id!r} lists no specimens")
        if any(not s for s in self.specimen_ids):
            raise ValueError("specimen ids must be non-empty")
        seen = set()
        for s in self.specimen_ids:
            if s in seen:
                raise DuplicateSpecimen(f"specimen {s!r} listed twice in packet {self.packet_id!r}")
            seen.add(s)


@dataclass(frozen=True)
class PacketManifest:
    packets: tuple[PacketEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "packets", tuple(self.packets))
        ids = [p.packet_id for p in self.packets]
        if len(set(ids)) != len(ids):
            raise DuplicatePacketId("packet ids must be unique")

    def __len__(self):
        return len(self.packets)

    def __iter__(self):
        return iter(self.packets)

    def get(self, packet_id: str) -> PacketEntry | None:
        for p in self.packets:
            if p.packet_id == packet_id:
                return p
        return None


_SPECIMEN_COL = re.compile(r"^Specimen(\d+)$")


def _check_header(cells: list[str]) -> None:
    cells = [c.strip() for c in cells]
    while cells and not cells[-1]:
        cells.pop()
    if len(cells) < 3 or cells[0] != "PacketID" or cells[1] != "CTHead2Tail":
        raise BadHeader("header must start with PacketID,CTHead2Tail,Specimen1", row=1)
    for k, name in enumerate(cells[2:], start=1):
        m = _SPECIMEN_COL.match(name)
        if not m or int(m.group(1)) != k:
            raise BadHeader(f"expected column Specimen{k}, found {name!r}", row=1)


def parse_manifest(text: str) -> PacketManifest:
    """Parse manifest CSV text. Rows may be ragged; empty trailing cells are dropped."""
    if text.startswith("\ufeff"):
        text = text[1:]
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise BadHeader("empty manifest", row=1)
    _check_header(rows[0])

    entries = []
    seen_packets: dict[str, int] = {}
    for row_no, raw in enumerate(rows[1:], start=2):
        cells = [c.strip() for c in raw]
        if not any(cells):
            continue
        packet_id = cells[0]
        if not packet_id:
            raise BadHeader("missing PacketID", row=row_no)
        if packet_id in seen_packets:
            raise DuplicatePacketId(
                f"packet {packet_id!r} already defined on row {seen_packets[packet_id]}", row=row_no
            )
        seen_packets[packet_id] = row_no
        direction = cells[1].upper() if len(cells) > 1 else ""
        if direction not in ("L2R", "R2L"):
            raise BadDirection(f"CTHead2Tail must be L2R or R2L, got {direction or '(empty)'!r}", row=row_no)
        specimens = cells[2:]
        while specimens and not specimens[-1]:
            specimens.pop()
        if not specimens:
            raise EmptyPacket(f"packet {packet_id!r} lists no specimens", row=row_no)
        if "" in specimens:
            raise EmptyPacket(f"packet {packet_id!r} has an empty specimen cell", row=row_no)
        seen = set()
        for s in specimens:
            if s in seen:
                raise DuplicateSpecimen(f"specimen {s!r} repeated in packet {packet_id!r}", row=row_no)
            seen.add(s)
        entries.append(PacketEntry(packet_id, Direction(direction), tuple(specimens)))
    return PacketManifest(tuple(entries))


def read_manifest(path) -> PacketManifest:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_manifest(fh.read())


def assignment_order(entry: PacketEntry) -> list[str]:
    """Specimen ids in ascending-z order of their fragments on the bed."""
    ids = list(entry.specimen_ids)
    if entry.direction is Direction.R2L:
        ids.reverse()
    return ids


def write_manifest(entries) -> str:
    """Serialise entries back to manifest CSV (used to build test fixtures)."""
    entries = list(entries)
    width = max((len(e.specimen_ids) for e in entries), default=1)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["PacketID", "CTHead2Tail"] + [f"Specimen{k}" for k in range(1, width + 1)])
    for e in entries:
        writer.writerow([e.packet_id, e.direction.value, *e.specimen_ids])
    return out.getvalue()
