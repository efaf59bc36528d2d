import pytest
from hypothesis import given
from hypothesis import strategies as st

from batchsurf.errors import BadDirection, BadHeader, DuplicatePacketId, DuplicateSpecimen, EmptyPacket
from batchsurf.manifest import Direction, PacketEntry, assignment_order, parse_manifest, write_manifest

HEADER = "PacketID,CTHead2Tail,Specimen1,Specimen2,Specimen3\n"


def test_minimal_manifest():
    m = parse_manifest("PacketID,CTHead2Tail,Specimen1,Specimen2\n8,L2R,A1,A2")
    (entry,) = list(m)
    assert entry.packet_id == "8"
    assert entry.direction is Direction.L2R
    assert list(entry.specimen_ids) == ["A1", "A2"]


def test_r2l_row_stored_as_written():
    entry = parse_manifest(HEADER + "10,R2L,B1,B2,B3\n").get("10")
    assert list(entry.specimen_ids) == ["B1", "B2", "B3"]
    assert entry.direction is Direction.R2L


def test_bad_direction_carries_row():
    with pytest.raises(BadDirection) as info:
        parse_manifest(HEADER + "9,X2Y,C1\n")
    assert info.value.row == 2


def test_direction_is_case_insensitive_and_cells_trimmed():
    entry = parse_manifest(HEADER + " 8 , r2l , A1 ,A2,\n").get("8")
    assert entry.direction is Direction.R2L
    assert list(entry.specimen_ids) == ["A1", "A2"]


def test_trailing_empty_cells_and_blank_rows():
    m = parse_manifest(HEADER + "8,L2R,A1,,\n\n,,,,\n9,L2R,B1,B2,B3\n")
    assert [e.packet_id for e in m] == ["8", "9"]
    assert list(m.get("8").specimen_ids) == ["A1"]


def test_quoted_specimen_with_comma():
    entry = parse_manifest(HEADER + '8,L2R,"A,1",A2\n').get("8")
    assert list(entry.specimen_ids) == ["A,1", "A2"]


def test_utf8_bom_accepted():
    assert len(list(parse_manifest("\ufeff" + HEADER + "8,L2R,A1\n"))) == 1


@pytest.mark.parametrize(
    "header",
    ["Packet,CTHead2Tail,Specimen1\n", "PacketID,CTHead2Tail,Notes,Specimen1\n", "PacketID,CTHead2Tail,Specimen2\n", ""],
)
def test_bad_header(header):
    with pytest.raises(BadHeader):
        parse_manifest(header + "8,L2R,A1\n")


def test_empty_packet():
    with pytest.raises(EmptyPacket) as info:
        parse_manifest(HEADER + "8,L2R,A1\n9,L2R,,,\n")
    assert info.value.row == 3


def test_duplicate_packet_id():
    with pytest.raises(DuplicatePacketId) as info:
        parse_manifest(HEADER + "8,L2R,A1\n8,L2R,B1\n")
    assert info.value.row == 3


def test_duplicate_specimen():
    with pytest.raises(DuplicateSpecimen) as info:
        parse_manifest(HEADER + "8,L2R,A1,A2,A1\n")
    assert info.value.row == 2


def test_assignment_order_examples():
    ids = ("A1", "A2", "A3")
    assert assignment_order(PacketEntry("8", Direction.L2R, ids)) == ["A1", "A2", "A3"]
    assert assignment_order(PacketEntry("8", Direction.R2L, ids)) == ["A3", "A2", "A1"]
    assert assignment_order(PacketEntry("8", Direction.R2L, ("A1",))) == ["A1"]


ids_strategy = st.lists(st.text("ABCDEFGH0123456789-_", min_size=1, max_size=6), min_size=1, max_size=9, unique=True)


@given(ids_strategy)
def test_double_reversal_is_identity(ids):
    once = assignment_order(PacketEntry("p", Direction.R2L, tuple(ids)))
    twice = assignment_order(PacketEntry("p", Direction.R2L, tuple(once)))
    assert twice == list(ids)


@given(st.lists(st.tuples(ids_strategy, st.sampled_from(list(Direction))), min_size=0, max_size=6))
def test_write_parse_round_trip_and_row_count(rows):
    entries = [PacketEntry(str(k), d, tuple(ids)) for k, (ids, d) in enumerate(rows)]
    parsed = list(parse_manifest(write_manifest(entries)))
    assert parsed == entries
