import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from batchsurf.errors import BadBounds, BadHeader, OverlappingZ
from batchsurf.manifest import Direction, PacketEntry
from batchsurf.phantom import PacketPhantom, PhantomSpec, Sphere, build_packet
from batchsurf.segmentation import (
    UNASSIGNED,
    ChopBox,
    CountMismatch,
    SegmentationParams,
    check_against_dims,
    compute_chop_boxes,
    decode_pgm,
    encode_pgm,
    find_z_components,
    parse_chop_rows,
    project_occupancy,
    read_chop_csv,
    render_preview,
    threshold_volume,
    write_chop_csv,
)
from batchsurf.volume_io import ScanMetadata, ScanVolume


def vol_of(data, pid="8", spacing=(1, 1, 1)):
    return ScanVolume(np.asarray(data, dtype=np.float32), spacing, metadata=ScanMetadata(packet_id=pid))


# -- threshold / projection -----------------------------------------------------


def test_threshold_all_zero_volume():
    assert not threshold_volume(vol_of(np.zeros((3, 4, 5))), 2000).any()


def test_threshold_includes_boundary():
    assert threshold_volume(vol_of(np.full((3, 4, 5), 2000.0)), 2000).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1000, 3000))
def test_threshold_matches_brute_force(seed, t):
    data = np.random.default_rng(seed).uniform(-1500, 3500, (4, 5, 6)).astype(np.float32)
    expected = sum(1 for v in data.ravel().tolist() if v >= t)
    assert int(threshold_volume(vol_of(data), t).sum()) == expected


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1000, 3000), st.floats(-1000, 3000))
def test_threshold_monotone(seed, a, b):
    t1, t2 = sorted((a, b))
    vol = vol_of(np.random.default_rng(seed).uniform(-1500, 3500, (4, 5, 6)))
    assert threshold_volume(vol, t2).sum() <= threshold_volume(vol, t1).sum()


def test_profile_examples():
    assert project_occupancy(np.zeros((9, 3, 3), bool)).tolist() == [0] * 9
    b = np.zeros((9, 3, 3), bool)
    b[7, 1, 2] = True
    assert project_occupancy(b).tolist() == [0] * 7 + [1, 0]


def test_profile_of_three_spheres_has_three_runs():
    specs = [PhantomSpec(Sphere(3), (5, 5, z)) for z in (6, 20, 34)]
    vol, _, _ = build_packet(PacketPhantom(specs, (11, 11, 41), (1, 1, 1)))
    occupied = project_occupancy(threshold_volume(vol, 2000)) > 0
    runs = np.count_nonzero(np.diff(np.concatenate(([0], occupied.astype(int), [0]))) == 1)
    assert runs == 3


# -- find_z_components --------------------------------------------------------------


def components_oracle(profile, close_gap, min_mass):
    """Straightforward slice-by-slice reference implementation."""
    n = len(profile)
    occ = [c > 0 for c in profile]
    closed = list(occ)
    i = 0
    while i < n:
        if not occ[i]:
            j = i
            while j < n and not occ[j]:
                j += 1
            if i > 0 and j < n and j - i <= close_gap:
                for k in range(i, j):
                    closed[k] = True
            i = j
        else:
            i += 1
    out, i = [], 0
    while i < n:
        if closed[i]:
            j = i
            while j < n and closed[j]:
                j += 1
            if sum(profile[i:j]) >= min_mass:
                out.append((i, j))
            i = j
        else:
            i += 1
    return out


def test_component_examples():
    p1 = SegmentationParams(close_gap_vox=1, min_component_vox=0)
    assert find_z_components([0, 0, 5, 5, 0, 0, 5, 5, 0], p1) == [(2, 4), (6, 8)]
    assert find_z_components([5, 0, 5], p1) == [(0, 3)]
    assert find_z_components([0] * 6, SegmentationParams()) == []


def test_small_runs_discarded_by_mass():
    params = SegmentationParams(close_gap_vox=0, min_component_vox=10)
    assert find_z_components([3, 3, 0, 0, 9, 9, 0], params) == [(4, 6)]


def test_gap_at_volume_edge_not_closed():
    params = SegmentationParams(close_gap_vox=3, min_component_vox=0)
    assert find_z_components([0, 0, 4, 0], params) == [(2, 3)]


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.one_of(st.just(0), st.integers(0, 40)), min_size=1, max_size=40),
    st.integers(0, 5),
    st.integers(0, 60),
)
def test_components_match_oracle(profile, gap, mass):
    params = SegmentationParams(close_gap_vox=gap, min_component_vox=mass)
    assert find_z_components(profile, params) == components_oracle(profile, gap, mass)


# -- compute_chop_boxes ---------------------------------------------------------------


def two_fragment_packet(direction="L2R"):
    specs = [PhantomSpec(Sphere(4), (10, 12, 10)), PhantomSpec(Sphere(3), (13, 9, 34))]
    phantom = PacketPhantom(specs, (24, 22, 46), (1, 1, 1), packet_id="8", direction=direction,
                            specimen_ids=["A1", "A2"])
    return build_packet(phantom)


def test_two_fragments_padding_law():
    vol, entry, truth = two_fragment_packet()
    params = SegmentationParams()
    boxes, diags = compute_chop_boxes(vol, entry, params)
    assert diags == []
    assert [b.specimen_id for b in boxes] == ["A1", "A2"]
    nx, ny, nz = vol.dims
    limits = {"z": nz, "y": ny, "x": nx}
    for box, gt in zip(boxes, truth):
        for axis in "zyx":
            lo, hi = getattr(box, axis + "0"), getattr(box, axis + "1")
            glo, ghi = getattr(gt, axis + "0"), getattr(gt, axis + "1")
            assert lo == max(glo - params.padding_vox, 0)
            assert hi == min(ghi + params.padding_vox, limits[axis])
            assert lo < glo and ghi < hi or lo == 0 or hi == limits[axis]


def test_r2l_swaps_ids_only():
    vol, entry, _ = two_fragment_packet("L2R")
    vol_r, entry_r, _ = two_fragment_packet("R2L")
    boxes, _ = compute_chop_boxes(vol, entry)
    boxes_r, _ = compute_chop_boxes(vol_r, entry_r)
    geometry = lambda b: (b.frag_index, b.z0, b.z1, b.y0, b.y1, b.x0, b.x1)
    assert [geometry(b) for b in boxes] == [geometry(b) for b in boxes_r]
    assert [b.specimen_id for b in boxes_r] == ["A2", "A1"]


def test_count_mismatch_marks_all_boxes():
    specs = [PhantomSpec(Sphere(3), (5, 5, z)) for z in (6, 20, 34)]
    vol, _, _ = build_packet(PacketPhantom(specs, (11, 11, 41), (1, 1, 1), packet_id="8"))
    entry = PacketEntry("8", Direction.L2R, ("A1", "A2"))
    boxes, diags = compute_chop_boxes(vol, entry)
    assert [b.specimen_id for b in boxes] == [UNASSIGNED] * 3
    assert diags == [CountMismatch("8", 3, 2)]


def test_padded_neighbours_never_overlap():
    # 4-slice gap with padding 5 would overlap without splitting
    data = np.zeros((20, 4, 4), np.float32)
    data[2:8, 1:3, 1:3] = 3000
    data[12:18, 1:3, 1:3] = 3000
    entry = PacketEntry("8", Direction.L2R, ("A", "B"))
    boxes, _ = compute_chop_boxes(vol_of(data), entry, SegmentationParams(min_component_vox=0))
    assert boxes[0].z1 <= boxes[1].z0
    assert boxes[0].z1 >= 8 and boxes[1].z0 <= 12


@settings(max_examples=20, deadline=None)
@given(st.floats(1.0, 50.0), st.integers(0, 2**32 - 1))
def test_intensity_invariance(factor, seed):
    vol, entry, _ = two_fragment_packet()
    rng = np.random.default_rng(seed)
    noisy = np.asarray(vol.data) + rng.uniform(0, 10, vol.data.shape).astype(np.float32)
    base = vol_of(noisy)
    scaled = vol_of(np.where(noisy > 2000, noisy * np.float32(factor), noisy))
    assert compute_chop_boxes(base, entry) == compute_chop_boxes(scaled, entry)


def test_every_fragment_voxel_in_exactly_one_box():
    vol, entry, _ = two_fragment_packet()
    boxes, _ = compute_chop_boxes(vol, entry)
    cover = np.zeros(vol.data.shape, int)
    for b in boxes:
        cover[b.slices] += 1
    binary = threshold_volume(vol, 2000)
    assert np.all(cover[binary] == 1)


# -- ChopLocations CSV ----------------------------------------------------------------------


def test_empty_csv_is_header_only():
    assert write_chop_csv([]) == "packet,frag_index,specimen_id,z0,z1,y0,y1,x0,x1\n"


def test_single_row_serialization():
    text = write_chop_csv([ChopBox("8", 0, "A1", 10, 50, 3, 60, 4, 58)])
    assert text.splitlines()[1] == "8,0,A1,10,50,3,60,4,58"


def test_rows_sorted_by_packet_then_index():
    boxes = [ChopBox("10", 0, "b", 0, 2, 0, 2, 0, 2), ChopBox("9", 1, "a", 5, 7, 0, 2, 0, 2),
             ChopBox("9", 0, "c", 0, 2, 0, 2, 0, 2)]
    rows = [line.split(",")[:2] for line in write_chop_csv(boxes).splitlines()[1:]]
    assert rows == [["9", "0"], ["9", "1"], ["10", "0"]]


@st.composite
def box_lists(draw):
    boxes = []
    for p in range(draw(st.integers(0, 3))):
        z = 0
        for k in range(draw(st.integers(0, 4))):
            z0 = z + draw(st.integers(0, 5))
            z1 = z0 + draw(st.integers(1, 30))
            y0, x0 = draw(st.integers(0, 50)), draw(st.integers(0, 50))
            boxes.append(ChopBox(f"P{p}", k, draw(st.sampled_from(["A1", "B,2", "?", "x y"])) + str(k),
                                 z0, z1, y0, y0 + draw(st.integers(1, 40)), x0, x0 + draw(st.integers(1, 40))))
            z = z1
    return boxes


@given(box_lists())
def test_csv_round_trip(boxes):
    text = write_chop_csv(boxes)
    assert read_chop_csv(text) == sorted(boxes, key=lambda b: (int(b.packet_id[1:]), b.frag_index))
    assert write_chop_csv(read_chop_csv(text)) == text


def test_zero_height_row_is_bad_bounds():
    with pytest.raises(BadBounds) as info:
        read_chop_csv(write_chop_csv([]) + "8,0,A1,10,10,3,60,4,58\n")
    assert info.value.row == 2


def test_overlapping_z_rows():
    text = write_chop_csv([]) + "8,0,A1,0,10,0,5,0,5\n8,1,A2,5,15,0,5,0,5\n"
    with pytest.raises(OverlappingZ) as info:
        read_chop_csv(text)
    assert tuple(info.value.rows) == (2, 3)


def test_lenient_reader_keeps_valid_rows():
    text = write_chop_csv([]) + "8,0,A1,0,10,0,5,0,5\n8,1,A2,x,15,0,5,0,5\n9,0,B1,0,4,0,4,0,4\n"
    table = parse_chop_rows(text)
    assert [b.specimen_id for b in table.boxes] == ["A1", "B1"]
    assert [p.row for p in table.problems] == [3]


def test_bad_chop_header():
    with pytest.raises(BadHeader):
        read_chop_csv("packet,index,specimen\n")


def test_out_of_volume_box_checked_against_dims():
    box = ChopBox("8", 0, "A", 0, 12, 0, 4, 0, 4)
    check_against_dims(box, (4, 4, 12))
    with pytest.raises(BadBounds):
        check_against_dims(box, (4, 4, 11))


# -- previews -----------------------------------------------------------------------


def test_preview_shapes_without_boxes():
    data = np.random.default_rng(3).uniform(-500, 3000, (7, 5, 6)).astype(np.float32)
    xz, yz = render_preview(vol_of(data))
    assert xz.shape == (6, 7) and yz.shape == (5, 7)
    lo, hi = -200.0, 2500.0
    expected = np.rint(np.clip((data.max(axis=1).T - lo) * 255 / (hi - lo), 0, 255))
    assert np.array_equal(xz, expected.astype(np.uint8))


def test_preview_window_clamps_air():
    xz, yz = render_preview(vol_of(np.full((4, 5, 6), -1000.0)))
    assert not xz.any() and not yz.any()


def test_preview_overlay_matches_box_bounds():
    vol = vol_of(np.full((30, 20, 25), -1000.0))
    box = ChopBox("8", 0, "A", 4, 21, 3, 15, 6, 19)
    xz, yz = render_preview(vol, [box])
    rows, cols = np.nonzero(xz == 255)
    assert (rows.min(), rows.max() + 1, cols.min(), cols.max() + 1) == (box.x0, box.x1, box.z0, box.z1)
    rows, cols = np.nonzero(yz == 255)
    assert (rows.min(), rows.max() + 1, cols.min(), cols.max() + 1) == (box.y0, box.y1, box.z0, box.z1)
    # outline only: the interior stays dark
    assert not xz[box.x0 + 1 : box.x1 - 1, box.z0 + 1 : box.z1 - 1].any()


def test_pgm_round_trip():
    img = np.random.default_rng(0).integers(0, 256, (13, 7)).astype(np.uint8)
    blob = encode_pgm(img)
    assert blob.startswith(b"P5\n7 13\n255\n")
    assert np.array_equal(decode_pgm(blob), img)
