import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from batchsurf.errors import (
    HeaderParse,
    InconsistentGeometry,
    MissingMagic,
    MissingRequiredTag,
    NonUniformSpacing,
    PayloadSizeMismatch,
    TooFewSlices,
    TruncatedPixelData,
    UnsupportedTransferSyntax,
)
from batchsurf.phantom import PhantomSpec, Sphere, export_dicom_series, export_raw, rasterize, slice_records, write_dicom_slice
from batchsurf.volume_io import (
    ScanMetadata,
    ScanVolume,
    SliceRecord,
    load_raw_volume,
    load_series,
    parse_dicom_file,
    read_dicom_dir,
    read_raw_file,
    write_raw_file,
)


# Hand-rolled explicit-VR little-endian encoder, independent of the package writer.
def _el(group, elem, vr, value):
    if len(value) % 2:
        value += b"\x00" if vr in ("UI", "OB") else b" "
    if vr in ("OB", "OW", "SQ", "UN", "UT"):
        return struct.pack("<HH2sHI", group, elem, vr.encode(), 0, len(value)) + value
    return struct.pack("<HH2sH", group, elem, vr.encode(), len(value)) + value


def make_dicom(rows=2, cols=2, pixels=None, z=0.0, instance=1, slope="1", intercept="0", spacing="0.5\\0.5",
               syntax=b"1.2.840.10008.1.2.1", omit=(), extra=(), pixel_bytes=None, bits=16, signed=1):
    pixels = np.zeros(rows * cols, dtype="<i2") if pixels is None else np.asarray(pixels, dtype="<i2")
    meta = _el(0x0002, 0x0010, "UI", syntax)
    elements = {
        (0x0020, 0x0013): ("IS", str(instance).encode()),
        (0x0020, 0x0032): ("DS", f"0\\0\\{z!r}".encode()),
        (0x0028, 0x0010): ("US", struct.pack("<H", rows)),
        (0x0028, 0x0011): ("US", struct.pack("<H", cols)),
        (0x0028, 0x0030): ("DS", spacing.encode()),
        (0x0028, 0x0100): ("US", struct.pack("<H", bits)),
        (0x0028, 0x0103): ("US", struct.pack("<H", signed)),
        (0x0028, 0x1052): ("DS", intercept.encode()),
        (0x0028, 0x1053): ("DS", slope.encode()),
        (0x7FE0, 0x0010): ("OW", pixels.tobytes() if pixel_bytes is None else pixel_bytes),
    }
    for tag, vr, value in extra:
        elements[tag] = (vr, value)
    body = b"".join(_el(g, e, *elements[(g, e)]) for g, e in sorted(elements) if (g, e) not in omit)
    return bytes(128) + b"DICM" + meta + body


# -- parse_dicom_file ----------------------------------------------------------


def test_minimal_two_by_two_slice():
    rec = parse_dicom_file(make_dicom())
    assert (rec.rows, rec.cols) == (2, 2)
    assert rec.pixels.tolist() == [[0, 0], [0, 0]]


def test_missing_pixel_spacing_names_the_tag():
    with pytest.raises(MissingRequiredTag) as info:
        parse_dicom_file(make_dicom(omit=[(0x0028, 0x0030)]), source="a.dcm")
    assert info.value.tag.startswith("PixelSpacing")
    assert "a.dcm" in str(info.value)


@pytest.mark.parametrize(
    "tag,name",
    [((0x0028, 0x0010), "Rows"), ((0x0020, 0x0013), "InstanceNumber"), ((0x0028, 0x1053), "RescaleSlope"),
     ((0x7FE0, 0x0010), "PixelData")],
)
def test_each_required_tag_is_enforced(tag, name):
    with pytest.raises(MissingRequiredTag) as info:
        parse_dicom_file(make_dicom(omit=[tag]))
    assert info.value.tag.split()[0] == name


def test_missing_magic():
    with pytest.raises(MissingMagic):
        parse_dicom_file(b"\x00" * 200)


def test_implicit_vr_rejected():
    with pytest.raises(UnsupportedTransferSyntax):
        parse_dicom_file(make_dicom(syntax=b"1.2.840.10008.1.2"))


def test_eight_bit_pixels_rejected():
    with pytest.raises(UnsupportedTransferSyntax):
        parse_dicom_file(make_dicom(bits=8))


def test_truncated_pixel_data():
    with pytest.raises(TruncatedPixelData):
        parse_dicom_file(make_dicom(rows=4, cols=4, pixel_bytes=b"\x00" * 10))


def test_sign_extension_follows_pixel_representation():
    raw = struct.pack("<4H", 0xFFFF, 0x8000, 1, 0)
    signed = parse_dicom_file(make_dicom(pixel_bytes=raw, signed=1))
    unsigned = parse_dicom_file(make_dicom(pixel_bytes=raw, signed=0))
    assert signed.pixels.ravel().tolist() == [-1, -32768, 1, 0]
    assert unsigned.pixels.ravel().tolist() == [65535, 32768, 1, 0]


def test_unknown_tags_and_sequences_are_skipped():
    undefined_seq = struct.pack("<HH2sHI", 0x0008, 0x1140, b"SQ", 0, 0xFFFFFFFF)
    item = struct.pack("<HHI", 0xFFFE, 0xE000, 0xFFFFFFFF) + _el(0x0008, 0x1150, "UI", b"1.2.3")
    item += struct.pack("<HHI", 0xFFFE, 0xE00D, 0)
    seq_end = struct.pack("<HHI", 0xFFFE, 0xE0DD, 0)
    blob = make_dicom(extra=[((0x0009, 0x0010), "LO", b"VENDOR"), ((0x0018, 0x0060), "DS", b"120")])
    # splice an undefined-length sequence in front of group 0x0009
    marker = struct.pack("<HH", 0x0009, 0x0010)
    at = blob.index(marker)
    blob = blob[:at] + undefined_seq + item + seq_end + blob[at:]
    rec = parse_dicom_file(blob)
    assert rec.tags.get("KVP") == "120"
    assert rec.pixels.shape == (2, 2)


def test_writer_round_trip_64x64_is_byte_exact():
    rng = np.random.default_rng(1)
    pixels = rng.integers(-2000, 4000, size=(64, 64)).astype(np.int16)
    rec = SliceRecord(7, 4.2, (0.15, 0.15), 64, 64, pixels, 1.0, -1024.0, (-10.5, 3.25), 1, {"KVP": "120"})
    back = parse_dicom_file(write_dicom_slice(rec))
    assert back == rec
    assert back.pixels.tobytes() == pixels.tobytes()


# -- load_series -----------------------------------------------------------


def _series(values=3024, zs=(0.0, 0.6, 1.2), intercept="-1024"):
    return [make_dicom(pixels=[values] * 4, z=z, instance=i + 1, intercept=intercept) for i, z in enumerate(zs)]


def test_constant_series_converts_to_hu():
    vol = load_series(_series())
    assert vol.spacing[2] == pytest.approx(0.6)
    assert vol.dims == (2, 2, 3)
    assert np.all(vol.data == 2000)
    assert vol.metadata.source == "DicomSeries"


def test_reverse_delivery_matches_in_order():
    files = [make_dicom(pixels=[k, k + 1, k + 2, k + 3], z=0.6 * k, instance=k + 1) for k in range(5)]
    assert load_series(files[::-1]) == load_series(files)


def test_non_uniform_spacing_reports_slice_indices():
    with pytest.raises(NonUniformSpacing) as info:
        load_series(_series(zs=(0.0, 0.6, 2.0)))
    assert (1, 2) in info.value.slice_indices


def test_too_few_slices():
    with pytest.raises(TooFewSlices):
        load_series(_series(zs=(0.0,)))


def test_inconsistent_geometry():
    files = [make_dicom(z=0.0), make_dicom(rows=4, cols=4, z=0.6, instance=2)]
    with pytest.raises(InconsistentGeometry):
        load_series(files)


def test_duplicate_slice_positions_rejected():
    a = make_dicom(pixels=[1, 1, 1, 1], z=0.0, instance=2)
    b = make_dicom(pixels=[2, 2, 2, 2], z=0.0, instance=1)
    c = make_dicom(pixels=[3, 3, 3, 3], z=0.6, instance=3)
    d = make_dicom(pixels=[4, 4, 4, 4], z=1.2, instance=4)
    e = make_dicom(pixels=[5, 5, 5, 5], z=1.8, instance=5)
    # duplicate positions leave a zero gap, which the spacing check rejects
    with pytest.raises(NonUniformSpacing):
        load_series([a, b, c, d, e])


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(6)), st.integers(0, 2**32 - 1))
def test_permutation_invariance(order, seed):
    rng = np.random.default_rng(seed)
    files = [
        make_dicom(rows=3, cols=2, pixels=rng.integers(-1000, 3000, 6), z=0.6 * k, instance=k + 1)
        for k in range(6)
    ]
    assert load_series([files[i] for i in order]) == load_series(files)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(-32768, 32767),
    st.integers(-32768, 32767),
    st.sampled_from(["1", "2", "0.5", "-1", "1.5"]),
    st.sampled_from(["0", "-1024", "-1000.5", "7"]),
)
def test_hu_rescale_is_exactly_linear(a, b, slope, intercept):
    files = [make_dicom(pixels=[a, b, a, b], z=0.6 * k, instance=k + 1, slope=slope, intercept=intercept)
             for k in range(2)]
    vol = load_series(files)
    hu = vol.data[0, 0]
    assert float(hu[0]) - float(hu[1]) == float(slope) * (a - b)


# -- raw format ------------------------------------------------------------


def _header(dims=(4, 4, 4), **extra):
    return json.dumps({"dims": list(dims), "spacing_mm": [1, 1, 1], "packet_id": "8", **extra})


def test_raw_zero_payload():
    vol = load_raw_volume(_header(), bytes(128))
    assert vol.dims == (4, 4, 4)
    assert np.all(vol.data == 0)
    assert (vol.metadata.rescale_slope, vol.metadata.rescale_intercept) == (1.0, 0.0)


def test_raw_short_payload():
    with pytest.raises(PayloadSizeMismatch):
        load_raw_volume(_header(), bytes(127))


@pytest.mark.parametrize(
    "header",
    ["not json", json.dumps({"dims": [4, 4, 4], "packet_id": "8"}), _header(scalar_type="float32"),
     _header(dims=(0, 4, 4))],
)
def test_raw_header_errors(header):
    with pytest.raises(HeaderParse):
        load_raw_volume(header, bytes(128))


def test_raw_payload_is_x_fastest():
    payload = np.arange(24, dtype="<i2").tobytes()
    vol = load_raw_volume(_header(dims=(4, 3, 2)), payload)
    # value at (x, y, z) = x + 4*y + 12*z
    assert vol.data[1, 2, 3] == 3 + 4 * 2 + 12 * 1


def test_phantom_raw_round_trip(tmp_path):
    vol = rasterize(PhantomSpec(Sphere(3), (4, 4, 4), 3000, -1000), (9, 8, 10), (1.0, 1.0, 0.8), packet_id="12")
    header, payload = export_raw(vol)
    assert load_raw_volume(header, payload) == vol
    write_raw_file(tmp_path / "p12", vol)
    assert read_raw_file(tmp_path / "p12.rawvol") == vol


def test_phantom_dicom_round_trip_and_shuffle(tmp_path):
    vol = rasterize(PhantomSpec(Sphere(3), (4, 4, 4), 3000, -1000), (17, 16, 14), (0.5, 0.5, 0.6), packet_id="P")
    files = export_dicom_series(vol)
    assert len(files) == vol.dims[2]
    back = load_series(files, packet_id="P")
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == pytest.approx(vol.spacing)
    rng = np.random.default_rng(0)
    shuffled = [files[i] for i in rng.permutation(len(files))]
    assert load_series(shuffled, packet_id="P") == back


def test_slice_records_round_trip():
    vol = rasterize(PhantomSpec(Sphere(2), (3, 3, 3)), (6, 6, 6), (1, 1, 1))
    for rec in slice_records(vol):
        assert parse_dicom_file(write_dicom_slice(rec)) == rec


def test_read_dicom_dir_uses_directory_name(tmp_path):
    vol = rasterize(PhantomSpec(Sphere(2), (3, 3, 3)), (6, 6, 6), (1, 1, 1))
    d = tmp_path / "17"
    d.mkdir()
    for k, blob in enumerate(export_dicom_series(vol)):
        (d / f"s{k}.dcm").write_bytes(blob)
    assert read_dicom_dir(d).packet_id == "17"


def test_scan_volume_invariants():
    with pytest.raises(ValueError):
        ScanVolume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        ScanMetadata(rescale_slope=0)
    vol = ScanVolume(np.zeros((2, 3, 4), dtype=np.int16))
    assert vol.dims == (4, 3, 2)
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1
