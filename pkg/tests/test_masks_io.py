import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from recontrack import io as rio
from recontrack.errors import DimensionMismatchError, InputFormatError
from recontrack.geometry import CameraIntrinsics, CameraPose, StereoRig
from recontrack.masks import (
    Mask,
    box_iou,
    coco_counts_to_string,
    coco_string_to_counts,
    decode_coco,
    encode_coco,
    iou_matrix,
    mask_iou,
    rle_decode,
    rle_encode,
)

small_masks = st.integers(1, 9).flatmap(
    lambda h: st.integers(1, 9).flatmap(lambda w: arrays(bool, (h, w)))
)


def _decode_chars(s):
    # reference decoder: explicit sign extension of each 5-bit group chain
    values, group = [], []
    for ch in s:
        c = ord(ch) - 48
        group.append(c & 0x1F)
        if not c & 0x20:
            x = sum(g << (5 * i) for i, g in enumerate(group))
            bits = 5 * len(group)
            if x >= 1 << (bits - 1):
                x -= 1 << bits
            values.append(x)
            group = []
    counts = []
    for i, x in enumerate(values):
        counts.append(x + counts[i - 2] if i > 2 else x)
    return counts


@given(small_masks)
def test_plain_rle_round_trip(data):
    runs = rle_encode(data)
    assert sum(runs) == data.size
    assert all(r > 0 for r in runs[1:])
    assert np.array_equal(rle_decode(runs, *data.shape), data)


def test_rle_starts_with_background():
    assert rle_encode(np.array([[1, 1, 0]], bool)) == [0, 2, 1]
    assert rle_encode(np.array([[0, 1, 1]], bool)) == [1, 2]
    with pytest.raises(ValueError):
        rle_decode([1, 2], 2, 2)


@given(small_masks)
def test_coco_round_trip(data):
    m = Mask(data)
    rle = encode_coco(m)
    assert decode_coco(rle) == m
    assert _decode_chars(rle["counts"]) == rle_encode(data.T)


@given(st.lists(st.integers(0, 5000), min_size=1, max_size=30))
def test_coco_counts_codec(counts):
    s = coco_counts_to_string(counts)
    assert coco_string_to_counts(s) == counts
    assert _decode_chars(s) == counts


def test_coco_small_values():
    assert coco_counts_to_string([4]) == "4"
    assert coco_string_to_counts("4") == [4]


def _square(h, w, x, y, s=2):
    d = np.zeros((h, w), bool)
    d[y : y + s, x : x + s] = True
    return Mask(d)


def test_mask_iou_examples():
    a = _square(10, 10, 0, 0)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, _square(10, 10, 5, 5)) == 0.0
    assert mask_iou(a, _square(10, 10, 1, 0)) == pytest.approx(2 / 6)
    assert mask_iou(Mask.empty(3, 3), Mask.empty(3, 3)) == 0.0
    with pytest.raises(DimensionMismatchError):
        mask_iou(a, Mask.empty(3, 3))


@given(small_masks, st.data())
def test_mask_iou_symmetric(a, data):
    b = data.draw(arrays(bool, a.shape))
    ma, mb = Mask(a), Mask(b)
    assert mask_iou(ma, mb) == mask_iou(mb, ma)
    if a.any():
        assert mask_iou(ma, ma) == 1.0
    assert iou_matrix([ma], [mb])[0, 0] == pytest.approx(mask_iou(ma, mb))


def test_box_iou_and_bbox():
    assert box_iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert box_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert _square(10, 10, 3, 4).bbox() == (3.0, 4.0, 5.0, 6.0)
    assert Mask.empty(2, 2).bbox() is None
    assert Mask.from_box(10, 10, (3, 4, 5, 6)) == _square(10, 10, 3, 4)


def test_depth_file_layout(tmp_path, rng):
    depth = rng.uniform(-1, 50, (3, 5)).astype(np.float32)
    path = tmp_path / "d.dpt"
    rio.write_depth(path, depth)
    raw = path.read_bytes()
    assert raw[:4] == b"DPT1"
    assert struct.unpack("<II", raw[4:12]) == (5, 3)
    assert len(raw) == 12 + 4 * 15
    assert np.array_equal(rio.read_depth(path), depth)


def test_flow_file_layout(tmp_path, rng):
    flow = rng.normal(size=(4, 6, 2)).astype(np.float32)
    path = tmp_path / "f.flo"
    rio.write_flow(path, flow)
    raw = path.read_bytes()
    assert struct.unpack("<fii", raw[:12]) == (202021.25, 6, 4)
    assert np.array_equal(np.frombuffer(raw[12:], "<f4").reshape(4, 6, 2), flow)
    assert np.array_equal(rio.read_flow(path), flow)


def test_truncated_raster_names_offset(tmp_path):
    path = tmp_path / "bad.dpt"
    path.write_bytes(b"DPT1" + struct.pack("<II", 4, 4) + b"\0" * 8)
    with pytest.raises(InputFormatError) as e:
        rio.read_depth(path)
    assert "bad.dpt" in str(e.value)
    path.write_bytes(b"XXXX" + b"\0" * 8)
    with pytest.raises(InputFormatError):
        rio.read_depth(path)


def test_poses_and_calib_round_trip(tmp_path):
    poses = [CameraPose.from_planar(0.5 * i, 1.0 * i, 0.01 * i) for i in range(4)]
    rio.write_poses(tmp_path / "poses.txt", poses)
    lines = (tmp_path / "poses.txt").read_text().splitlines()
    assert len(lines) == 4 and all(len(l.split()) == 12 for l in lines)
    back = rio.read_poses(tmp_path / "poses.txt")
    assert all(np.allclose(a.T, b.T) for a, b in zip(poses, back))
    rig = StereoRig(CameraIntrinsics(700, 700, 320, 240), 0.54)
    rio.write_calib(tmp_path / "calib.txt", rig)
    assert rio.read_calib(tmp_path / "calib.txt") == rig


def test_detections_round_trip_and_errors(tmp_path):
    dets = [rio.Detection(0, "car", 0.9, (1.0, 2.0, 30.5, 40.0)), rio.Detection(2, "pedestrian", 1.0, (5, 5, 9, 20))]
    p = tmp_path / "detections.txt"
    rio.write_detections(p, dets)
    back = rio.read_detections(p)
    assert back[0] == [dets[0]] and back[2][0].cls == "pedestrian"
    p.write_text("0 1 0.5 1 2 3 4\n0 7 0.5 1 2 3 4\n")
    with pytest.raises(InputFormatError) as e:
        rio.read_detections(p)
    assert e.value.offset == len("0 1 0.5 1 2 3 4\n")


def test_detection_invariants():
    with pytest.raises(ValueError):
        rio.Detection(0, "car", 0.5, (3, 0, 1, 4))
    with pytest.raises(ValueError):
        rio.Detection(0, "car", 1.5, (0, 0, 1, 1))


def test_masks_file_round_trip(tmp_path):
    m = _square(6, 7, 2, 3)
    p = tmp_path / "masks.txt"
    rio.write_masks(p, [(0, 0, m), (0, 1, Mask.empty(6, 7)), (3, 0, m)])
    line = p.read_text().splitlines()[0].split()
    assert line[:4] == ["0", "0", "6", "7"] and int(line[4]) == len(line) - 5
    back = rio.read_masks(p)
    assert back[0][0] == m and back[3][0] == m and back[0][1].area() == 0
    p.write_text("0 0 2 2 2 1 2\n")
    with pytest.raises(InputFormatError):
        rio.read_masks(p)


def test_records_round_trip(tmp_path):
    m = _square(5, 5, 1, 1)
    recs = [rio.TrackRecord(1, 7, 1, 0.5, (1.0, 1.0, 3.0, 3.0), m)]
    rio.write_box_records(tmp_path / "b.txt", recs)
    rio.write_mask_records(tmp_path / "m.txt", recs)
    assert rio.read_box_records(tmp_path / "b.txt")[0].box == (1.0, 1.0, 3.0, 3.0)
    assert rio.read_mask_records(tmp_path / "m.txt")[0].mask == m


def test_convert_rle_round_trip(tmp_path, rng):
    recs = [rio.TrackRecord(f, f + 1, 2, mask=Mask(rng.random((8, 11)) < 0.3)) for f in range(3)]
    rio.write_mask_records(tmp_path / "plain.txt", recs)
    rio.convert_plain_to_coco(tmp_path / "plain.txt", tmp_path / "coco.txt")
    first = (tmp_path / "coco.txt").read_text().splitlines()[0].split(" ")
    assert first[:5] == ["0", "1", "2", "8", "11"]
    rio.convert_coco_to_plain(tmp_path / "coco.txt", tmp_path / "back.txt")
    assert (tmp_path / "back.txt").read_text() == (tmp_path / "plain.txt").read_text()
