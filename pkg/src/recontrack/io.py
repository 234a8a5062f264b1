"""Readers and writers for every on-disk format used by the pipeline.

All readers raise :class:`~recontrack.errors.InputFormatError` with the byte
offset of the offending record.
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputFormatError
from .geometry import CameraIntrinsics, CameraPose, StereoRig
from .masks import Mask, coco_counts_to_string, coco_string_to_counts, rle_decode

DEPTH_MAGIC = b"DPT1"
FLOW_MAGIC = 202021.25

CLASS_IDS = {"car": 1, "pedestrian": 2}
CLASS_NAMES = {v: k for k, v in CLASS_IDS.items()}
IGNORE_CLASS_ID = 10


def fnum(v):
    """Shortest round-tripping text for a float (numpy scalars included)."""
    return repr(float(v))


@dataclass(frozen=True)
class Detection:
    frame: int
    cls: str
    score: float
    box: tuple  # (x1, y1, x2, y2)

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def _lines(path):
    """Yield (byte_offset, line_text) for non-blank lines."""
    path = Path(path)
    raw = path.read_bytes()
    offset = 0
    for line in raw.split(b"\n"):
        text = line.decode("utf-8", errors="replace").strip()
        if text and not text.startswith("#"):
            yield offset, text
        offset += len(line) + 1


# ---------------------------------------------------------------------------
# binary rasters
# ---------------------------------------------------------------------------


def write_depth(path, depth):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(depth).tobytes())


def read_depth(path):
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC:
        raise InputFormatError(path, 0, "bad depth magic, expected DPT1")
    if len(raw) < 12:
        raise InputFormatError(path, 4, "truncated depth header")
    w, h = struct.unpack("<II", raw[4:12])
    need = 12 + 4 * w * h
    if len(raw) != need:
        raise InputFormatError(path, min(len(raw), need), f"expected {need} bytes, found {len(raw)}")
    depth = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)
    bad = ~np.isfinite(depth)
    if bad.any():
        i = int(np.flatnonzero(bad.ravel())[0])
        raise InputFormatError(path, 12 + 4 * i, "non-finite depth value")
    return depth


def write_flow(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLOW_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(flow).tobytes())


def read_flow(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise InputFormatError(path, 0, "truncated flow header")
    (magic,) = struct.unpack("<f", raw[:4])
    if magic != np.float32(FLOW_MAGIC):
        raise InputFormatError(path, 0, f"bad flow sentinel {magic}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise InputFormatError(path, 4, f"bad flow dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) != need:
        raise InputFormatError(path, min(len(raw), need), f"expected {need} bytes, found {len(raw)}")
    flow = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float64)
    bad = ~np.isfinite(flow)
    if bad.any():
        i = int(np.flatnonzero(bad.ravel())[0])
        raise InputFormatError(path, 12 + 4 * i, "non-finite flow value")
    return flow


# ---------------------------------------------------------------------------
# poses and calibration
# ---------------------------------------------------------------------------


def write_poses(path, poses):
    with open(path, "w") as f:
        for pose in poses:
            f.write(" ".join(repr(float(x)) for x in pose.T[:3].ravel()) + "\n")


def read_poses(path):
    poses = []
    for off, line in _lines(path):
        parts = line.split()
        if len(parts) != 12:
            raise InputFormatError(path, off, f"pose line needs 12 values, got {len(parts)}")
        try:
            vals = np.array([float(x) for x in parts]).reshape(3, 4)
            poses.append(CameraPose(vals))
        except ValueError as e:
            raise InputFormatError(path, off, str(e)) from None
    return poses


def write_calib(path, rig):
    K = rig.intrinsics
    with open(path, "w") as f:
        f.write(f"{fnum(K.fx)} {fnum(K.fy)} {fnum(K.cx)} {fnum(K.cy)}\n{fnum(rig.baseline)}\n")


def read_calib(path):
    lines = list(_lines(path))
    if len(lines) < 2:
        raise InputFormatError(path, 0, "calibration needs two lines")
    off, first = lines[0]
    try:
        fx, fy, cx, cy = (float(x) for x in first.split())
        intr = CameraIntrinsics(fx, fy, cx, cy)
    except ValueError as e:
        raise InputFormatError(path, off, f"bad intrinsics line: {e}") from None
    off, second = lines[1]
    try:
        return StereoRig(intr, float(second.split()[0]))
    except (ValueError, IndexError) as e:
        raise InputFormatError(path, off, f"bad baseline line: {e}") from None


# ---------------------------------------------------------------------------
# detections and masks
# ---------------------------------------------------------------------------


def write_detections(path, detections):
    with open(path, "w") as f:
        for d in detections:
            x1, y1, x2, y2 = d.box
            f.write(f"{d.frame} {CLASS_IDS[d.cls]} {fnum(d.score)} {fnum(x1)} {fnum(y1)} {fnum(x2)} {fnum(y2)}\n")


def read_detections(path):
    """Per-frame lists of detections, in file order."""
    out = {}
    for off, line in _lines(path):
        parts = line.split()
        if len(parts) != 7:
            raise InputFormatError(path, off, f"detection line needs 7 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            cid = int(parts[1])
            if cid not in CLASS_NAMES:
                raise ValueError(f"unknown class id {cid}")
            det = Detection(frame, CLASS_NAMES[cid], float(parts[2]), tuple(float(x) for x in parts[3:]))
        except ValueError as e:
            raise InputFormatError(path, off, str(e)) from None
        out.setdefault(frame, []).append(det)
    return out


def _mask_line(prefix, mask):
    runs = mask.runs()
    return f"{prefix} {mask.height} {mask.width} {len(runs)} " + " ".join(str(r) for r in runs)


def _parse_mask_fields(path, off, parts):
    try:
        h, w, n = int(parts[0]), int(parts[1]), int(parts[2])
        runs = [int(x) for x in parts[3:]]
        if len(runs) != n:
            raise ValueError(f"expected {n} runs, found {len(runs)}")
        return Mask(rle_decode(runs, h, w))
    except (ValueError, IndexError) as e:
        raise InputFormatError(path, off, f"bad mask: {e}") from None


def write_masks(path, masks):
    """``masks``: iterable of (frame, det_index, Mask)."""
    with open(path, "w") as f:
        for frame, idx, m in masks:
            f.write(_mask_line(f"{frame} {idx}", m) + "\n")


def read_masks(path):
    """Dict frame -> dict det_index -> Mask."""
    out = {}
    for off, line in _lines(path):
        parts = line.split()
        if len(parts) < 6:
            raise InputFormatError(path, off, "mask line too short")
        try:
            frame, idx = int(parts[0]), int(parts[1])
        except ValueError as e:
            raise InputFormatError(path, off, str(e)) from None
        out.setdefault(frame, {})[idx] = _parse_mask_fields(path, off, parts[2:])
    return out


def read_masks_keyed(path):
    """Masks file read as a flat list of (frame, det_index, Mask), in file order."""
    rows = []
    for frame, per in read_masks(path).items():
        for idx, m in per.items():
            rows.append((frame, idx, m))
    return rows


def write_box_masks(path, rows):
    """Masks keyed by box: ``frame x1 y1 x2 y2 height width n_runs r1 ... rn``, corners to 4 decimals."""
    with open(path, "w") as f:
        for frame, box, m in rows:
            corners = " ".join(f"{float(c):.4f}" for c in box)
            f.write(_mask_line(f"{frame} {corners}", m) + "\n")


def read_box_masks(path):
    """List of (frame, box, Mask) in file order."""
    rows = []
    for off, line in _lines(path):
        parts = line.split()
        if len(parts) < 9:
            raise InputFormatError(path, off, "box-keyed mask line too short")
        try:
            frame = int(parts[0])
            box = tuple(float(x) for x in parts[1:5])
        except ValueError as e:
            raise InputFormatError(path, off, str(e)) from None
        rows.append((frame, box, _parse_mask_fields(path, off, parts[5:])))
    return rows


# ---------------------------------------------------------------------------
# tracking outputs / ground truth
# ---------------------------------------------------------------------------


@dataclass
class TrackRecord:
    """One (frame, object) row of a box or mask tracking file."""

    frame: int
    track_id: int
    class_id: int
    score: float = 1.0
    box: tuple = None
    mask: Mask = None


def write_box_records(path, records):
    with open(path, "w") as f:
        for r in records:
            x1, y1, x2, y2 = r.box
            f.write(f"{r.frame} {r.track_id} {r.class_id} {fnum(r.score)} {fnum(x1)} {fnum(y1)} {fnum(x2)} {fnum(y2)}\n")


def read_box_records(path):
    out = []
    for off, line in _lines(path):
        parts = line.split()
        if len(parts) != 8:
            raise InputFormatError(path, off, f"box record needs 8 fields, got {len(parts)}")
        try:
            out.append(
                TrackRecord(int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]), tuple(float(x) for x in parts[4:]))
            )
        except ValueError as e:
            raise InputFormatError(path, off, str(e)) from None
    return out


def write_mask_records(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(_mask_line(f"{r.frame} {r.track_id} {r.class_id}", r.mask) + "\n")


def read_mask_records(path):
    out = []
    for off, line in _lines(path):
        parts = line.split()
        if len(parts) < 7:
            raise InputFormatError(path, off, "mask record too short")
        try:
            frame, tid, cid = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError as e:
            raise InputFormatError(path, off, str(e)) from None
        out.append(TrackRecord(frame, tid, cid, 1.0, None, _parse_mask_fields(path, off, parts[3:])))
    return out


# ---------------------------------------------------------------------------
# KITTI MOTS style compressed RLE <-> plain RLE
# ---------------------------------------------------------------------------


def convert_coco_to_plain(src, dst):
    """``frame obj_id class_id h w counts`` lines to plain mask records."""
    with open(dst, "w") as out:
        for off, line in _lines(src):
            parts = line.split(" ")
            if len(parts) != 6:
                raise InputFormatError(src, off, f"compressed RLE line needs 6 fields, got {len(parts)}")
            try:
                frame, oid, cid, h, w = (int(x) for x in parts[:5])
                counts = coco_string_to_counts(parts[5])
                col = rle_decode(counts, w, h)
            except (ValueError, IndexError) as e:
                raise InputFormatError(src, off, f"bad compressed RLE: {e}") from None
            out.write(_mask_line(f"{frame} {oid} {cid}", Mask(col.T)) + "\n")


def convert_plain_to_coco(src, dst):
    with open(dst, "w") as out:
        for r in read_mask_records(src):
            s = coco_counts_to_string(Mask(r.mask.data.T).runs())
            out.write(f"{r.frame} {r.track_id} {r.class_id} {r.mask.height} {r.mask.width} {s}\n")
