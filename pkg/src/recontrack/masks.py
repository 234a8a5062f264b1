"""Binary masks and run-length encodings.

Two encodings are supported:

* plain RLE: row-major run lengths, alternating, starting with background;
* COCO compressed RLE strings (column-major counts, 6-bit variable-length
  characters), as found in KITTI MOTS annotation files.
"""
import numpy as np

from .errors import DimensionMismatchError


class Mask:
    __slots__ = ("data",)

    def __init__(self, data):
        data = np.asarray(data, dtype=bool)
        if data.ndim != 2:
            raise ValueError("mask must be 2-D")
        self.data = data

    @classmethod
    def empty(cls, height, width):
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_box(cls, height, width, box):
        m = np.zeros((height, width), dtype=bool)
        x1, y1, x2, y2 = (int(round(c)) for c in box)
        m[max(y1, 0) : max(min(y2, height), 0), max(x1, 0) : max(min(x2, width), 0)] = True
        return cls(m)

    @classmethod
    def from_runs(cls, height, width, runs):
        return cls(rle_decode(runs, height, width))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def area(self):
        return int(self.data.sum())

    def runs(self):
        return rle_encode(self.data)

    def bbox(self):
        """(x1, y1, x2, y2) with exclusive upper corner, or None when empty."""
        vs, us = np.nonzero(self.data)
        if len(us) == 0:
            return None
        return (float(us.min()), float(vs.min()), float(us.max() + 1), float(vs.max() + 1))

    def __eq__(self, other):
        return isinstance(other, Mask) and self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"Mask({self.height}x{self.width}, area={self.area()})"


def rle_encode(data):
    flat = np.asarray(data, dtype=bool).ravel()
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(runs, height, width):
    runs = np.asarray(runs, dtype=np.int64)
    if (runs < 0).any():
        raise ValueError("negative run length")
    if runs.sum() != height * width:
        raise ValueError(f"runs sum to {runs.sum()}, expected {height * width}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


def check_same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch {a.shape} vs {b.shape}")


def mask_iou(a, b):
    """Intersection over union; 0 when both masks are empty."""
    check_same_shape(a, b)
    inter = np.logical_and(a.data, b.data).sum()
    union = np.logical_or(a.data, b.data).sum()
    if union == 0:
        return 0.0
    return float(inter) / float(union)


def box_iou(a, b):
    """IoU of two ``(x1, y1, x2, y2)`` boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(masks_a, masks_b):
    """Pairwise mask IoU via a single matrix product."""
    if not masks_a or not masks_b:
        return np.zeros((len(masks_a), len(masks_b)))
    for m in list(masks_a) + list(masks_b):
        check_same_shape(m, masks_a[0])
    A = np.stack([m.data.ravel() for m in masks_a]).astype(np.float64)
    B = np.stack([m.data.ravel() for m in masks_b]).astype(np.float64)
    inter = A @ B.T
    union = A.sum(1)[:, None] + B.sum(1)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


# ---------------------------------------------------------------------------
# COCO compressed RLE
# ---------------------------------------------------------------------------


def coco_counts_to_string(counts):
    out = []
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            ch = x & 0x1F
            x >>= 5
            more = not ((ch & 0x10) == 0 and x == 0) and not ((ch & 0x10) != 0 and x == -1)
            if more:
                ch |= 0x20
            out.append(chr(ch + 48))
    return "".join(out)


def coco_string_to_counts(s):
    counts = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def encode_coco(mask):
    """Compressed COCO RLE dict ``{"size": [h, w], "counts": str}``."""
    col_major = mask.data.T
    return {"size": [mask.height, mask.width], "counts": coco_counts_to_string(rle_encode(col_major))}


def decode_coco(rle):
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, bytes):
        counts = counts.decode("ascii")
    if isinstance(counts, str):
        counts = coco_string_to_counts(counts)
    return Mask(rle_decode(counts, w, h).T)
