"""Dynamic object fusion.

Per tracklet: back-project mask pixels, drop density outliers with the local
outlier factor, pair points across consecutive frames with optical flow and
fit a 3-DoF planar rigid motion (X/Z translation plus rotation about the
vertical axis). Chaining the per-step motions warps every frame into one
object reconstruction.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import TooFewPointsError
from .geometry import points_from_mask
from .kernels import lof_kernel, lof_tree

MIN_DIST = 1e-9
LOF_TREE_MIN = 2048  # above this many points, neighbours come from a k-d tree


@dataclass
class ObjectPoints:
    frame: int
    points: np.ndarray  # (N, 3) world
    pixels: np.ndarray  # (N, 2) integer (u, v), row-major order

    def __len__(self):
        return len(self.points)

    def subset(self, keep):
        return ObjectPoints(self.frame, self.points[keep], self.pixels[keep])


def wrap_angle(a):
    """Map to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class MotionTransform:
    """Planar rigid motion ``q_xz = R(theta) p_xz + (x, z)``; Y passes through."""

    x: float
    z: float
    theta: float
    residual: float = 0.0
    n_pairs: int = 0

    @property
    def xi(self):
        return np.array([self.x, self.z, self.theta])

    def matrix(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.z], [0.0, 0.0, 1.0]])

    def apply(self, P):
        P = np.asarray(P, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        out = P.copy()
        out[..., 0] = c * P[..., 0] - s * P[..., 2] + self.x
        out[..., 2] = s * P[..., 0] + c * P[..., 2] + self.z
        return out

    @classmethod
    def from_matrix(cls, M, residual=0.0, n_pairs=0):
        return cls(float(M[0, 2]), float(M[1, 2]), wrap_angle(math.atan2(M[1, 0], M[0, 0])), residual, n_pairs)

    def inverse(self):
        return MotionTransform.from_matrix(np.linalg.inv(self.matrix()))

    def compose(self, other):
        """``self`` after ``other``."""
        return MotionTransform.from_matrix(self.matrix() @ other.matrix())


IDENTITY = MotionTransform(0.0, 0.0, 0.0)


def local_outlier_factor(points, k=4):
    """LOF_k of every point (Euclidean distance, tie-inclusive k-neighbourhoods).

    Pairwise distances are clamped to at least 1e-9 so duplicate points keep a
    finite reachability density.
    """
    P = np.ascontiguousarray(points, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if k < 1 or len(P) <= k:
        raise TooFewPointsError(f"LOF with k={k} needs more than {k} points, got {len(P)}")
    if len(P) > LOF_TREE_MIN:
        return lof_tree(P, int(k), MIN_DIST)
    return lof_kernel(P, int(k), MIN_DIST)


def filter_points(op, k=4):
    """Keep points whose LOF is at most the median LOF; None if too few points."""
    if len(op) <= k:
        return None
    lof = local_outlier_factor(op.points, k)
    return op.subset(lof <= np.median(lof))


def correspondences(a, flow, b, cap=200):
    """Flow-linked point pairs between two filtered frames.

    Returns (P, Q, pix_a) arrays or None when nothing corresponds. Subsampling
    to ``cap`` pairs is a uniform stride in ``a``'s row-major pixel order.
    """
    if len(a) == 0 or len(b) == 0:
        return None
    h, w = flow.shape[:2]
    index = np.full((h, w), -1, dtype=np.int64)
    index[b.pixels[:, 1], b.pixels[:, 0]] = np.arange(len(b))
    ua, va = a.pixels[:, 0], a.pixels[:, 1]
    tu = np.floor(ua + flow[va, ua, 0] + 0.5).astype(np.int64)
    tv = np.floor(va + flow[va, ua, 1] + 0.5).astype(np.int64)
    inside = (tu >= 0) & (tu < w) & (tv >= 0) & (tv < h)
    ia = np.flatnonzero(inside)
    ib = index[tv[ia], tu[ia]]
    hit = ib >= 0
    ia, ib = ia[hit], ib[hit]
    n = len(ia)
    if n == 0:
        return None
    if n > cap:
        pick = (np.arange(cap) * n) // cap
        ia, ib = ia[pick], ib[pick]
    return a.points[ia], b.points[ib], a.pixels[ia]


def fit_se2(P, Q):
    """Least-squares planar rigid motion taking P onto Q; None with fewer than 3 pairs.

    The Y residual does not depend on the motion, so the optimum is the 2-D
    Procrustes solution on the (x, z) coordinates.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if len(P) < 3 or len(P) != len(Q):
        return None
    p = P[:, [0, 2]]
    q = Q[:, [0, 2]]
    pm, qm = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - pm, q - qm
    cross = np.sum(pc[:, 0] * qc[:, 1] - pc[:, 1] * qc[:, 0])
    dot = np.sum(pc[:, 0] * qc[:, 0] + pc[:, 1] * qc[:, 1])
    theta = math.atan2(cross, dot)
    c, s = math.cos(theta), math.sin(theta)
    tx = qm[0] - (c * pm[0] - s * pm[1])
    tz = qm[1] - (s * pm[0] + c * pm[1])
    T = MotionTransform(tx, tz, wrap_angle(theta))
    resid = T.apply(P) - Q
    rms = math.sqrt(float(np.mean(np.sum(resid * resid, axis=1))))
    return MotionTransform(T.x, T.z, T.theta, rms, len(P))


def fit_translation(P, Q):
    """Least-squares pure translation taking P onto Q; None with fewer than 3 pairs."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if len(P) < 3 or len(P) != len(Q):
        return None
    d = np.mean(Q[:, [0, 2]] - P[:, [0, 2]], axis=0)
    T = MotionTransform(float(d[0]), float(d[1]), 0.0)
    resid = T.apply(P) - Q
    rms = math.sqrt(float(np.mean(np.sum(resid * resid, axis=1))))
    return MotionTransform(T.x, T.z, 0.0, rms, len(P))


def se2_cost(xi, P, Q):
    T = MotionTransform(*xi)
    r = T.apply(P) - Q
    return float(np.sum(r * r))


@dataclass
class ObjectReconstruction:
    """Per-frame maps into the object-centric frame of each anchored segment.

    ``to_ref[i]`` maps frame ``frames[i]`` points into the first frame of its
    segment (identity there). Frames without usable points belong to no
    segment (``segment[i] == -1``).
    """

    frames: list
    segment: list
    to_ref: list
    points: list  # filtered ObjectPoints per frame, or None

    def segment_frames(self, seg):
        return [f for f, s in zip(self.frames, self.segment) if s == seg]

    def fused_cloud(self, seg=None):
        """(N, 4) array of ``x y z frame`` rows of fused points."""
        rows = []
        for f, s, T, op in zip(self.frames, self.segment, self.to_ref, self.points):
            if op is None or s < 0 or (seg is not None and s != seg):
                continue
            P = T.apply(op.points)
            rows.append(np.column_stack([P, np.full(len(P), f)]))
        return np.vstack(rows) if rows else np.zeros((0, 4))

    def fused_points(self, seg):
        cloud = self.fused_cloud(seg)
        return cloud[:, :3]


def frame_points(mask, depth, pose, K, frame):
    pts, pix = points_from_mask(mask.data, depth, pose, K)
    return ObjectPoints(frame, pts, pix)


def step_motion(prev, nxt, flow, cap=200, max_yaw_step=None):
    """Motion between two filtered frames, or None when it cannot be estimated.

    A rotation larger than ``max_yaw_step`` (rad per frame) is not a plausible
    vehicle or pedestrian turn; it appears when depth noise along the viewing
    rays swamps a narrow footprint. Such steps fall back to a translation-only
    fit, which is still well determined.
    """
    if prev is None or nxt is None:
        return None
    pairs = correspondences(prev, flow, nxt, cap)
    if pairs is None:
        return None
    T = fit_se2(pairs[0], pairs[1])
    if T is not None and max_yaw_step is not None and abs(T.theta) > max_yaw_step:
        return fit_translation(pairs[0], pairs[1])
    return T


def accumulate_reconstruction(frames, filtered, transforms):
    """Chain per-step motions into an :class:`ObjectReconstruction`.

    ``filtered[i]`` are the filtered points of ``frames[i]`` (or None) and
    ``transforms[i]`` the motion ``frames[i] -> frames[i+1]`` (or None). A None
    motion starts a new independently anchored segment.
    """
    seg_ids, to_ref = [], []
    seg = -1
    acc = None
    for i, f in enumerate(frames):
        if filtered[i] is None:
            seg_ids.append(-1)
            to_ref.append(IDENTITY)
            acc = None
            continue
        linked = i > 0 and acc is not None and transforms[i - 1] is not None
        if linked:
            # ref <- f-1 <- f : compose with inverse of the latest step
            acc = acc.compose(transforms[i - 1].inverse())
        else:
            seg += 1
            acc = IDENTITY
        seg_ids.append(seg)
        to_ref.append(acc)
    return ObjectReconstruction(list(frames), seg_ids, to_ref, list(filtered))
