"""Tracklet merging from 3D motion consistency.

Per-step motions are re-expressed relative to the object's own centre, the
trusted end of each tracklet is averaged and extrapolated across the gap, and
the predicted centres are compared with a Mahalanobis distance built from the
stereo position covariance.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, OutOfOrderFrameError
from .geometry import position_covariance  # noqa: F401  (part of this module's surface)


@dataclass
class ObjectState:
    """Object centre and its covariance.

    ``shape_var`` is the X/Z variance from the part of the object's footprint
    that was never observed; it is already included in ``cov`` and is carried
    unchanged through extrapolation.
    """

    frame: int
    center: np.ndarray
    cov: np.ndarray
    shape_var: float = 0.0


def shape_cov(var):
    return np.diag([var, 0.0, var])


@dataclass(frozen=True)
class ObjectCentricMotion:
    """Displacement of the object centre in X/Z plus the rotation angle."""

    x: float
    z: float
    theta: float


def object_center(points):
    """Component-wise median, or None for an empty set."""
    P = np.asarray(points, dtype=np.float64)
    if P.size == 0:
        return None
    return np.median(P.reshape(-1, 3), axis=0)


def to_object_centric(xi, p):
    c, s = math.cos(xi.theta), math.sin(xi.theta)
    px, pz = float(p[0]), float(p[2])
    return ObjectCentricMotion(
        (c - 1.0) * px - s * pz + xi.x,
        s * px + (c - 1.0) * pz + xi.z,
        xi.theta,
    )


@dataclass(frozen=True)
class TrustedMotionRegion:
    start: int  # index into the transform list
    transforms: tuple

    def __len__(self):
        return len(self.transforms)


def trusted_motion_region(transforms, residual_max=0.25, end="tail"):
    """Longest contiguous run of good fits touching the requested end; None if shorter than 2.

    Missing fits (None) break the run.
    """
    good = [t is not None and t.residual < residual_max for t in transforms]
    n = len(good)
    if end == "tail":
        i = n
        while i > 0 and good[i - 1]:
            i -= 1
        start, stop = i, n
    elif end == "head":
        j = 0
        while j < n and good[j]:
            j += 1
        start, stop = 0, j
    else:
        raise ValueError(f"end must be 'head' or 'tail', got {end!r}")
    if stop - start < 2:
        return None
    return TrustedMotionRegion(start, tuple(transforms[start:stop]))


def _rot(v, a):
    c, s = math.cos(a), math.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def average_motion(motions, direction="forward"):
    """Mean step of a TMR expressed at its trailing (forward) or leading (backward) step.

    Displacements are rotated by the heading change accumulated between each
    step and the reference step before averaging, so a constant turn averages
    to itself. Returns (displacement (2,), theta).
    """
    thetas = [m.theta for m in motions]
    aligned = []
    for i, m in enumerate(motions):
        d = np.array([m.x, m.z])
        if direction == "forward":
            aligned.append(_rot(d, sum(thetas[i + 1 :])))
        else:
            aligned.append(_rot(d, -sum(thetas[:i])))
    return np.mean(aligned, axis=0), float(np.mean(thetas))


def extrapolate(start, motions, horizon, direction="forward", cov_fn=None):
    """Predicted states for ``horizon`` frames beyond ``start``.

    ``motions`` are the object-centric steps of the trusted region in temporal
    order; None or empty means the object is taken as stationary.
    """
    sign = 1 if direction == "forward" else -1
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if motions:
        d, theta = average_motion(motions, direction)
    else:
        d, theta = np.zeros(2), 0.0
    out = []
    c = np.array(start.center, dtype=np.float64)
    for k in range(1, horizon + 1):
        step = _rot(d, sign * k * theta)
        c = c.copy()
        c[0] += sign * step[0]
        c[2] += sign * step[1]
        f = start.frame + sign * k
        cov = start.cov if cov_fn is None else cov_fn(f, c) + shape_cov(start.shape_var)
        out.append(ObjectState(f, c, cov, start.shape_var))
    return out


def mahalanobis(pa, pb, cov_a, cov_b):
    S = 0.5 * (np.asarray(cov_a) + np.asarray(cov_b))
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise DegenerateGeometryError("combined covariance is not positive definite") from None
    y = np.linalg.solve(L, np.asarray(pa, dtype=np.float64) - np.asarray(pb, dtype=np.float64))
    return float(math.sqrt(float(y @ y)))


@dataclass
class TrackletMotion:
    """Everything the 3D stage knows about one tracklet."""

    tracklet: object
    frames: list
    transforms: list  # motion frames[i] -> frames[i+1], or None
    centers: dict  # frame -> (3,) centre, frames without points absent
    states: dict  # frame -> ObjectState
    points: dict = field(default_factory=dict)  # frame -> filtered ObjectPoints
    recon: object = None  # fusion3d.ObjectReconstruction

    @property
    def id(self):
        return self.tracklet.id

    @property
    def cls(self):
        return self.tracklet.cls

    @property
    def start(self):
        return self.frames[0]

    @property
    def end(self):
        return self.frames[-1]

    def first_state(self):
        for f in self.frames:
            if f in self.states:
                return self.states[f]
        return None

    def last_state(self):
        for f in reversed(self.frames):
            if f in self.states:
                return self.states[f]
        return None

    def centric_motions(self, tmr):
        if tmr is None:
            return None
        out = []
        for i, T in enumerate(tmr.transforms):
            f = self.frames[tmr.start + i]
            out.append(to_object_centric(T, self.centers[f]))
        return out

    def tail_motions(self, residual_max):
        return self.centric_motions(trusted_motion_region(self.transforms, residual_max, "tail"))

    def head_motions(self, residual_max):
        return self.centric_motions(trusted_motion_region(self.transforms, residual_max, "head"))


def _predict_at(state, motions, frame, direction, cov_fn):
    steps = abs(frame - state.frame)
    if steps == 0:
        return state
    return extrapolate(state, motions, steps, direction, cov_fn)[-1]


def motion_consistency(a, b, cov_fn=None, residual_max=0.25):
    """Average Mahalanobis distance between ``a`` pushed forward and ``b`` pushed back.

    ``a`` must end before ``b`` starts. Returns inf when either side has no
    3D state at all.
    """
    sa, sb = a.last_state(), b.first_state()
    if sa is None or sb is None:
        return math.inf
    ma = a.tail_motions(residual_max)
    mb = b.head_motions(residual_max)
    if ma and mb:
        span = range(sa.frame, sb.frame + 1)
    elif ma:
        span = [sb.frame]
    elif mb:
        span = [sa.frame]
    else:
        span = [sa.frame]
    scores = []
    for f in span:
        pa = _predict_at(sa, ma, f, "forward", cov_fn)
        pb = _predict_at(sb, mb, f, "backward", cov_fn)
        scores.append(mahalanobis(pa.center, pb.center, pa.cov, pb.cov))
    return float(np.mean(scores))


@dataclass
class Track:
    id: int
    cls: str
    members: list  # TrackletMotion, temporally ordered
    filled: dict = field(default_factory=dict)  # frame -> recovery.FilledFrame

    @property
    def start(self):
        return min([self.members[0].start] + list(self.filled))

    @property
    def end(self):
        return max([self.members[-1].end] + list(self.filled))

    def detected_frames(self):
        return [f for m in self.members for f in m.frames]

    def frames(self):
        return sorted(self.detected_frames() + list(self.filled))


def candidate_pairs(motions, max_gap):
    """(a_index, b_index) pairs of the same class with ``0 < b.start - a.end <= max_gap``."""
    out = []
    for i, a in enumerate(motions):
        for j, b in enumerate(motions):
            if a.cls == b.cls and 0 < b.start - a.end <= max_gap:
                out.append((i, j))
    return out


def link_chains(n, links):
    """Chains from accepted (a, b) successor links over indices 0..n-1."""
    succ = dict(links)
    has_pred = {b for _, b in links}
    chains = []
    for i in range(n):
        if i in has_pred:
            continue
        chain = [i]
        while chain[-1] in succ:
            chain.append(succ[chain[-1]])
        chains.append(chain)
    return chains


def merge_tracklets(motions, max_gap=20, score_max=3.0, cov_fn=None, residual_max=0.25, scorer=None):
    """Greedy lowest-distance-first merging into :class:`Track` objects.

    ``scorer(a, b)`` may override the default :func:`motion_consistency` call
    (used to share scores across parameter sweeps).
    """
    motions = sorted(motions, key=lambda m: (m.start, m.id))
    if scorer is None:
        scorer = lambda a, b: motion_consistency(a, b, cov_fn, residual_max)  # noqa: E731
    scored = []
    for i, j in candidate_pairs(motions, max_gap):
        s = scorer(motions[i], motions[j])
        if s <= score_max:
            scored.append((s, motions[i].id, motions[j].id, i, j))
    scored.sort()
    succ, pred, links = set(), set(), []
    for _, _, _, i, j in scored:
        if i in succ or j in pred:
            continue
        succ.add(i)
        pred.add(j)
        links.append((i, j))
    tracks = []
    for k, chain in enumerate(link_chains(len(motions), links)):
        members = [motions[i] for i in chain]
        tracks.append(Track(k + 1, members[0].cls, members))
    return tracks


class OnlineMerger:
    """Forward-only merging: new tracklets are matched, in the frame they appear,
    against forward extrapolations of recently terminated tracks."""

    def __init__(self, max_gap=20, score_max=3.0, residual_max=0.25, cov_fn=None):
        self.max_gap = max_gap
        self.score_max = score_max
        self.residual_max = residual_max
        self.cov_fn = cov_fn
        self.pool = {}  # track id -> TrackletMotion of its last (terminated) tracklet
        self.track_of = {}  # tracklet id -> track id
        self.frame = None
        self._next_track = 1

    def terminate(self, motion):
        tid = self.track_of[motion.id]
        self.pool[tid] = motion

    def step(self, frame, seeds):
        """Assign a track id to every seed (single-frame TrackletMotion started at ``frame``).

        Returns dict tracklet id -> (track id, score or None when a new track starts).
        """
        if self.frame is not None and frame <= self.frame:
            raise OutOfOrderFrameError(f"frame {frame} after {self.frame}")
        self.frame = frame
        for tid in [t for t, m in self.pool.items() if frame - m.end > self.max_gap]:
            del self.pool[tid]
        scored = []
        for si, seed in enumerate(seeds):
            sb = seed.first_state()
            if sb is None:
                continue
            for tid, m in sorted(self.pool.items()):
                if m.cls != seed.cls or not 0 < frame - m.end <= self.max_gap:
                    continue
                sa = m.last_state()
                if sa is None:
                    continue
                pa = _predict_at(sa, m.tail_motions(self.residual_max), frame, "forward", self.cov_fn)
                s = mahalanobis(pa.center, sb.center, pa.cov, sb.cov)
                if s <= self.score_max:
                    scored.append((s, tid, seed.id, si))
        scored.sort()
        out = {}
        used = set()
        for s, tid, _, si in scored:
            if si in out or tid in used:
                continue
            out[si] = (tid, s)
            used.add(tid)
        result = {}
        for si, seed in enumerate(seeds):
            if si in out:
                tid, s = out[si]
                del self.pool[tid]
            else:
                tid, s = self._next_track, None
                self._next_track += 1
            self.track_of[seed.id] = tid
            result[seed.id] = (tid, s)
        return result
