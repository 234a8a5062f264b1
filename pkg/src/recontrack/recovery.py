"""Recovery of missed detections inside gaps and at the ends of tracks.

For every candidate frame a fixed-size 3D box is placed at the predicted
object centre, projected into the image and blended with the flow-warped box
of the previous frame. A mask provider turns that box into a mask, and the
mask is accepted only if its back-projected points sit near the box centre;
points far in front of it mean the object is occluded.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BehindCameraError
from .geometry import camera_to_world, backproject_pixels, project_points, world_to_camera
from .masks import Mask, box_iou
from .merge3d import average_motion, extrapolate

DEFAULT_DIMS = {
    # length, width, height in metres
    "car": (3.88, 1.63, 1.53),
    "pedestrian": (0.84, 0.66, 1.76),
}

# a recovered box overlapping a detection of the same frame this much is not a miss
DETECTED_IOU = 0.3

VISIBLE = "visible"
OCCLUDED = "occluded"


@dataclass(frozen=True)
class Box3D:
    center: tuple
    dims: tuple  # (length, width, height)
    yaw: float  # heading of the length axis in the (x, z) plane

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise ValueError(f"box dims must be positive, got {self.dims}")

    def corners(self):
        l, w, h = self.dims
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = []
        for a in (-l / 2, l / 2):
            for b in (-w / 2, w / 2):
                for dy in (-h / 2, h / 2):
                    out.append(
                        (
                            self.center[0] + c * a - s * b,
                            self.center[1] + dy,
                            self.center[2] + s * a + c * b,
                        )
                    )
        return np.array(out)


def ground_distance(p, c):
    """Distance in the X/Z plane (rows of ``p`` or a single point)."""
    d = np.asarray(p, dtype=np.float64) - np.asarray(c, dtype=np.float64)
    return np.hypot(d[..., 0], d[..., 2])


def half_diagonal(dims):
    return 0.5 * math.hypot(dims[0], dims[1])


def principal_yaw(points):
    """Heading of the dominant bird's-eye-view axis, in (-pi/2, pi/2]; None if undefined."""
    if points is None or len(points) < 2:
        return None
    xz = np.asarray(points)[:, [0, 2]]
    C = np.cov(xz.T)
    vals, vecs = np.linalg.eigh(C)
    if vals[1] <= 0 or np.isclose(vals[0], vals[1]):
        return None
    v = vecs[:, 1]
    yaw = math.atan2(v[1], v[0])
    if yaw <= -math.pi / 2:
        yaw += math.pi
    elif yaw > math.pi / 2:
        yaw -= math.pi
    return yaw


def estimate_box3d(center, cls, motion=None, points=None, prev_yaw=None, dims=None, motion_threshold=0.1):
    """Fixed-size box at ``center``.

    ``motion`` is a planar displacement per frame (anything with x and z, or a
    2-vector). Heading follows the motion when its speed reaches
    ``motion_threshold``, else the principal axis of ``points``, else
    ``prev_yaw``, else 0.
    """
    if center is None:
        raise ValueError("no object state to place a box at")
    dims = (dims or DEFAULT_DIMS)[cls] if isinstance(dims, dict) or dims is None else dims
    yaw = None
    if motion is not None:
        dx, dz = (motion.x, motion.z) if hasattr(motion, "x") else (motion[0], motion[1])
        if math.hypot(dx, dz) >= motion_threshold:
            yaw = math.atan2(dz, dx)
    if yaw is None:
        yaw = principal_yaw(points)
    if yaw is None:
        yaw = prev_yaw if prev_yaw is not None else 0.0
    return Box3D(tuple(float(c) for c in center), tuple(dims), float(yaw))


def clip_box(box, width, height):
    x1, y1, x2, y2 = box
    x1, x2 = min(max(x1, 0.0), width), min(max(x2, 0.0), width)
    y1, y2 = min(max(y1, 0.0), height), min(max(y2, 0.0), height)
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return None
    return (x1, y1, x2, y2)


def project_box3d(box3d, pose, K):
    uv, z = project_points(box3d.corners(), pose, K)
    if (z <= 0).any():
        raise BehindCameraError("3D box crosses the camera plane")
    return (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))


def median_flow(box, flow):
    h, w = flow.shape[:2]
    x1, y1, x2, y2 = box
    u0, u1 = max(int(math.floor(x1)), 0), min(int(math.ceil(x2)), w)
    v0, v1 = max(int(math.floor(y1)), 0), min(int(math.ceil(y2)), h)
    if u1 <= u0 or v1 <= v0:
        return np.zeros(2)
    region = flow[v0:v1, u0:u1].reshape(-1, 2)
    return np.median(region, axis=0)


def recover_box2d(box3d, pose, K, image_size, prev_box=None, flow=None, flow_sign=1.0):
    """Projected hull of the 3D box, averaged 50/50 with the flow-warped previous box.

    ``image_size`` is (width, height). Returns None when the result lies
    outside the image. ``flow_sign=-1`` warps a box backwards in time.
    """
    if world_to_camera(box3d.center, pose)[2] <= 0:
        raise BehindCameraError("box centre behind camera")
    proj = np.array(project_box3d(box3d, pose, K))
    if prev_box is not None and flow is not None:
        du, dv = flow_sign * median_flow(prev_box, flow)
        warped = np.array(prev_box) + np.array([du, dv, du, dv])
        proj = 0.5 * (proj + warped)
    return clip_box(tuple(float(x) for x in proj), image_size[0], image_size[1])


def _mask_points(mask, depth, pose, K):
    vs, us = np.nonzero(mask.data)
    d = depth[vs, us]
    ok = np.isfinite(d) & (d > 0)
    return camera_to_world(backproject_pixels(us[ok], vs[ok], d[ok], K), pose), len(us)


def validate_recovery(mask, depth, box3d, pose, K, d_max, min_coverage=0.25):
    """``VISIBLE`` when the median back-projected mask point is within ``d_max`` of the box centre in X/Z."""
    pts, n = _mask_points(mask, depth, pose, K)
    if n == 0 or len(pts) < min_coverage * n:
        return OCCLUDED
    med = np.median(pts, axis=0)
    if ground_distance(med, box3d.center) <= d_max:
        return VISIBLE
    return OCCLUDED


class DepthConsistentProvider:
    """Mask = pixels of the box whose 3D point lies in the upright cylinder of radius
    ``d_max`` around the box centre, limited to the box height."""

    name = "depth-consistent"

    def __init__(self, depth_fn, pose_fn, K, d_max_fn=None):
        self.depth_fn = depth_fn
        self.pose_fn = pose_fn
        self.K = K
        self.d_max_fn = d_max_fn or (lambda b: half_diagonal(b.dims))

    def mask_for(self, frame, box, box3d):
        depth = self.depth_fn(frame)
        h, w = depth.shape
        m = Mask.from_box(h, w, box)
        vs, us = np.nonzero(m.data)
        d = depth[vs, us]
        ok = np.isfinite(d) & (d > 0)
        pts = camera_to_world(backproject_pixels(us[ok], vs[ok], d[ok], self.K), self.pose_fn(frame))
        c = np.asarray(box3d.center)
        near = (ground_distance(pts, c) <= self.d_max_fn(box3d)) & (np.abs(pts[:, 1] - c[1]) <= 0.5 * box3d.dims[2])
        out = np.zeros((h, w), dtype=bool)
        out[vs[ok][near], us[ok][near]] = True
        return Mask(out)


class PrecomputedProvider:
    """Look up externally produced masks by frame and box corners (1 px tolerance)."""

    name = "precomputed"

    def __init__(self, rows, tolerance=1.0):
        self.by_frame = {}
        for frame, box, mask in rows:
            self.by_frame.setdefault(frame, []).append((np.asarray(box, dtype=np.float64), mask))
        self.tolerance = tolerance

    def mask_for(self, frame, box, box3d=None):
        best, best_err = None, None
        for b, m in self.by_frame.get(frame, []):
            err = float(np.max(np.abs(b - np.asarray(box))))
            if err <= self.tolerance and (best_err is None or err < best_err):
                best, best_err = m, err
        return best


@dataclass
class FilledFrame:
    frame: int
    box: tuple
    mask: Mask
    box3d: Box3D
    center: np.ndarray


@dataclass
class RecoveryContext:
    """Per-sequence inputs the recovery loop needs."""

    n_frames: int
    image_size: tuple  # (width, height)
    K: object
    depth_fn: object
    pose_fn: object
    flow_fn: object  # frame t -> flow t->t+1
    provider: object
    cov_fn: object = None
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    motion_threshold: float = 0.1
    d_max: float = None  # None -> half the class box diagonal in XZ
    residual_max: float = 0.25
    min_mask_pixels: int = 20
    detections_fn: object = None  # frame -> boxes detected in that frame

    def detected(self, frame, box):
        if self.detections_fn is None:
            return False
        return any(box_iou(box, b) > DETECTED_IOU for b in self.detections_fn(frame))

    def d_max_for(self, cls):
        return self.d_max if self.d_max is not None else half_diagonal(self.dims[cls])


def _box_of(member, frame):
    for e in member.tracklet.entries:
        if e.frame == frame:
            return e.detection.box
    return None


def try_recover(ctx, cls, frame, center, motion, points, prev_box, prev_yaw, flow, flow_sign=1.0):
    """One recovery attempt. Returns a FilledFrame or None."""
    box3d = estimate_box3d(center, cls, motion, points, prev_yaw, ctx.dims[cls], ctx.motion_threshold)
    pose = ctx.pose_fn(frame)
    try:
        box = recover_box2d(box3d, pose, ctx.K, ctx.image_size, prev_box, flow, flow_sign)
    except BehindCameraError:
        return None
    if box is None or ctx.detected(frame, box):
        return None
    mask = ctx.provider.mask_for(frame, box, box3d)
    if mask is None or mask.area() < ctx.min_mask_pixels:
        return None
    if validate_recovery(mask, ctx.depth_fn(frame), box3d, pose, ctx.K, ctx.d_max_for(cls)) != VISIBLE:
        return None
    return FilledFrame(frame, box, mask, box3d, np.asarray(center, dtype=np.float64))


def _mean_step(motions, direction):
    if not motions:
        return None
    d, _ = average_motion(motions, direction)
    return d


def _last_points(member, from_end=True):
    frames = reversed(member.frames) if from_end else member.frames
    for f in frames:
        if f in member.points:
            return member.points[f].points
    return None


def extend_forward(ctx, cls, member, start_box, start_frame=None, limit=None):
    """Fill frames after ``member`` until the first failure. Yields FilledFrames lazily."""
    state = member.last_state()
    if state is None:
        return
    motions = member.tail_motions(ctx.residual_max)
    step = _mean_step(motions, "forward")
    pts = _last_points(member)
    prev_box, prev_yaw = start_box, None
    f = member.end + 1 if start_frame is None else start_frame
    stop = ctx.n_frames if limit is None else min(ctx.n_frames, limit)
    while f < stop:
        pred = extrapolate(state, motions, f - state.frame, "forward")[-1]
        ff = try_recover(ctx, cls, f, pred.center, step, pts, prev_box, prev_yaw, ctx.flow_fn(f - 1))
        if ff is None:
            return
        yield ff
        prev_box, prev_yaw = ff.box, ff.box3d.yaw
        f += 1


def extend_backward(ctx, cls, member, start_box):
    state = member.first_state()
    if state is None:
        return
    motions = member.head_motions(ctx.residual_max)
    step = _mean_step(motions, "backward")
    pts = _last_points(member, from_end=False)
    prev_box, prev_yaw = start_box, None
    f = member.start - 1
    while f >= 0:
        pred = extrapolate(state, motions, state.frame - f, "backward")[-1]
        ff = try_recover(ctx, cls, f, pred.center, step, pts, prev_box, prev_yaw, ctx.flow_fn(f), -1.0)
        if ff is None:
            return
        yield ff
        prev_box, prev_yaw = ff.box, ff.box3d.yaw
        f -= 1


def fill_gap(ctx, cls, a, b):
    """Visible frames strictly between tracklets ``a`` and ``b``."""
    sa, sb = a.last_state(), b.first_state()
    out = {}
    if sa is None and sb is None:
        return out
    ma, mb = a.tail_motions(ctx.residual_max), b.head_motions(ctx.residual_max)
    step = _mean_step(ma, "forward")
    if step is None:
        step = _mean_step(mb, "backward")
    pts = _last_points(a) if sa is not None else _last_points(b, from_end=False)
    prev_box, prev_yaw = _box_of(a, a.end), None
    for f in range(a.end + 1, b.start):
        pa = extrapolate(sa, ma, f - sa.frame, "forward")[-1].center if sa is not None else None
        pb = extrapolate(sb, mb, sb.frame - f, "backward")[-1].center if sb is not None else None
        if pa is None:
            c = pb
        elif pb is None:
            c = pa
        else:
            w = (f - sa.frame) / float(sb.frame - sa.frame)
            c = (1.0 - w) * pa + w * pb
        ff = try_recover(ctx, cls, f, c, step, pts, prev_box, prev_yaw, ctx.flow_fn(f - 1) if prev_box else None)
        if ff is not None:
            out[f] = ff
            prev_box, prev_yaw = ff.box, ff.box3d.yaw
        else:
            prev_box = None
    return out


def fill_track(track, ctx, gaps=True, ends=True):
    """Copy of ``track`` with recovered frames in ``filled``; detected frames are never touched."""
    filled = {}
    members = track.members
    if gaps:
        for a, b in zip(members, members[1:]):
            filled.update(fill_gap(ctx, track.cls, a, b))
    if ends:
        last, first = members[-1], members[0]
        for ff in extend_forward(ctx, track.cls, last, _box_of(last, last.end)):
            filled[ff.frame] = ff
        for ff in extend_backward(ctx, track.cls, first, _box_of(first, first.start)):
            filled[ff.frame] = ff
    return replace(track, filled=filled)


def resolve_fill_conflicts(tracks):
    """Drop recovered frames that duplicate another track's recovery.

    Two unmerged tracklets of one object extend into the same frames from
    both sides. Per frame, overlapping recoveries are settled in favour of
    the one temporally closest to its own detections (then lower track id).
    """
    claims = {}
    for tr in tracks:
        det = np.array(sorted(tr.detected_frames()))
        for f, ff in tr.filled.items():
            dist = int(np.min(np.abs(det - f))) if len(det) else 0
            claims.setdefault(f, []).append((dist, tr.id, ff.box))
    drop = set()
    for f, lst in claims.items():
        kept = []
        for dist, tid, box in sorted(lst, key=lambda c: (c[0], c[1])):
            if any(box_iou(box, k) > DETECTED_IOU for k in kept):
                drop.add((tid, f))
            else:
                kept.append(box)
    if not drop:
        return list(tracks)
    return [
        replace(tr, filled={f: ff for f, ff in tr.filled.items() if (tr.id, f) not in drop}) if tr.filled else tr
        for tr in tracks
    ]
