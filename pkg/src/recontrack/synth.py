"""Deterministic synthetic scenes with ground truth.

Actors are cuboids moving on the ground plane (pedestrians get two side slabs
that swing back and forth). Every frame is rendered by exact ray/box
intersection, which yields depth, the optical flow of each visible surface
point, visible silhouettes and the resulting detections. Ground truth covers
per-frame centres, visibility and the true per-step planar motion.

Script format (``parse_script`` / ``format_script``): stanzas ``[scene]``,
``[actor]``, ``[occluder]`` and ``[dropout]`` holding ``key = value`` lines.

[scene]     seed, frames, image (w h), intrinsics (fx fy cx cy), baseline,
            camera_height, depth_noise, flow_noise, min_det_pixels,
            min_det_visibility, ego (repeatable: frame v_lat v_fwd yaw_rate)
[actor]     class, dims (l w h), start (x z yaw), spawn, despawn,
            articulation (fraction of height), motion (repeatable:
            frame v_fwd v_lat yaw_rate)
[occluder]  center (x z), dims (l w h), yaw
[dropout]   actor (index), frames (first last, inclusive), probability
"""
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as rio
from .fusion3d import MotionTransform
from .geometry import CameraIntrinsics, CameraPose, StereoRig, planar_rotation, project_points
from .io import CLASS_IDS, Detection, TrackRecord
from .kernels import raycast_boxes_kernel
from .masks import Mask
from .recovery import DEFAULT_DIMS

ARTICULATION_PERIOD = 8.0


@dataclass
class Segment:
    start: int
    v_fwd: float = 0.0
    v_lat: float = 0.0
    yaw_rate: float = 0.0


@dataclass
class Actor:
    cls: str
    x: float
    z: float
    yaw: float = 0.0
    dims: tuple = None
    motion: list = field(default_factory=list)
    spawn: int = 0
    despawn: int = 10**9
    articulation: float = 0.0

    def __post_init__(self):
        if self.dims is None:
            self.dims = DEFAULT_DIMS[self.cls]
        self.dims = tuple(float(d) for d in self.dims)


@dataclass
class Occluder:
    x: float
    z: float
    dims: tuple = (2.0, 0.5, 4.0)
    yaw: float = 0.0


@dataclass
class Dropout:
    actor: int
    first: int
    last: int
    probability: float = 1.0


@dataclass
class SceneScript:
    seed: int = 0
    n_frames: int = 40
    width: int = 320
    height: int = 120
    fx: float = 160.0
    fy: float = 160.0
    cx: float = 160.0
    cy: float = 60.0
    baseline: float = 0.54
    camera_height: float = 1.65
    ego: list = field(default_factory=list)  # Segment(start, v_fwd, v_lat, yaw_rate) for the camera
    actors: list = field(default_factory=list)
    occluders: list = field(default_factory=list)
    dropouts: list = field(default_factory=list)
    depth_noise: float = 0.0
    flow_noise: float = 0.0
    min_det_pixels: int = 25
    min_det_visibility: float = 0.5

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @property
    def rig(self):
        return StereoRig(self.intrinsics, self.baseline)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def _segment_at(segments, t):
    cur = Segment(0)
    for s in sorted(segments, key=lambda s: s.start):
        if s.start <= t:
            cur = s
    return cur


def integrate(x, z, yaw, segments, n, forward_axis="x"):
    """Planar poses for frames 0..n (inclusive) under piecewise-constant body velocities.

    ``forward_axis`` names the body axis the forward speed acts along: actors
    head along their length (x), the camera looks along z.
    """
    out = np.zeros((n + 1, 3))
    out[0] = (x, z, yaw)
    for t in range(n):
        s = _segment_at(segments, t)
        c, si = math.cos(yaw), math.sin(yaw)
        if forward_axis == "x":
            lx, lz = s.v_fwd, s.v_lat
        else:
            lx, lz = s.v_lat, s.v_fwd
        x += c * lx - si * lz
        z += si * lx + c * lz
        yaw += s.yaw_rate
        out[t + 1] = (x, z, yaw)
    return out


def camera_poses(script):
    traj = integrate(0.0, 0.0, 0.0, script.ego, script.n_frames, forward_axis="z")
    return [CameraPose.from_planar(x, z, yaw) for x, z, yaw in traj]


def actor_trajectory(actor, n):
    return integrate(actor.x, actor.z, actor.yaw, actor.motion, n)


def actor_parts(actor, pose_xzyaw, t, camera_height):
    """(centers (P, 3), rots (P, 3, 3), halves (P, 3)) of the actor's boxes at frame t."""
    x, z, yaw = pose_xzyaw
    l, w, h = actor.dims
    yc = camera_height - h / 2.0
    R = planar_rotation(yaw)
    center = np.array([x, yc, z])
    if actor.articulation <= 0:
        return center[None], R[None], np.array([[l / 2, h / 2, w / 2]])
    swing = actor.articulation * h * math.sin(2.0 * math.pi * t / ARTICULATION_PERIOD)
    local = [
        (np.zeros(3), (0.5 * l, h, 0.5 * w)),
        (np.array([swing, 0.05 * h, 0.375 * w]), (0.4 * l, 0.9 * h, 0.25 * w)),
        (np.array([-swing, 0.05 * h, -0.375 * w]), (0.4 * l, 0.9 * h, 0.25 * w)),
    ]
    centers = np.array([center + R @ off for off, _ in local])
    halves = np.array([[d[0] / 2, d[1] / 2, d[2] / 2] for _, d in local])
    return centers, np.repeat(R[None], len(local), axis=0), halves


def occluder_parts(occ, camera_height):
    l, w, h = occ.dims
    c = np.array([occ.x, camera_height - h / 2.0, occ.z])
    return c[None], planar_rotation(occ.yaw)[None], np.array([[l / 2, h / 2, w / 2]])


def true_motion(traj, t):
    """Ground-truth planar motion of the actor centre from frame t to t+1."""
    x0, z0, y0 = traj[t]
    x1, z1, y1 = traj[t + 1]
    th = y1 - y0
    c, s = math.cos(th), math.sin(th)
    return MotionTransform(x1 - (c * x0 - s * z0), z1 - (s * x0 + c * z0), th)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _rng(seed, frame, channel):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(frame), int(channel)])))


def _camera_rays(script, pose):
    K = script.intrinsics
    vs, us = np.mgrid[0 : script.height, 0 : script.width].astype(np.float64)
    dirs = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1)
    return dirs @ pose.R.T, us, vs


@dataclass
class FrameRender:
    depth: np.ndarray  # noiseless, 0 where nothing is hit
    owner: np.ndarray  # actor index, -1 nothing, -2 - k for occluder k
    visible: dict  # actor index -> bool mask of visible pixels
    silhouette: dict  # actor index -> unoccluded pixel count
    flow: np.ndarray = None  # noiseless flow to the next frame


class SceneRenderer:
    def __init__(self, script):
        self.script = script
        self.poses = camera_poses(script)
        self.trajs = [actor_trajectory(a, script.n_frames) for a in script.actors]

    def alive(self, i, t):
        a = self.script.actors[i]
        return a.spawn <= t < a.despawn

    def boxes(self, t, alive_at=None):
        """Stacked box arrays and their owner labels for frame t (liveness judged at ``alive_at``)."""
        s = self.script
        alive_at = t if alive_at is None else alive_at
        cs, rs, hs, owners = [], [], [], []
        for i, a in enumerate(s.actors):
            if not self.alive(i, alive_at):
                continue
            c, r, h = actor_parts(a, self.trajs[i][t], t, s.camera_height)
            cs.append(c)
            rs.append(r)
            hs.append(h)
            owners += [i] * len(c)
        for k, occ in enumerate(s.occluders):
            c, r, h = occluder_parts(occ, s.camera_height)
            cs.append(c)
            rs.append(r)
            hs.append(h)
            owners.append(-2 - k)
        if not cs:
            return np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.array([], dtype=np.int64)
        return np.vstack(cs), np.concatenate(rs), np.vstack(hs), np.array(owners)

    def render(self, t, with_flow=True):
        s = self.script
        pose = self.poses[t]
        dirs, us, vs = _camera_rays(s, pose)
        centers, rots, halves, owners = self.boxes(t)
        H, W = s.height, s.width
        if len(centers) == 0:
            empty = FrameRender(np.zeros((H, W)), np.full((H, W), -1), {}, {})
            if with_flow and t + 1 <= s.n_frames:
                empty.flow = np.zeros((H, W, 2))
            return empty
        hit = raycast_boxes_kernel(
            np.ascontiguousarray(pose.t), np.ascontiguousarray(dirs), centers, np.ascontiguousarray(rots), halves
        )
        best = np.argmin(hit, axis=0)
        depth = np.take_along_axis(hit, best[None], axis=0)[0]
        valid = np.isfinite(depth)
        owner = np.where(valid, owners[best], -1)
        depth = np.where(valid, depth, 0.0)

        visible, silhouette = {}, {}
        for i in sorted(set(owners.tolist())):
            if i < 0:
                continue
            mine = owners == i
            silhouette[i] = int(np.isfinite(hit[mine]).any(axis=0).sum())
            visible[i] = owner == i

        fr = FrameRender(depth, owner, visible, silhouette)
        if with_flow:
            fr.flow = self._flow(t, dirs, depth, valid, best, us, vs)
        return fr

    def _flow(self, t, dirs, depth, valid, best, us, vs):
        s = self.script
        c0, r0, _, _ = self.boxes(t)
        c1, r1, _, _ = self.boxes(t + 1, alive_at=t)
        X = self.poses[t].t + depth[..., None] * dirs
        flow = np.zeros(depth.shape + (2,))
        K = s.intrinsics
        for b in range(len(c0)):
            sel = valid & (best == b)
            if not sel.any():
                continue
            local = (X[sel] - c0[b]) @ r0[b]
            X1 = local @ r1[b].T + c1[b]
            uv, _ = project_points(X1, self.poses[t + 1], K)
            flow[sel, 0] = uv[:, 0] - us[sel]
            flow[sel, 1] = uv[:, 1] - vs[sel]
        return flow


@dataclass
class SceneBundle:
    script: SceneScript
    rig: StereoRig
    poses: list
    depth: list
    flow: list  # flow[t]: t -> t+1, len n_frames - 1
    detections: dict  # frame -> [Detection]
    masks: dict  # frame -> {det_index: Mask}
    det_actor: dict  # (frame, det_index) -> actor index
    gt: list  # TrackRecord (mask + box), track_id = actor index + 1
    gt_visible: np.ndarray  # (n_actors, n_frames) bool
    gt_centers: np.ndarray  # (n_actors, n_frames, 3)
    gt_motion: list  # per actor: list of MotionTransform t -> t+1
    visible_pixels: np.ndarray  # (n_actors, n_frames) int
    clean_flow: list = None
    clean_depth: list = None

    @property
    def n_frames(self):
        return self.script.n_frames

    @property
    def image_size(self):
        return (self.script.width, self.script.height)


def render(script, with_flow=True):
    """Render a whole scene into a :class:`SceneBundle` (``with_flow=False`` skips flow)."""
    s = script
    R = SceneRenderer(s)
    n, A = s.n_frames, len(s.actors)
    depth, flow, clean_depth, clean_flow = [], [], [], []
    detections, masks, det_actor = {}, {}, {}
    gt = []
    gt_visible = np.zeros((A, n), dtype=bool)
    vis_px = np.zeros((A, n), dtype=np.int64)
    gt_centers = np.zeros((A, n, 3))
    for t in range(n):
        fr = R.render(t, with_flow=with_flow and t < n - 1)
        d = fr.depth.copy()
        if s.depth_noise > 0:
            noise = _rng(s.seed, t, 1).normal(0.0, s.depth_noise, d.shape)
            d = np.where(d > 0, np.maximum(d + noise, 1e-3), 0.0)
        depth.append(d)
        clean_depth.append(fr.depth)
        if fr.flow is not None:
            fl = fr.flow.copy()
            if s.flow_noise > 0:
                fl = fl + _rng(s.seed, t, 2).normal(0.0, s.flow_noise, fl.shape)
            flow.append(fl)
            clean_flow.append(fr.flow)

        drop_rng = _rng(s.seed, t, 3)
        frame_dets = []
        for i, a in enumerate(s.actors):
            gt_centers[i, t] = (R.trajs[i][t][0], s.camera_height - a.dims[2] / 2.0, R.trajs[i][t][1])
            if i not in fr.visible:
                continue
            vis = fr.visible[i]
            npx = int(vis.sum())
            vis_px[i, t] = npx
            if npx == 0:
                continue
            gt_visible[i, t] = True
            m = Mask(vis)
            gt.append(TrackRecord(t, i + 1, CLASS_IDS[a.cls], 1.0, m.bbox(), m))
            frac = npx / max(fr.silhouette[i], 1)
            if npx < s.min_det_pixels or frac < s.min_det_visibility:
                continue
            dropped = False
            for dr in s.dropouts:
                if dr.actor == i and dr.first <= t <= dr.last:
                    dropped = dropped or drop_rng.random() < dr.probability
            if dropped:
                continue
            frame_dets.append((i, m))
        order = _rng(s.seed, t, 4).permutation(len(frame_dets))
        for j, k in enumerate(order):
            i, m = frame_dets[k]
            detections.setdefault(t, []).append(Detection(t, s.actors[i].cls, 1.0, m.bbox()))
            masks.setdefault(t, {})[j] = m
            det_actor[(t, j)] = i
    gt_motion = [[true_motion(R.trajs[i], t) for t in range(n - 1)] for i in range(A)]
    return SceneBundle(
        s, s.rig, R.poses[:n], depth, flow, detections, masks, det_actor, gt, gt_visible, gt_centers, gt_motion,
        vis_px, clean_flow, clean_depth,
    )


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_bundle(bundle, path):
    """Write the sequence directory plus ``gt.txt``/``gt_boxes.txt`` and ``script.txt``."""
    path = Path(path)
    (path / "flow").mkdir(parents=True, exist_ok=True)
    (path / "depth").mkdir(parents=True, exist_ok=True)
    dets = [d for t in sorted(bundle.detections) for d in bundle.detections[t]]
    rio.write_detections(path / "detections.txt", dets)
    rio.write_masks(
        path / "masks.txt",
        [(t, j, bundle.masks[t][j]) for t in sorted(bundle.masks) for j in sorted(bundle.masks[t])],
    )
    for t, d in enumerate(bundle.depth):
        rio.write_depth(path / "depth" / f"{t:06d}.dpt", d)
    for t, f in enumerate(bundle.flow):
        rio.write_flow(path / "flow" / f"{t:06d}.flo", f)
    rio.write_poses(path / "poses.txt", bundle.poses)
    rio.write_calib(path / "calib.txt", bundle.rig)
    rio.write_mask_records(path / "gt.txt", bundle.gt)
    rio.write_box_records(path / "gt_boxes.txt", bundle.gt)
    (path / "script.txt").write_text(format_script(bundle.script))


def _nums(v):
    return [float(x) for x in v.split()]


def parse_script(text):
    s = SceneScript()
    s.ego, s.actors, s.occluders, s.dropouts = [], [], [], []
    section = None
    cur = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section == "actor":
                cur = {"motion": []}
                s.actors.append(cur)
            elif section == "occluder":
                cur = {}
                s.occluders.append(cur)
            elif section == "dropout":
                cur = {}
                s.dropouts.append(cur)
            elif section == "scene":
                cur = None
            else:
                raise ValueError(f"line {lineno}: unknown stanza [{section}]")
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        if section == "scene":
            if key == "seed":
                s.seed = int(val)
            elif key == "frames":
                s.n_frames = int(val)
            elif key == "image":
                s.width, s.height = (int(x) for x in val.split())
            elif key == "intrinsics":
                s.fx, s.fy, s.cx, s.cy = _nums(val)
            elif key == "ego":
                f, lat, fwd, yr = _nums(val)
                s.ego.append(Segment(int(f), fwd, lat, yr))
            elif key in ("baseline", "camera_height", "depth_noise", "flow_noise", "min_det_visibility"):
                setattr(s, key, float(val))
            elif key == "min_det_pixels":
                s.min_det_pixels = int(val)
            else:
                raise ValueError(f"line {lineno}: unknown scene key {key!r}")
        elif section in ("actor", "occluder", "dropout"):
            if section == "actor" and key == "motion":
                f, fwd, lat, yr = _nums(val)
                cur["motion"].append(Segment(int(f), fwd, lat, yr))
            else:
                cur[key] = val
        else:
            raise ValueError(f"line {lineno}: key outside a stanza")

    try:
        return _build_script(s)
    except KeyError as e:
        raise ValueError(f"missing key {e.args[0]!r} in a stanza") from None


def _build_script(s):
    actors = []
    for d in s.actors:
        x, z, yaw = _nums(d["start"])
        actors.append(
            Actor(
                d["class"], x, z, yaw,
                dims=tuple(_nums(d["dims"])) if "dims" in d else None,
                motion=d["motion"],
                spawn=int(d.get("spawn", 0)),
                despawn=int(d.get("despawn", 10**9)),
                articulation=float(d.get("articulation", 0.0)),
            )
        )
    s.actors = actors
    s.occluders = [
        Occluder(*_nums(d["center"]), dims=tuple(_nums(d.get("dims", "2 0.5 4"))), yaw=float(d.get("yaw", 0.0)))
        for d in s.occluders
    ]
    s.dropouts = [
        Dropout(int(d["actor"]), *(int(x) for x in d["frames"].split()), probability=float(d.get("probability", 1.0)))
        for d in s.dropouts
    ]
    return s


def format_script(s):
    def r(v):
        return repr(float(v))

    lines = [
        "[scene]",
        f"seed = {s.seed}",
        f"frames = {s.n_frames}",
        f"image = {s.width} {s.height}",
        f"intrinsics = {r(s.fx)} {r(s.fy)} {r(s.cx)} {r(s.cy)}",
        f"baseline = {r(s.baseline)}",
        f"camera_height = {r(s.camera_height)}",
        f"depth_noise = {r(s.depth_noise)}",
        f"flow_noise = {r(s.flow_noise)}",
        f"min_det_pixels = {s.min_det_pixels}",
        f"min_det_visibility = {r(s.min_det_visibility)}",
    ]
    for g in s.ego:
        lines.append(f"ego = {g.start} {r(g.v_lat)} {r(g.v_fwd)} {r(g.yaw_rate)}")
    for a in s.actors:
        lines += [
            "",
            "[actor]",
            f"class = {a.cls}",
            "dims = " + " ".join(r(d) for d in a.dims),
            f"start = {r(a.x)} {r(a.z)} {r(a.yaw)}",
            f"spawn = {a.spawn}",
            f"despawn = {a.despawn}",
            f"articulation = {r(a.articulation)}",
        ]
        for m in a.motion:
            lines.append(f"motion = {m.start} {r(m.v_fwd)} {r(m.v_lat)} {r(m.yaw_rate)}")
    for o in s.occluders:
        lines += ["", "[occluder]", f"center = {r(o.x)} {r(o.z)}", "dims = " + " ".join(r(d) for d in o.dims), f"yaw = {r(o.yaw)}"]
    for d in s.dropouts:
        lines += ["", "[dropout]", f"actor = {d.actor}", f"frames = {d.first} {d.last}", f"probability = {r(d.probability)}"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# benchmark suite
# ---------------------------------------------------------------------------

SUITE_FRAMES = 40
GAP_RANGE = (3, 15)  # allowed detection gaps (frames)


def _scene_rng(seed, attempt):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7919, int(attempt)])))


def _u_interval(centers, rots, halves, pose, K):
    """Horizontal image extent of a set of boxes, or None if any corner is behind the camera."""
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    pts = []
    for c, R, h in zip(centers, rots, halves):
        pts.append(c + (signs * h) @ R.T)
    uv, z = project_points(np.vstack(pts), pose, K)
    if np.any(z <= 0.1):
        return None
    return float(uv[:, 0].min()), float(uv[:, 0].max())


def predicted_hidden(script, actor_index, occluder):
    """Per-frame flag: the occluder is predicted to hide enough of the actor to
    suppress its detection (1D horizontal-interval model)."""
    poses = camera_poses(script)
    a = script.actors[actor_index]
    traj = actor_trajectory(a, script.n_frames)
    K = script.intrinsics
    oc, orr, oh = occluder_parts(occluder, script.camera_height)
    out = np.zeros(script.n_frames, dtype=bool)
    for t in range(script.n_frames):
        ai = _u_interval(*actor_parts(a, traj[t], t, script.camera_height), poses[t], K)
        oi = _u_interval(oc, orr, oh, poses[t], K)
        if ai is None or oi is None or ai[1] <= ai[0]:
            continue
        overlap = max(0.0, min(ai[1], oi[1]) - max(ai[0], oi[0]))
        out[t] = 1.0 - overlap / (ai[1] - ai[0]) < script.min_det_visibility
    return out


def _run_around(flags, t):
    if not flags[t]:
        return 0
    lo = hi = t
    while lo > 0 and flags[lo - 1]:
        lo -= 1
    while hi < len(flags) - 1 and flags[hi + 1]:
        hi += 1
    return hi - lo + 1


def size_occluder(script, actor_index, occluder, t_occ, gap, lo=0.1, hi=20.0):
    """Smallest occluder length (bisection) whose predicted hiding run around
    ``t_occ`` reaches ``gap`` frames. Modifies and returns ``occluder``."""
    def run(length):
        occluder.dims = (length, occluder.dims[1], occluder.dims[2])
        return _run_around(predicted_hidden(script, actor_index, occluder), t_occ)

    if run(hi) < gap:
        return occluder
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if run(mid) >= gap:
            hi = mid
        else:
            lo = mid
    run(hi)
    return occluder


def detection_runs(bundle, actor):
    """Sorted frames in which ``actor`` was detected."""
    return sorted(t for (t, _), i in bundle.det_actor.items() if i == actor)


def detection_gaps(frames):
    return [b - a - 1 for a, b in zip(frames, frames[1:]) if b - a > 1]


def _draw_scene(seed, rng, depth_noise):
    s = SceneScript(seed=seed, n_frames=SUITE_FRAMES, depth_noise=depth_noise)
    moving_camera = rng.random() < 0.5
    ego_v = float(rng.uniform(0.1, 0.3)) if moving_camera else 0.0
    ego_w = float(rng.choice([0.0, -0.004, 0.004])) if moving_camera else 0.0
    if moving_camera:
        s.ego = [Segment(0, ego_v, 0.0, ego_w)]
    cam = integrate(0.0, 0.0, 0.0, s.ego, s.n_frames, forward_axis="z")

    # occluded actor crossing laterally behind a static occluder
    cls = "car" if rng.random() < 0.6 else "pedestrian"
    gap = int(rng.integers(4, 14))
    t_occ = int(rng.integers(16, 25))
    z_rel = float(rng.uniform(14, 22) if cls == "car" else rng.uniform(8, 13))
    speed = float(rng.uniform(0.4, 0.8) if cls == "car" else rng.uniform(0.12, 0.2))
    direction = 1.0 if rng.random() < 0.5 else -1.0
    x_shadow = float(rng.uniform(-0.25, 0.25)) * z_rel
    cx_, cz_, cyaw = cam[t_occ]
    # camera-frame offsets to world at t_occ
    c, si = math.cos(cyaw), math.sin(cyaw)
    ax = cx_ + c * x_shadow + si * z_rel
    az = cz_ - si * x_shadow + c * z_rel
    yaw = 0.0 if direction > 0 else math.pi
    a = Actor(
        cls, ax - direction * speed * t_occ, az, yaw,
        motion=[Segment(0, speed)],
        articulation=0.1 if cls == "pedestrian" else 0.0,
    )
    if rng.random() < 0.3:
        # a gentle turn after the occlusion
        a.motion.append(Segment(t_occ + gap, speed, 0.0, float(rng.uniform(-0.03, 0.03))))
    s.actors.append(a)
    z_occ = z_rel - float(rng.uniform(5, 8))
    ox = cx_ + c * x_shadow * z_occ / z_rel + si * z_occ
    oz = cz_ - si * x_shadow * z_occ / z_rel + c * z_occ
    occ = Occluder(ox, oz, dims=(2.0, 0.5, 4.0))
    size_occluder(s, 0, occ, t_occ, gap)
    s.occluders.append(occ)

    # second actor: parked or driving in depth, with scripted missed detections
    cls_b = "car" if rng.random() < 0.5 else "pedestrian"
    side = -1.0 if x_shadow > 0 else 1.0
    zb = float(rng.uniform(9, 18))
    xb = side * float(rng.uniform(0.3, 0.55)) * zb
    vb = float(rng.choice([0.0, rng.uniform(0.1, 0.4)])) if cls_b == "car" else float(rng.uniform(0.05, 0.12))
    yaw_b = math.pi / 2 if rng.random() < 0.5 else -math.pi / 2
    s.actors.append(
        Actor(cls_b, xb, zb + cam[0][1], yaw_b, motion=[Segment(0, vb)], articulation=0.1 if cls_b == "pedestrian" else 0.0)
    )
    d0 = int(rng.integers(8, 28))
    s.dropouts.append(Dropout(1, d0, d0 + int(rng.integers(1, 5)), 1.0))

    # sometimes a third actor far away, with sporadic misses
    if rng.random() < 0.5:
        cls_c = "pedestrian" if rng.random() < 0.6 else "car"
        zc = float(rng.uniform(22, 30)) if cls_c == "car" else float(rng.uniform(12, 16))
        xc = -side * float(rng.uniform(0.5, 0.8)) * zc
        vc = 0.1 if cls_c == "pedestrian" else 0.3
        s.actors.append(
            Actor(cls_c, xc, zc + cam[0][1], 0.0 if xc < 0 else math.pi, motion=[Segment(0, vc)],
                  articulation=0.1 if cls_c == "pedestrian" else 0.0)
        )
        d1 = int(rng.integers(5, 30))
        s.dropouts.append(Dropout(2, d1, d1 + int(rng.integers(1, 4)), float(rng.choice([0.5, 1.0]))))
    return s, t_occ


def _acceptable(script, t_occ):
    b = render(replace_noise(script, 0.0), with_flow=False)
    for i in range(len(script.actors)):
        frames = detection_runs(b, i)
        if len(frames) < 6:
            return False
        if any(g > GAP_RANGE[1] for g in detection_gaps(frames)):
            return False
    a = detection_runs(b, 0)
    before = [f for f in a if f < t_occ]
    after = [f for f in a if f > t_occ]
    if len(before) < 5 or len(after) < 5 or t_occ in a:
        return False
    g = after[0] - before[-1] - 1
    return GAP_RANGE[0] <= g <= GAP_RANGE[1]


def replace_noise(script, depth_noise):
    from dataclasses import replace as _replace

    return _replace(script, depth_noise=depth_noise)


def make_scene(seed, depth_noise=0.0):
    """One benchmark scene: a scripted occlusion plus missed detections.

    Candidate scenes are drawn from a seeded stream and rejected until every
    actor's detection gaps are at most 15 frames and the scripted occlusion
    leaves a 3-15 frame gap.
    """
    depth_noise = 0.0 if depth_noise is None else depth_noise
    for attempt in range(200):
        script, t_occ = _draw_scene(seed, _scene_rng(seed, attempt), depth_noise)
        if _acceptable(script, t_occ):
            return script
    raise RuntimeError(f"no acceptable scene for seed {seed}")


def make_suite(count=20, depth_noise=0.0, first_seed=0):
    return [make_scene(first_seed + i, depth_noise) for i in range(count)]
