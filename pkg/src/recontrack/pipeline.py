"""Sequence loading and the two-stage tracking pipeline (offline and online)."""
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as rio
from .config import PipelineConfig
from .errors import BehindCameraError, DegenerateGeometryError, InputFormatError
from .fusion3d import accumulate_reconstruction, filter_points, frame_points, step_motion
from .geometry import camera_to_world, position_covariance, world_to_camera
from .io import CLASS_IDS, TrackRecord, fnum
from .merge3d import ObjectState, OnlineMerger, Track, TrackletMotion, extrapolate, merge_tracklets, shape_cov
from .masks import box_iou
from .recovery import (
    DETECTED_IOU,
    DepthConsistentProvider,
    PrecomputedProvider,
    RecoveryContext,
    _box_of,
    _last_points,
    _mean_step,
    fill_track,
    resolve_fill_conflicts,
    half_diagonal,
    principal_yaw,
    try_recover,
)
from .tracklet2d import TrackletBuilder, build_tracklets

MIN_COV_DEPTH = 1.0  # covariance of points closer than this is evaluated at this depth
EXTENT_PERCENTILES = (5.0, 95.0)  # robust footprint extent used by the 'extent' centre


# ---------------------------------------------------------------------------
# sequence inputs
# ---------------------------------------------------------------------------


class Sequence:
    """All inputs of one sequence. Depth and flow rasters load lazily and are cached."""

    def __init__(self, n_frames, image_size, rig, poses, detections, masks, depth_fn, flow_fn, name=""):
        self.n_frames = n_frames
        self.image_size = tuple(image_size)  # (width, height)
        self.rig = rig
        self.poses = poses
        self.detections = detections
        self.masks = masks
        self._depth_fn = depth_fn
        self._flow_fn = flow_fn
        self._cache = {}
        self._lock = threading.Lock()
        self.name = name

    @property
    def K(self):
        return self.rig.intrinsics

    def pose(self, t):
        return self.poses[min(max(int(t), 0), self.n_frames - 1)]

    def _cached(self, key, fn):
        with self._lock:
            if key not in self._cache:
                self._cache[key] = fn()
            return self._cache[key]

    def depth(self, t):
        return self._cached(("d", t), lambda: self._depth_fn(t))

    def flow(self, t):
        """Flow from frame t to t+1."""
        if not 0 <= t < self.n_frames - 1:
            return None
        return self._cached(("f", t), lambda: self._flow_fn(t))

    def restricted(self, classes):
        """Copy keeping only detections of ``classes`` (masks re-indexed to match)."""
        dets, masks = {}, {}
        for t, lst in self.detections.items():
            keep = [j for j, d in enumerate(lst) if d.cls in classes]
            if keep:
                dets[t] = [lst[j] for j in keep]
                masks[t] = {i: self.masks[t][j] for i, j in enumerate(keep)}
        out = Sequence(self.n_frames, self.image_size, self.rig, self.poses, dets, masks, self._depth_fn, self._flow_fn, self.name)
        out._cache = self._cache
        out._lock = self._lock
        return out

    @classmethod
    def from_bundle(cls, bundle):
        return cls(
            bundle.n_frames,
            bundle.image_size,
            bundle.rig,
            bundle.poses,
            bundle.detections,
            bundle.masks,
            lambda t: bundle.depth[t],
            lambda t: bundle.flow[t],
            name=f"seed{bundle.script.seed}",
        )

    @classmethod
    def from_dir(cls, path):
        path = Path(path)

        def need(p):
            if not p.is_file():
                raise InputFormatError(p, 0, "file not found")
            return p

        poses = rio.read_poses(need(path / "poses.txt"))
        rig = rio.read_calib(need(path / "calib.txt"))
        n = len(poses)
        if n == 0:
            raise InputFormatError(path / "poses.txt", 0, "no poses")
        depth_path = lambda t: path / "depth" / f"{t:06d}.dpt"  # noqa: E731
        flow_path = lambda t: path / "flow" / f"{t:06d}.flo"  # noqa: E731
        for t in range(n):
            need(depth_path(t))
        for t in range(n - 1):
            need(flow_path(t))
        w, h = rio.read_depth(depth_path(0)).shape[::-1]

        dets = rio.read_detections(need(path / "detections.txt"))
        masks = rio.read_masks(need(path / "masks.txt"))
        for t, lst in dets.items():
            if not 0 <= t < n:
                raise InputFormatError(path / "detections.txt", 0, f"frame {t} outside 0..{n - 1}")
            for j in range(len(lst)):
                m = masks.get(t, {}).get(j)
                if m is None:
                    raise InputFormatError(path / "masks.txt", 0, f"no mask for frame {t} detection {j}")
                if m.shape != (h, w):
                    raise InputFormatError(path / "masks.txt", 0, f"mask {t}/{j} is {m.shape}, images are {(h, w)}")

        def load_depth(t):
            d = rio.read_depth(depth_path(t))
            if d.shape != (h, w):
                raise InputFormatError(depth_path(t), 4, f"size {d.shape[::-1]} differs from {(w, h)}")
            return d

        def load_flow(t):
            f = rio.read_flow(flow_path(t))
            if f.shape[:2] != (h, w):
                raise InputFormatError(flow_path(t), 4, f"size {f.shape[1::-1]} differs from {(w, h)}")
            return f

        return cls(n, (w, h), rig, poses, dets, masks, load_depth, load_flow, name=path.name)


def load_sequence(path):
    return Sequence.from_dir(path)


# ---------------------------------------------------------------------------
# 3D stage helpers
# ---------------------------------------------------------------------------


def make_cov_fn(seq, sigma):
    def cov(frame, center):
        pose = seq.pose(frame)
        pc = world_to_camera(np.asarray(center, dtype=np.float64), pose)
        if pc[2] < MIN_COV_DEPTH:
            pc = np.array([pc[0], pc[1], MIN_COV_DEPTH])
        p = camera_to_world(pc, pose)
        try:
            return position_covariance(p, seq.rig, pose, sigma, sigma)
        except (BehindCameraError, DegenerateGeometryError):
            return np.eye(3) * 1e6

    return cov


def footprint_center(points):
    """Midpoint of the robust X/Z extent, median height."""
    lo, hi = np.percentile(points[:, [0, 2]], EXTENT_PERCENTILES, axis=0)
    mid = 0.5 * (lo + hi)
    return np.array([mid[0], np.median(points[:, 1]), mid[1]])


def unseen_footprint_var(points, length):
    """Variance of a centre whose footprint of ``length`` was seen over only part of it.

    The observed length is the robust extent of the cloud along its dominant
    X/Z axis; the unseen remainder is treated as a uniform offset of the centre.
    """
    if points is None or len(points) < 2:
        return length * length / 12.0
    xz = points[:, [0, 2]] - np.mean(points[:, [0, 2]], axis=0)
    yaw = principal_yaw(points)
    if yaw is None:
        seen = 0.0
    else:
        proj = xz @ np.array([np.cos(yaw), np.sin(yaw)])
        lo, hi = np.percentile(proj, EXTENT_PERCENTILES)
        seen = hi - lo
    miss = max(length - seen, 0.0)
    return miss * miss / 12.0


def object_centers(recon, mode="extent"):
    """frame -> object centre.

    ``frame``   median of that frame's filtered points;
    ``fused``   median of the segment's fused cloud, mapped into each frame;
    ``extent``  footprint centre of the fused cloud, mapped into each frame.
    The fused variants use every view of the segment, so a frame that is half
    occluded still gets the centre of the whole object.
    """
    out = {}
    if mode == "frame":
        for f, op in zip(recon.frames, recon.points):
            if op is not None and len(op):
                out[f] = np.median(op.points, axis=0)
        return out
    for seg in sorted(set(s for s in recon.segment if s >= 0)):
        cloud = recon.fused_points(seg)
        c_ref = footprint_center(cloud) if mode == "extent" else np.median(cloud, axis=0)
        for f, s, T in zip(recon.frames, recon.segment, recon.to_ref):
            if s == seg:
                out[f] = T.inverse().apply(c_ref)
    return out


def shape_variances(recon, length, mode="extent"):
    """frame -> unseen-footprint variance, from the same cloud the centre uses."""
    out = {}
    if mode == "frame":
        for f, op in zip(recon.frames, recon.points):
            if op is not None and len(op):
                out[f] = unseen_footprint_var(op.points, length)
        return out
    for seg in sorted(set(s for s in recon.segment if s >= 0)):
        var = unseen_footprint_var(recon.fused_points(seg), length)
        out.update({f: var for f, s in zip(recon.frames, recon.segment) if s == seg})
    return out


def fuse_tracklet(tracklet, seq, cfg, cov_fn):
    frames = tracklet.frames
    K = seq.K
    filtered = []
    for e in tracklet.entries:
        op = frame_points(e.mask, seq.depth(e.frame), seq.pose(e.frame), K, e.frame)
        filtered.append(filter_points(op, cfg.lof_k))
    transforms = [
        step_motion(filtered[i], filtered[i + 1], seq.flow(frames[i]), cfg.corr_cap, cfg.max_yaw_step)
        for i in range(len(frames) - 1)
    ]
    recon = accumulate_reconstruction(frames, filtered, transforms)
    centers = object_centers(recon, cfg.center_mode)
    if cfg.footprint_prior:
        var = shape_variances(recon, max(cfg.dims[tracklet.cls][:2]), cfg.center_mode)
    else:
        var = {}
    states = {}
    for f, c in centers.items():
        v = var.get(f, 0.0)
        states[f] = ObjectState(f, c, cov_fn(f, c) + shape_cov(v), v)
    points = {f: op for f, op in zip(frames, filtered) if op is not None}
    return TrackletMotion(tracklet, list(frames), transforms, centers, states, points, recon)


def bare_motion(tracklet):
    return TrackletMotion(tracklet, list(tracklet.frames), [], {}, {})


def recovery_context(seq, cfg, cov_fn):
    if cfg.mask_provider == "precomputed":
        provider = PrecomputedProvider(rio.read_box_masks(cfg.precomputed_masks))
    else:
        d_max = (lambda b: cfg.d_max) if cfg.d_max is not None else (lambda b: half_diagonal(b.dims))
        provider = DepthConsistentProvider(seq.depth, seq.pose, seq.K, d_max)
    return RecoveryContext(
        seq.n_frames,
        seq.image_size,
        seq.K,
        seq.depth,
        seq.pose,
        seq.flow,
        provider,
        cov_fn,
        cfg.dims,
        cfg.motion_threshold,
        cfg.d_max,
        cfg.residual_max,
        cfg.min_mask_pixels,
        lambda t: [d.box for d in seq.detections.get(t, [])],
    )


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    tracks: list
    records: list
    tracklets: list
    motions: list
    timings: dict = field(default_factory=dict)

    def timing_report(self):
        total = sum(self.timings.values())
        lines = [f"stage {k:<8s} {v * 1000.0:10.1f} ms" for k, v in self.timings.items()]
        lines.append(f"stage {'total':<8s} {total * 1000.0:10.1f} ms")
        return "\n".join(lines) + "\n"


def fill_score(track):
    return 0.5 * min(e.detection.score for m in track.members for e in m.tracklet.entries)


def track_records(tracks):
    out = []
    for tr in tracks:
        cid = CLASS_IDS[tr.cls]
        for m in tr.members:
            for e in m.tracklet.entries:
                out.append(TrackRecord(e.frame, tr.id, cid, e.detection.score, e.detection.box, e.mask))
        if tr.filled:
            s = fill_score(tr)
            for f in sorted(tr.filled):
                ff = tr.filled[f]
                out.append(TrackRecord(f, tr.id, cid, s, tuple(float(x) for x in ff.box), ff.mask))
    out.sort(key=lambda r: (r.frame, r.track_id))
    return out


BOX_FILE = "tracks_box.txt"
MASK_FILE = "tracks_mask.txt"


def write_outputs(result, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rio.write_box_records(out_dir / BOX_FILE, result.records)
    rio.write_mask_records(out_dir / MASK_FILE, result.records)
    return out_dir / BOX_FILE, out_dir / MASK_FILE


def track_centers(track):
    """(frame, centre) for every frame of a track; detected frames lacking a 3D
    state borrow the nearest available centre of the same track."""
    known = {}
    for m in track.members:
        known.update(m.centers)
    for f, ff in track.filled.items():
        known[f] = ff.center
    keys = np.array(sorted(known))
    out = []
    for f in track.frames():
        if f in known:
            out.append((f, known[f]))
        elif len(keys):
            g = int(keys[np.argmin(np.abs(keys - f) * 2 + (keys > f))])
            out.append((f, known[g]))
        else:
            out.append((f, np.full(3, np.nan)))
    return out


def write_trajectories(tracks, path):
    with open(path, "w") as fh:
        for tr in sorted(tracks, key=lambda t: t.id):
            for f, c in track_centers(tr):
                fh.write(f"{f} {tr.id} {fnum(c[0])} {fnum(c[1])} {fnum(c[2])}\n")


def write_reconstructions(motions, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for m in sorted(motions, key=lambda m: m.id):
        with open(out_dir / f"recon_{m.id:04d}.txt", "w") as fh:
            if m.recon is not None:
                for x, y, z, f in m.recon.fused_cloud():
                    fh.write(f"{fnum(x)} {fnum(y)} {fnum(z)} {int(f)}\n")
        with open(out_dir / f"transforms_{m.id:04d}.txt", "w") as fh:
            for f, T in zip(m.frames, m.transforms):
                if T is None:
                    fh.write(f"{f} nan nan nan nan 0\n")
                else:
                    fh.write(f"{f} {fnum(T.x)} {fnum(T.z)} {fnum(T.theta)} {fnum(T.residual)} {T.n_pairs}\n")


# ---------------------------------------------------------------------------
# offline
# ---------------------------------------------------------------------------


class _Timer:
    def __init__(self):
        self.timings = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = timer.timings.get(name, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def fuse_all(tracklets, seq, cfg, cov_fn=None):
    cov_fn = cov_fn or make_cov_fn(seq, cfg.sigma_px)
    return _map(lambda t: fuse_tracklet(t, seq, cfg, cov_fn), tracklets, cfg.threads)


def run_offline(seq, cfg, motions=None):
    timer = _Timer()
    with timer("2d"):
        tracklets = build_tracklets(range(seq.n_frames), seq.detections, seq.masks, seq.flow, cfg.iou_min)
    cov_fn = make_cov_fn(seq, cfg.sigma_px)
    if cfg.stage == "2d-only":
        motions = [bare_motion(t) for t in tracklets]
        tracks = merge_tracklets(motions, max_gap=0)
    else:
        with timer("fusion"):
            if motions is None:
                motions = fuse_all(tracklets, seq, cfg, cov_fn)
        with timer("merge"):
            tracks = merge_tracklets(motions, cfg.max_gap, cfg.merge_score, cov_fn, cfg.residual_max)
        if cfg.stage == "full":
            with timer("fill"):
                ctx = recovery_context(seq, cfg, cov_fn)
                tracks = resolve_fill_conflicts(_map(lambda tr: fill_track(tr, ctx), tracks, cfg.threads))
    with timer("output"):
        records = track_records(tracks)
    return PipelineResult(tracks, records, tracklets, motions, timer.timings)


# ---------------------------------------------------------------------------
# online
# ---------------------------------------------------------------------------


class OnlineTracker:
    """Frame-by-frame tracker. ``step(t)`` returns the records emitted for frame t,
    computed from inputs of frames <= t only."""

    def __init__(self, seq, cfg):
        self.seq = seq
        self.cfg = cfg
        self.cov_fn = make_cov_fn(seq, cfg.sigma_px)
        self.builder = TrackletBuilder(cfg.iou_min)
        self.merger = OnlineMerger(
            cfg.max_gap if cfg.stage != "2d-only" else 0, cfg.merge_score, cfg.residual_max, self.cov_fn
        )
        self.ctx = recovery_context(seq, cfg, self.cov_fn) if cfg.stage == "full" else None
        self.motions = {}  # tracklet id -> TrackletMotion (terminated tracklets)
        self.filled = {}  # track id -> {frame: FilledFrame}
        self.pending = {}  # track id -> forward-extension state
        self.frame = -1
        self.timer = _Timer()

    def _fuse(self, tracklet):
        if self.cfg.stage == "2d-only":
            return bare_motion(tracklet)
        return fuse_tracklet(tracklet, self.seq, self.cfg, self.cov_fn)

    def step(self, t):
        seq, cfg = self.seq, self.cfg
        dets = seq.detections.get(t, [])
        cands = [(d, seq.masks[t][j]) for j, d in enumerate(dets)]
        with self.timer("2d"):
            flow = seq.flow(t - 1) if (self.builder.active and cands) else None
            continued, started, terminated = self.builder.step(t, cands, flow)
        with self.timer("fusion"):
            for tl in terminated:
                m = self._fuse(tl)
                self.motions[tl.id] = m
                self.merger.terminate(m)
            seeds = [self._fuse(tl) for tl in started]
        with self.timer("merge"):
            assigned = self.merger.step(t, seeds)
            relinked = {tid for tid, score in assigned.values() if score is not None}
        for tid in relinked:
            self.pending.pop(tid, None)
        for tl in terminated:
            tid = self.merger.track_of[tl.id]
            if self.ctx is not None and tid not in relinked:
                self.pending[tid] = self._extension(self.motions[tl.id])
        out = []
        for tl in continued + started:
            e = tl.entries[-1]
            out.append(
                TrackRecord(t, self.merger.track_of[tl.id], CLASS_IDS[tl.cls], e.detection.score, e.detection.box, e.mask)
            )
        with self.timer("fill"):
            recovered = []
            for tid in sorted(self.pending):
                ff = self._extend(tid, t)
                if ff is None:
                    del self.pending[tid]
                    continue
                recovered.append((t - self.pending[tid]["member"].end, tid, ff))
            kept = []
            for _, tid, ff in sorted(recovered, key=lambda r: (r[0], r[1])):
                if any(box_iou(ff.box, k) > DETECTED_IOU for k in kept):
                    del self.pending[tid]
                    continue
                kept.append(ff.box)
                self.filled.setdefault(tid, {})[t] = ff
                m = self.pending[tid]["member"]
                out.append(TrackRecord(t, tid, CLASS_IDS[m.cls], self.pending[tid]["score"], tuple(float(x) for x in ff.box), ff.mask))
        self.frame = t
        out.sort(key=lambda r: r.track_id)
        return out

    def _extension(self, member):
        state = member.last_state()
        if state is None:
            return {"member": member, "state": None}
        motions = member.tail_motions(self.cfg.residual_max)
        return {
            "member": member,
            "state": state,
            "motions": motions,
            "step": _mean_step(motions, "forward"),
            "points": _last_points(member),
            "prev_box": _box_of(member, member.end),
            "prev_yaw": None,
            "score": 0.5 * min(e.detection.score for e in member.tracklet.entries),
        }

    def _extend(self, tid, t):
        ext = self.pending[tid]
        if ext["state"] is None:
            return None
        m, state = ext["member"], ext["state"]
        pred = extrapolate(state, ext["motions"], t - state.frame, "forward")[-1]
        ff = try_recover(
            self.ctx, m.cls, t, pred.center, ext["step"], ext["points"], ext["prev_box"], ext["prev_yaw"], self.seq.flow(t - 1)
        )
        if ff is not None:
            ext["prev_box"], ext["prev_yaw"] = ff.box, ff.box3d.yaw
        return ff

    def finish(self):
        """Close the sequence and assemble tracks (no further outputs are emitted)."""
        for tl in self.builder.close():
            if tl.id not in self.motions:
                self.motions[tl.id] = self._fuse(tl)
        by_track = {}
        for tl_id, m in sorted(self.motions.items()):
            by_track.setdefault(self.merger.track_of[tl_id], []).append(m)
        tracks = []
        for tid in sorted(by_track):
            members = sorted(by_track[tid], key=lambda m: m.start)
            tracks.append(Track(tid, members[0].cls, members, dict(self.filled.get(tid, {}))))
        return tracks


def run_online(seq, cfg, stop=None):
    """Run the online tracker; ``stop`` limits the frames processed (for causality checks)."""
    tracker = OnlineTracker(seq, cfg)
    n = seq.n_frames if stop is None else min(stop, seq.n_frames)
    records = []
    for t in range(n):
        records.extend(tracker.step(t))
    with tracker.timer("output"):
        tracks = tracker.finish()
        records.sort(key=lambda r: (r.frame, r.track_id))
    tracklets = sorted((m.tracklet for m in tracker.motions.values()), key=lambda t: t.id)
    motions = [tracker.motions[t.id] for t in tracklets]
    return PipelineResult(tracks, records, tracklets, motions, tracker.timer.timings)


def run_pipeline(seq, cfg=None):
    """Run on a :class:`Sequence` or a sequence directory."""
    cfg = cfg or PipelineConfig()
    if not isinstance(seq, Sequence):
        seq = Sequence.from_dir(seq)
    seq = seq.restricted(cfg.classes)
    if cfg.mode == "online":
        return run_online(seq, cfg)
    return run_offline(seq, cfg)


def report_timings(result, stream=None):
    (stream or sys.stderr).write(result.timing_report())


__all__ = [
    "Sequence",
    "load_sequence",
    "run_pipeline",
    "run_offline",
    "run_online",
    "OnlineTracker",
    "PipelineResult",
    "write_outputs",
    "write_trajectories",
    "write_reconstructions",
    "track_records",
    "fuse_tracklet",
    "object_centers",
    "make_cov_fn",
]
