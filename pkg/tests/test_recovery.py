import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import scenes
from recontrack import synth
from recontrack.config import PipelineConfig
from recontrack.geometry import CameraIntrinsics, CameraPose, project_to_image
from recontrack.masks import Mask, mask_iou
from recontrack.merge3d import Track
from recontrack.pipeline import Sequence, run_offline
from recontrack.recovery import (
    DEFAULT_DIMS,
    OCCLUDED,
    VISIBLE,
    Box3D,
    DepthConsistentProvider,
    FilledFrame,
    PrecomputedProvider,
    estimate_box3d,
    half_diagonal,
    principal_yaw,
    recover_box2d,
    resolve_fill_conflicts,
    validate_recovery,
)

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0)
IDENT = CameraPose.identity()


def _eig_yaw(points):
    # closed-form principal angle of the 2x2 XZ covariance
    xz = np.asarray(points)[:, [0, 2]]
    C = np.cov(xz.T)
    yaw = 0.5 * math.atan2(2 * C[0, 1], C[0, 0] - C[1, 1])
    return yaw


# --- boxes ------------------------------------------------------------------


def test_box_heading_from_motion():
    b = estimate_box3d([0, 0, 10], "car", motion=(1.0, 0.0))
    assert b.yaw == 0.0 and b.dims == DEFAULT_DIMS["car"]
    assert estimate_box3d([0, 0, 10], "car", motion=(0.0, -0.5)).yaw == pytest.approx(-math.pi / 2)


def test_box_heading_from_points(rng):
    pts = np.column_stack([rng.normal(0, 0.1, 200), rng.normal(0, 0.5, 200), rng.normal(0, 2.0, 200)])
    b = estimate_box3d([0, 0, 10], "pedestrian", motion=(0.01, 0.0), points=pts)
    assert abs(abs(b.yaw) - math.pi / 2) < 0.05
    assert b.dims == DEFAULT_DIMS["pedestrian"]


@given(st.integers(0, 2**31), st.floats(-1.5, 1.5))
def test_principal_yaw_matches_eigen_oracle(seed, angle):
    r = np.random.default_rng(seed)
    local = np.column_stack([r.normal(0, 3, 100), r.normal(0, 1, 100), r.normal(0, 0.5, 100)])
    c, s = math.cos(angle), math.sin(angle)
    pts = np.column_stack([c * local[:, 0] - s * local[:, 2], local[:, 1], s * local[:, 0] + c * local[:, 2]])
    got, ref = principal_yaw(pts), _eig_yaw(pts)
    assert -math.pi / 2 < got <= math.pi / 2
    assert abs(math.remainder(got - ref, math.pi)) < 1e-9


def test_box_heading_fallbacks():
    assert estimate_box3d([0, 0, 5], "car", prev_yaw=0.7).yaw == 0.7
    assert estimate_box3d([0, 0, 5], "car").yaw == 0.0
    with pytest.raises(ValueError):
        estimate_box3d(None, "car")
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1), 0.0)


def test_box_corners():
    b = Box3D((1.0, 0.0, 5.0), (4.0, 2.0, 1.0), math.pi / 2)
    C = b.corners()
    assert C.shape == (8, 3)
    assert np.allclose(C.mean(axis=0), [1, 0, 5])
    # length now runs along z
    assert np.ptp(C[:, 2]) == pytest.approx(4.0) and np.ptp(C[:, 0]) == pytest.approx(2.0)


def test_recover_box2d_pure_projection():
    cube = Box3D((0.0, 0.0, 10.0), (1.0, 1.0, 1.0), 0.0)
    uv = np.array([project_to_image(c, IDENT, K100)[0] for c in cube.corners()])
    expect = (uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())
    got = recover_box2d(cube, IDENT, K100, (100, 100))
    assert np.allclose(got, expect)
    assert np.allclose(got, (50 - 100 * 0.5 / 9.5,) * 2 + (50 + 100 * 0.5 / 9.5,) * 2)


def test_recover_box2d_average_with_previous():
    cube = Box3D((0.0, 0.0, 10.0), (1.0, 1.0, 1.0), 0.0)
    proj = recover_box2d(cube, IDENT, K100, (100, 100))
    zero = np.zeros((100, 100, 2))
    assert np.allclose(recover_box2d(cube, IDENT, K100, (100, 100), proj, zero), proj)
    shift = zero.copy()
    shift[..., 0] = 4.0
    got = recover_box2d(cube, IDENT, K100, (100, 100), proj, shift)
    assert np.allclose(np.array(got) - proj, [2, 0, 2, 0])
    back = recover_box2d(cube, IDENT, K100, (100, 100), proj, shift, flow_sign=-1.0)
    assert np.allclose(np.array(back) - proj, [-2, 0, -2, 0])


def test_recover_box2d_outside_image():
    far_left = Box3D((-50.0, 0.0, 10.0), (1.0, 1.0, 1.0), 0.0)
    assert recover_box2d(far_left, IDENT, K100, (100, 100)) is None


# --- validation -------------------------------------------------------------


def _depth_for(points_cam, shape=(100, 100)):
    """Depth raster with the given camera-frame points splatted at their pixels."""
    depth = np.zeros(shape)
    mask = np.zeros(shape, bool)
    for p in points_cam:
        u = int(round(K100.fx * p[0] / p[2] + K100.cx))
        v = int(round(K100.fy * p[1] / p[2] + K100.cy))
        depth[v, u] = p[2]
        mask[v, u] = True
    return depth, Mask(mask)


def test_validate_points_at_centre():
    depth = np.full((100, 100), 10.0)
    mask = Mask.from_box(100, 100, (48, 48, 53, 53))
    box = Box3D((0.0, 0.0, 10.0), (4.0, 2.0, 1.5), 0.0)
    assert validate_recovery(mask, depth, box, IDENT, K100, 2.0) == VISIBLE


def test_validate_points_in_front():
    depth = np.full((100, 100), 5.0)
    mask = Mask.from_box(100, 100, (40, 40, 60, 60))
    box = Box3D((0.0, 0.0, 10.0), (4.0, 2.0, 1.5), 0.0)
    assert validate_recovery(mask, depth, box, IDENT, K100, 2.0) == OCCLUDED


def test_validate_low_depth_coverage():
    depth = np.zeros((100, 100))
    depth[50, 50] = 10.0
    mask = Mask.from_box(100, 100, (45, 45, 55, 55))
    box = Box3D((0.0, 0.0, 10.0), (4.0, 2.0, 1.5), 0.0)
    assert validate_recovery(mask, depth, box, IDENT, K100, 2.0) == OCCLUDED
    assert validate_recovery(Mask.empty(100, 100), depth, box, IDENT, K100, 2.0) == OCCLUDED


@given(st.floats(0.0, 9.0), st.floats(0.0, 9.0))
def test_validate_monotone_toward_camera(a, b):
    near, far = max(a, b), min(a, b)
    box = Box3D((0.0, 0.0, 10.0), (4.0, 2.0, 1.5), 0.0)
    mask = Mask.from_box(100, 100, (45, 45, 55, 55))
    verdicts = []
    for shift in (far, near):
        depth = np.full((100, 100), 10.0 - shift)
        verdicts.append(validate_recovery(mask, depth, box, IDENT, K100, 2.0))
    assert not (verdicts[0] == OCCLUDED and verdicts[1] == VISIBLE)


def test_validate_tracks_ground_truth_occlusion():
    script = scenes.occlusion_scene(gap=12)
    bundle = synth.render(script, with_flow=False)
    K, dims = script.intrinsics, script.actors[0].dims
    assert (~bundle.gt_visible[0]).sum() >= 3
    provider = DepthConsistentProvider(lambda t: bundle.depth[t], lambda t: bundle.poses[t], K)
    for t in range(script.n_frames):
        x, z, yaw = synth.actor_trajectory(script.actors[0], script.n_frames)[t]
        box3d = Box3D(tuple(bundle.gt_centers[0, t]), dims, yaw)
        box = recover_box2d(box3d, bundle.poses[t], K, bundle.image_size)
        mask = provider.mask_for(t, box, box3d)
        verdict = validate_recovery(mask, bundle.depth[t], box3d, bundle.poses[t], K, half_diagonal(dims))
        assert (verdict == VISIBLE) == bool(bundle.gt_visible[0, t]), t


def test_depth_consistent_mask_within_box():
    script = scenes.lateral_car(n=2)
    bundle = synth.render(script, with_flow=False)
    K = script.intrinsics
    box3d = Box3D(tuple(bundle.gt_centers[0, 0]), script.actors[0].dims, 0.0)
    box = recover_box2d(box3d, bundle.poses[0], K, bundle.image_size)
    m = DepthConsistentProvider(lambda t: bundle.depth[t], lambda t: bundle.poses[t], K).mask_for(0, box, box3d)
    assert not (m.data & ~Mask.from_box(*m.shape, box).data).any()
    assert mask_iou(m, bundle.gt[0].mask) > 0.8


def test_precomputed_provider_tolerance():
    m = Mask.from_box(10, 10, (1, 1, 5, 5))
    p = PrecomputedProvider([(3, (1.0, 1.0, 5.0, 5.0), m)])
    assert p.mask_for(3, (1.6, 0.5, 5.9, 5.0)) is m
    assert p.mask_for(3, (2.5, 1.0, 5.0, 5.0)) is None
    assert p.mask_for(4, (1.0, 1.0, 5.0, 5.0)) is None


# --- filling on synthetic scenes --------------------------------------------


def _run(script, **kw):
    bundle = synth.render(script)
    seq = Sequence.from_bundle(bundle)
    return bundle, run_offline(seq, PipelineConfig(**kw))


def _gt_mask(bundle, actor, t):
    for r in bundle.gt:
        if r.frame == t and r.track_id == actor + 1:
            return r.mask
    return None


def test_fill_recovers_dropped_frames():
    bundle, res = _run(scenes.dropout_scene(12, 15))
    assert len(res.tracks) == 1
    tr = res.tracks[0]
    assert sorted(f for f in tr.filled if 12 <= f <= 15) == [12, 13, 14, 15]
    for f in range(12, 16):
        assert mask_iou(tr.filled[f].mask, _gt_mask(bundle, 0, f)) >= 0.5


def test_fill_skips_full_occlusion():
    bundle, res = _run(scenes.occlusion_scene(gap=12))
    hidden = set(np.flatnonzero(~bundle.gt_visible[0]).tolist())
    assert hidden
    for tr in res.tracks:
        assert not hidden & set(tr.filled)


def test_fill_preserves_detections_and_contiguity():
    bundle, full = _run(scenes.occlusion_scene(gap=12))
    nofill = run_offline(Sequence.from_bundle(bundle), PipelineConfig(stage="no-fill"))
    det_full = sorted((r.frame, r.track_id, r.box) for r in full.records if r.frame in {e.frame for t in full.tracklets for e in t.entries} and r.score == 1.0)
    det_nofill = sorted((r.frame, r.track_id, r.box) for r in nofill.records)
    assert det_full == det_nofill
    for tr in full.tracks:
        detected = set(tr.detected_frames())
        assert not detected & set(tr.filled)
        for f in tr.filled:
            inside_gap = tr.members[0].start < f < tr.members[-1].end
            before = f < tr.members[0].start and all(g in tr.filled for g in range(f + 1, tr.members[0].start))
            after = f > tr.members[-1].end and all(g in tr.filled for g in range(tr.members[-1].end + 1, f))
            assert inside_gap or before or after


def test_no_extension_at_sequence_end():
    bundle, res = _run(scenes.lateral_car(n=12))
    (tr,) = res.tracks
    assert tr.end == bundle.n_frames - 1 and tr.start == 0 and tr.filled == {}


def test_resolve_fill_conflicts_prefers_closest():
    def ff(f, box):
        return FilledFrame(f, box, Mask.empty(2, 2), None, np.zeros(3))

    class _M:
        def __init__(self, frames):
            self.frames = frames
            self.start, self.end = frames[0], frames[-1]

    a = Track(1, "car", [_M([0, 1, 2])], {3: ff(3, (0, 0, 10, 10)), 4: ff(4, (0, 0, 10, 10))})
    b = Track(2, "car", [_M([6, 7])], {4: ff(4, (1, 0, 11, 10)), 5: ff(5, (1, 0, 11, 10))})
    out = resolve_fill_conflicts([a, b])
    # frame 4: a is 2 frames from its detections, b also 2 -> lower id wins
    assert sorted(out[0].filled) == [3, 4] and sorted(out[1].filled) == [5]
    b2 = Track(2, "car", [_M([5, 6])], {4: ff(4, (1, 0, 11, 10))})
    out = resolve_fill_conflicts([a, b2])
    assert sorted(out[0].filled) == [3] and sorted(out[1].filled) == [4]
