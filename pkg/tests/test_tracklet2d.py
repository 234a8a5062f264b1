import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import scenes
from recontrack import synth
from recontrack.errors import DimensionMismatchError, MissingFlowError, OutOfOrderFrameError
from recontrack.io import Detection
from recontrack.masks import Mask
from recontrack.tracklet2d import (
    FORBIDDEN,
    TrackletBuilder,
    associate_frame,
    build_tracklets,
    solve_assignment,
    warp_mask,
)


def _warp_oracle(data, flow):
    h, w = data.shape
    out = np.zeros_like(data)
    for v in range(h):
        for u in range(w):
            if data[v, u]:
                # round half away from zero, like C's lround
                tu = u + flow[v, u, 0]
                tv = v + flow[v, u, 1]
                tu = int(np.sign(tu) * np.floor(abs(tu) + 0.5))
                tv = int(np.sign(tv) * np.floor(abs(tv) + 0.5))
                if 0 <= tu < w and 0 <= tv < h:
                    out[tv, tu] = True
    return out


def _best_permutation_total(S):
    n, m = S.shape
    best = 0.0
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = max(best, sum(max(S[i, c], 0.0) for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = max(best, sum(max(S[r, j], 0.0) for j, r in enumerate(rows)))
    return best


def test_warp_zero_flow_identity(rng):
    m = Mask(rng.random((12, 9)) < 0.4)
    assert warp_mask(m, np.zeros((12, 9, 2))) == m


def test_warp_pure_shift():
    d = np.zeros((10, 10), bool)
    d[0:2, 0:2] = True
    flow = np.zeros((10, 10, 2))
    flow[..., 0] = 1.0
    out = warp_mask(Mask(d), flow).data
    assert out[0:2, 1:3].all() and out.sum() == 4


def test_warp_clips_at_edge():
    d = np.zeros((10, 10), bool)
    d[3:6, 7:10] = True
    flow = np.zeros((10, 10, 2))
    flow[..., 0] = 3.0
    out = warp_mask(Mask(d), flow)
    # columns 7..9 land on 10..12, all off the image
    assert out.area() == d.sum() - 9
    d[3:6, 5:7] = True
    out = warp_mask(Mask(d), flow)
    assert out.area() == 6


def test_warp_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        warp_mask(Mask.empty(4, 4), np.zeros((5, 4, 2)))


@given(arrays(bool, (7, 8)), arrays(np.float64, (7, 8, 2), elements=st.floats(-4, 4)))
def test_warp_matches_pixel_oracle(data, flow):
    assert np.array_equal(warp_mask(Mask(data), flow).data, _warp_oracle(data, flow))


def test_assignment_examples():
    assert solve_assignment(np.array([[0.9, 0.1], [0.2, 0.8]]), 0.5) == [(0, 0), (1, 1)]
    assert solve_assignment(np.array([[0.4]]), 0.5) == []


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_assignment_optimal(n, m, seed):
    S = np.random.default_rng(seed).random((n, m))
    pairs = solve_assignment(S, 0.0)
    assert len({r for r, _ in pairs}) == len(pairs) == len({c for _, c in pairs})
    assert sum(S[r, c] for r, c in pairs) == pytest.approx(_best_permutation_total(S), abs=1e-12)


def test_assignment_3x3_oracle(rng):
    for _ in range(50):
        S = rng.random((3, 3))
        total = sum(S[r, c] for r, c in solve_assignment(S, 0.0))
        assert total == pytest.approx(_best_permutation_total(S))


def test_forbidden_pairs_never_assigned():
    S = np.array([[FORBIDDEN, 0.9], [0.8, FORBIDDEN]])
    assert solve_assignment(S, 0.5) == [(0, 1), (1, 0)]
    assert solve_assignment(np.array([[FORBIDDEN]]), 0.0) == []


def _det(frame, box, cls="car"):
    return Detection(frame, cls, 1.0, box)


def _square_mask(x, y=2, s=4, w=30, h=10):
    return Mask.from_box(h, w, (x, y, x + s, y + s))


def test_cross_class_forbidden():
    builder = TrackletBuilder()
    builder.step(0, [(_det(0, (2, 2, 6, 6)), _square_mask(2))])
    cont, started, _ = builder.step(1, [(_det(1, (2, 2, 6, 6), "pedestrian"), _square_mask(2))], np.zeros((10, 30, 2)))
    assert not cont and len(started) == 1


def test_associate_below_threshold_starts_new():
    builder = TrackletBuilder(iou_min=0.5)
    builder.step(0, [(_det(0, (0, 2, 4, 6)), _square_mask(0))])
    # 4x4 squares offset by 2: IoU = 8 / 24
    _, started, terminated = builder.step(1, [(_det(1, (2, 2, 6, 6)), _square_mask(2))], np.zeros((10, 30, 2)))
    assert len(started) == 1 and len(terminated) == 1
    assert associate_frame([], [], None) == {}


def _stationary_inputs(frames):
    dets = {t: [_det(t, (5, 2, 9, 6))] for t in frames}
    masks = {t: {0: _square_mask(5)} for t in frames}
    flows = {t: np.zeros((10, 30, 2)) for t in range(max(frames) + 1)}
    return dets, masks, flows


def test_stationary_single_tracklet():
    dets, masks, flows = _stationary_inputs(range(10))
    out = build_tracklets(range(10), dets, masks, flows)
    assert len(out) == 1 and out[0].frames == list(range(10))


def test_gap_splits_tracklet():
    frames = [0, 1, 2, 3, 4, 8, 9, 10, 11, 12]
    dets, masks, flows = _stationary_inputs(frames)
    out = build_tracklets(range(13), dets, masks, flows)
    assert [t.frames for t in out] == [[0, 1, 2, 3, 4], [8, 9, 10, 11, 12]]


def test_missing_flow_is_an_error():
    dets, masks, _ = _stationary_inputs(range(3))
    with pytest.raises(MissingFlowError):
        build_tracklets(range(3), dets, masks, {0: np.zeros((10, 30, 2))})


def test_out_of_order_frames():
    b = TrackletBuilder()
    b.step(0, [])
    with pytest.raises(OutOfOrderFrameError):
        b.step(2, [])


def _tracklets_for(bundle):
    n = bundle.n_frames
    return build_tracklets(range(n), bundle.detections, bundle.masks, lambda t: bundle.flow[t])


@pytest.mark.parametrize("make", [scenes.crossing_scene, scenes.occlusion_scene, scenes.dropout_scene])
def test_synth_partition_and_ground_truth(make):
    bundle = synth.render(make())
    out = _tracklets_for(bundle)
    seen = [(e.frame, e.det_index) for t in out for e in t.entries]
    assert sorted(seen) == sorted(bundle.det_actor)
    for t in out:
        assert t.frames == list(range(t.start, t.end + 1))
        assert len({bundle.det_actor[(e.frame, e.det_index)] for e in t.entries}) == 1
    # one tracklet per contiguous detection run of each actor
    runs = 0
    for i in range(len(bundle.script.actors)):
        f = synth.detection_runs(bundle, i)
        runs += 1 + len(synth.detection_gaps(f))
    assert len(out) == runs


def test_tracklet_ids_deterministic():
    bundle = synth.render(scenes.crossing_scene())
    a = [(t.id, t.frames) for t in _tracklets_for(bundle)]
    b = [(t.id, t.frames) for t in _tracklets_for(bundle)]
    assert a == b
