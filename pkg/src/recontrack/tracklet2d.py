"""Short tracklets from mask/flow consistency.

Each active tracklet's last mask is warped into the next frame with optical
flow, compared with the new masks by IoU, and assigned with the Hungarian
algorithm. Tracklets never span a missing frame.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatchError, MissingFlowError, OutOfOrderFrameError
from .io import Detection  # noqa: F401  (re-exported for callers)
from .kernels import warp_mask_kernel
from .masks import Mask, iou_matrix, mask_iou  # noqa: F401

FORBIDDEN = -1.0


@dataclass
class TrackletEntry:
    frame: int
    det_index: int
    detection: Detection
    mask: Mask


@dataclass
class Tracklet:
    id: int
    cls: str
    entries: list = field(default_factory=list)

    @property
    def start(self):
        return self.entries[0].frame

    @property
    def end(self):
        return self.entries[-1].frame

    @property
    def frames(self):
        return [e.frame for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def append(self, entry):
        if self.entries and entry.frame != self.end + 1:
            raise ValueError(f"tracklet {self.id}: frame {entry.frame} does not follow {self.end}")
        if entry.detection.cls != self.cls:
            raise ValueError(f"tracklet {self.id}: class {entry.detection.cls} != {self.cls}")
        self.entries.append(entry)


def warp_mask(mask, flow):
    """Move every foreground pixel by its rounded flow vector; off-image pixels drop out."""
    flow = np.asarray(flow)
    if flow.shape[:2] != mask.shape:
        raise DimensionMismatchError(f"mask {mask.shape} vs flow {flow.shape[:2]}")
    return Mask(warp_mask_kernel(np.ascontiguousarray(mask.data), np.ascontiguousarray(flow, dtype=np.float64)))


def similarity_matrix(active, candidates, flow):
    """Warped-mask IoU between tracklets and (Detection, Mask) candidates.

    Cross-class pairs get ``FORBIDDEN``.
    """
    warped = [warp_mask(t.entries[-1].mask, flow) for t in active]
    S = iou_matrix(warped, [m for _, m in candidates])
    for i, t in enumerate(active):
        for j, (det, _) in enumerate(candidates):
            if det.cls != t.cls:
                S[i, j] = FORBIDDEN
    return S


def solve_assignment(S, iou_min):
    """Max-total-similarity one-to-one assignment, then drop pairs below ``iou_min``.

    Returns a sorted list of (row, col).
    """
    if S.size == 0:
        return []
    # forbidden pairs get a cost larger than any admissible assignment can offset
    cost = np.where(S < 0, S.shape[0] + S.shape[1] + 1.0, 1.0 - S)
    rows, cols = linear_sum_assignment(cost)
    return sorted((int(r), int(c)) for r, c in zip(rows, cols) if S[r, c] >= 0 and S[r, c] >= iou_min)


def associate_frame(active, candidates, flow, iou_min=0.5):
    """Dict tracklet-index -> candidate-index for the matched pairs."""
    if not active or not candidates:
        return {}
    S = similarity_matrix(active, candidates, flow)
    return dict(solve_assignment(S, iou_min))


class TrackletBuilder:
    """Frame-by-frame tracklet construction.

    ``step`` must be called with consecutive frame indices (frames without
    detections included). ``flow`` is the flow from the previous frame into the
    current one and is required whenever tracklets are active.
    """

    def __init__(self, iou_min=0.5):
        self.iou_min = iou_min
        self.active = []
        self.finished = []
        self.frame = None
        self._next_id = 0

    def step(self, frame, candidates, flow=None):
        """Consume one frame. Returns (continued, started, terminated) tracklet lists."""
        if self.frame is not None and frame != self.frame + 1:
            raise OutOfOrderFrameError(f"expected frame {self.frame + 1}, got {frame}")
        if self.active and candidates and flow is None:
            raise MissingFlowError(f"no flow for frame pair {frame - 1}->{frame}")
        self.frame = frame

        assignment = associate_frame(self.active, candidates, flow, self.iou_min) if candidates else {}
        taken = set(assignment.values())
        continued, terminated = [], []
        for i, t in enumerate(self.active):
            if i in assignment:
                j = assignment[i]
                det, m = candidates[j]
                t.append(TrackletEntry(frame, j, det, m))
                continued.append(t)
            else:
                terminated.append(t)
        started = []
        for j, (det, m) in enumerate(candidates):
            if j in taken:
                continue
            t = Tracklet(self._next_id, det.cls, [TrackletEntry(frame, j, det, m)])
            self._next_id += 1
            started.append(t)
        self.finished.extend(terminated)
        self.active = continued + started
        return continued, started, terminated

    def close(self):
        self.finished.extend(self.active)
        self.active = []
        return sorted(self.finished, key=lambda t: t.id)


def build_tracklets(frames, detections, masks, flows, iou_min=0.5):
    """Run :class:`TrackletBuilder` over a whole sequence.

    detections: frame -> list[Detection]; masks: frame -> {det_index: Mask};
    flows: frame t -> flow t->t+1 (mapping or callable).
    """
    builder = TrackletBuilder(iou_min)
    get_flow = flows if callable(flows) else flows.get
    for t in frames:
        dets = detections.get(t, [])
        cands = [(d, masks[t][j]) for j, d in enumerate(dets)]
        flow = None
        if builder.active and cands:
            flow = get_flow(t - 1)
            if flow is None:
                raise MissingFlowError(f"missing flow for frame pair {t - 1}->{t}")
        builder.step(t, cands, flow)
    return builder.close()
