"""CLEAR-MOT and MOTS scores.

Per frame and class, ground truth and predictions are matched one-to-one by
maximum total IoU, keeping only pairs with IoU strictly above 0.5. ID switches
are counted two ways:

``kitti``  the matched predicted id changes between two *contiguous* frames;
``star``   the matched id differs from the most recent earlier match, however
           long ago that was.
"""
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .io import CLASS_NAMES, IGNORE_CLASS_ID
from .masks import Mask, box_iou, iou_matrix

MATCH_IOU = 0.5


def box_iou_matrix(boxes_a, boxes_b):
    return np.array([[box_iou(a, b) for b in boxes_b] for a in boxes_a]).reshape(len(boxes_a), len(boxes_b))


def resolve_overlaps(records):
    """Make predicted masks disjoint; higher score keeps contested pixels (stable on ties)."""
    order = sorted(range(len(records)), key=lambda i: -records[i].score)
    taken = None
    out = list(records)
    for i in order:
        r = records[i]
        data = r.mask.data
        if taken is None:
            taken = np.zeros_like(data)
        data = data & ~taken
        taken |= data
        out[i] = type(r)(r.frame, r.track_id, r.class_id, r.score, r.box, Mask(data))
    return out


def match_frame(gt, pred, mode="mask"):
    """Optimal matching of one frame's same-class objects.

    Returns list of (gt_index, pred_index, iou) with iou > 0.5.
    """
    if not gt or not pred:
        return []
    if mode == "mask":
        S = iou_matrix([g.mask for g in gt], [p.mask for p in pred])
    elif mode == "box":
        S = box_iou_matrix([g.box for g in gt], [p.box for p in pred])
    else:
        raise ValueError(f"mode must be 'box' or 'mask', got {mode!r}")
    # only pairs above the gate count towards the objective
    S = np.where(S > MATCH_IOU, S, 0.0)
    rows, cols = linear_sum_assignment(-S)
    return sorted((int(r), int(c), float(S[r, c])) for r, c in zip(rows, cols) if S[r, c] > MATCH_IOU)


def count_id_switches(matches, definition="star"):
    """``matches``: frame -> {gt_id: pred_id}. Frames are visited in sorted order."""
    last = {}  # gt -> (frame, pred)
    n = 0
    for frame in sorted(matches):
        for gid, pid in matches[frame].items():
            if gid in last:
                pf, pp = last[gid]
                if pp != pid and (definition == "star" or pf == frame - 1):
                    n += 1
            last[gid] = (frame, pid)
    if definition not in ("star", "kitti"):
        raise ValueError(f"unknown ID-switch definition {definition!r}")
    return n


@dataclass
class ClassReport:
    num_gt: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    ids_star: int = 0
    soft_tp: float = 0.0

    def _ratio(self, errors):
        if self.num_gt == 0:
            return None
        return 1.0 - errors / self.num_gt

    @property
    def mota(self):
        return self._ratio(self.fp + self.fn + self.ids)

    @property
    def mota_star(self):
        return self._ratio(self.fp + self.fn + self.ids_star)

    @property
    def motsa(self):
        return self.mota_star

    @property
    def smotsa(self):
        if self.num_gt == 0:
            return None
        return (self.soft_tp - self.fp - self.ids_star) / self.num_gt

    def merge(self, other):
        return ClassReport(
            self.num_gt + other.num_gt,
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.ids + other.ids,
            self.ids_star + other.ids_star,
            self.soft_tp + other.soft_tp,
        )


@dataclass
class EvalReport:
    mode: str
    classes: dict = field(default_factory=dict)  # class name -> ClassReport

    def total(self):
        out = ClassReport()
        for r in self.classes.values():
            out = out.merge(r)
        return out

    def merge(self, other):
        out = EvalReport(self.mode, dict(self.classes))
        for k, r in other.classes.items():
            out.classes[k] = out.classes[k].merge(r) if k in out.classes else r
        return out

    def key_values(self, cls=None):
        r = self.total() if cls is None else self.classes[cls]
        vals = {
            "mota": r.mota,
            "mota_star": r.mota_star,
            "motsa": r.motsa if self.mode == "mask" else None,
            "smotsa": r.smotsa if self.mode == "mask" else None,
            "ids": r.ids,
            "ids_star": r.ids_star,
            "fp": r.fp,
            "fn": r.fn,
            "tp": r.tp,
            "num_gt": r.num_gt,
        }
        return {k: v for k, v in vals.items() if not (v is None and k in ("motsa", "smotsa") and self.mode != "mask")}

    def format(self):
        def fmt(v):
            if v is None:
                return "undefined"
            if isinstance(v, float):
                return f"{v:.6f}"
            return str(v)

        cols = ["mota", "mota_star", "motsa", "smotsa", "ids", "ids_star", "fp", "fn", "tp", "num_gt"]
        if self.mode != "mask":
            cols = [c for c in cols if c not in ("motsa", "smotsa")]
        lines = ["class".ljust(12) + "".join(c.rjust(12) for c in cols)]
        for name in sorted(self.classes):
            kv = self.key_values(name)
            lines.append(name.ljust(12) + "".join(fmt(kv[c]).rjust(12) for c in cols))
        kv = self.key_values()
        lines.append("all".ljust(12) + "".join(fmt(kv[c]).rjust(12) for c in cols))
        lines.append("")
        lines.extend(f"{k}={fmt(kv[k])}" for k in cols)
        return "\n".join(lines) + "\n"


def _ignored(pred, ignore_regions, mode):
    for g in ignore_regions:
        if mode == "mask":
            area = pred.mask.area()
            if area and np.logical_and(pred.mask.data, g.mask.data).sum() / area > 0.5:
                return True
        elif g.box is not None and pred.box is not None:
            x1, y1, x2, y2 = pred.box
            ix = max(0.0, min(x2, g.box[2]) - max(x1, g.box[0]))
            iy = max(0.0, min(y2, g.box[3]) - max(y1, g.box[1]))
            if (x2 - x1) * (y2 - y1) > 0 and ix * iy / ((x2 - x1) * (y2 - y1)) > 0.5:
                return True
    return False


def evaluate(gt_records, pred_records, mode="mask"):
    """Score a sequence. Both inputs are lists of :class:`~recontrack.io.TrackRecord`."""
    gt_by = defaultdict(list)
    ign_by = defaultdict(list)
    for g in gt_records:
        (ign_by if g.class_id == IGNORE_CLASS_ID else gt_by)[g.frame].append(g)
    pred_by = defaultdict(list)
    for p in pred_records:
        pred_by[p.frame].append(p)
    if mode == "mask":
        for f in list(pred_by):
            pred_by[f] = resolve_overlaps(pred_by[f])

    class_ids = sorted({g.class_id for g in gt_records if g.class_id != IGNORE_CLASS_ID} | {p.class_id for p in pred_records})
    report = EvalReport(mode)
    frames = sorted(set(gt_by) | set(pred_by))
    for cid in class_ids:
        cr = ClassReport()
        matches = {}
        for f in frames:
            gts = [g for g in gt_by.get(f, []) if g.class_id == cid]
            preds = [p for p in pred_by.get(f, []) if p.class_id == cid]
            if mode == "mask":
                preds = [p for p in preds if p.mask.area() > 0]
            m = match_frame(gts, preds, mode)
            matched_p = {j for _, j, _ in m}
            cr.num_gt += len(gts)
            cr.tp += len(m)
            cr.soft_tp += sum(iou for _, _, iou in m)
            cr.fn += len(gts) - len(m)
            cr.fp += sum(
                1 for j, p in enumerate(preds) if j not in matched_p and not _ignored(p, ign_by.get(f, []), mode)
            )
            matches[f] = {gts[i].track_id: preds[j].track_id for i, j, _ in m}
        cr.ids = count_id_switches(matches, "kitti")
        cr.ids_star = count_id_switches(matches, "star")
        report.classes[CLASS_NAMES.get(cid, str(cid))] = cr
    return report
