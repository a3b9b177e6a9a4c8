"""Axis-aligned 3D IoU, greedy NMS and VOC-style average precision."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import Box3D


def iou3d(a: Box3D, b: Box3D) -> float:
    """Intersection over union of two axis-aligned boxes (heading must be 0)."""
    if a.heading != 0.0 or b.heading != 0.0:
        raise ValueError("iou3d supports axis-aligned boxes only")
    alo, ahi, blo, bhi = a.lo, a.hi, b.lo, b.hi
    inter = 1.0
    for k in range(3):
        overlap = min(ahi[k], bhi[k]) - max(alo[k], blo[k])
        if overlap <= 0:
            return 0.0
        inter *= overlap
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    return float(min(1.0, inter / (va + vb - inter)))


def nms_3d(boxes: Sequence[Box3D], iou_threshold: float) -> list[Box3D]:
    """Greedy class-agnostic suppression in descending score order.

    Ties in score are broken by the lower center x. A box survives when its
    IoU with every earlier survivor is at most ``iou_threshold``.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, boxes[i].center[0], i))
    keep: list[Box3D] = []
    for i in order:
        b = boxes[i]
        if all(iou3d(b, k) <= iou_threshold for k in keep):
            keep.append(b)
    return keep


@dataclass
class EvalResult:
    ap: dict[float, dict[int, float]]
    mean_ap: dict[float, float]
    curves: dict[float, dict[int, tuple[list[float], list[float]]]] = field(default_factory=dict)

    @property
    def map25(self) -> float:
        return self.mean_ap[0.25]

    @property
    def map50(self) -> float:
        return self.mean_ap[0.5]

    def to_dict(self) -> dict:
        return {
            "mAP": {str(t): v for t, v in self.mean_ap.items()},
            "AP": {str(t): {str(c): v for c, v in per.items()} for t, per in self.ap.items()},
        }

    def table(self, class_names: Sequence[str] | None = None) -> str:
        thrs = sorted(self.ap)
        classes = sorted({c for per in self.ap.values() for c in per})
        names = [class_names[c] if class_names else f"class_{c}" for c in classes]
        head = f"{'IoU':>6} | " + " | ".join(f"{n:>10}" for n in names) + f" | {'mAP':>7}"
        lines = [head, "-" * len(head)]
        for t in thrs:
            cells = " | ".join(f"{100 * self.ap[t][c]:10.1f}" for c in classes)
            lines.append(f"{t:>6} | {cells} | {100 * self.mean_ap[t]:7.1f}")
        return "\n".join(lines)


def average_precision(hits: Sequence[bool], num_gt: int) -> tuple[float, list[float], list[float]]:
    """All-point interpolated AP from a ranked hit list, computed in exact rationals."""
    if num_gt == 0:
        raise ValueError("average_precision needs at least one ground-truth box")
    tp = 0
    prec: list[Fraction] = []
    rec: list[Fraction] = []
    for k, h in enumerate(hits, start=1):
        tp += bool(h)
        prec.append(Fraction(tp, k))
        rec.append(Fraction(tp, num_gt))
    # monotone envelope from the right
    env = prec[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = Fraction(0)
    last_r = Fraction(0)
    for r, p in zip(rec, env):
        if r > last_r:
            ap += (r - last_r) * p
            last_r = r
    return float(ap), [float(r) for r in rec], [float(p) for p in prec]


def evaluate(detections: dict[str, list[Box3D]], gts: dict[str, list[Box3D]],
             iou_thresholds: Sequence[float] = (0.25, 0.5)) -> EvalResult:
    """Per-class AP over all scenes and their unweighted mean over GT classes.

    Detections are ranked by descending score; ties fall back to scene id and
    then detection index. Each detection is matched to the unmatched GT box of
    its class with the highest IoU at or above the threshold.
    """
    classes = sorted({b.class_id for boxes in gts.values() for b in boxes})
    ap: dict[float, dict[int, float]] = {}
    curves: dict[float, dict[int, tuple[list[float], list[float]]]] = {}
    mean_ap: dict[float, float] = {}
    for t in iou_thresholds:
        ap[t], curves[t] = {}, {}
        for c in classes:
            ranked = sorted(
                ((d.score if d.score is not None else 0.0, sid, i)
                 for sid, dets in detections.items() for i, d in enumerate(dets) if d.class_id == c),
                key=lambda r: (-r[0], r[1], r[2]),
            )
            gt_c = {sid: [g for g in boxes if g.class_id == c] for sid, boxes in gts.items()}
            used = {sid: np.zeros(len(g), dtype=bool) for sid, g in gt_c.items()}
            num_gt = sum(len(g) for g in gt_c.values())
            hits = []
            for _, sid, i in ranked:
                det = detections[sid][i]
                best, best_j = -1.0, -1
                for j, g in enumerate(gt_c.get(sid, [])):
                    if used[sid][j]:
                        continue
                    v = iou3d(det, g)
                    if v >= t and v > best:
                        best, best_j = v, j
                if best_j >= 0:
                    used[sid][best_j] = True
                hits.append(best_j >= 0)
            ap[t][c], rec, prec = average_precision(hits, num_gt)
            curves[t][c] = (rec, prec)
        mean_ap[t] = float(np.mean(list(ap[t].values()))) if classes else 0.0
    return EvalResult(ap, mean_ap, curves)
