"""Detection quality: per-class AP at IoU > 0.5 and mAP."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import Detection, GroundTruthObject
from .geometry import iou, nms_indices


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    mAP: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    num_gt: dict[int, int] = field(default_factory=dict)

    def to_json(self, class_names: Optional[Sequence[str]] = None) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["num_gt"] = {str(k): v for k, v in self.num_gt.items()}
        if class_names is not None:
            d["classes"] = list(class_names)
        return d

    def save(self, path, class_names=None) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(class_names), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def postprocess_frame(dets: Sequence[Detection], score_thresh: float = 0.5,
                      nms_thresh: Optional[float] = 0.5) -> list[Detection]:
    """Class-wise NMS followed by the score threshold; keeps input order."""
    keep = set(range(len(dets)))
    if nms_thresh is not None and len(dets) > 1:
        keep = set()
        by_class: dict[int, list[int]] = {}
        for k, d in enumerate(dets):
            by_class.setdefault(d.class_id, []).append(k)
        for ks in by_class.values():
            boxes = np.array([dets[k].box.to_list() for k in ks])
            scores = np.array([dets[k].score for k in ks])
            keep.update(ks[i] for i in nms_indices(boxes, scores, nms_thresh))
    return [d for k, d in enumerate(dets) if k in keep and d.score >= score_thresh]


def match_frame(dets: Sequence[Detection], gts: Sequence[GroundTruthObject],
                iou_thresh: float = 0.5) -> tuple[list[bool], list[bool]]:
    """Greedy same-class matching in descending score order.

    Each detection takes the best-overlapping still-unmatched GT box with
    IoU > ``iou_thresh``. Returns ``(det_is_tp, gt_is_matched)`` aligned with
    the inputs.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    tp = [False] * len(dets)
    used = [False] * len(gts)
    for k in order:
        d = dets[k]
        best, best_iou = -1, iou_thresh
        for g, obj in enumerate(gts):
            if used[g] or obj.class_id != d.class_id:
                continue
            ov = iou(d.box, obj.box)
            if ov > best_iou:
                best, best_iou = g, ov
        if best >= 0:
            used[best] = True
            tp[k] = True
    return tp, used


def average_precision(tp_sorted: np.ndarray, num_gt: int, interpolation: str = "all") -> float:
    """AP from TP flags sorted by descending score."""
    if num_gt == 0:
        return float("nan")
    tp = np.asarray(tp_sorted, dtype=float)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / num_gt
    prec = ctp / (ctp + cfp)
    if interpolation == "11pt":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            p = prec[rec >= t]
            ap += (p.max() if len(p) else 0.0) / 11.0
        return float(ap)
    if interpolation != "all":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate(detections: dict, ground_truth: dict, num_classes: int,
             score_thresh: float = 0.5, nms_thresh: Optional[float] = 0.5,
             iou_thresh: float = 0.5, interpolation: str = "all",
             videos: Optional[Sequence[str]] = None) -> EvalReport:
    """Evaluate per-frame detections against per-frame ground truth.

    ``detections`` and ``ground_truth`` map video id to per-frame lists.
    """
    vids = list(videos) if videos is not None else list(ground_truth)
    records: dict[int, list[tuple[float, int, bool]]] = {c: [] for c in range(num_classes)}
    num_gt = {c: 0 for c in range(num_classes)}
    seq = 0
    for vid in vids:
        gt_frames = ground_truth[vid]
        det_frames = detections.get(vid, [])
        for f, gts in enumerate(gt_frames):
            for g in gts:
                if not 0 <= g.class_id < num_classes:
                    raise ValueError(f"ground-truth class {g.class_id} out of range in {vid}:{f}")
                num_gt[g.class_id] += 1
            dets = det_frames[f] if f < len(det_frames) else []
            for d in dets:
                if d.num_classes != num_classes:
                    raise ValueError(f"detection in {vid}:{f} has {d.num_classes} classes, "
                                     f"expected {num_classes}")
            dets = postprocess_frame(dets, score_thresh, nms_thresh)
            tp, _ = match_frame(dets, gts, iou_thresh)
            for d, hit in zip(dets, tp):
                records[d.class_id].append((d.score, seq, hit))
                seq += 1
    aps, tot_tp, tot_fp = {}, 0, 0
    for c in range(num_classes):
        rec = sorted(records[c], key=lambda r: (-r[0], r[1]))
        flags = np.array([r[2] for r in rec], dtype=bool)
        tot_tp += int(flags.sum())
        tot_fp += int(len(flags) - flags.sum())
        if num_gt[c] > 0:
            aps[c] = average_precision(flags, num_gt[c], interpolation)
    m = float(np.mean(list(aps.values()))) if aps else 0.0
    return EvalReport(aps, m, tot_tp, tot_fp, sum(num_gt.values()) - tot_tp,
                      {c: n for c, n in num_gt.items() if n})
