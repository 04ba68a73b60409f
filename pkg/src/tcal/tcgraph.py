"""Temporal-coherence graph over detections and missed-object candidates.

Detections of the same class are linked across frames when the box tracked
from one frame overlaps the other detection. Tracked boxes that overlap no
local detection are clustered into candidates, each connected to the
detections it was tracked from. Graphs are split per (video, class).
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import Dataset, Detection, MotionField
from .geometry import Box, cluster_arrays, iou_pairs, nms_indices
from .tracker import MotionFieldTracker, track_arrays

DETECTION = "detection"
CANDIDATE = "candidate"


@dataclass(frozen=True)
class TCConfig:
    theta: float = 0.5       # link / match IoU threshold
    theta_c: float = 0.5     # candidate clustering IoU threshold
    tau_det: float = 0.5     # detection score threshold on graph input
    nms_thresh: Optional[float] = 0.5
    window: int = 3

    def __post_init__(self):
        for name in ("theta", "theta_c", "tau_det"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.nms_thresh is not None and not 0 < self.nms_thresh <= 1:
            raise ValueError(f"nms_thresh must lie in (0, 1], got {self.nms_thresh}")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass(frozen=True)
class Node:
    kind: str
    video: str
    frame: int
    class_id: int
    box: Box
    # detection: index within its frame; candidate: (frame, index) of sources
    origin: int | tuple[tuple[int, int], ...]


@dataclass(eq=False)
class TCGraph:
    video: str
    class_id: int
    is_candidate: np.ndarray            # (K,) bool
    frames: np.ndarray                  # (K,) int
    boxes: np.ndarray                   # (K, 4)
    det_index: np.ndarray               # (K,) index within frame, -1 for candidates
    origins: list = field(default_factory=list)   # per node, tuple of (frame, index)
    edges: np.ndarray = field(default_factory=lambda: np.empty((0, 2), np.int64))

    @property
    def num_nodes(self) -> int:
        return len(self.frames)

    def nodes(self) -> list[Node]:
        out = []
        for n in range(self.num_nodes):
            box = Box.from_seq(self.boxes[n].tolist())
            if self.is_candidate[n]:
                out.append(Node(CANDIDATE, self.video, int(self.frames[n]), self.class_id, box,
                                tuple(self.origins[n])))
            else:
                out.append(Node(DETECTION, self.video, int(self.frames[n]), self.class_id, box,
                                int(self.det_index[n])))
        return out

    def validate(self) -> None:
        e = self.edges
        if len(e):
            if np.any(e[:, 0] == e[:, 1]):
                raise AssertionError("self edge")
            if np.any(e[:, 0] > e[:, 1]):
                raise AssertionError("edges must be stored with u < v")
            if len(np.unique(e, axis=0)) != len(e):
                raise AssertionError("duplicate edge")
            if np.any(self.is_candidate[e[:, 0]] & self.is_candidate[e[:, 1]]):
                raise AssertionError("candidate-candidate edge")
        deg = np.bincount(e.ravel(), minlength=self.num_nodes) if len(e) else \
            np.zeros(self.num_nodes, np.int64)
        if np.any(deg[self.is_candidate] < 1):
            raise AssertionError("candidate without originating detection")
        for n in np.flatnonzero(self.is_candidate):
            if not self.origins[n]:
                raise AssertionError("candidate without origins")


def prefilter_frame(dets: Sequence[Detection], tau: float, nms_thresh: Optional[float]) -> list[int]:
    """Indices surviving the score threshold and class-wise NMS, ascending."""
    keep = [k for k, d in enumerate(dets) if d.score >= tau]
    if nms_thresh is None or len(keep) < 2:
        return keep
    by_class: dict[int, list[int]] = {}
    for k in keep:
        by_class.setdefault(dets[k].class_id, []).append(k)
    out = []
    for ks in by_class.values():
        if len(ks) == 1:
            out.extend(ks)
            continue
        boxes = np.array([dets[k].box.to_list() for k in ks])
        scores = np.array([dets[k].score for k in ks])
        out.extend(ks[i] for i in nms_indices(boxes, scores, nms_thresh))
    return sorted(out)


def _flatten(dets: Sequence[Sequence[Detection]], config: TCConfig):
    frames, kidx, classes, boxes = [], [], [], []
    for f, ds in enumerate(dets):
        for k in prefilter_frame(ds, config.tau_det, config.nms_thresh):
            d = ds[k]
            frames.append(f)
            kidx.append(k)
            classes.append(d.class_id)
            boxes.append(d.box.to_list())
    return (np.array(frames, np.int64), np.array(kidx, np.int64), np.array(classes, np.int64),
            np.array(boxes, float).reshape(-1, 4))


def link_arrays(det_boxes, det_keys, t_src, t_keys, t_boxes, theta):
    """Detection-detection links and the matched mask of tracked boxes.

    Keys encode (frame, class); a tracked box is compared to every detection
    with the same key.
    """
    order = np.argsort(det_keys, kind="stable")
    sk = det_keys[order]
    lo = np.searchsorted(sk, t_keys, side="left")
    hi = np.searchsorted(sk, t_keys, side="right")
    cnt = hi - lo
    total = int(cnt.sum())
    matched = np.zeros(len(t_keys), dtype=bool)
    if total == 0:
        return np.empty((0, 2), np.int64), matched
    t_rep = np.repeat(np.arange(len(t_keys)), cnt)
    offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    d_rep = order[np.repeat(lo, cnt) + offs]
    hit = iou_pairs(t_boxes[t_rep], det_boxes[d_rep]) > theta
    matched[t_rep[hit]] = True
    a, b = t_src[t_rep[hit]], d_rep[hit]
    pairs = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
    if len(pairs):
        pairs = np.unique(pairs, axis=0)
    return pairs.astype(np.int64).reshape(-1, 2), matched


def candidates_arrays(t_src, t_frames, t_classes, t_boxes, matched, theta_c, num_classes):
    """Cluster unmatched tracked boxes into candidates.

    Returns ``(frames, classes, boxes, origin_lists)`` sorted by class, frame,
    then first origin.
    """
    u = np.flatnonzero(~matched)
    if len(u) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, 4)), []
    keys = t_frames[u] * num_classes + t_classes[u]
    labels = cluster_arrays(t_boxes[u], keys, theta_c)
    n = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n).astype(float)
    mean = np.stack([np.bincount(labels, weights=t_boxes[u, c], minlength=n) / counts
                     for c in range(4)], axis=1)
    first = np.full(n, len(u))
    np.minimum.at(first, labels, np.arange(len(u)))
    frames = t_frames[u][first]
    classes = t_classes[u][first]
    srcs = t_src[u]
    order_m = np.lexsort((srcs, labels))
    origins: list[list[int]] = [[] for _ in range(n)]
    for lab, s in zip(labels[order_m].tolist(), srcs[order_m].tolist()):
        lst = origins[lab]
        if not lst or lst[-1] != s:
            lst.append(s)
    firsts = np.array([o[0] for o in origins])
    order = np.lexsort((firsts, frames, classes))
    return frames[order], classes[order], mean[order], [origins[i] for i in order]


def build_video_graphs(video: str, dets: Sequence[Sequence[Detection]], num_classes: int,
                       width: float, height: float, config: TCConfig,
                       motion: Optional[Sequence[Optional[MotionField]]] = None,
                       tracker=None) -> list[TCGraph]:
    """Graphs for one video, one per class that has at least one detection."""
    frames, kidx, classes, boxes = _flatten(dets, config)
    if len(frames) == 0:
        return []
    if tracker is None:
        tracker = MotionFieldTracker(motion if motion is not None else [], len(dets))
    t_src, t_frames, t_boxes = track_arrays(boxes, frames, config.window, tracker, width, height)
    t_classes = classes[t_src]
    det_keys = frames * num_classes + classes
    t_keys = t_frames * num_classes + t_classes
    links, matched = link_arrays(boxes, det_keys, t_src, t_keys, t_boxes, config.theta)
    c_frames, c_classes, c_boxes, c_origins = candidates_arrays(
        t_src, t_frames, t_classes, t_boxes, matched, config.theta_c, num_classes)

    graphs = []
    det_local = np.full(len(frames), -1, np.int64)
    for c in np.unique(classes).tolist():
        dsel = np.flatnonzero(classes == c)            # already (frame, k) ordered
        csel = np.flatnonzero(c_classes == c)
        det_local[dsel] = np.arange(len(dsel))
        nd = len(dsel)
        lk = links[classes[links[:, 0]] == c] if len(links) else links
        e_det = det_local[lk]
        cand_edges = [(nd + ci, int(det_local[s])) for ci, cidx in enumerate(csel.tolist())
                      for s in c_origins[cidx]]
        e_cand = np.array(cand_edges, np.int64).reshape(-1, 2)
        e_cand = np.stack([e_cand.min(axis=1), e_cand.max(axis=1)], axis=1) if len(e_cand) else e_cand
        edges = np.concatenate([e_det.reshape(-1, 2), e_cand]).astype(np.int64)
        if len(edges):
            edges = np.unique(edges, axis=0)
        origins = [()] * nd + [tuple((int(frames[s]), int(kidx[s])) for s in c_origins[ci])
                               for ci in csel.tolist()]
        graphs.append(TCGraph(
            video=video, class_id=int(c),
            is_candidate=np.concatenate([np.zeros(nd, bool), np.ones(len(csel), bool)]),
            frames=np.concatenate([frames[dsel], c_frames[csel]]),
            boxes=np.concatenate([boxes[dsel], c_boxes[csel]]).reshape(-1, 4),
            det_index=np.concatenate([kidx[dsel], np.full(len(csel), -1, np.int64)]),
            origins=origins, edges=edges.reshape(-1, 2)))
    return graphs


def _video_job(args):
    return build_video_graphs(*args)


def build_graph(dataset: Dataset, detections: Optional[dict] = None,
                config: TCConfig = TCConfig(), tracker_factory: Optional[Callable] = None,
                jobs: int = 1) -> list[TCGraph]:
    """Graphs for every video in ``dataset``, ordered by video then class.

    ``tracker_factory(meta, motion)`` may supply a plug-in tracker per video.
    """
    detections = dataset.detections if detections is None else detections
    if detections is None:
        return []
    tasks = []
    for meta in dataset.manifest.videos:
        motion = dataset.motion.get(meta.id)
        tracker = tracker_factory(meta, motion) if tracker_factory else None
        tasks.append((meta.id, detections.get(meta.id, []), dataset.manifest.num_classes,
                      meta.width, meta.height, config, motion, tracker))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_video_job, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        parts = [_video_job(t) for t in tasks]
    return [g for part in parts for g in part]


def dump_graph(graphs: Sequence[TCGraph], path) -> None:
    """JSONL dump: one ``{"node": ...}`` or ``{"edge": [id, id]}`` per line.

    Node ids are global across the listed graphs.
    """
    lines, base = [], 0
    for g in graphs:
        for n, node in enumerate(g.nodes()):
            rec = {"id": base + n, "kind": node.kind, "video": node.video, "frame": node.frame,
                   "class": node.class_id, "box": [round(v, 6) for v in node.box.to_list()]}
            rec["origin"] = [list(o) for o in node.origin] if node.kind == CANDIDATE else node.origin
            lines.append(json.dumps({"node": rec}, separators=(",", ":")))
        for u, v in g.edges.tolist():
            lines.append(json.dumps({"edge": [base + u, base + v]}))
        base += g.num_nodes
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def graph_from_nodes(nodes: Sequence[tuple[str, int]], edges: Sequence[tuple[int, int]],
                     video: str = "v", class_id: int = 0) -> TCGraph:
    """Small hand-built graph from ``(kind, frame)`` pairs; boxes are dummies.

    Candidate origins are taken from their edges.
    """
    kinds = np.array([k == CANDIDATE for k, _ in nodes], bool)
    frames = np.array([f for _, f in nodes], np.int64)
    e = np.array([(min(u, v), max(u, v)) for u, v in edges], np.int64).reshape(-1, 2)
    if len(e):
        e = np.unique(e, axis=0)
    origins = []
    for n in range(len(nodes)):
        if kinds[n]:
            nb = [int(v if u == n else u) for u, v in e.tolist() if n in (u, v)]
            origins.append(tuple((int(frames[m]), m) for m in sorted(nb)))
        else:
            origins.append(())
    return TCGraph(video, class_id, kinds, frames, np.tile([0.0, 0.0, 1.0, 1.0], (len(nodes), 1)),
                   np.where(kinds, -1, np.arange(len(nodes))), origins, e)
