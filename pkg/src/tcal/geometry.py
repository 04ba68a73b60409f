"""Axis-aligned box arithmetic.

Boxes are ``(x_min, y_min, x_max, y_max)`` in pixels, origin top-left.
Scalar helpers operate on :class:`Box`; the ``*_arrays`` helpers operate on
``(N, 4)`` float arrays and are what the graph builder uses in bulk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {vals}")

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(float(seq[0]), float(seq[1]), float(seq[2]), float(seq[3]))

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clamp(self, width: float, height: float) -> "Box | None":
        """Clip to the image; ``None`` if nothing of positive area remains."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 < x1 and y0 < y1:
            return Box(x0, y0, x1, y1)
        return None


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    if a == b:
        return 1.0
    return inter / (a.area + b.area - inter)


def nms(dets: Sequence[tuple[Box, float]], iou_thresh: float = 0.5) -> list[tuple[Box, float]]:
    """Greedy non-maximum suppression, output in descending score order.

    Equal scores keep their input order (stable sort).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    kept: list[tuple[Box, float]] = []
    for i in order:
        box = dets[i][0]
        if all(iou(box, k[0]) <= iou_thresh for k in kept):
            kept.append(dets[i])
    return kept


def greedy_cluster(boxes: Sequence[Box], iou_thresh: float) -> list[list[int]]:
    """Single-link clustering: connected components of the IoU > thresh graph.

    Clusters are returned sorted by their smallest member index, members
    ascending.
    """
    n = len(boxes)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if iou(boxes[i], boxes[j]) > iou_thresh:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def mean_box(boxes: Iterable[Box]) -> Box:
    arr = np.array([b.to_list() for b in boxes], dtype=float)
    return Box.from_seq(arr.mean(axis=0).tolist())


# -- array versions ---------------------------------------------------------

def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.to_list() for b in boxes], dtype=float)
    return arr.reshape(-1, 4)


def iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise IoU of two aligned ``(N, 4)`` arrays."""
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    out = np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    # keep iou(a, a) == 1 exact, matching the scalar version
    same = np.all(a == b, axis=1)
    out[same] = 1.0
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ia = np.repeat(np.arange(len(a)), len(b))
    ib = np.tile(np.arange(len(b)), len(a))
    return iou_pairs(a[ia], b[ib]).reshape(len(a), len(b))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.5) -> np.ndarray:
    """Indices kept by greedy NMS, in descending score order (stable)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep: list[int] = []
    for i in order:
        if keep:
            ov = iou_pairs(np.repeat(boxes[i:i + 1], len(keep), axis=0), boxes[keep])
            if np.any(ov > iou_thresh):
                continue
        keep.append(int(i))
    return np.array(keep, dtype=np.int64)


def group_pairs(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All index pairs ``(i, j)``, ``i < j`` in sorted order, sharing a key.

    Returns original indices. Cost is the sum of squared group sizes.
    """
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    n = len(sk)
    if n < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    # end of each element's group in sorted order
    ends = np.searchsorted(sk, sk, side="right")
    counts = ends - np.arange(n) - 1
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    first = np.repeat(np.arange(n), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    second = first + 1 + offs
    return order[first], order[second]


def cluster_arrays(boxes: np.ndarray, keys: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Connected components of IoU > thresh among boxes sharing a key.

    Returns a component label per box; labels are numbered in order of each
    component's first member.
    """
    n = len(boxes)
    if n == 0:
        return np.empty(0, np.int64)
    i, j = group_pairs(keys)
    if len(i):
        hit = iou_pairs(boxes[i], boxes[j]) > iou_thresh
        i, j = i[hit], j[hit]
    adj = coo_matrix((np.ones(len(i), dtype=np.int8), (i, j)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    # renumber by first occurrence so output is independent of scipy internals
    _, first = np.unique(labels, return_index=True)
    rank = np.empty(len(first), np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[labels]
