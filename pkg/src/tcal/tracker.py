"""Propagate detection boxes to neighbouring frames.

The default tracker translates a box by the motion vector of the grid cell
containing its centre, one frame at a time. Any object with a
``propagate(box, i, j) -> Box`` method can stand in for it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .dataset import Detection, MotionField
from .geometry import Box


class TrackingError(ValueError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    window: int = 3
    kind: str = "motion"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("tracker window must be >= 1")
        if self.kind not in ("motion", "plugin"):
            raise ValueError(f"unknown tracker kind {self.kind!r}")


@dataclass(frozen=True)
class TrackedBox:
    source_frame: int
    source_index: int
    target_frame: int
    box: Box
    class_id: int
    video: str = ""


class Tracker(Protocol):
    def propagate(self, box: Box, i: int, j: int) -> Box: ...


class MotionFieldTracker:
    """Centre-vector translation through per-pair motion grids.

    ``motion[t]`` maps frame ``t`` to ``t + 1``; entries may be ``None`` for
    pairs with no field, which is an error only if a path crosses them.
    """

    def __init__(self, motion: Sequence[Optional[MotionField]], num_frames: Optional[int] = None):
        self.num_frames = len(motion) + 1 if num_frames is None else num_frames
        fields = list(motion) + [None] * max(0, self.num_frames - 1 - len(motion))
        present = [m for m in fields if m is not None]
        self.missing = np.array([m is None for m in fields], dtype=bool)
        if present:
            self.cell = present[0].cell_size
            shape = present[0].fwd.shape
            if any(m.cell_size != self.cell or m.fwd.shape != shape for m in present):
                raise TrackingError("motion grids within a video must share cell size and shape")
        else:
            self.cell, shape = 16, (1, 1, 2)
        self.fwd = np.zeros((len(fields),) + shape)
        self.bwd = np.zeros((len(fields),) + shape)
        for t, m in enumerate(fields):
            if m is not None:
                self.fwd[t] = m.fwd
                self.bwd[t] = m.backward_grid()
        self.rows, self.cols = shape[0], shape[1]

    def _lookup(self, grids: np.ndarray, pair: np.ndarray, boxes: np.ndarray) -> np.ndarray:
        if self.missing.size and np.any(self.missing[pair]):
            t = int(pair[self.missing[pair]][0])
            raise TrackingError(f"missing motion field for frame pair {t}->{t + 1}")
        cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
        cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
        col = np.clip(np.floor(cx / self.cell).astype(np.int64), 0, self.cols - 1)
        row = np.clip(np.floor(cy / self.cell).astype(np.int64), 0, self.rows - 1)
        return grids[pair, row, col]

    def step(self, boxes: np.ndarray, frames: np.ndarray, direction: int) -> np.ndarray:
        """Move boxes sitting in ``frames`` one frame forward (+1) or back (-1)."""
        if direction > 0:
            d = self._lookup(self.fwd, frames, boxes)
        else:
            d = self._lookup(self.bwd, frames - 1, boxes)
        return boxes + np.concatenate([d, d], axis=1)

    def propagate(self, box: Box, i: int, j: int) -> Box:
        if not (0 <= i < self.num_frames and 0 <= j < self.num_frames):
            raise TrackingError(f"frames {i}->{j} outside video of {self.num_frames} frames")
        arr = np.array([box.to_list()])
        direction = 1 if j > i else -1
        for f in range(i, j, direction):
            arr = self.step(arr, np.array([f]), direction)
        return Box.from_seq(arr[0].tolist())

    def propagate_arrays(self, boxes: np.ndarray, frames: np.ndarray, window: int):
        """Track every box to all frames within ``window``.

        Returns ``(source, target_frame, boxes)`` arrays, forward offsets
        first, then backward, each ordered by offset then source.
        """
        srcs, tgts, outs = [], [], []
        idx = np.arange(len(boxes))
        for direction in (1, -1):
            cur = boxes.astype(float, copy=True)
            cur_frames = frames.copy()
            alive = idx
            for _ in range(window):
                ok = (cur_frames + direction >= 0) & (cur_frames + direction < self.num_frames)
                alive, cur, cur_frames = alive[ok], cur[ok], cur_frames[ok]
                if len(alive) == 0:
                    break
                cur = self.step(cur, cur_frames, direction)
                cur_frames = cur_frames + direction
                srcs.append(alive)
                tgts.append(cur_frames)
                outs.append(cur)
        if not srcs:
            return np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, 4))
        return np.concatenate(srcs), np.concatenate(tgts), np.concatenate(outs)


def track_arrays(boxes: np.ndarray, frames: np.ndarray, window: int, tracker,
                 width: float, height: float):
    """Tracked boxes for all detections, clipped to the image; boxes left with no area are dropped."""
    if isinstance(tracker, MotionFieldTracker):
        src, tgt, out = tracker.propagate_arrays(boxes, frames, window)
    else:
        n_frames = getattr(tracker, "num_frames", None)
        if n_frames is None:
            raise TrackingError("plug-in trackers must expose num_frames")
        src, tgt, out = [], [], []
        for direction in (1, -1):
            for s in range(1, window + 1):
                for k in range(len(boxes)):
                    i = int(frames[k])
                    j = i + direction * s
                    if 0 <= j < n_frames:
                        b = tracker.propagate(Box.from_seq(boxes[k].tolist()), i, j)
                        src.append(k)
                        tgt.append(j)
                        out.append(b.to_list())
        src = np.array(src, dtype=np.int64)
        tgt = np.array(tgt, dtype=np.int64)
        out = np.array(out, dtype=float).reshape(-1, 4)
    # detections live inside the image, so tracked boxes are clipped to it too
    out = np.stack([np.clip(out[:, 0], 0, width), np.clip(out[:, 1], 0, height),
                    np.clip(out[:, 2], 0, width), np.clip(out[:, 3], 0, height)], axis=1).reshape(-1, 4)
    inside = (out[:, 2] > out[:, 0]) & (out[:, 3] > out[:, 1])
    return src[inside], tgt[inside], out[inside]


def propagate(det: Detection, i: int, j: int, motion: Sequence[Optional[MotionField]],
              window: int = 3, source_index: int = 0, video: str = "") -> TrackedBox:
    if not 1 <= abs(i - j) <= window:
        raise TrackingError(f"target frame {j} not within window {window} of {i}")
    tracker = MotionFieldTracker(motion)
    box = tracker.propagate(det.box, i, j)
    return TrackedBox(i, source_index, j, box, det.class_id, video)


def propagate_all(dets: Sequence[Sequence[Detection]], config: TrackerConfig,
                  motion: Sequence[Optional[MotionField]], width: float, height: float,
                  tracker: Optional[Tracker] = None, video: str = "") -> dict[int, list[TrackedBox]]:
    """Tracked boxes for one video grouped by target frame."""
    num_frames = len(dets)
    if tracker is None:
        tracker = MotionFieldTracker(motion, num_frames)
    flat = [(f, k, d) for f, ds in enumerate(dets) for k, d in enumerate(ds)]
    if not flat:
        return {}
    boxes = np.array([d.box.to_list() for _, _, d in flat])
    frames = np.array([f for f, _, _ in flat], dtype=np.int64)
    src, tgt, out = track_arrays(boxes, frames, config.window, tracker, width, height)
    result: dict[int, list[TrackedBox]] = {}
    for s, j, b in zip(src.tolist(), tgt.tolist(), out.tolist()):
        f, k, d = flat[s]
        result.setdefault(j, []).append(TrackedBox(f, k, j, Box.from_seq(b), d.class_id, video))
    return dict(sorted(result.items()))
