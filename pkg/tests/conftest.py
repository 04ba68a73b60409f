import numpy as np
import pytest

from tcal.dataset import (Dataset, DatasetManifest, Detection, GroundTruthObject, MotionField, VideoMeta,
                          grid_shape, normalize_scores)
from tcal.geometry import Box

W, H, CELL = 160, 96, 16

# criterion lines printed at the end of the run by the acceptance suite
ACCEPTANCE_LINES: list[str] = []


def det(box, cls=0, conf=0.9, num_classes=2) -> Detection:
    """Detection whose best class is ``cls`` with probability ``conf``."""
    p = np.full(num_classes + 1, (1.0 - conf) / num_classes)
    p[cls] = conf
    return Detection(Box.from_seq(box), normalize_scores(p))


def gt_obj(box, cls=0, track=0) -> GroundTruthObject:
    return GroundTruthObject(track, cls, Box.from_seq(box))


def uniform_motion(num_frames, v=(0.0, 0.0), width=W, height=H, cell=CELL):
    rows, cols = grid_shape(width, height, cell)
    grid = np.zeros((rows, cols, 2))
    grid[..., 0], grid[..., 1] = v
    return [MotionField(t, cell, grid.copy()) for t in range(num_frames - 1)]


def one_video_dataset(dets_per_frame, gt_per_frame=None, motion=None, classes=("a", "b"), vid="v0"):
    n = len(dets_per_frame)
    manifest = DatasetManifest("fixture", tuple(classes), (VideoMeta(vid, n, W, H),))
    gt = {vid: gt_per_frame if gt_per_frame is not None else [[] for _ in range(n)]}
    return Dataset(manifest, gt, {vid: motion if motion is not None else uniform_motion(n)},
                   {vid: dets_per_frame})


@pytest.fixture
def fig2_dataset():
    """Frames 0-3: a static track detected in 0, 1, 3 (missed in 2) and an
    isolated detection in frame 1 elsewhere in the image."""
    track = [10, 10, 30, 40]
    lone = [100, 50, 120, 80]
    dets = [[det(track)], [det(track), det(lone)], [], [det(track)]]
    return one_video_dataset(dets)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
