import numpy as np
import pytest
from hypothesis import given, strategies as st

from tcal.dataset import MotionField
from tcal.geometry import Box
from tcal.tracker import (MotionFieldTracker, TrackerConfig, TrackingError, propagate, propagate_all,
                          track_arrays)

from conftest import CELL, H, W, det, uniform_motion


def test_zero_motion_keeps_box():
    tr = MotionFieldTracker(uniform_motion(5))
    b = Box(10, 10, 30, 40)
    assert tr.propagate(b, 0, 3) == b
    assert tr.propagate(b, 4, 1) == b


@given(st.floats(-4, 4), st.floats(-4, 4), st.integers(1, 3))
def test_uniform_velocity_translates_by_steps(vx, vy, steps):
    tr = MotionFieldTracker(uniform_motion(8, (vx, vy)))
    b = Box(60, 40, 80, 60)
    fwd = tr.propagate(b, 2, 2 + steps)
    np.testing.assert_allclose(fwd.to_list(), b.translate(steps * vx, steps * vy).to_list(), atol=1e-9)
    back = tr.propagate(b, 5, 5 - steps)
    np.testing.assert_allclose(back.to_list(), b.translate(-steps * vx, -steps * vy).to_list(), atol=1e-9)


def test_centre_cell_decides_the_vector():
    fields = uniform_motion(2)
    fields[0].fwd[1, 2] = (5.0, 0.0)       # cell covering x in [32, 48), y in [16, 32)
    tr = MotionFieldTracker(fields)
    assert tr.propagate(Box(30, 18, 50, 30), 0, 1) == Box(35, 18, 55, 30)
    assert tr.propagate(Box(0, 0, 10, 10), 0, 1) == Box(0, 0, 10, 10)


def test_stored_backward_grid_is_used():
    rows, cols = uniform_motion(2)[0].fwd.shape[:2]
    mf = MotionField(0, CELL, np.zeros((rows, cols, 2)), np.full((rows, cols, 2), 2.0))
    tr = MotionFieldTracker([mf])
    assert tr.propagate(Box(0, 0, 4, 4), 1, 0) == Box(2, 2, 6, 6)


def test_missing_field_raises_only_when_crossed():
    fields = uniform_motion(4)
    fields[1] = None
    tr = MotionFieldTracker(fields, 4)
    tr.propagate(Box(0, 0, 4, 4), 0, 1)
    with pytest.raises(TrackingError, match="1->2"):
        tr.propagate(Box(0, 0, 4, 4), 0, 2)


def test_propagate_window_enforced():
    with pytest.raises(TrackingError):
        propagate(det([0, 0, 4, 4]), 0, 5, uniform_motion(8), window=3)
    tb = propagate(det([0, 0, 4, 4]), 0, 2, uniform_motion(8, (1, 0)), window=3)
    assert tb.box == Box(2, 0, 6, 4) and tb.target_frame == 2


def test_propagate_all_covers_window_and_clips():
    dets = [[det([0, 0, 10, 10])], [], [], [], []]
    out = propagate_all(dets, TrackerConfig(window=3), uniform_motion(5, (-4, 0)), W, H)
    # moving left the box is clipped at x = 0 and shrinks; after three steps
    # of 4 px nothing is left and frame 3 gets no tracked box
    assert sorted(out) == [1, 2]
    assert out[1][0].box == Box(0, 0, 6, 10)
    assert out[2][0].box == Box(0, 0, 2, 10)


class ShiftTracker:
    """Plug-in tracker: everything moves one pixel down per frame."""

    def __init__(self, n):
        self.num_frames = n

    def propagate(self, box, i, j):
        return box.translate(0, j - i)


def test_plugin_tracker_matches_equivalent_motion():
    boxes = np.array([[10.0, 10, 20, 20], [50, 30, 70, 60]])
    frames = np.array([1, 3])
    a = track_arrays(boxes, frames, 2, ShiftTracker(6), W, H)
    b = track_arrays(boxes, frames, 2, MotionFieldTracker(uniform_motion(6, (0, 1))), W, H)
    key = lambda r: sorted(zip(r[0].tolist(), r[1].tolist(), map(tuple, r[2].tolist())))
    assert key(a) == key(b)


def test_plugin_tracker_needs_frame_count():
    class NoCount:
        def propagate(self, box, i, j):
            return box
    with pytest.raises(TrackingError):
        track_arrays(np.zeros((1, 4)) + [0, 0, 1, 1], np.array([0]), 1, NoCount(), W, H)
