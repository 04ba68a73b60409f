import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcal.evaluation import evaluate
from tcal.geometry import Box
from tcal.simulator import (DetectorConfig, LoopConfig, StratumConfig, SurrogateDetector,
                            WorldConfig, coverage_counts, detect, generate_world, render_video, run_loop,
                            split_videos, update_detector)
from tcal.tracker import MotionFieldTracker

SMALL_STRATA = (StratumConfig("day", 4, {"car": 0.5, "pedestrian": 0.5}),
                StratumConfig("night", 2, {"car": 0.5}, 2.0))


def small_world(seed=0, **kw):
    cfg = dict(seed=seed, strata=SMALL_STRATA, frames_min=60, frames_max=90, spawn_rate=0.05)
    cfg.update(kw)
    return generate_world(WorldConfig(**cfg))


# -- world -----------------------------------------------------------------

def test_zero_spawn_gives_empty_frames_and_zero_motion():
    w = small_world(spawn_rate=0.0)
    for v in w.manifest.videos:
        assert all(not objs for objs in w.dataset.gt[v.id])
        assert all(not mf.fwd.any() for mf in w.dataset.motion[v.id])


def test_static_object_renders_identically():
    states = [[(0, 1, 50.0, 40.0, 20.0, 30.0)] for _ in range(5)]
    gt, motion = render_video(states, 160, 96, 16)
    assert all(frame == gt[0] for frame in gt) and len(gt[0]) == 1
    assert gt[0][0].box == Box(40, 25, 60, 55)
    assert all(not mf.fwd.any() for mf in motion)


def test_constant_velocity_object():
    # x advances by 3 px per frame: arithmetic sequences with step 3
    states = [[(0, 0, 30.0 + 3 * t, 40.0, 20.0, 20.0)] for t in range(6)]
    gt, motion = render_video(states, 160, 96, 16)
    xs = np.array([frame[0].box.x_min for frame in gt])
    np.testing.assert_allclose(np.diff(xs), 3.0)
    for t, mf in enumerate(motion):
        cx, cy = gt[t][0].box.center
        assert tuple(mf.fwd[int(cy // 16), int(cx // 16)]) == (3.0, 0.0)
    # cells away from the object stay still
    assert not motion[0].fwd[5, 9].any()


def test_world_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(strata=(StratumConfig("s", 1, {"car": 1.5}),))
    with pytest.raises(ValueError):
        WorldConfig(strata=(StratumConfig("s", 1, {"boat": 0.5}),))
    with pytest.raises(ValueError):
        WorldConfig(classes=())
    with pytest.raises(ValueError):
        WorldConfig(frames_min=10, frames_max=5)


def test_generator_is_deterministic_and_unbalanced():
    a, b = small_world(3), small_world(3)
    assert a.dataset == b.dataset
    frames = [objs for v in a.manifest.videos for objs in a.dataset.gt[v.id]]
    empty = sum(1 for objs in frames if not objs) / len(frames)
    assert 0.05 < empty < 0.95
    assert small_world(4).dataset != a.dataset


def test_tracking_gt_with_motion_reproduces_next_box():
    w = small_world(1)
    cell = w.config.cell
    checked = 0
    for v in w.manifest.videos:
        tr = MotionFieldTracker(w.dataset.motion[v.id])
        gt = w.dataset.gt[v.id]
        for t in range(len(gt) - 1):
            nxt = {o.track_id: o.box for o in gt[t + 1]}
            for o in gt[t]:
                if o.track_id not in nxt:
                    continue
                b, n = o.box, nxt[o.track_id]
                inside = b.x_min > 0 and b.y_min > 0 and b.x_max < v.width and b.y_max < v.height
                if not inside or not (n.x_min > 0 and n.y_min > 0 and n.x_max < v.width and n.y_max < v.height):
                    continue
                moved = tr.propagate(b, t, t + 1)
                assert np.max(np.abs(np.array(moved.to_list()) - n.to_list())) <= cell
                checked += 1
    assert checked > 100


def test_split_is_stratified_and_disjoint():
    w = small_world()
    train, test = split_videos(w, 0.2)
    assert not set(train) & set(test)
    assert len(train) + len(test) == len(w.manifest.videos)
    strata = {w.manifest.video(v).stratum for v in test}
    assert strata == {"day", "night"}


# -- surrogate detector ----------------------------------------------------

def test_saturated_detector_reproduces_ground_truth():
    w = small_world()
    cfg = DetectorConfig(p_miss_min=0.0, fp_rate_min=0.0, bg_fp_min=0.0, jitter_min=0.0)
    dets = detect(w, SurrogateDetector.uniform(cfg, w, 1.0), seed=0)
    for v in w.manifest.videos:
        for objs, frame in zip(w.dataset.gt[v.id], dets[v.id]):
            assert sorted(d.box.to_list() for d in frame) == sorted(o.box.to_list() for o in objs)
    rep = evaluate(dets, w.dataset.gt, w.manifest.num_classes)
    assert rep.mAP == 1.0


def test_zero_skill_certain_miss_detects_nothing_true():
    w = small_world()
    cfg = DetectorConfig(p_miss_max=1.0, rho=1.0)
    dets, tags = detect(w, SurrogateDetector.uniform(cfg, w, 0.0), seed=0, with_tags=True)
    kinds = {k for v in tags.values() for frame in v.kind for k in frame}
    assert "tp" not in kinds and "cls_fp" not in kinds


def test_detection_deterministic_for_seed():
    w = small_world()
    det = SurrogateDetector.uniform(DetectorConfig(), w, 0.3)
    assert detect(w, det, seed=5) == detect(w, det, seed=5)
    assert detect(w, det, seed=5) != detect(w, det, seed=6)


def test_detector_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(p_miss_max=1.5)
    with pytest.raises(ValueError):
        DetectorConfig(kappa=0)
    with pytest.raises(ValueError):
        DetectorConfig(fp_rate_min=-0.1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(0, 3), min_size=2, max_size=2), min_size=1, max_size=30),
       st.data(), st.integers(0, 2))
def test_coverage_counts_monotone(counts, data, radius):
    counts = np.array(counts)
    n = len(counts)
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    extra = data.draw(st.integers(0, n - 1))
    before = coverage_counts(counts, mask, radius)
    more = mask.copy()
    more[extra] = True
    after = coverage_counts(counts, more, radius)
    assert np.all(after >= before - 1e-12)
    # an isolated labeled frame contributes exactly its own counts
    one = np.zeros(n, bool)
    one[extra] = True
    np.testing.assert_allclose(coverage_counts(counts, one, radius), counts[extra], atol=1e-12)


def test_skill_non_decreasing_with_labels():
    w = small_world()
    frames = [(v.id, f) for v in w.manifest.videos for f in range(v.num_frames)]
    rng = np.random.default_rng(0)
    order = [frames[i] for i in rng.permutation(len(frames))]
    prev = None
    for n in (0, 20, 80, 200):
        det = update_detector(w, set(order[:n]), DetectorConfig())
        if prev is not None:
            for key, s in det.skill.items():
                assert s >= prev.skill[key]
            for key, s in det.bg_skill.items():
                assert s >= prev.bg_skill[key]
        prev = det
    assert all(0 <= s < 1 for s in prev.skill.values())


def test_map_rises_with_skill_paired_over_seeds():
    gains = []
    for seed in range(20):
        w = small_world(seed, frames_min=40, frames_max=50)
        lo = evaluate(detect(w, SurrogateDetector.uniform(DetectorConfig(), w, 0.2), seed), w.dataset.gt, 4)
        hi = evaluate(detect(w, SurrogateDetector.uniform(DetectorConfig(), w, 0.8), seed), w.dataset.gt, 4)
        gains.append(hi.mAP - lo.mAP)
    assert np.mean(gains) > 0
    assert sum(g > 0 for g in gains) >= 16


# -- loop ------------------------------------------------------------------

LOOP = LoopConfig(cycles=2, budget_per_cycle=0.03, init_fraction=0.03)


def test_single_cycle_gives_two_points():
    w = small_world()
    res = run_loop(w, "random", dataclasses.replace(LOOP, cycles=1), seed=0)
    assert [r["cycle"] for r in res.curve] == [0, 1]


def test_loop_is_deterministic_and_keeps_batch_size():
    w = small_world()
    a = run_loop(w, "tc", LOOP, seed=2)
    b = run_loop(w, "tc", LOOP, seed=2)
    assert a.curve == b.curve and a.selections == b.selections
    train, _ = split_videos(w, LOOP.test_fraction)
    n_train = sum(w.manifest.video(v).num_frames for v in train)
    batch = round(LOOP.budget_per_cycle * n_train)
    per_cycle = {}
    for r in a.selections:
        per_cycle[r["cycle"]] = per_cycle.get(r["cycle"], 0) + 1
        assert r["video_id"] in train
    assert per_cycle == {1: batch, 2: batch}
    fracs = [float(r["labeled_fraction"]) for r in a.curve]
    assert fracs == sorted(fracs) and len(set(fracs)) == 3


def test_initial_set_shared_across_methods():
    w = small_world()
    a = run_loop(w, "random", LOOP, seed=1)
    b = run_loop(w, "entropy", LOOP, seed=1)
    assert a.curve[0]["mAP"] == b.curve[0]["mAP"]


def test_budget_exceeding_pool_rejected():
    w = small_world()
    with pytest.raises(ValueError, match="exceeds"):
        run_loop(w, "random", LoopConfig(cycles=40, budget_per_cycle=0.05), seed=0)


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        run_loop(small_world(), "bogus", LOOP, seed=0)


def test_oracle_fp_follows_injected_errors():
    # the "easy" stratum saturates after a handful of labels and then makes no
    # errors; every false positive lives in the "hard" stratum
    strata = (StratumConfig("easy", 4, {"car": 0.5}, difficulty=1e-4),
              StratumConfig("hard", 4, {"car": 0.5}, difficulty=1e4))
    w = generate_world(WorldConfig(seed=0, strata=strata, frames_min=80, frames_max=100, spawn_rate=0.05))
    cfg = DetectorConfig(p_miss_min=0.0, fp_rate_min=0.0, bg_fp_min=0.0, jitter_min=0.0)
    res = run_loop(w, "oracle_fp", LOOP, seed=0, detector_config=cfg)
    positive = [r for r in res.selections if float(r["score"]) > 0]
    assert positive
    assert all(w.manifest.video(r["video_id"]).stratum == "hard" for r in positive)
