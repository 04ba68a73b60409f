"""Desk-scale closed loop: synthetic videos, a surrogate detector, AL cycles.

Randomness flows from one run seed through named sub-streams (world,
detector, selection, init), each keyed further by video and cycle, so the
outcome of a run does not depend on execution order or parallelism. The
detector draws do not depend on the acquisition method either: two methods
run with the same seed see identical noise and differ only through the
labels they acquire.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import poisson

from .acquisition import (SelectionConfig, oracle_score, random_scores, select_batch, tc_score,
                          uncertainty_scores)
from .dataset import (Dataset, DatasetManifest, Detection, GroundTruthObject, MotionField,
                      VideoMeta, grid_shape, normalize_scores)
from .energy import EnergyModel, collect_errors, solve_graphs
from .evaluation import EvalReport, evaluate, match_frame
from .geometry import Box
from .tcgraph import TCConfig, build_graph, prefilter_frame

log = logging.getLogger(__name__)

WORLD, DETECTOR, DETECTOR_TEST, SELECTION, INIT, SPLIT = range(6)

LOOP_METHODS = ("random", "random_r", "tc", "oracle_fp", "oracle_fn",
                "least_confidence", "entropy", "margin")


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


# -- world -----------------------------------------------------------------

@dataclass
class ClassSpec:
    name: str
    size: tuple[float, float, float, float] = (12.0, 24.0, 18.0, 40.0)  # w_min, h_min, w_max, h_max
    speed: tuple[float, float] = (0.5, 1.5)


@dataclass
class StratumConfig:
    name: str
    num_videos: int
    spawn: dict[str, float]
    difficulty: float = 1.0


DEFAULT_CLASSES = (
    ClassSpec("pedestrian", (10.0, 22.0, 16.0, 36.0), (0.4, 1.2)),
    ClassSpec("cyclist", (12.0, 22.0, 18.0, 34.0), (1.2, 2.5)),
    ClassSpec("car", (30.0, 18.0, 56.0, 32.0), (1.5, 4.0)),
    ClassSpec("wheelchair", (12.0, 16.0, 18.0, 24.0), (0.4, 1.0)),
)

DEFAULT_STRATA = (
    StratumConfig("default", 10, {"pedestrian": 0.30, "cyclist": 0.20, "car": 0.35}),
    StratumConfig("town", 4, {"pedestrian": 0.30, "cyclist": 0.20, "car": 0.35}, 1.5),
    StratumConfig("night", 3, {"car": 0.35}, 2.0),
    StratumConfig("wheelchair", 3, {"pedestrian": 0.20, "cyclist": 0.20, "wheelchair": 1.0}),
)


@dataclass
class WorldConfig:
    seed: int = 0
    classes: tuple = DEFAULT_CLASSES
    strata: tuple = DEFAULT_STRATA
    frames_min: int = 100
    frames_max: int = 400
    width: int = 320
    height: int = 192
    fps: float = 25.0
    cell: int = 16
    spawn_rate: float = 0.02        # per frame, multiplied by the class spawn probability
    spawn_points: int = 6
    lifetime: tuple[int, int] = (40, 160)
    segment: tuple[int, int] = (10, 30)   # frames between velocity changes
    max_turn: float = 0.35                # radians per velocity change
    motion_noise: float = 0.0
    min_visible_area: float = 50.0
    name: str = "synthetic"

    def __post_init__(self):
        self.classes = tuple(c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes)
        self.strata = tuple(s if isinstance(s, StratumConfig) else StratumConfig(**s) for s in self.strata)
        if not self.classes:
            raise ValueError("world needs at least one class")
        names = [c.name for c in self.classes]
        for s in self.strata:
            for cname, p in s.spawn.items():
                if cname not in names:
                    raise ValueError(f"stratum {s.name!r} spawns unknown class {cname!r}")
                if not 0 <= p <= 1:
                    raise ValueError(f"spawn probability {p} outside [0, 1]")
            if s.num_videos < 0:
                raise ValueError("num_videos must be non-negative")
        if not 0 <= self.spawn_rate <= 1:
            raise ValueError("spawn_rate must lie in [0, 1]")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError("need 1 <= frames_min <= frames_max")

    @property
    def num_videos(self) -> int:
        return sum(s.num_videos for s in self.strata)


@dataclass
class World:
    dataset: Dataset
    config: WorldConfig

    @property
    def manifest(self) -> DatasetManifest:
        return self.dataset.manifest


def _spawn_points(rng, w, h, n):
    """Points on the image border with an inward heading."""
    pts = []
    for _ in range(n):
        side = rng.integers(4)
        u = rng.uniform(0.15, 0.85)
        if side == 0:
            x, y, ang = 0.0, u * h, 0.0
        elif side == 1:
            x, y, ang = float(w), u * h, math.pi
        elif side == 2:
            x, y, ang = u * w, 0.0, math.pi / 2
        else:
            x, y, ang = u * w, float(h), -math.pi / 2
        pts.append((x, y, ang))
    return pts


def _simulate_video(rng, cfg: WorldConfig, stratum: StratumConfig, num_frames: int):
    """Object states per frame: lists of (track_id, class_id, cx, cy, w, h, vx, vy)."""
    W, H = cfg.width, cfg.height
    spawns = _spawn_points(rng, W, H, cfg.spawn_points)
    cls_index = {c.name: i for i, c in enumerate(cfg.classes)}
    live = []        # dicts
    frames = []
    next_id = 0
    for t in range(num_frames):
        for cname, p in sorted(stratum.spawn.items(), key=lambda kv: cls_index[kv[0]]):
            if rng.random() < cfg.spawn_rate * p:
                spec = cfg.classes[cls_index[cname]]
                sx, sy, ang = spawns[rng.integers(len(spawns))]
                bw = rng.uniform(spec.size[0], spec.size[2])
                bh = rng.uniform(spec.size[1], spec.size[3])
                speed = rng.uniform(*spec.speed)
                ang += rng.uniform(-0.5, 0.5)
                live.append(dict(id=next_id, cls=cls_index[cname], cx=sx, cy=sy, w=bw, h=bh,
                                 speed=speed, ang=ang, seg=int(rng.integers(*cfg.segment)),
                                 life=int(rng.integers(*cfg.lifetime))))
                next_id += 1
        cur = []
        for o in live:
            cur.append((o["id"], o["cls"], round(o["cx"], 6), round(o["cy"], 6),
                        round(o["w"], 6), round(o["h"], 6)))
        frames.append(cur)
        # advance
        survivors = []
        for o in live:
            o["seg"] -= 1
            if o["seg"] <= 0:
                o["ang"] += rng.uniform(-cfg.max_turn, cfg.max_turn)
                o["seg"] = int(rng.integers(*cfg.segment))
            o["cx"] += o["speed"] * math.cos(o["ang"])
            o["cy"] += o["speed"] * math.sin(o["ang"])
            o["life"] -= 1
            hw, hh = o["w"] / 2, o["h"] / 2
            inside = (o["cx"] + hw > 0 and o["cx"] - hw < W and o["cy"] + hh > 0 and o["cy"] - hh < H)
            if inside and o["life"] > 0:
                survivors.append(o)
        live = survivors
    return frames


def _fill_cells(grid, box, v, cell):
    rows, cols = grid.shape[:2]
    x0, y0, x1, y1 = box
    c0 = max(0, int(math.ceil(x0 / cell - 0.5)))
    c1 = min(cols - 1, int(math.floor(x1 / cell - 0.5)))
    r0 = max(0, int(math.ceil(y0 / cell - 0.5)))
    r1 = min(rows - 1, int(math.floor(y1 / cell - 0.5)))
    if c0 <= c1 and r0 <= r1:
        grid[r0:r1 + 1, c0:c1 + 1] = v
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    cc = min(cols - 1, max(0, int(math.floor(cx / cell))))
    rr = min(rows - 1, max(0, int(math.floor(cy / cell))))
    grid[rr, cc] = v


def render_video(states, width: int, height: int, cell: int, min_visible_area: float = 50.0,
                 motion_noise: float = 0.0, rng: Optional[np.random.Generator] = None):
    """Ground truth and motion fields for per-frame object states.

    ``states[t]`` lists ``(track_id, class_id, cx, cy, w, h)`` of the objects
    present in frame ``t``. Ground-truth boxes are clipped to the image and
    kept when at least ``min_visible_area`` is visible. The field for pair
    ``t -> t+1`` holds each object's displacement in the cells covered by its
    box at ``t`` and is zero elsewhere, plus optional Gaussian noise.
    """
    frames_gt, pos = [], []
    for objs in states:
        recs, pmap = [], {}
        for tid, c, cx, cy, w, h in objs:
            full = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            pmap[tid] = (cx, cy, full)
            vis = full.clamp(width, height)
            if vis is None or vis.area < min_visible_area:
                continue
            recs.append(GroundTruthObject(tid, c, Box(*(round(x, 6) for x in vis.to_list()))))
        frames_gt.append(recs)
        pos.append(pmap)
    rows, cols = grid_shape(width, height, cell)
    fields = []
    for t in range(len(states) - 1):
        grid = np.zeros((rows, cols, 2))
        for tid, (cx, cy, full) in pos[t].items():
            if tid in pos[t + 1]:
                nx, ny, _ = pos[t + 1][tid]
                _fill_cells(grid, full.to_list(), (round(nx - cx, 6), round(ny - cy, 6)), cell)
        if motion_noise > 0:
            grid = grid + (rng or np.random.default_rng(0)).normal(0, motion_noise, grid.shape)
        fields.append(MotionField(t, cell, np.round(grid, 6) + 0.0))
    return frames_gt, fields


def generate_world(config: WorldConfig) -> World:
    """Synthetic videos with ground truth and motion fields consistent with it."""
    videos, gt, motion = [], {}, {}
    vidx = 0
    for stratum in config.strata:
        for _ in range(stratum.num_videos):
            rng = substream(config.seed, WORLD, vidx)
            L = int(rng.integers(config.frames_min, config.frames_max + 1))
            vid = f"{stratum.name}_{vidx:03d}"
            states = _simulate_video(rng, config, stratum, L)
            gt[vid], motion[vid] = render_video(states, config.width, config.height, config.cell,
                                                config.min_visible_area, config.motion_noise,
                                                substream(config.seed, WORLD, vidx, 1))
            videos.append(VideoMeta(vid, L, config.width, config.height, config.fps, stratum.name))
            vidx += 1
    manifest = DatasetManifest(config.name, tuple(c.name for c in config.classes), tuple(videos))
    return World(Dataset(manifest, gt, motion), config)


def split_videos(world: World, test_fraction: float = 0.2) -> tuple[list[str], list[str]]:
    """Stratified train/test split.

    Every stratum with at least two videos contributes one test video first;
    the rest of the test quota goes to strata by largest remainder.
    """
    by_stratum: dict[str, list[str]] = {}
    for v in world.manifest.videos:
        by_stratum.setdefault(v.stratum, []).append(v.id)
    total = len(world.manifest.videos)
    n_test = int(round(test_fraction * total))
    quota = {s: (1 if len(v) >= 2 else 0) for s, v in by_stratum.items()}
    if sum(quota.values()) > n_test:
        n_test = sum(quota.values())
    left = n_test - sum(quota.values())
    while left > 0:
        room = {s: len(v) - 1 - quota[s] for s, v in by_stratum.items()}
        want = {s: test_fraction * len(v) - quota[s] for s, v in by_stratum.items() if room[s] > 0}
        if not want:
            break
        s = max(sorted(want), key=lambda k: want[k])
        quota[s] += 1
        left -= 1
    rng = substream(world.config.seed, SPLIT)
    test = []
    for s in sorted(by_stratum):
        ids = by_stratum[s]
        pick = rng.permutation(len(ids))[:quota[s]]
        test.extend(ids[i] for i in sorted(pick))
    test_set = set(test)
    train = [v.id for v in world.manifest.videos if v.id not in test_set]
    return train, [v.id for v in world.manifest.videos if v.id in test_set]


# -- surrogate detector ----------------------------------------------------

@dataclass
class DetectorConfig:
    kappa: float = 50.0             # half-saturation, in coverage-discounted labeled instances
    p_miss_max: float = 0.5
    p_miss_min: float = 0.05
    fp_rate_max: float = 0.5        # confusion false positives per object and frame
    fp_rate_min: float = 0.02
    bg_fp_max: float = 0.1          # clutter false positives per frame
    bg_fp_min: float = 0.01
    jitter_max: float = 4.0
    jitter_min: float = 1.0
    conf_min: float = 0.55          # true-class probability of a hit at skill 0 ...
    conf_max: float = 0.95          # ... and at skill 1
    fp_conf: tuple[float, float] = (0.5, 0.8)
    rho: float = 0.7                # probability an error event lasts a single frame
    persist: tuple[int, int] = (3, 8)
    redundancy: int = 1             # labels within this many frames overlap in content
    hard_negative_weight: float = 1.0

    def __post_init__(self):
        for name in ("p_miss_max", "p_miss_min", "rho"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if min(self.fp_rate_max, self.fp_rate_min, self.bg_fp_max, self.bg_fp_min) < 0:
            raise ValueError("false-positive rates must be non-negative")

    def mean_event_length(self) -> float:
        return self.rho + (1 - self.rho) * 0.5 * (self.persist[0] + self.persist[1])

    def p_miss(self, s):
        return self.p_miss_max - (self.p_miss_max - self.p_miss_min) * s

    def fp_rate(self, s):
        return self.fp_rate_max - (self.fp_rate_max - self.fp_rate_min) * s

    def bg_rate(self, s):
        return self.bg_fp_max - (self.bg_fp_max - self.bg_fp_min) * s

    def jitter(self, s):
        return self.jitter_max - (self.jitter_max - self.jitter_min) * s

    def confidence(self, s):
        return self.conf_min + (self.conf_max - self.conf_min) * s


@dataclass
class SurrogateDetector:
    """Skill per (stratum, class) and background skill per stratum."""

    config: DetectorConfig
    skill: dict = field(default_factory=dict)        # (stratum, class_id) -> [0, 1]
    bg_skill: dict = field(default_factory=dict)     # stratum -> [0, 1]

    def class_skill(self, stratum: str, c: int) -> float:
        return self.skill.get((stratum, c), 0.0)

    @classmethod
    def uniform(cls, config: DetectorConfig, world: "World", s: float) -> "SurrogateDetector":
        """The same skill for every stratum, class and the background."""
        if not 0 <= s <= 1:
            raise ValueError("skill must lie in [0, 1]")
        det = cls(config)
        for st in world.config.strata:
            det.bg_skill[st.name] = s
            for c in range(world.manifest.num_classes):
                det.skill[(st.name, c)] = s
        return det


def coverage_counts(per_frame: np.ndarray, labeled: np.ndarray, radius: int) -> np.ndarray:
    """Redundancy-discounted label count per column.

    Every frame within ``radius`` of a labeled frame takes the largest count
    among those labeled frames; the sum is divided by the window length. An
    isolated labeled frame contributes exactly its own count, adjacent ones
    overlap. Never decreases when a frame is added.
    """
    x = np.where(labeled[:, None], per_frame, 0).astype(float)
    if radius == 0:
        return x.sum(axis=0)
    L = len(x)
    pad = np.zeros((L + 2 * radius, x.shape[1]))
    pad[radius:radius + L] = x
    win = 2 * radius + 1
    best = np.zeros((L + 2 * radius, x.shape[1]))
    for off in range(-radius, radius + 1):
        lo, hi = max(0, off), min(L + 2 * radius, L + 2 * radius + off)
        best[lo:hi] = np.maximum(best[lo:hi], pad[lo - off:hi - off])
    return best.sum(axis=0) / win


def class_counts(world: World, vid: str) -> np.ndarray:
    frames = world.dataset.gt[vid]
    out = np.zeros((len(frames), world.manifest.num_classes), dtype=np.int64)
    for f, objs in enumerate(frames):
        for o in objs:
            out[f, o.class_id] += 1
    return out


def update_detector(world: World, labeled: set, config: DetectorConfig,
                    hard_negatives: Optional[dict] = None) -> SurrogateDetector:
    """Skill from the labeled frames; labeling adds content, never removes it.

    ``hard_negatives`` maps (stratum, class_id) to the number of false
    detections of that class present on frames when they were labeled; each
    one counts ``config.hard_negative_weight`` instances toward that class.
    """
    strata = {s.name: s for s in world.config.strata}
    C = world.manifest.num_classes
    n_obj: dict[str, np.ndarray] = {s: np.zeros(C) for s in strata}
    n_bg: dict[str, float] = {s: 0.0 for s in strata}
    by_video: dict[str, list[int]] = {}
    for v, f in labeled:
        by_video.setdefault(v, []).append(f)
    for meta in world.manifest.videos:
        if meta.id not in by_video:
            continue
        mask = np.zeros(meta.num_frames, bool)
        mask[by_video[meta.id]] = True
        counts = class_counts(world, meta.id)
        cov = coverage_counts(np.concatenate([counts, np.ones((meta.num_frames, 1))], axis=1),
                              mask, config.redundancy)
        n_obj[meta.stratum] += cov[:C]
        n_bg[meta.stratum] += cov[C]
    det = SurrogateDetector(config)
    for name, s in strata.items():
        kappa = config.kappa * s.difficulty
        for c in range(C):
            n = n_obj[name][c] + config.hard_negative_weight * (hard_negatives or {}).get((name, c), 0)
            det.skill[(name, c)] = float(n / (n + kappa))
        det.bg_skill[name] = float(n_bg[name] / (n_bg[name] + kappa))
    return det


@dataclass
class DetectionTags:
    """Provenance of each emitted detection, aligned with the per-frame lists."""

    kind: list      # per frame: list of "tp" | "cls_fp" | "conf_fp" | "bg_fp"
    track: list     # per frame: list of GT track id (tp / conf_fp) or -1


def _score_vector(true_c: int, conf: float, shares: np.ndarray, C: int):
    p = np.empty(C + 1)
    rest = shares[:C] / shares[:C].sum() * (1.0 - conf)
    p[np.arange(C + 1) != true_c] = rest
    p[true_c] = conf
    return normalize_scores(p)


def _events(onset: np.ndarray, lengths: np.ndarray, n: int) -> np.ndarray:
    """Boolean coverage of error runs starting where ``onset`` is set."""
    out = np.zeros(n, bool)
    for i in np.flatnonzero(onset):
        out[i:i + lengths[i]] = True
    return out


def detect_video(world: World, vid: str, detector: SurrogateDetector, rng: np.random.Generator,
                 with_tags: bool = False):
    """Detections for one video. All random draws happen before skill is used."""
    cfg = detector.config
    meta = world.manifest.video(vid)
    C = world.manifest.num_classes
    W, H, L = meta.width, meta.height, meta.num_frames
    gt = world.dataset.gt[vid]
    stratum = meta.stratum
    ev_len = cfg.mean_event_length()

    # group GT into tracks in frame order
    tracks: dict[int, list[tuple[int, GroundTruthObject]]] = {}
    for f, objs in enumerate(gt):
        for o in objs:
            tracks.setdefault(o.track_id, []).append((f, o))

    dets: list[list[Detection]] = [[] for _ in range(L)]
    kinds: list[list[str]] = [[] for _ in range(L)]
    tids: list[list[int]] = [[] for _ in range(L)]

    def emit(f, box, scores, kind, tid):
        dets[f].append(Detection(box, scores))
        kinds[f].append(kind)
        tids[f].append(tid)

    def jitter_box(b: Box, z, sigma):
        arr = np.array(b.to_list()) + sigma * z
        arr = np.round(arr, 6)
        if not (arr[0] < arr[2] and arr[1] < arr[3]):
            return None
        return Box(*arr.tolist()).clamp(W, H)

    for tid in sorted(tracks):
        recs = tracks[tid]
        n = len(recs)
        c = recs[0][1].class_id
        s = detector.class_skill(stratum, c)
        # fixed draws
        u_miss = rng.random(n)
        iso_miss = rng.random(n) < cfg.rho
        len_miss = np.where(iso_miss, 1, rng.integers(cfg.persist[0], cfg.persist[1] + 1, n))
        z_box = rng.standard_normal((n, 4))
        z_conf = rng.standard_normal(n)
        shares = rng.exponential(size=(n, C))
        u_fp = rng.random(n)
        iso_fp = rng.random(n) < cfg.rho
        len_fp = np.where(iso_fp, 1, rng.integers(cfg.persist[0], cfg.persist[1] + 1, n))
        fp_cls_u = rng.random(n)
        fp_conf_u = rng.random(n)
        fp_shares = rng.exponential(size=(n, C))
        z_fp_box = rng.standard_normal((n, 4))
        # skill-dependent thresholds
        missed = _events(u_miss < cfg.p_miss(s) / ev_len, len_miss, n)
        sigma = cfg.jitter(s)
        conf_mean = cfg.confidence(s)
        for i, (f, obj) in enumerate(recs):
            if missed[i]:
                continue
            box = jitter_box(obj.box, z_box[i], sigma)
            if box is None:
                continue
            conf = float(np.clip(conf_mean + 0.05 * z_conf[i], 0.05, 0.99))
            d_scores = _score_vector(c, conf, shares[i], C)
            # a hit whose best foreground class is wrong is a false positive
            kind = "tp" if int(np.argmax(d_scores[:-1])) == c else "cls_fp"
            emit(f, box, d_scores, kind, tid)
        if C > 1:
            onset = u_fp < min(1.0, cfg.fp_rate(s) / ev_len)
            for i in np.flatnonzero(onset):
                wrong = int(fp_cls_u[i] * (C - 1))
                wrong = wrong + (wrong >= c)
                conf = cfg.fp_conf[0] + (cfg.fp_conf[1] - cfg.fp_conf[0]) * fp_conf_u[i]
                scores = _score_vector(wrong, conf, fp_shares[i], C)
                for j in range(i, min(n, i + len_fp[i])):
                    box = jitter_box(recs[j][1].box, z_fp_box[i], sigma)
                    if box is not None:
                        emit(recs[j][0], box, scores, "conf_fp", tid)

    # clutter false positives: up to 4 onsets per frame, static boxes
    slots = 4
    u_bg = rng.random(L)
    bg_iso = rng.random((L, slots)) < cfg.rho
    bg_len = np.where(bg_iso, 1, rng.integers(cfg.persist[0], cfg.persist[1] + 1, (L, slots)))
    bg_xywh = rng.random((L, slots, 4))
    bg_cls = rng.integers(0, C, (L, slots))
    bg_conf = rng.random((L, slots))
    bg_shares = rng.exponential(size=(L, slots, C))
    n_bg = np.minimum(poisson.ppf(u_bg, cfg.bg_rate(detector.bg_skill.get(stratum, 0.0)) / ev_len),
                      slots).astype(int)
    for f in np.flatnonzero(n_bg):
        for k in range(n_bg[f]):
            bw = 12 + 36 * bg_xywh[f, k, 2]
            bh = 12 + 36 * bg_xywh[f, k, 3]
            x0 = (W - bw) * bg_xywh[f, k, 0]
            y0 = (H - bh) * bg_xywh[f, k, 1]
            box = Box(*np.round([x0, y0, x0 + bw, y0 + bh], 6).tolist())
            conf = cfg.fp_conf[0] + (cfg.fp_conf[1] - cfg.fp_conf[0]) * bg_conf[f, k]
            scores = _score_vector(int(bg_cls[f, k]), conf, bg_shares[f, k], C)
            for g in range(f, min(L, f + bg_len[f, k])):
                emit(g, box, scores, "bg_fp", -1)

    if with_tags:
        return dets, DetectionTags(kinds, tids)
    return dets


def detect(world: World, detector: SurrogateDetector, seed: int, videos: Optional[Sequence[str]] = None,
           cycle: int = 0, stream: int = DETECTOR, with_tags: bool = False):
    """Detections for the given videos (default all), keyed by video id."""
    index = {v.id: i for i, v in enumerate(world.manifest.videos)}
    vids = list(videos) if videos is not None else list(index)
    out, tags = {}, {}
    for vid in vids:
        rng = substream(seed, stream, index[vid], cycle)
        res = detect_video(world, vid, detector, rng, with_tags)
        if with_tags:
            out[vid], tags[vid] = res
        else:
            out[vid] = res
    return (out, tags) if with_tags else out


# -- active-learning loop --------------------------------------------------

@dataclass
class LoopConfig:
    cycles: int = 5
    budget_per_cycle: float = 0.02      # fraction of training frames per cycle
    init_fraction: float = 0.02
    k: int = 1
    test_fraction: float = 0.2
    tc_variant: str = "fp"
    theta: float = 0.5
    theta_c: float = 0.5
    tau_det: float = 0.5
    nms_thresh: float = 0.5
    window: int = 3
    score_thresh: float = 0.5           # evaluation score threshold

    def __post_init__(self):
        if self.cycles < 0:
            raise ValueError("cycles must be non-negative")
        if not 0 < self.budget_per_cycle <= 1 or not 0 <= self.init_fraction <= 1:
            raise ValueError("budget fractions must lie in (0, 1]")

    def tc_config(self) -> TCConfig:
        return TCConfig(self.theta, self.theta_c, self.tau_det, self.nms_thresh, self.window)


@dataclass
class ALState:
    labeled: set
    unlabeled: set
    cycle: int
    batch: int
    cycles: int
    history: list = field(default_factory=list)
    hard_negatives: dict = field(default_factory=dict)   # (stratum, class_id) -> count

    def check(self) -> None:
        if self.labeled & self.unlabeled:
            raise AssertionError("labeled and unlabeled sets overlap")


@dataclass
class LoopResult:
    method: str
    seed: int
    curve: list[dict]
    selections: list[dict]
    reports: list[EvalReport]
    initial: list = field(default_factory=list)   # the randomly labeled starting frames


def method_selection(method: str, loop: LoopConfig, batch: int, seed: int) -> SelectionConfig:
    if method == "random":
        return SelectionConfig("random", batch, 0, "global", seed)
    if method == "random_r":
        return SelectionConfig("random", batch, loop.k, "proportional", seed)
    if method not in LOOP_METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(LOOP_METHODS)}")
    return SelectionConfig(method, batch, loop.k, "proportional", seed, loop.tc_variant)


def filtered(dets: dict, loop: LoopConfig) -> dict:
    return {v: [[fr[k] for k in prefilter_frame(fr, loop.tau_det, loop.nms_thresh)] for fr in frames]
            for v, frames in dets.items()}


def score_pool(method: str, world: World, pool_dets: dict, train: Sequence[str], loop: LoopConfig):
    if method in ("random", "random_r"):
        return random_scores({v: world.manifest.video(v).num_frames for v in train})
    if method == "tc":
        sub = Dataset(world.manifest, {}, {v: world.dataset.motion[v] for v in train})
        graphs = build_graph(sub, pool_dets, loop.tc_config())
        sols = solve_graphs(graphs, EnergyModel())
        errors = collect_errors(graphs, sols, {v: world.manifest.video(v).num_frames for v in train})
        return tc_score(errors, loop.tc_variant)
    dets = filtered(pool_dets, loop)
    if method in ("oracle_fp", "oracle_fn"):
        return oracle_score(dets, {v: world.dataset.gt[v] for v in train}, method[-2:])
    return uncertainty_scores(dets, method)


def add_hard_negatives(acc: dict, world: World, dets: dict, picks) -> None:
    """Credit the false detections on newly labeled frames to their predicted class."""
    for v, f in picks:
        stratum = world.manifest.video(v).stratum
        frame = dets[v][f]
        tp, _ = match_frame(frame, world.dataset.gt[v][f], 0.5)
        for d, hit in zip(frame, tp):
            if not hit:
                key = (stratum, d.class_id)
                acc[key] = acc.get(key, 0) + 1


def initial_labeled(all_train: Sequence[tuple[str, int]], n_init: int, seed: int) -> list:
    """Random starting set; depends only on the pool and seed so every method shares it."""
    rng = substream(seed, INIT)
    return [all_train[i] for i in sorted(rng.choice(len(all_train), n_init, replace=False))]


def run_loop(world: World, method: str, loop: LoopConfig, seed: int,
             detector_config: Optional[DetectorConfig] = None) -> LoopResult:
    detector_config = detector_config or DetectorConfig()
    train, test = split_videos(world, loop.test_fraction)
    lengths = {v: world.manifest.video(v).num_frames for v in train}
    all_train = [(v, f) for v in train for f in range(lengths[v])]
    n_train = len(all_train)
    batch = int(round(loop.budget_per_cycle * n_train))
    n_init = int(round(loop.init_fraction * n_train))
    if batch < 1:
        raise ValueError("budget per cycle rounds to zero frames")
    if n_init + loop.cycles * batch > n_train:
        raise ValueError(f"budget of {n_init + loop.cycles * batch} frames exceeds the "
                         f"{n_train}-frame pool")
    init = initial_labeled(all_train, n_init, seed)
    state = ALState(set(init), set(all_train) - set(init), 0, batch, loop.cycles)
    sel_cfg = method_selection(method, loop, batch, seed)
    class_names = world.manifest.classes
    curve, selections, reports = [], [], []
    for cycle in range(loop.cycles + 1):
        state.cycle = cycle
        detector = update_detector(world, state.labeled, detector_config, state.hard_negatives)
        test_dets = detect(world, detector, seed, test, 0, DETECTOR_TEST)
        rep = evaluate(test_dets, {v: world.dataset.gt[v] for v in test}, world.manifest.num_classes,
                       loop.score_thresh, loop.nms_thresh, videos=test)
        reports.append(rep)
        row = {"method": method, "seed": seed, "cycle": cycle,
               "labeled_fraction": f"{len(state.labeled) / n_train:.6f}", "mAP": f"{rep.mAP:.6f}"}
        for c, name in enumerate(class_names):
            ap = rep.per_class_ap.get(c)
            row[f"AP_{name}"] = "" if ap is None else f"{ap:.6f}"
        curve.append(row)
        state.history.append(rep)
        log.info("%s seed=%d cycle=%d labeled=%d mAP=%.4f", method, seed, cycle,
                 len(state.labeled), rep.mAP)
        if cycle == loop.cycles:
            break
        pool_dets = detect(world, detector, seed, train, cycle + 1, DETECTOR)
        scores = score_pool(method, world, pool_dets, train, loop)
        scores = [s for s in scores if (s.video, s.frame) in state.unlabeled]
        sel = select_batch(scores, state.labeled, sel_cfg, substream(seed, SELECTION, cycle), lengths)
        for r in sel.rows(method, cycle + 1):
            r["seed"] = seed
            selections.append(r)
        add_hard_negatives(state.hard_negatives, world, filtered(pool_dets, loop), sel.picks)
        before = len(state.labeled)
        state.labeled |= set(sel.picks)
        state.unlabeled -= set(sel.picks)
        state.check()
        if len(state.labeled) - before != batch:
            raise AssertionError("labeled set did not grow by exactly one batch")
    return LoopResult(method, seed, curve, selections, reports, init)


def config_dict(obj) -> dict:
    return asdict(obj)


def world_from_dict(d: dict) -> WorldConfig:
    d = dict(d)
    if "classes" in d:
        d["classes"] = tuple(ClassSpec(**{**c, **({"size": tuple(c["size"])} if "size" in c else {}),
                                          **({"speed": tuple(c["speed"])} if "speed" in c else {})})
                             if isinstance(c, dict) else c for c in d["classes"])
    if "strata" in d:
        d["strata"] = tuple(StratumConfig(**s) if isinstance(s, dict) else s for s in d["strata"])
    for key in ("lifetime", "segment"):
        if key in d:
            d[key] = tuple(d[key])
    return WorldConfig(**d)


def with_seed(cfg: WorldConfig, seed: int) -> WorldConfig:
    return replace(cfg, seed=seed)


def benchmark_dataset(num_videos: int = 125, num_frames: int = 200, num_classes: int = 4,
                      objects_per_class: int = 1, seed: int = 0, miss_rate: float = 0.05,
                      fp_rate: float = 0.05) -> Dataset:
    """Load-test dataset: straight-moving objects with flickering detections.

    Every (video, class) pair becomes one graph component. With the defaults
    there are 500 components and about 100k detections.
    """
    W, H, cell = 320, 192, 16
    rows, cols = grid_shape(W, H, cell)
    classes = tuple(f"class{c}" for c in range(num_classes))
    hit_scores, fp_scores = [], []
    for c in range(num_classes):
        p = np.full(num_classes + 1, 0.1 / num_classes)
        p[c] = 0.9
        hit_scores.append(normalize_scores(p))
        p = np.full(num_classes + 1, 0.2 / num_classes)
        p[c] = 0.8
        fp_scores.append(normalize_scores(p))
    videos, gt, motion, dets = [], {}, {}, {}
    for vi in range(num_videos):
        rng = substream(seed, 99, vi)
        vid = f"bench_{vi:04d}"
        n_obj = num_classes * objects_per_class
        # lanes keep objects apart so classes do not interact
        lane_h = H / n_obj
        start_x = rng.uniform(0, W - 20, n_obj)
        vx = rng.choice([-1.0, 1.0], n_obj) * rng.uniform(0.2, 0.6, n_obj)
        frames_gt, frames_det, fields = [], [], []
        for t in range(num_frames):
            objs, fd = [], []
            grid = np.zeros((rows, cols, 2))
            for k in range(n_obj):
                span = W - 20
                x = (start_x[k] + vx[k] * t) % span
                y = k * lane_h + 2
                box = Box(round(x, 6), round(y, 6), round(x + 20, 6), round(y + lane_h - 4, 6))
                c = k % num_classes
                objs.append(GroundTruthObject(k, c, box))
                nxt = (start_x[k] + vx[k] * (t + 1)) % span
                if abs(nxt - x) < 1.0:
                    _fill_cells(grid, box.to_list(), (round(nxt - x, 6), 0.0), cell)
                u = rng.random(3)
                if u[0] >= miss_rate:
                    fd.append(Detection(box, hit_scores[c]))
                if u[1] < fp_rate:
                    fx = u[2] * (W - 20)
                    fd.append(Detection(Box(round(fx, 6), box.y_min, round(fx + 20, 6), box.y_max),
                                        fp_scores[c]))
            frames_gt.append(objs)
            frames_det.append(fd)
            if t < num_frames - 1:
                fields.append(MotionField(t, cell, grid))
        videos.append(VideoMeta(vid, num_frames, W, H))
        gt[vid], motion[vid], dets[vid] = frames_gt, fields, frames_det
    return Dataset(DatasetManifest("benchmark", classes, tuple(videos)), gt, motion, dets)


@dataclass
class EstimationQuality:
    injected_fp: int
    estimated_fp: int
    correct_fp: int
    injected_miss: int
    recovered_miss: int

    @property
    def fp_precision(self) -> float:
        return self.correct_fp / self.estimated_fp if self.estimated_fp else 1.0

    @property
    def fp_recall(self) -> float:
        return self.correct_fp / self.injected_fp if self.injected_fp else 1.0

    @property
    def fn_recall(self) -> float:
        return self.recovered_miss / self.injected_miss if self.injected_miss else 1.0


def estimation_quality(world: World, detections: dict, tags: dict, config: TCConfig = TCConfig(),
                       iou_thresh: float = 0.5) -> EstimationQuality:
    """Compare estimated FP/FN against the detector's injected errors.

    Injected FPs are the spurious detections that survive graph prefiltering.
    Injected misses are single missing frames of a track detected in both
    neighbouring frames; one counts as recovered when a candidate labeled FN
    in that frame overlaps the object's box with IoU above ``iou_thresh``.
    """
    from .energy import FN, FP, EnergyModel, solve_graph
    from .geometry import iou

    vids = list(detections)
    sub = Dataset(world.manifest, {}, {v: world.dataset.motion[v] for v in vids})
    graphs = build_graph(sub, detections, config)
    est_fp: set = set()
    fn_boxes: dict = {}
    for g in graphs:
        sol = solve_graph(g, EnergyModel())
        for n in np.flatnonzero(sol.labels == FP).tolist():
            est_fp.add((g.video, int(g.frames[n]), int(g.det_index[n])))
        for n in np.flatnonzero(sol.labels == FN).tolist():
            fn_boxes.setdefault((g.video, int(g.frames[n]), g.class_id), []).append(
                Box.from_seq(g.boxes[n].tolist()))

    injected, kept_tp = set(), {}
    for v in vids:
        for f, frame in enumerate(detections[v]):
            for k in prefilter_frame(frame, config.tau_det, config.nms_thresh):
                kind = tags[v].kind[f][k]
                if kind == "tp":
                    kept_tp.setdefault((v, tags[v].track[f][k]), set()).add(f)
                else:
                    injected.add((v, f, k))
    misses = recovered = 0
    for v in vids:
        for f, objs in enumerate(world.dataset.gt[v]):
            for o in objs:
                seen = kept_tp.get((v, o.track_id), set())
                if f in seen or f - 1 not in seen or f + 1 not in seen:
                    continue
                misses += 1
                if any(iou(b, o.box) > iou_thresh for b in fn_boxes.get((v, f, o.class_id), [])):
                    recovered += 1
    return EstimationQuality(len(injected), len(est_fp), len(est_fp & injected), misses, recovered)
