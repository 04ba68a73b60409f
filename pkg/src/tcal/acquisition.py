"""Frame scoring and batch selection for the active-learning loop.

Every method produces one :class:`FrameScore` per unlabeled frame, higher
meaning "label first". :func:`select_batch` then applies the temporal
exclusion zone, per-video quotas and seeded tie-breaking.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import Detection
from .energy import FrameErrors
from .evaluation import match_frame

log = logging.getLogger(__name__)

METHODS = ("tc", "oracle_fp", "oracle_fn", "least_confidence", "entropy", "margin", "random")
SELECTION_COLUMNS = ["method", "cycle", "video_id", "frame", "score", "rank", "spill"]


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class FrameScore:
    video: str
    frame: int
    score: float
    method: str
    # False for frames without any detection under the uncertainty methods;
    # those rank after every frame that has evidence
    evidence: bool = True

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for {self.video}:{self.frame}")


@dataclass(frozen=True)
class SelectionConfig:
    method: str = "random"
    batch_size: int = 1
    k: int = 1
    allocation: str = "proportional"
    seed: int = 0
    tc_variant: str = "fp"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.allocation not in ("proportional", "global"):
            raise ValueError(f"unknown allocation {self.allocation!r}")
        if self.tc_variant not in ("fp", "fn", "both"):
            raise ValueError(f"unknown tc_variant {self.tc_variant!r}")


@dataclass
class Selection:
    picks: list[tuple[str, int]]
    scores: list[float]
    spill: list[bool]
    events: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.picks)

    def __len__(self):
        return len(self.picks)

    def rows(self, method: str, cycle: int) -> list[dict]:
        return [{"method": method, "cycle": cycle, "video_id": v, "frame": f,
                 "score": f"{s:.6f}", "rank": r + 1, "spill": int(sp)}
                for r, ((v, f), s, sp) in enumerate(zip(self.picks, self.scores, self.spill))]


# -- scoring ---------------------------------------------------------------

def tc_score(errors: dict[str, Sequence[FrameErrors]], variant: str = "fp") -> list[FrameScore]:
    out = []
    for vid, frames in errors.items():
        for fe in frames:
            s = {"fp": fe.fp, "fn": fe.fn, "both": fe.fp + fe.fn}[variant]
            out.append(FrameScore(vid, fe.frame, float(s), "tc"))
    return out


def oracle_counts(dets: Sequence[Detection], gts) -> tuple[int, int]:
    """(FP, FN) of one frame: duplicates and poorly overlapping detections are FP."""
    tp, used = match_frame(dets, gts, 0.5)
    return len(dets) - sum(tp), len(gts) - sum(used)


def oracle_score(detections: dict, ground_truth: Optional[dict], kind: str = "fp") -> list[FrameScore]:
    if ground_truth is None:
        raise ValueError("oracle scoring needs ground truth")
    if kind not in ("fp", "fn"):
        raise ValueError(f"unknown oracle kind {kind!r}")
    out = []
    for vid, frames in detections.items():
        if vid not in ground_truth:
            raise ValueError(f"no ground truth for video {vid!r}")
        gt = ground_truth[vid]
        for f, dets in enumerate(frames):
            fp, fn = oracle_counts(dets, gt[f])
            out.append(FrameScore(vid, f, float(fp if kind == "fp" else fn), f"oracle_{kind}"))
    return out


def detection_uncertainty(d: Detection) -> tuple[float, float, float]:
    """(least-confidence value, entropy, margin) of one detection.

    Least confidence uses the best foreground class; entropy and margin use
    the full vector including background.
    """
    p = np.asarray(d.scores, dtype=float)
    lc = float(p[:-1].max())
    nz = p[p > 0]
    ent = float(-(nz * np.log(nz)).sum())
    top = np.sort(p)[::-1]
    mar = float(top[0] - top[1])
    return lc, ent, mar


def uncertainty_score(dets: Sequence[Detection], kind: str) -> Optional[float]:
    """Frame score with higher = more uncertain; ``None`` for empty frames."""
    if not dets:
        return None
    vals = np.array([detection_uncertainty(d) for d in dets])
    if kind == "least_confidence":
        return -float(vals[:, 0].mean())
    if kind == "entropy":
        return float(vals[:, 1].mean())
    if kind == "margin":
        return -float(vals[:, 2].sum())
    raise ValueError(f"unknown uncertainty kind {kind!r}")


def uncertainty_scores(detections: dict, kind: str) -> list[FrameScore]:
    out = []
    for vid, frames in detections.items():
        for f, dets in enumerate(frames):
            s = uncertainty_score(dets, kind)
            out.append(FrameScore(vid, f, 0.0 if s is None else s, kind, s is not None))
    return out


def random_scores(video_lengths: dict[str, int]) -> list[FrameScore]:
    return [FrameScore(v, f, 0.0, "random") for v, n in video_lengths.items() for f in range(n)]


# -- selection -------------------------------------------------------------

def proportional_quotas(lengths: dict[str, int], batch: int) -> dict[str, int]:
    """Largest-remainder apportionment of ``batch`` by video length."""
    total = sum(lengths.values())
    if total == 0:
        return {v: 0 for v in lengths}
    exact = {v: batch * n / total for v, n in lengths.items()}
    quotas = {v: int(math.floor(x)) for v, x in exact.items()}
    left = batch - sum(quotas.values())
    by_frac = sorted(lengths, key=lambda v: (-(exact[v] - quotas[v]), v))
    for v in by_frac[:left]:
        quotas[v] += 1
    return quotas


def _blocked_by(labeled: Iterable[tuple[str, int]], k: int) -> set[tuple[str, int]]:
    out = set()
    for v, f in labeled:
        for g in range(f - k, f + k + 1):
            out.add((v, g))
    return out


def select_batch(scores: Sequence[FrameScore], labeled: Iterable[tuple[str, int]],
                 config: SelectionConfig, rng: np.random.Generator,
                 video_lengths: Optional[dict[str, int]] = None) -> Selection:
    """Pick ``config.batch_size`` frames.

    Tie-break keys are drawn once per frame of every video in canonical
    (video, frame) order, so a frame's key does not depend on the scores or
    on which frames are still unlabeled.
    """
    labeled = set(labeled)
    if video_lengths is None:
        video_lengths = {}
        for s in scores:
            video_lengths[s.video] = max(video_lengths.get(s.video, 0), s.frame + 1)
    offsets, base = {}, 0
    for v in sorted(video_lengths):
        offsets[v] = base
        base += video_lengths[v]
    keys = rng.random(base)

    pool = {}
    for s in scores:
        if (s.video, s.frame) not in labeled:
            pool[(s.video, s.frame)] = s
    batch = config.batch_size
    if len(pool) < batch:
        raise SelectionError(f"unlabeled pool has {len(pool)} frames but the batch needs {batch} "
                             f"(short by {batch - len(pool)})")

    def rank_key(s: FrameScore):
        return (not s.evidence, -s.score, keys[offsets[s.video] + s.frame], s.video, s.frame)

    ranked = sorted(pool.values(), key=rank_key)
    blocked = _blocked_by(labeled, config.k)
    picked: dict[tuple[str, int], bool] = {}
    events: list[str] = []

    def take(cands: Iterable[FrameScore], limit: int, respect: bool = True) -> int:
        n = 0
        for s in cands:
            if n >= limit:
                break
            key = (s.video, s.frame)
            if key in picked or (respect and key in blocked):
                continue
            picked[key] = not respect
            n += 1
            for g in range(s.frame - config.k, s.frame + config.k + 1):
                blocked.add((s.video, g))
        return n

    if config.allocation == "proportional":
        lengths = {v: video_lengths[v] for v in sorted({s.video for s in pool.values()})}
        quotas = proportional_quotas(lengths, batch)
        per_video: dict[str, list[FrameScore]] = {}
        for s in ranked:
            per_video.setdefault(s.video, []).append(s)
        for v in sorted(quotas):
            got = take(per_video.get(v, []), quotas[v])
            if got < quotas[v]:
                events.append(f"video {v} filled {got}/{quotas[v]} of its quota")
    short = batch - len(picked)
    if short:
        take(ranked, short)
        if config.allocation == "proportional" and events:
            log.info("quota spill: %s", "; ".join(events))
    short = batch - len(picked)
    if short:
        take(ranked, short, respect=False)
        msg = f"exclusion relaxed for {short} frame(s): not enough frames outside k={config.k}"
        events.append(msg)
        log.warning("selection spill: %s", msg)

    order = sorted(picked, key=lambda key: (picked[key], rank_key(pool[key])))
    return Selection(order, [pool[key].score for key in order], [picked[key] for key in order], events)


def write_selection_csv(rows: Sequence[dict], path, extra_columns: Sequence[str] = ()) -> None:
    cols = list(extra_columns) + SELECTION_COLUMNS
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in cols})


def check_exclusion(picks: Sequence[tuple[str, int]], labeled: Iterable[tuple[str, int]], k: int,
                    spill: Optional[Sequence[bool]] = None) -> list[str]:
    """Violations of the k-frame exclusion among non-spill picks."""
    labeled = set(labeled)
    bad = []
    seen: list[tuple[str, int]] = []
    for i, (v, f) in enumerate(picks):
        if spill is not None and spill[i]:
            seen.append((v, f))
            continue
        for (w, g) in list(labeled) + seen:
            if w == v and abs(g - f) <= k:
                bad.append(f"{v}:{f} within {k} of {w}:{g}")
                break
        seen.append((v, f))
    return bad
