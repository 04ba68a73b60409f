"""In-memory video dataset and its on-disk layout.

Layout under a root directory::

    dataset.json                 manifest
    gt/<video_id>.jsonl          one line per frame
    det/<video_id>.jsonl         one line per frame (optional)
    motion/<video_id>.jsonl      one line per consecutive frame pair

Numbers are written with 6 fractional digits at most, so values that are
already rounded to 6 digits survive a save/load cycle unchanged.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Box

SCORE_TOL = 1e-6
DEFAULT_CELL = 16


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""

    def __init__(self, message: str, path: Optional[os.PathLike] = None, line: Optional[int] = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if self.path:
            where = self.path + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class VideoMeta:
    id: str
    num_frames: int
    width: int
    height: int
    fps: float = 25.0
    stratum: str = ""

    def __post_init__(self):
        if self.num_frames < 1:
            raise DatasetError(f"video {self.id!r}: num_frames must be >= 1")
        if self.width < 1 or self.height < 1:
            raise DatasetError(f"video {self.id!r}: width/height must be positive")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    classes: tuple[str, ...]
    videos: tuple[VideoMeta, ...]

    def __post_init__(self):
        if not self.classes:
            raise DatasetError("manifest needs at least one class")
        ids = [v.id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate video ids in manifest")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def video(self, vid: str) -> VideoMeta:
        for v in self.videos:
            if v.id == vid:
                return v
        raise KeyError(vid)


@dataclass(frozen=True)
class GroundTruthObject:
    track_id: int
    class_id: int
    box: Box


@dataclass(frozen=True)
class Detection:
    """A detector output; ``scores`` ends with the background probability."""

    box: Box
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.scores) < 2:
            raise ValueError("scores need at least one class plus background")
        if any(not math.isfinite(p) or p < 0 for p in self.scores):
            raise ValueError(f"invalid score entries {self.scores}")
        if abs(sum(self.scores) - 1.0) > SCORE_TOL:
            raise ValueError(f"scores sum to {sum(self.scores):.6f}, not 1")

    @property
    def num_classes(self) -> int:
        return len(self.scores) - 1

    @property
    def class_id(self) -> int:
        fg = self.scores[:-1]
        return max(range(len(fg)), key=fg.__getitem__)

    @property
    def score(self) -> float:
        return self.scores[self.class_id]


@dataclass(eq=False)
class MotionField:
    """Displacements on a coarse grid for frame -> frame + 1.

    ``fwd`` and ``bwd`` have shape ``(rows, cols, 2)`` holding ``(dx, dy)``.
    """

    frame_index: int
    cell_size: int
    fwd: np.ndarray
    bwd: Optional[np.ndarray] = None

    def __post_init__(self):
        self.fwd = np.asarray(self.fwd, dtype=float)
        if self.fwd.ndim != 3 or self.fwd.shape[2] != 2:
            raise DatasetError(f"motion grid for frame {self.frame_index} must be rows x cols x 2")
        if not np.all(np.isfinite(self.fwd)):
            raise DatasetError(f"non-finite motion vectors at frame {self.frame_index}")
        if self.bwd is not None:
            self.bwd = np.asarray(self.bwd, dtype=float)
            if self.bwd.shape != self.fwd.shape:
                raise DatasetError(f"bwd grid shape differs from fwd at frame {self.frame_index}")
            if not np.all(np.isfinite(self.bwd)):
                raise DatasetError(f"non-finite motion vectors at frame {self.frame_index}")

    def __eq__(self, other):
        if not isinstance(other, MotionField):
            return NotImplemented
        if (self.frame_index, self.cell_size) != (other.frame_index, other.cell_size):
            return False
        if not np.array_equal(self.fwd, other.fwd):
            return False
        if (self.bwd is None) != (other.bwd is None):
            return False
        return self.bwd is None or np.array_equal(self.bwd, other.bwd)

    def backward_grid(self) -> np.ndarray:
        """Grid for frame + 1 -> frame; negated forward grid if none stored."""
        return self.bwd if self.bwd is not None else -self.fwd


def grid_shape(width: int, height: int, cell: int) -> tuple[int, int]:
    return math.ceil(height / cell), math.ceil(width / cell)


@dataclass
class Dataset:
    manifest: DatasetManifest
    gt: dict[str, list[list[GroundTruthObject]]]
    motion: dict[str, list[MotionField]]
    detections: Optional[dict[str, list[list[Detection]]]] = None
    extra: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.manifest == other.manifest and self.gt == other.gt
                and self.motion == other.motion and self.detections == other.detections)


# -- serialization helpers -------------------------------------------------

def _r(x: float) -> float:
    v = round(float(x), 6)
    return 0.0 if v == 0 else v


def _box_out(b: Box) -> list[float]:
    return [_r(v) for v in b.to_list()]


def _grid_out(g: np.ndarray) -> list[list[float]]:
    return [[_r(dx), _r(dy)] for dx, dy in g.reshape(-1, 2)]


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def normalize_scores(p) -> tuple[float, ...]:
    """Round to 6 digits and push the residual into the largest entry."""
    p = np.clip(np.asarray(p, dtype=float), 0, None)
    p = p / p.sum()
    r = np.round(p, 6)
    k = int(np.argmax(r))
    r[k] = round(r[k] + (1.0 - r.sum()), 6)
    return tuple(float(v) for v in r)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def manifest_to_json(m: DatasetManifest) -> dict:
    return {
        "name": m.name,
        "classes": list(m.classes),
        "videos": [
            {"id": v.id, "num_frames": v.num_frames, "width": v.width, "height": v.height,
             "fps": v.fps, **({"stratum": v.stratum} if v.stratum else {})}
            for v in m.videos
        ],
    }


def save_manifest(m: DatasetManifest, root) -> None:
    _write(Path(root) / "dataset.json", json.dumps(manifest_to_json(m), indent=2) + "\n")


def save_gt(gt: list[list[GroundTruthObject]], path) -> None:
    lines = []
    for f, objs in enumerate(gt):
        lines.append(_dumps({"frame": f, "objects": [
            {"track_id": o.track_id, "class": o.class_id, "box": _box_out(o.box)} for o in objs]}))
    _write(Path(path), "\n".join(lines) + "\n" if lines else "")


def save_detections(dets: list[list[Detection]], path) -> None:
    lines = []
    for f, ds in enumerate(dets):
        lines.append(_dumps({"frame": f, "detections": [
            {"box": _box_out(d.box), "scores": [_r(p) for p in d.scores]} for d in ds]}))
    _write(Path(path), "\n".join(lines) + "\n" if lines else "")


def save_motion(fields: list[MotionField], path) -> None:
    lines = []
    for mf in fields:
        rec = {"frame": mf.frame_index, "cell": mf.cell_size, "fwd": _grid_out(mf.fwd)}
        if mf.bwd is not None:
            rec["bwd"] = _grid_out(mf.bwd)
        lines.append(_dumps(rec))
    _write(Path(path), "\n".join(lines) + "\n" if lines else "")


def save_detection_dir(manifest: DatasetManifest, detections: dict, det_dir) -> None:
    for v in manifest.videos:
        save_detections(detections.get(v.id, [[] for _ in range(v.num_frames)]),
                        Path(det_dir) / f"{v.id}.jsonl")


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    save_manifest(ds.manifest, root)
    for v in ds.manifest.videos:
        save_gt(ds.gt[v.id], root / "gt" / f"{v.id}.jsonl")
        save_motion(ds.motion[v.id], root / "motion" / f"{v.id}.jsonl")
    if ds.detections is not None:
        save_detection_dir(ds.manifest, ds.detections, root / "det")


# -- loading ---------------------------------------------------------------

def _read_jsonl(path: Path):
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror}") from e
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"invalid JSON: {e.msg}", path, lineno) from None
            if not isinstance(rec, dict):
                raise DatasetError("expected a JSON object", path, lineno)
            yield lineno, rec


def _frame_of(rec, meta: VideoMeta, path, lineno, limit=None) -> int:
    f = rec.get("frame")
    if not isinstance(f, int) or isinstance(f, bool):
        raise DatasetError("missing or non-integer 'frame'", path, lineno)
    hi = meta.num_frames if limit is None else limit
    if not 0 <= f < hi:
        raise DatasetError(f"frame {f} out of range [0, {hi})", path, lineno)
    return f


def _box_in(val, path, lineno) -> Box:
    try:
        if not isinstance(val, list):
            raise ValueError("box must be a list of 4 numbers")
        return Box.from_seq([float(v) for v in val])
    except (TypeError, ValueError) as e:
        raise DatasetError(f"bad box {val!r}: {e}", path, lineno) from None


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "dataset.json"
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON: {e.msg}", path, e.lineno) from None
    try:
        videos = tuple(
            VideoMeta(id=str(v["id"]), num_frames=int(v["num_frames"]), width=int(v["width"]),
                      height=int(v["height"]), fps=float(v.get("fps", 25.0)),
                      stratum=str(v.get("stratum", "")))
            for v in doc["videos"])
        return DatasetManifest(name=str(doc["name"]), classes=tuple(doc["classes"]), videos=videos)
    except DatasetError as e:
        raise DatasetError(str(e), path) from None
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed manifest: {e!r}", path) from None


def load_gt(path, meta: VideoMeta, num_classes: int) -> list[list[GroundTruthObject]]:
    path = Path(path)
    frames: list[list[GroundTruthObject]] = [[] for _ in range(meta.num_frames)]
    seen = set()
    for lineno, rec in _read_jsonl(path):
        f = _frame_of(rec, meta, path, lineno)
        if f in seen:
            raise DatasetError(f"duplicate frame {f}", path, lineno)
        seen.add(f)
        objs = rec.get("objects", [])
        if not isinstance(objs, list):
            raise DatasetError("'objects' must be a list", path, lineno)
        for o in objs:
            try:
                tid, cid = o["track_id"], o["class"]
            except (KeyError, TypeError):
                raise DatasetError("object needs track_id, class, box", path, lineno) from None
            if not isinstance(cid, int) or not 0 <= cid < num_classes:
                raise DatasetError(f"class {cid!r} out of range", path, lineno)
            box = _box_in(o.get("box"), path, lineno).clamp(meta.width, meta.height)
            if box is None:
                raise DatasetError("ground-truth box lies outside the image", path, lineno)
            frames[f].append(GroundTruthObject(int(tid), cid, box))
    return frames


def load_detections(path, meta: VideoMeta, num_classes: int) -> list[list[Detection]]:
    path = Path(path)
    frames: list[list[Detection]] = [[] for _ in range(meta.num_frames)]
    seen = set()
    for lineno, rec in _read_jsonl(path):
        f = _frame_of(rec, meta, path, lineno)
        if f in seen:
            raise DatasetError(f"duplicate frame {f}", path, lineno)
        seen.add(f)
        for d in rec.get("detections", []):
            if not isinstance(d, dict):
                raise DatasetError("detection must be an object", path, lineno)
            box = _box_in(d.get("box"), path, lineno)
            scores = d.get("scores")
            if not isinstance(scores, list) or len(scores) != num_classes + 1:
                raise DatasetError(f"frame {f}: scores need {num_classes + 1} entries "
                                   f"(classes + background)", path, lineno)
            try:
                scores = tuple(float(p) for p in scores)
            except (TypeError, ValueError):
                raise DatasetError(f"frame {f}: non-numeric score", path, lineno) from None
            total = sum(scores)
            if abs(total - 1.0) > SCORE_TOL:
                raise DatasetError(f"frame {f}: scores sum to {total:.6f}, not normalized",
                                   path, lineno)
            if any(p < 0 or not math.isfinite(p) for p in scores):
                raise DatasetError(f"frame {f}: negative or non-finite score", path, lineno)
            frames[f].append(Detection(box, scores))
    return frames


def load_motion(path, meta: VideoMeta) -> list[MotionField]:
    path = Path(path)
    need = meta.num_frames - 1
    got: dict[int, MotionField] = {}
    if need > 0 or path.exists():
        for lineno, rec in _read_jsonl(path):
            f = _frame_of(rec, meta, path, lineno, limit=max(need, 0))
            if f in got:
                raise DatasetError(f"duplicate motion for frame {f}", path, lineno)
            cell = rec.get("cell", DEFAULT_CELL)
            if not isinstance(cell, int) or cell < 1:
                raise DatasetError(f"bad cell size {cell!r}", path, lineno)
            rows, cols = grid_shape(meta.width, meta.height, cell)
            grids = []
            for key in ("fwd", "bwd"):
                if key not in rec:
                    grids.append(None)
                    continue
                try:
                    g = np.asarray(rec[key], dtype=float)
                except (TypeError, ValueError):
                    raise DatasetError(f"non-numeric '{key}' grid", path, lineno) from None
                if g.shape != (rows * cols, 2):
                    raise DatasetError(f"'{key}' grid has shape {g.shape}, expected "
                                       f"({rows * cols}, 2) for cell {cell}", path, lineno)
                grids.append(g.reshape(rows, cols, 2))
            if grids[0] is None:
                raise DatasetError("missing 'fwd' grid", path, lineno)
            try:
                got[f] = MotionField(f, cell, grids[0], grids[1])
            except DatasetError as e:
                raise DatasetError(str(e), path, lineno) from None
    for f in range(need):
        if f not in got:
            raise DatasetError(f"missing motion for frame pair {f}->{f + 1}", path)
    return [got[f] for f in range(need)]


def load_detection_dir(det_dir, manifest: DatasetManifest) -> dict[str, list[list[Detection]]]:
    out = {}
    for v in manifest.videos:
        p = Path(det_dir) / f"{v.id}.jsonl"
        out[v.id] = load_detections(p, v, manifest.num_classes) if p.exists() else \
            [[] for _ in range(v.num_frames)]
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = load_manifest(root)
    gt, motion = {}, {}
    for v in manifest.videos:
        gp = root / "gt" / f"{v.id}.jsonl"
        gt[v.id] = load_gt(gp, v, manifest.num_classes) if gp.exists() else \
            [[] for _ in range(v.num_frames)]
        motion[v.id] = load_motion(root / "motion" / f"{v.id}.jsonl", v)
    dets = load_detection_dir(root / "det", manifest) if (root / "det").is_dir() else None
    return Dataset(manifest, gt, motion, dets)
