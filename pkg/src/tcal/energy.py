"""Label detections TP/FP and candidates TN/FN by exact energy minimization.

Costs are handled as integers (real cost times ``scale``) so the min-cut is
exact. The four-label energy is equivalent to a binary "object present /
absent" problem with Potts pairwise terms, which is what the solver sees;
:func:`brute_force_min` works on the four-label tables directly.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .maxflow import FlowNetwork
from .tcgraph import TCGraph

TP, FP, TN, FN = 0, 1, 2, 3
LABELS = ("TP", "FP", "TN", "FN")
SCALE = 10 ** 7
INF = float("inf")

# rows/cols ordered TP, FP, TN, FN
PAIRWISE = ((0, 1, 1, 0),
            (1, 0, 0, 1),
            (1, 0, 0, 1),
            (0, 1, 1, 0))


@dataclass(frozen=True)
class EnergyModel:
    epsilon: float = 1e-6
    scale: int = SCALE

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        units = self.epsilon * self.scale
        if abs(units - round(units)) > 1e-9 * max(1.0, units):
            raise ValueError("epsilon * scale must be an integer")

    @property
    def eps_units(self) -> int:
        return int(round(self.epsilon * self.scale))

    def unary(self, candidate: bool) -> tuple[float, float, float, float]:
        e = 1.0 + self.epsilon
        return (INF, INF, 0.0, e) if candidate else (0.0, e, INF, INF)

    def unary_units(self, candidate: bool) -> tuple[Optional[int], ...]:
        e = self.scale + self.eps_units
        return (None, None, 0, e) if candidate else (0, e, None, None)

    def forbidden(self, candidate: bool) -> frozenset[int]:
        return frozenset({TP, FP}) if candidate else frozenset({TN, FN})

    def pairwise_units(self) -> np.ndarray:
        return np.array(PAIRWISE, dtype=np.int64) * self.scale

    def max_safe_nodes(self) -> int:
        """Largest node count for which the tie-breaking term cannot reorder solutions."""
        if self.eps_units == 0:
            return 0
        return max(0, (self.scale - 1) // (2 * self.eps_units))


PRESENT_LABEL = {False: TP, True: FN}   # keyed by is_candidate
ABSENT_LABEL = {False: FP, True: TN}


@dataclass
class BinaryEnergy:
    cost_present: list[int]
    cost_absent: list[int]
    edges: np.ndarray
    edge_weight: int

    @property
    def num_vars(self) -> int:
        return len(self.cost_present)

    def evaluate(self, present: Sequence[bool]) -> int:
        p = np.asarray(present, dtype=bool)
        total = sum(cp if x else ca for cp, ca, x in zip(self.cost_present, self.cost_absent, p.tolist()))
        if len(self.edges):
            total += self.edge_weight * int(np.count_nonzero(p[self.edges[:, 0]] != p[self.edges[:, 1]]))
        return int(total)


@dataclass
class LabelSolution:
    labels: np.ndarray                      # (K,) codes into LABELS
    energy_units: int
    scale: int = SCALE
    fp_count: dict = field(default_factory=dict)   # frame -> int
    fn_count: dict = field(default_factory=dict)

    @property
    def energy(self) -> float:
        return self.energy_units / self.scale

    def label_names(self) -> list[str]:
        return [LABELS[i] for i in self.labels.tolist()]


def reduce_to_binary(graph: TCGraph, model: EnergyModel = EnergyModel()) -> BinaryEnergy:
    pw = model.pairwise_units()
    # the pairwise table must be Potts in presence: zero within a presence
    # group, one constant across groups
    present, absent = (TP, FN), (FP, TN)
    same = [pw[a, b] for g in (present, absent) for a in g for b in g]
    cross = {int(pw[a, b]) for a in present for b in absent} | {int(pw[b, a]) for a in present for b in absent}
    if any(same) or len(cross) != 1:
        raise ValueError("pairwise table is not Potts under the presence grouping")
    cp, ca = [], []
    for cand in graph.is_candidate.tolist():
        u = model.unary_units(cand)
        cp.append(u[PRESENT_LABEL[cand]])
        ca.append(u[ABSENT_LABEL[cand]])
    return BinaryEnergy(cp, ca, np.asarray(graph.edges, np.int64).reshape(-1, 2), cross.pop())


def min_cut_solve(energy: BinaryEnergy) -> tuple[np.ndarray, int]:
    """Globally optimal presence assignment and its energy (integer units).

    Among several minimizers the one with the fewest present variables is
    returned.
    """
    n = energy.num_vars
    if n == 0:
        return np.zeros(0, bool), 0
    s, t = n, n + 1
    net = FlowNetwork(n + 2)
    const = 0
    for v, (cp, ca) in enumerate(zip(energy.cost_present, energy.cost_absent)):
        m = min(cp, ca)
        const += m
        if ca > m:
            net.add_edge(s, v, ca - m)      # paid when v ends on the sink side
        if cp > m:
            net.add_edge(v, t, cp - m)
    w = energy.edge_weight
    for u, v in energy.edges.tolist():
        net.add_edge(u, v, w, w)
    flow = net.max_flow(s, t)
    present = np.array(net.source_side(s)[:n], dtype=bool)
    total = flow + const
    check = energy.evaluate(present)
    if check != total:
        raise RuntimeError(f"min-cut energy mismatch: cut {total} vs assignment {check}")
    return present, total


def frame_counts(graph: TCGraph, labels: np.ndarray) -> tuple[dict, dict]:
    fp: dict[int, int] = {}
    fn: dict[int, int] = {}
    for f, lab in zip(graph.frames.tolist(), labels.tolist()):
        if lab == FP:
            fp[f] = fp.get(f, 0) + 1
        elif lab == FN:
            fn[f] = fn.get(f, 0) + 1
    return fp, fn


def assign_labels(graph: TCGraph, present: np.ndarray, energy_units: int = 0,
                  scale: int = SCALE) -> LabelSolution:
    present = np.asarray(present, dtype=bool)
    cand = graph.is_candidate
    labels = np.where(cand, np.where(present, FN, TN), np.where(present, TP, FP)).astype(np.int8)
    fp, fn = frame_counts(graph, labels)
    return LabelSolution(labels, int(energy_units), scale, fp, fn)


def solve_graph(graph: TCGraph, model: EnergyModel = EnergyModel()) -> LabelSolution:
    present, units = min_cut_solve(reduce_to_binary(graph, model))
    return assign_labels(graph, present, units, model.scale)


def brute_force_min(graph: TCGraph, model: EnergyModel = EnergyModel(), max_nodes: int = 20) -> LabelSolution:
    """Exhaustive minimum over feasible four-label assignments.

    Ties go to the fewest FP + FN labels, then the lexicographically smallest
    label vector (TP < FP < TN < FN).
    """
    n = graph.num_nodes
    if n > max_nodes:
        raise ValueError(f"brute force limited to {max_nodes} nodes, got {n}")
    if n == 0:
        return LabelSolution(np.zeros(0, np.int8), 0, model.scale)
    feasible = []
    unary = np.zeros((n, 4), dtype=np.int64)
    for v, cand in enumerate(graph.is_candidate.tolist()):
        u = model.unary_units(cand)
        feasible.append([lab for lab in range(4) if u[lab] is not None])
        unary[v] = [x if x is not None else 0 for x in u]
    if any(len(f) != 2 for f in feasible):
        raise ValueError("expected exactly two finite labels per node")
    feas = np.array(feasible, dtype=np.int64)                  # (n, 2)
    bits = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
    labels = feas[np.arange(n)[None, :], bits]                  # (2^n, n)
    energy = unary[np.arange(n)[None, :], labels].sum(axis=1)
    pw = model.pairwise_units()
    for a, b in np.asarray(graph.edges).reshape(-1, 2).tolist():
        energy = energy + pw[labels[:, a], labels[:, b]]
    errors = np.isin(labels, (FP, FN)).sum(axis=1)
    keys = [labels[:, i] for i in range(n - 1, -1, -1)] + [errors, energy]
    best = int(np.lexsort(keys)[0])
    lab = labels[best].astype(np.int8)
    fp, fn = frame_counts(graph, lab)
    return LabelSolution(lab, int(energy[best]), model.scale, fp, fn)


# -- whole-dataset error estimates -----------------------------------------

@dataclass
class FrameErrors:
    frame: int
    fp: int = 0
    fn: int = 0
    fp_boxes: list = field(default_factory=list)
    fn_boxes: list = field(default_factory=list)


def _solve_many(args):
    graphs, model = args
    return [solve_graph(g, model) for g in graphs]


def solve_graphs(graphs: Sequence[TCGraph], model: EnergyModel = EnergyModel(),
                 jobs: int = 1) -> list[LabelSolution]:
    if jobs <= 1 or len(graphs) < 2:
        return [solve_graph(g, model) for g in graphs]
    # contiguous chunks, a few per worker, keep results in input order
    n_chunks = min(len(graphs), 4 * jobs)
    bounds = np.linspace(0, len(graphs), n_chunks + 1).astype(int)
    chunks = [(list(graphs[a:b]), model) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_solve_many, chunks))
    return [s for part in parts for s in part]


def collect_errors(graphs: Sequence[TCGraph], solutions: Sequence[LabelSolution],
                   num_frames: dict[str, int]) -> dict[str, list[FrameErrors]]:
    """Per-video, per-frame FP/FN counts and boxes."""
    out = {vid: [FrameErrors(f) for f in range(n)] for vid, n in num_frames.items()}
    for g, sol in zip(graphs, solutions):
        frames = out[g.video]
        for n in np.flatnonzero(np.isin(sol.labels, (FP, FN))).tolist():
            fe = frames[int(g.frames[n])]
            box = [round(float(x), 6) for x in g.boxes[n]]
            if sol.labels[n] == FP:
                fe.fp += 1
                fe.fp_boxes.append(box)
            else:
                fe.fn += 1
                fe.fn_boxes.append(box)
    return out


def save_errors(errors: dict[str, list[FrameErrors]], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for vid, frames in errors.items():
        lines = [json.dumps({"frame": fe.frame, "fp": fe.fp, "fn": fe.fn,
                             "fp_boxes": fe.fp_boxes, "fn_boxes": fe.fn_boxes},
                            separators=(",", ":")) for fe in frames]
        (out_dir / f"{vid}.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""),
                                              encoding="utf-8")


def load_errors(err_dir, video_ids: Optional[Sequence[str]] = None) -> dict[str, list[FrameErrors]]:
    err_dir = Path(err_dir)
    paths = [err_dir / f"{v}.jsonl" for v in video_ids] if video_ids is not None else \
        sorted(err_dir.glob("*.jsonl"))
    out = {}
    for p in paths:
        frames = []
        with open(p, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    r = json.loads(line)
                    frames.append(FrameErrors(int(r["frame"]), int(r["fp"]), int(r["fn"]),
                                              r.get("fp_boxes", []), r.get("fn_boxes", [])))
        out[p.stem] = sorted(frames, key=lambda fe: fe.frame)
    return out
