"""Command-line entry point: ``tcal {gen,estimate,select,eval,simulate}``.

Every subcommand accepts ``--config FILE`` (JSON). Keys in the file are the
flag names with dashes replaced by underscores; ``gen`` and ``simulate`` also
take ``world``, ``detector`` and ``loop`` sections. Flags given on the command
line win over the file. Failures print one JSON line on stderr and exit with
2 (invalid input) or 3 (I/O).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .acquisition import (METHODS, SelectionConfig, oracle_score, random_scores, select_batch, tc_score,
                          uncertainty_scores, write_selection_csv)
from .dataset import DatasetError, load_dataset, load_detection_dir, save_dataset
from .energy import EnergyModel, collect_errors, load_errors, save_errors, solve_graphs
from .evaluation import evaluate
from .simulator import (LOOP_METHODS, DetectorConfig, LoopConfig, SurrogateDetector, WorldConfig, detect,
                        generate_world, run_loop, substream, world_from_dict)
from .tcgraph import TCConfig, build_graph, prefilter_frame

log = logging.getLogger("tcal")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3
SECTIONS = {"gen": ("world",), "simulate": ("world", "detector", "loop")}

# world used by ``simulate`` unless the config says otherwise: 20 videos of about 200 frames
SIMULATE_WORLD = {"frames_min": 150, "frames_max": 250}


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="tcal", description="Temporal-coherence active learning for video.")
    p.add_argument("--version", action="version", version=f"tcal {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=fmt)
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--out", help="output dataset directory")
    g.add_argument("--seed", type=int, default=0, help="world seed")
    g.add_argument("--spawn-rate", type=float, default=0.02, help="per-frame spawn rate")
    g.add_argument("--frames-min", type=int, default=100, help="shortest video length")
    g.add_argument("--frames-max", type=int, default=400, help="longest video length")
    g.add_argument("--detector-skill", type=float, default=None,
                   help="also write surrogate detections (det/) at this uniform skill in [0, 1]")

    e = sub.add_parser("estimate", help="estimate per-frame FP/FN from temporal coherence",
                       formatter_class=fmt)
    e.add_argument("--config", help="JSON config file")
    e.add_argument("--dataset", help="dataset directory")
    e.add_argument("--det", default=None, help="detection directory (default: <dataset>/det)")
    e.add_argument("--out", help="output errors directory")
    e.add_argument("--theta", type=float, default=0.5, help="IoU threshold for links")
    e.add_argument("--theta-c", type=float, default=0.5, help="IoU threshold for candidate clustering")
    e.add_argument("--window", type=int, default=3, help="tracking window in frames")
    e.add_argument("--tau-det", type=float, default=0.5, help="detection score threshold")
    e.add_argument("--nms", type=float, default=0.5, help="class-wise NMS IoU before graph building")
    e.add_argument("--epsilon", type=float, default=1e-6, help="tie-breaking cost on error labels")
    e.add_argument("--jobs", type=int, default=1, help="worker processes for solving graphs")
    e.add_argument("--graph-out", default=None, help="also dump the graph as JSONL")

    s = sub.add_parser("select", help="select the next batch of frames", formatter_class=fmt)
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--dataset", help="dataset directory (video lengths, ground truth for oracles)")
    s.add_argument("--errors", default=None, help="errors directory (method tc)")
    s.add_argument("--det", default=None, help="detection directory (default: <dataset>/det)")
    s.add_argument("--method", default="tc", choices=METHODS, help="acquisition function")
    s.add_argument("--tc-variant", default="fp", choices=("fp", "fn", "both"),
                   help="which estimated errors the tc score counts")
    s.add_argument("--batch", type=int, default=1, help="frames to select")
    s.add_argument("--k", type=int, default=1, help="exclusion radius around labeled frames")
    s.add_argument("--allocation", default="proportional", choices=("proportional", "global"),
                   help="split the batch over videos by length, or rank all frames together")
    s.add_argument("--seed", type=int, default=0, help="seed for tie-breaking and random scores")
    s.add_argument("--cycle", type=int, default=1, help="cycle number written to the log")
    s.add_argument("--labeled", default=None, help="CSV with video_id,frame of already labeled frames")
    s.add_argument("--tau-det", type=float, default=0.5, help="score threshold for detection-based scores")
    s.add_argument("--nms", type=float, default=0.5, help="class-wise NMS IoU for detection-based scores")
    s.add_argument("--out", default="selection.csv", help="selection log CSV")

    v = sub.add_parser("eval", help="evaluate detections (per-class AP, mAP)", formatter_class=fmt)
    v.add_argument("--config", help="JSON config file")
    v.add_argument("--dataset", help="dataset directory")
    v.add_argument("--det", default=None, help="detection directory (default: <dataset>/det)")
    v.add_argument("--out", default="eval.json", help="report JSON")
    v.add_argument("--score-thresh", type=float, default=0.5, help="drop detections scoring below this")
    v.add_argument("--nms", type=float, default=0.5, help="class-wise NMS IoU")
    v.add_argument("--iou", type=float, default=0.5, help="IoU needed to match ground truth")
    v.add_argument("--interpolation", default="all", choices=("all", "11pt"), help="AP interpolation")
    v.add_argument("--videos", default=None, help="comma-separated subset of video ids")

    m = sub.add_parser("simulate", help="run the closed active-learning loop", formatter_class=fmt)
    m.add_argument("--config", help="JSON config file")
    m.add_argument("--out", help="output directory")
    m.add_argument("--methods", default="random,random_r,tc",
                   help=f"comma-separated subset of {','.join(LOOP_METHODS)}")
    m.add_argument("--seeds", default="0", help="comma-separated run seeds")
    m.add_argument("--cycles", type=int, default=5, help="acquisition cycles per run")
    m.add_argument("--budget", type=float, default=0.02, help="fraction of training frames per cycle")
    m.add_argument("--k", type=int, default=1, help="exclusion radius for methods that use one")
    m.add_argument("--jobs", type=int, default=1, help="parallel (seed, method) runs")
    m.add_argument("--no-dataset", action="store_true", help="skip writing the generated datasets")
    return p


def _explicit_flags(parser: argparse.ArgumentParser, argv: Sequence[str]) -> set[str]:
    """Destinations given on the command line (as opposed to defaults)."""
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    saved = []
    for sp in sub_action.choices.values():
        for a in sp._actions:
            saved.append((a, a.default))
            a.default = argparse.SUPPRESS
    try:
        ns = parser.parse_args(argv)
    finally:
        for a, d in saved:
            a.default = d
    return set(vars(ns)) - {"command"}


def resolve(parser: argparse.ArgumentParser, argv: Sequence[str]) -> tuple[str, dict, dict]:
    """(command, flat settings, config sections) with flags over file over defaults."""
    ns = parser.parse_args(argv)
    settings = vars(ns).copy()
    command = settings.pop("command")
    explicit = _explicit_flags(parser, argv)
    sections: dict = {}
    if ns.config:
        try:
            doc = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise CLIError(f"cannot read config {ns.config}: {e.strerror}", EXIT_IO)
        except json.JSONDecodeError as e:
            raise CLIError(f"config {ns.config} is not valid JSON: {e}")
        if not isinstance(doc, dict):
            raise CLIError("config must be a JSON object")
        allowed = set(settings) - {"config"}
        for key, val in doc.items():
            if key in SECTIONS.get(command, ()):
                if not isinstance(val, dict):
                    raise CLIError(f"config section {key!r} must be an object")
                sections[key] = val
            elif key in allowed:
                if key not in explicit:
                    if key in ("methods", "seeds", "videos") and isinstance(val, list):
                        val = ",".join(str(x) for x in val)
                    settings[key] = val
            else:
                raise CLIError(f"unknown config key {key!r} for {command}")
    return command, settings, sections


def _need(settings: dict, *keys: str) -> None:
    for k in keys:
        if not settings.get(k):
            raise CLIError(f"missing required setting --{k.replace('_', '-')}")


def _dataclass_from(cls, d: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise CLIError(f"unknown {what} key(s): {', '.join(unknown)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**d)


def _world_config(sections: dict, base: Optional[dict] = None) -> WorldConfig:
    d = dict(base or {})
    d.update(sections.get("world", {}))
    names = {f.name for f in dataclasses.fields(WorldConfig)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise CLIError(f"unknown world key(s): {', '.join(unknown)}")
    return world_from_dict(d)


def _det_dir(settings: dict) -> Path:
    return Path(settings["det"]) if settings.get("det") else Path(settings["dataset"]) / "det"


def _load(settings: dict, with_dets: bool = True):
    ds = load_dataset(settings["dataset"])
    dets = None
    if with_dets:
        dd = _det_dir(settings)
        if not dd.is_dir():
            raise CLIError(f"detection directory {dd} does not exist", EXIT_IO)
        dets = load_detection_dir(dd, ds.manifest)
    return ds, dets


# -- subcommands -----------------------------------------------------------

def cmd_gen(settings: dict, sections: dict) -> None:
    _need(settings, "out")
    base = {"seed": settings["seed"], "spawn_rate": settings["spawn_rate"],
            "frames_min": settings["frames_min"], "frames_max": settings["frames_max"]}
    world = generate_world(_world_config(sections, base))
    if settings["detector_skill"] is not None:
        s = float(settings["detector_skill"])
        det = SurrogateDetector.uniform(DetectorConfig(), world, s)
        world.dataset.detections = detect(world, det, settings["seed"])
    save_dataset(world.dataset, settings["out"])
    log.info("wrote %d videos to %s", len(world.manifest.videos), settings["out"])


def cmd_estimate(settings: dict, sections: dict) -> None:
    _need(settings, "dataset", "out")
    ds, dets = _load(settings)
    cfg = TCConfig(settings["theta"], settings["theta_c"], settings["tau_det"], settings["nms"],
                   settings["window"])
    graphs = build_graph(ds, dets, cfg, jobs=settings["jobs"])
    if settings.get("graph_out"):
        from .tcgraph import dump_graph
        dump_graph(graphs, settings["graph_out"])
    sols = solve_graphs(graphs, EnergyModel(settings["epsilon"]), settings["jobs"])
    errors = collect_errors(graphs, sols, {v.id: v.num_frames for v in ds.manifest.videos})
    save_errors(errors, settings["out"])
    log.info("estimated %d FP and %d FN over %d graphs",
             sum(fe.fp for fr in errors.values() for fe in fr),
             sum(fe.fn for fr in errors.values() for fe in fr), len(graphs))


def _read_labeled(path) -> set:
    out = set()
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                out.add((row["video_id"], int(row["frame"])))
    except OSError as e:
        raise CLIError(f"cannot read {path}: {e.strerror}", EXIT_IO)
    except (KeyError, ValueError):
        raise CLIError(f"{path} needs columns video_id,frame with integer frames")
    return out


def cmd_select(settings: dict, sections: dict) -> None:
    _need(settings, "dataset", "out")
    method = settings["method"]
    ds, dets = _load(settings, with_dets=method not in ("tc", "random"))
    lengths = {v.id: v.num_frames for v in ds.manifest.videos}
    if method == "tc":
        if not settings.get("errors"):
            raise CLIError("method tc needs --errors (output of the estimate command)")
        try:
            errors = load_errors(settings["errors"], list(lengths))
        except OSError as e:
            raise CLIError(f"cannot read errors: {e}", EXIT_IO)
        scores = tc_score(errors, settings["tc_variant"])
    elif method == "random":
        scores = random_scores(lengths)
    else:
        dets = {v: [[fr[k] for k in prefilter_frame(fr, settings["tau_det"], settings["nms"])]
                    for fr in frames] for v, frames in dets.items()}
        if method in ("oracle_fp", "oracle_fn"):
            scores = oracle_score(dets, ds.gt, method[-2:])
        else:
            scores = uncertainty_scores(dets, method)
    labeled = _read_labeled(settings["labeled"]) if settings.get("labeled") else set()
    cfg = SelectionConfig(method, settings["batch"], settings["k"], settings["allocation"],
                          settings["seed"], settings["tc_variant"])
    rng = substream(settings["seed"], 2, settings["cycle"])
    sel = select_batch(scores, labeled, cfg, rng, lengths)
    for ev in sel.events:
        log.info("selection event: %s", ev)
    Path(settings["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_selection_csv(sel.rows(method, settings["cycle"]), settings["out"])


def cmd_eval(settings: dict, sections: dict) -> None:
    _need(settings, "dataset")
    ds, dets = _load(settings)
    videos = _csv_list(settings["videos"]) if settings.get("videos") else None
    if videos:
        unknown = [v for v in videos if v not in ds.gt]
        if unknown:
            raise CLIError(f"unknown video id(s): {', '.join(unknown)}")
    rep = evaluate(dets, ds.gt, ds.manifest.num_classes, settings["score_thresh"], settings["nms"],
                   settings["iou"], settings["interpolation"], videos)
    rep.save(settings["out"], ds.manifest.classes)
    log.info("mAP %.4f", rep.mAP)


def _simulate_one(args):
    world_cfg, det_cfg, loop_cfg, method, seed = args
    world = generate_world(dataclasses.replace(world_cfg, seed=seed))
    return run_loop(world, method, loop_cfg, seed, det_cfg)


def cmd_simulate(settings: dict, sections: dict) -> None:
    _need(settings, "out")
    methods = _csv_list(settings["methods"])
    bad = [m for m in methods if m not in LOOP_METHODS]
    if not methods or bad:
        raise CLIError(f"unknown method(s) {', '.join(bad) or '(none)'}; choose from {', '.join(LOOP_METHODS)}")
    if len(set(methods)) != len(methods):
        raise CLIError("duplicate method in --methods")
    try:
        seeds = _int_list(settings["seeds"]) if isinstance(settings["seeds"], str) else [int(settings["seeds"])]
    except argparse.ArgumentTypeError as e:
        raise CLIError(str(e))
    if not seeds or len(set(seeds)) != len(seeds):
        raise CLIError("--seeds needs distinct integers")
    world_cfg = _world_config(sections, SIMULATE_WORLD)
    det_cfg = _dataclass_from(DetectorConfig, sections.get("detector", {}), "detector")
    loop_d = {"cycles": settings["cycles"], "budget_per_cycle": settings["budget"], "k": settings["k"]}
    loop_d.update(sections.get("loop", {}))
    loop_cfg = _dataclass_from(LoopConfig, loop_d, "loop")
    if settings["jobs"] < 1:
        raise CLIError("--jobs must be positive")

    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(world_cfg, det_cfg, loop_cfg, m, s) for s in seeds for m in methods]
    if settings["jobs"] > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=settings["jobs"]) as pool:
            results = list(pool.map(_simulate_one, tasks))
    else:
        results = [_simulate_one(t) for t in tasks]
    order = {m: i for i, m in enumerate(methods)}
    results.sort(key=lambda r: (order[r.method], r.seed))

    if not settings["no_dataset"]:
        for s in seeds:
            save_dataset(generate_world(dataclasses.replace(world_cfg, seed=s)).dataset,
                         out / "datasets" / f"seed_{s}")
    curve_rows = [row for r in results for row in r.curve]
    cols = list(curve_rows[0]) if curve_rows else ["method", "seed", "cycle", "labeled_fraction", "mAP"]
    with open(out / "curve.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(curve_rows)
    write_selection_csv([row for r in results for row in r.selections], out / "selection.csv",
                        extra_columns=("seed",))
    manifest = {"version": __version__, "methods": methods, "seeds": seeds,
                "world": dataclasses.asdict(world_cfg), "detector": dataclasses.asdict(det_cfg),
                "loop": dataclasses.asdict(loop_cfg)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    for m in methods:
        finals = [float(r.curve[-1]["mAP"]) for r in results if r.method == m]
        log.info("%s: final mAP mean %.4f over %d seed(s)", m, sum(finals) / len(finals), len(finals))


COMMANDS = {"gen": cmd_gen, "estimate": cmd_estimate, "select": cmd_select, "eval": cmd_eval,
            "simulate": cmd_simulate}


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("TCAL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        command, settings, sections = resolve(parser, argv)
    except SystemExit as e:
        # argparse already printed usage; --help and --version exit 0
        code = e.code if isinstance(e.code, int) else EXIT_INVALID
        if code != 0:
            return _fail(EXIT_INVALID, "usage", "invalid command-line arguments")
        return 0
    except CLIError as e:
        return _fail(e.code, "config", str(e))
    try:
        COMMANDS[command](settings, sections)
    except CLIError as e:
        return _fail(e.code, "validation" if e.code == EXIT_INVALID else "io", str(e))
    except DatasetError as e:
        return _fail(EXIT_INVALID, "dataset", str(e))
    except (ValueError, TypeError) as e:
        return _fail(EXIT_INVALID, "validation", str(e))
    except OSError as e:
        return _fail(EXIT_IO, "io", str(e))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
