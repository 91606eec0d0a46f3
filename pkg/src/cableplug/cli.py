"""Command-line entry point: ``cableplug run`` and ``cableplug report``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .cablemodel import CableModelError, track_cable
from .config import Scenario, ScenarioError, load_scenario
from .perception import PerceptionError, load_cloud, remove_isolated, save_cloud, save_depth_image
from .simworld import render_cloud
from .taskfsm import Phase, build_world, perceive_socket, run_task, sensor_config

log = logging.getLogger("cableplug")

MODES = ("full-task", "fit-only", "perceive-only", "align-only")
ALIGN_HEADER = (
    ["iteration", "time"]
    + [f"dev_{i}" for i in range(6)]
    + [f"twist_{i}" for i in range(6)]
    + [f"qdot_{i}" for i in range(6)]
    + ["clamped", "converged"]
)


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0..19"`` (inclusive) or ``"1,4,9"``."""
    text = text.strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("need at least one seed")
    return seeds


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _alignment_rows(result) -> list[list]:
    rows = []
    for s in result.steps:
        rows.append([s.iteration, float(s.time), *map(float, s.deviation), *map(float, s.twist),
                     *map(float, s.qdot), int(s.clamped), int(s.converged)])
    return rows


def run_seed(sc: Scenario, seed: int, mode: str, out: Path, cloud_path=None) -> dict:
    """Execute one seed and write its files; returns the metrics dictionary."""
    d = out / f"seed_{seed:04d}"
    d.mkdir(parents=True, exist_ok=True)
    if mode in ("full-task", "align-only"):
        stop = Phase.PRE_INSERT if mode == "align-only" else None
        run = run_task(sc, seed, stop_after=stop)
        m = run.metrics.to_dict()
        if mode == "align-only":
            ok = run.alignment is not None and run.alignment.converged
            m["status"] = "Done" if ok else "Failed"
            if not ok and m["reason"] is None:
                m["reason"] = "alignment-not-reached"
        m["mode"] = mode
        _write(d / "trace.csv", run.trace_csv())
        if run.alignment is not None:
            _write(d / "alignment.csv", _csv_text(ALIGN_HEADER, _alignment_rows(run.alignment)))
        if run.initial_model is not None:
            _write(d / "model.json", _json(run.initial_model.model.to_dict()))
    elif mode == "fit-only":
        m = {"seed": seed, "scenario": sc.name, "mode": mode, "status": "Done", "reason": None}
        if cloud_path is not None:
            try:
                cloud = load_cloud(cloud_path)
            except ValueError as exc:
                m.update(status="Failed", reason=str(exc))
                _write(d / "metrics.json", _json(m))
                return m
        else:
            cloud = render_cloud(build_world(sc, seed), sensor_config(sc)).points
            save_cloud(d / "cloud.xyz", cloud, f"scenario {sc.name} seed {seed}")
        p = sc.perception
        try:
            cloud = remove_isolated(cloud, p.isolation_radius, p.isolation_neighbors)
            est = track_cable(cloud, p.n_samples, sc.sockets.source, p.plug_exclusion, p.bin_width,
                              p.spread_threshold)
            _write(d / "model.json", _json(est.model.to_dict()))
            m["tip"] = [float(v) for v in est.tip.as_vector()]
        except CableModelError as exc:
            m.update(status="Failed", reason=str(exc))
    else:  # perceive-only
        m = {"seed": seed, "scenario": sc.name, "mode": mode, "status": "Done", "reason": None}
        try:
            est, img = perceive_socket(build_world(sc, seed), sc)
            save_depth_image(d / "view.depth", img)
            _write(d / "socket.json", _json({
                "pixel": [float(v) for v in est.pixel],
                "radius_px": float(est.radius_px),
                "center": [float(v) for v in est.center],
                "normal": [float(v) for v in est.normal],
                "frame": [float(v) for v in est.frame.as_vector()],
            }))
        except PerceptionError as exc:
            m.update(status="Failed", reason=str(exc))
    _write(d / "metrics.json", _json(m))
    return m


def _run_seed_job(args):
    sc_json, seed, mode, out, cloud = args
    return run_seed(Scenario.model_validate_json(sc_json), seed, mode, Path(out), cloud)


# -- report -------------------------------------------------------------------

REPORT_HEADER = [
    "seed", "status", "reason", "failed_in", "total_duration",
    "Initialize", "Grasp", "Unplug", "PreInsert", "Insert",
    "alignment_iterations", "aligned_error_translation", "aligned_error_rotation",
    "insert_radial_error", "insert_angle_error", "duration_min", "duration_max",
]


def _row_from_metrics(m: dict) -> dict:
    row = {k: "" for k in REPORT_HEADER}
    row.update(seed=m.get("seed", ""), status=m.get("status", ""), reason=m.get("reason") or "",
               failed_in=m.get("failed_in") or "")
    phases = m.get("phases") or []
    for p in phases:
        row[p["name"]] = p["duration"]
    if phases:
        row["total_duration"] = m.get("total_duration", sum(p["duration"] for p in phases))
    for k in ("alignment_iterations", "insert_radial_error", "insert_angle_error"):
        if m.get(k) is not None:
            row[k] = m[k]
    err = m.get("aligned_error_true")
    if err:
        row["aligned_error_translation"] = max(abs(v) for v in err[:3])
        row["aligned_error_rotation"] = max(abs(v) for v in err[3:])
    return row


def aggregate(rows: list[dict]) -> dict:
    """Means (and duration min/max) over successful rows only."""
    ok = [r for r in rows if r["status"] == "Done"]
    agg = {k: "" for k in REPORT_HEADER}
    agg.update(seed="aggregate", status=f"{len(ok)}/{len(rows)} Done")
    numeric = [k for k in REPORT_HEADER[4:15]]
    for k in numeric:
        vals = [float(r[k]) for r in ok if r[k] != ""]
        if vals:
            agg[k] = statistics.fmean(vals)
    totals = [float(r["total_duration"]) for r in ok if r["total_duration"] != ""]
    if totals:
        agg["duration_min"] = min(totals)
        agg["duration_max"] = max(totals)
    return agg


def build_report(directory: Path) -> tuple[list[dict], dict]:
    rows = []
    for f in sorted(directory.glob("seed_*/metrics.json")):
        rows.append(_row_from_metrics(json.loads(f.read_text())))
    rows.sort(key=lambda r: (int(r["seed"]) if str(r["seed"]).lstrip("-").isdigit() else 0))
    return rows, aggregate(rows)


def write_report(directory: Path) -> int:
    rows, agg = build_report(directory)
    if not rows:
        log.warning("no metrics files under %s; report is empty", directory)
        _write(directory / "report.csv", _csv_text(REPORT_HEADER, []))
        return 0
    body = [[r[k] for k in REPORT_HEADER] for r in rows + [agg]]
    _write(directory / "report.csv", _csv_text(REPORT_HEADER, body))
    return len(rows)


# -- entry --------------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        sc = load_scenario(args.scenario, args.override)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cloud = str(args.cloud) if args.cloud else None
    if cloud and not Path(cloud).is_file():
        print(f"error: cloud file {cloud} not found", file=sys.stderr)
        return 2
    jobs = [(sc.model_dump_json(), s, args.mode, str(out), cloud) for s in args.seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_seed_job, jobs))
    else:
        results = [run_seed(sc, s, args.mode, out, cloud) for s in args.seeds]
    for m in results:
        flag = "ok " if m["status"] == "Done" else "FAIL"
        extra = f" ({m['reason']})" if m.get("reason") else ""
        print(f"seed {m['seed']:4d} {flag} {m['status']}{extra}")
    write_report(out)
    rows, agg = build_report(out)
    campaign = {
        "scenario": sc.name,
        "mode": args.mode,
        "seeds": list(args.seeds),
        "successes": sum(m["status"] == "Done" for m in results),
        "runs": len(results),
        "duration_mean": agg["total_duration"] if agg["total_duration"] != "" else None,
        "duration_min": agg["duration_min"] if agg["duration_min"] != "" else None,
        "duration_max": agg["duration_max"] if agg["duration_max"] != "" else None,
    }
    _write(out / "campaign.json", _json(campaign))
    print(f"{campaign['successes']}/{campaign['runs']} succeeded")
    return 0 if campaign["successes"] == campaign["runs"] else 1


def cmd_report(args) -> int:
    d = Path(args.dir)
    if not d.is_dir():
        print(f"error: {d} is not a directory", file=sys.stderr)
        return 2
    n = write_report(d)
    print(f"{n} runs -> {d / 'report.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cableplug", description="Simulated cable plug task")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one or more seeds of a scenario")
    r.add_argument("--scenario", default="canonical", help="YAML path or builtin name")
    r.add_argument("--seeds", type=parse_seeds, default=[0], help="a..b, a,b,c or a single seed")
    r.add_argument("--mode", choices=MODES, default="full-task")
    r.add_argument("--out", default="runs")
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dot-path scenario override, repeatable")
    r.add_argument("--cloud", help="point cloud file for fit-only mode")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_run)
    p = sub.add_parser("report", help="aggregate metrics under a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
