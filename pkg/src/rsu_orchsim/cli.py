"""rsu-orchsim command line.

Exit codes: 0 success, 2 invalid input or configuration, 3 internal error.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from datetime import timedelta
from pathlib import Path
from typing import Optional, Sequence

from . import analytics
from .geospatial import DEFAULT_GAP_SPLIT_S, RouteClass, aggregate_trajectories, classify_route
from .recordings_io import read_cam_log, write_cam_log
from .scenario import InvalidScenario, bundled_scenario, load_scenario
from .simulation import EventKind, run_scenario
from .synthetic import DEFAULT_INTERSECTION, DEFAULT_TZ_OFFSET_MIN, RecordingSpec, generate_recording
from .v2x_messages import GeoPosition

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INTERNAL = 3
OUT_ENV = "RSU_ORCHSIM_OUT"
DEFAULT_MAX_RANGE_M = 800.0
DEFAULT_RELEVANCE_RADIUS_M = 300.0


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "./out"))


def _resolve_scenario(ref: str):
    path = Path(ref)
    if path.is_file():
        return load_scenario(path), path.stem
    if not path.suffix and os.sep not in ref:
        try:
            return bundled_scenario(ref), ref
        except FileNotFoundError:
            pass
    raise InputError(f"scenario not found: {ref}")


# ---------------------------------------------------------------- simulate


def simulate_one(ref: str, seed: Optional[int], out_dir: Path) -> tuple[int, str]:
    """Run one scenario; returns (exit code, message). Safe to call in a worker process."""
    try:
        config, stem = _resolve_scenario(ref)
    except InvalidScenario as exc:
        return EXIT_INPUT, f"{ref}: invalid scenario: {exc}"
    except (InputError, OSError) as exc:
        return EXIT_INPUT, f"{ref}: {exc}"
    try:
        seed = config.seed if seed is None else seed
        log = run_scenario(config, seed)
        target = out_dir / stem
        target.mkdir(parents=True, exist_ok=True)
        with open(target / "events.jsonl", "w", encoding="utf-8", newline="\n") as fp:
            log.dump(fp)
        lines = [f"{ref}: {len(log)} events, seed {seed}"]
        try:
            b = analytics.decompose(log)
        except analytics.IncompleteRun as exc:
            lines.append(f"no complete trigger-to-CPM cycle ({exc})")
            rows = []
        else:
            rows = [(stem, b)]
            lines.append(f"end-to-end {b.end_to_end_s:.3f} s")
        with open(target / "latency.csv", "w", encoding="utf-8", newline="\n") as fp:
            analytics.write_latency_csv(rows, fp)
        (target / "latency.txt").write_text(analytics.format_latency_table(rows), encoding="utf-8")
        energy = analytics.run_energy(log, config.end_time_s)
        deployments = len(log.of_kind(EventKind.MANAGER_DONE))
        with open(target / "energy.txt", "w", encoding="utf-8", newline="\n") as fp:
            analytics.write_key_values(
                [
                    ("deployments", deployments),
                    ("duration_s", energy.duration_s),
                    ("deployed_s", energy.deployed_s),
                    ("consumed_wh", energy.consumed_wh),
                    ("always_on_wh", energy.always_on_wh),
                    ("avoided_wh", energy.avoided_wh),
                ],
                fp,
            )
        return EXIT_OK, "\n".join(lines)
    except Exception:
        return EXIT_INTERNAL, f"{ref}: internal error\n{traceback.format_exc()}"


def cmd_simulate(args) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir()
    jobs = max(1, args.jobs)
    if jobs == 1 or len(args.scenarios) == 1:
        results = [simulate_one(s, args.seed, out_dir) for s in args.scenarios]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(simulate_one, args.scenarios, [args.seed] * len(args.scenarios),
                                    [out_dir] * len(args.scenarios)))
    code = EXIT_OK
    for rc, msg in results:
        print(msg, file=sys.stdout if rc == EXIT_OK else sys.stderr)
        code = max(code, rc)
    return code


# ---------------------------------------------------------------- recordings


def _load_recording(path: str):
    """Read every valid record; returns (cams, parse summary)."""
    try:
        fp = open(path, "rb")
    except OSError as exc:
        raise InputError(f"cannot read recording: {exc}") from exc
    with fp:
        reader = read_cam_log(fp)
        cams = [r.cam for r in reader]
    return cams, reader.summary


def _analyze_recording(args):
    cams, summary = _load_recording(args.recording)
    intersection = GeoPosition.from_degrees(args.intersection_lat, args.intersection_lon)
    cams.sort(key=lambda c: (c.generation_time_ms, c.station_id))
    trajectories = aggregate_trajectories(cams, args.gap_split_s)
    counts = {rc: 0 for rc in RouteClass}
    relevant: set[int] = set()
    for traj in trajectories:
        rc = classify_route(traj, intersection, args.relevance_radius_m)
        counts[rc] += 1
        if rc is not RouteClass.IRRELEVANT:
            relevant.add(traj.station_id)
    tz = args.tz_offset_min
    if cams:
        first = analytics.utc_to_local_date(cams[0].generation_time_ms, tz)
        last = analytics.utc_to_local_date(cams[-1].generation_time_ms, tz)
        days = [first + timedelta(days=i) for i in range((last - first).days + 1)]
    else:
        days = []
    matrix = analytics.build_occurrence_matrix(cams, relevant, tz, days)
    stations = len({c.station_id for c in cams})
    return cams, summary, counts, relevant, matrix, stations


def _write_analysis(out_dir: Path, summary, counts, relevant, matrix, stations) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "route_counts.csv", "w", encoding="utf-8", newline="\n") as fp:
        fp.write("route,count\n")
        for rc in RouteClass:
            fp.write(f"{rc.value},{counts[rc]}\n")
    with open(out_dir / "occurrence.csv", "w", encoding="utf-8", newline="\n") as fp:
        analytics.write_occurrence_csv(matrix, fp)
    with open(out_dir / "parse_summary.txt", "w", encoding="utf-8", newline="\n") as fp:
        analytics.write_key_values(
            [
                ("ok_count", summary.ok_count),
                ("rejected_count", summary.rejected_count),
                ("first_error_line", summary.first_error_line if summary.first_error_line is not None else ""),
                ("distinct_stations", stations),
                ("relevant_stations", len(relevant)),
                ("days", len(matrix.days)),
            ],
            fp,
        )


def cmd_analyze(args) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir()
    _, summary, counts, relevant, matrix, stations = _analyze_recording(args)
    _write_analysis(out_dir, summary, counts, relevant, matrix, stations)
    print(f"records: {summary.ok_count} ok, {summary.rejected_count} rejected")
    print(f"distinct stations: {stations}")
    print("routes: " + ", ".join(f"{rc.value}={counts[rc]}" for rc in RouteClass))
    occ = matrix.occurrence_counts()
    if occ:
        print(f"occurrence minutes per day: {sum(occ) / len(occ):.2f} over {len(occ)} days")
    return EXIT_OK


def cmd_energy(args) -> int:
    if args.power_w < 0 or args.units < 1 or args.buffer_min < 0:
        raise InputError("--power-w must be >= 0, --units >= 1 and --buffer-min >= 0")
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir()
    _, summary, counts, relevant, matrix, stations = _analyze_recording(args)
    if not matrix.days:
        # no traffic at all: account one idle day
        matrix = analytics.OccurrenceMatrix.empty([analytics.utc_to_local_date(0, args.tz_offset_min)])
    report = analytics.energy_report(matrix, analytics.EnergyModel(args.power_w, args.units, args.buffer_min))
    _write_analysis(out_dir, summary, counts, relevant, matrix, stations)
    with open(out_dir / "energy.txt", "w", encoding="utf-8", newline="\n") as fp:
        analytics.write_key_values(report.as_items(), fp)
    print(f"active {report.active_min_per_day:.2f} min/day, inactive {report.inactive_min_per_day:.2f} min/day")
    print(f"avoidable {report.avoidable_wh_per_day / 1000:.3f} kWh/day, {report.avoidable_kwh_per_year:.1f} kWh/year")
    return EXIT_OK


def cmd_dimension_geofence(args) -> int:
    if not args.speed_kmh > 0:
        raise InputError("--speed-kmh must be positive")
    if args.e2e_s < 0 or args.planning_horizon_s < 0:
        raise InputError("--e2e-s and --planning-horizon-s must be non-negative")
    d = analytics.geofence_distance(args.speed_kmh, args.e2e_s, args.planning_horizon_s)
    verdict = "PASS" if d <= args.max_range_m else "FAIL"
    print(f"{d:.1f} m {verdict} (max range {args.max_range_m:g} m)")
    return EXIT_OK


def cmd_generate_recording(args) -> int:
    try:
        spec = RecordingSpec(
            total_rows=args.rows,
            n_stations=args.stations,
            tz_offset_min=args.tz_offset_min,
            intersection=(args.intersection_lat, args.intersection_lon),
            seed=args.seed,
        )
        records = generate_recording(spec)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fp:
        n = write_cam_log(records, fp)
    print(f"wrote {n} records to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _recording_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("recording", help="line-delimited CAM recording")
    p.add_argument("--intersection-lat", type=float, default=DEFAULT_INTERSECTION[0])
    p.add_argument("--intersection-lon", type=float, default=DEFAULT_INTERSECTION[1])
    p.add_argument("--relevance-radius-m", type=float, default=DEFAULT_RELEVANCE_RADIUS_M)
    p.add_argument("--gap-split-s", type=float, default=DEFAULT_GAP_SPLIT_S)
    p.add_argument("--tz-offset-min", type=int, default=DEFAULT_TZ_OFFSET_MIN,
                   help="local time offset from UTC for the occurrence matrix")
    p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsu-orchsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run scenario files and write event logs and latency reports")
    p.add_argument("scenarios", nargs="+", help="scenario YAML paths or bundled scenario names")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or ./out)")
    p.add_argument("--jobs", type=int, default=1, help="run independent scenario files in parallel")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="route classes and occurrence matrix of a CAM recording")
    _recording_args(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("dimension-geofence", help="distance a vehicle covers before the pipeline is ready")
    p.add_argument("--speed-kmh", type=float, required=True)
    p.add_argument("--e2e-s", type=float, required=True)
    p.add_argument("--planning-horizon-s", type=float, default=0.0)
    p.add_argument("--max-range-m", type=float, default=DEFAULT_MAX_RANGE_M)
    p.set_defaults(func=cmd_dimension_geofence)

    p = sub.add_parser("energy", help="avoidable energy of demand-driven operation from a CAM recording")
    _recording_args(p)
    p.add_argument("--power-w", type=float, default=45.0, help="additional power per unit while active")
    p.add_argument("--units", type=int, default=4)
    p.add_argument("--buffer-min", type=int, default=1)
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("generate-recording", help="write a seeded synthetic week-long CAM recording")
    p.add_argument("output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=RecordingSpec.total_rows)
    p.add_argument("--stations", type=int, default=RecordingSpec.n_stations)
    p.add_argument("--intersection-lat", type=float, default=DEFAULT_INTERSECTION[0])
    p.add_argument("--intersection-lon", type=float, default=DEFAULT_INTERSECTION[1])
    p.add_argument("--tz-offset-min", type=int, default=DEFAULT_TZ_OFFSET_MIN)
    p.set_defaults(func=cmd_generate_recording)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which matches the input-error code
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
