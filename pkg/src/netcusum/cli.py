"""Command-line client: ingestion, Phase-I baselines, calibration, simulation, monitoring.

Every compute subcommand builds the service request model and either runs
the handler in-process or, with ``--server URL``, posts it to a running
``netcusum serve`` instance.

Exit status: 0 success / no alarm, 2 alarm raised (``monitor``), 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import DEFAULT_BMAX, DEFAULT_HORIZON, TABLE_SHIFTS, emit_table, read_summaries
from .network import aggregate_log, read_snapshots, read_station_index, read_transactions, \
    write_snapshots
from .service import app as service
from .service.schemas import (BaselineRequest, CalibrateRequest, CalibrateResponse,
                              MonitorRequest, MonitorResponse, ScenarioModel, SimulateRequest,
                              SimulateResponse, Snapshot)
from .simgen import CONDITIONS, load_scenario

log = logging.getLogger("netcusum")

EXIT_OK, EXIT_ERROR, EXIT_ALARM = 0, 1, 2
CHART_CHOICES = ("WSCUSUM", "TCUSUM", "DTCUSUM", "DTCUSUM-n", "NEWMA")


class CliError(Exception):
    pass


def _remote(server: str, path: str, req, response_type):
    import httpx

    r = httpx.post(server.rstrip("/") + path, json=req.model_dump(mode="json"), timeout=None)
    if r.status_code >= 400:
        raise CliError(f"server returned {r.status_code}: {r.text}")
    return response_type.model_validate(r.json())


def _dispatch(args, path: str, req, handler, response_type):
    if getattr(args, "server", None):
        return _remote(args.server, path, req, response_type)
    return handler(req)


def _write(text: str, dest: str | None) -> None:
    if dest in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(dest).write_text(text)


def _matrix(text: str) -> list[list[float]]:
    p = Path(text)
    doc = json.loads(p.read_text() if p.exists() else text)
    arr = np.asarray(doc, dtype=np.float64)
    if arr.ndim != 2:
        raise CliError(f"expected a matrix, got shape {arr.shape}")
    return arr.tolist()


# ---------------------------------------------------------------------------
# scenarios

def _scenarios(args) -> list[tuple[ScenarioModel, float | None]]:
    """Resolve ``--scenario`` values: a totals pair ``N1,N2`` or a scenario JSON file."""
    out = []
    for item in args.scenario or ["100,100"]:
        if Path(item).is_file():
            cfg, shift = load_scenario(item)
            if args.condition and args.condition != cfg.condition:
                log.info("scenario file %s sets condition %s", item, cfg.condition)
            out.append((ScenarioModel(condition=cfg.condition, totals=cfg.initial_totals,
                                      mu11=cfg.true_mu11, mu22=cfg.true_mu22,
                                      noise_center=cfg.noise_center,
                                      seed=args.seed if args.seed is not None else cfg.seed),
                        shift))
            continue
        try:
            n1, n2 = (int(v) for v in item.split(","))
        except ValueError:
            raise CliError(f"--scenario {item!r} is neither 'N1,N2' nor a scenario file") \
                from None
        out.append((ScenarioModel(condition=args.condition or "II", totals=(n1, n2),
                                  noise_center=args.noise_center,
                                  seed=args.seed if args.seed is not None else 0), None))
    return out


def _charts(args) -> list[str]:
    names = []
    for item in args.chart or ["WSCUSUM"]:
        names += list(CHART_CHOICES) if item == "all" else [item]
    return list(dict.fromkeys(names))


def _run_options(args) -> dict:
    return dict(reps=args.reps, horizon=args.horizon, b_max=args.bmax, m=args.m,
                workers=args.workers, shared_baseline=args.shared_baseline)


# ---------------------------------------------------------------------------
# subcommands

def cmd_ingest(args) -> int:
    records = read_transactions(args.transactions)
    index = read_station_index(args.stations)
    snaps = aggregate_log(records, args.bucket_minutes, index,
                          day_window=(args.window[0], args.window[1]))
    if not snaps:
        raise CliError("no buckets in the requested window")
    if args.output in (None, "-"):
        write_snapshots(snaps, sys.stdout, bucket_minutes=args.bucket_minutes)
    else:
        write_snapshots(snaps, args.output, bucket_minutes=args.bucket_minutes)
    log.info("wrote %d snapshots (K=%d)", len(snaps), len(index))
    return EXIT_OK


def cmd_baseline(args) -> int:
    snaps, _ = read_snapshots(args.snapshots)
    K = snaps[0].K
    mu1 = np.full((K, K), 1.0 / K).tolist() if args.mu1 == "uniform" else _matrix(args.mu1)
    count_mu1 = None
    if args.with_counts:
        totals = np.mean([s.row_totals for s in snaps], axis=0)
        count_mu1 = (np.asarray(mu1) * totals[:, None]).tolist()
    req = BaselineRequest(snapshots=[Snapshot(t=s.t, counts=s.counts.tolist()) for s in snaps],
                          mu1=mu1, b_max=args.bmax, count_mu1=count_mu1)
    res = service.baselines(req)
    _write(json.dumps(res.bundle, indent=1) + "\n", args.output)
    for i, (k, g) in enumerate(zip(res.k_ref, res.gamma)):
        log.info("row %d: k=%.6g gamma=%s", i, k, np.array2string(np.asarray(g), precision=4))
    return EXIT_OK


def _calibrate_one(args, chart: str, scenario: ScenarioModel) -> CalibrateResponse:
    req = CalibrateRequest(chart=chart, scenario=scenario, target_arl0=args.arl0,
                           tolerance=args.tolerance, chi_form=args.chi_form,
                           **_run_options(args))
    return _dispatch(args, "/calibrate", req, service.calibrate, CalibrateResponse)


def cmd_calibrate(args) -> int:
    results = []
    for scenario, _ in _scenarios(args):
        for chart in _charts(args):
            res = _calibrate_one(args, chart, scenario)
            log.info("%s %s: limit=%.6g achieved ARL0=%.2f", chart, res.scenario, res.limit,
                     res.achieved_arl0)
            results.append(res.model_dump())
    _write(json.dumps(results if len(results) > 1 else results[0], indent=1) + "\n",
           args.output)
    return EXIT_OK


def _limits_from(path: str) -> dict[tuple[str, str], float]:
    doc = json.loads(Path(path).read_text())
    doc = doc if isinstance(doc, list) else [doc]
    return {(d["chart"], d["scenario"]): float(d["limit"]) for d in doc}


def cmd_simulate(args) -> int:
    known = _limits_from(args.limits) if args.limits else {}
    summaries = []
    for scenario, file_shift in _scenarios(args):
        shifts = args.shifts or ([file_shift] if file_shift is not None else list(TABLE_SHIFTS))
        digest = f"{scenario.condition}:({scenario.totals[0]},{scenario.totals[1]})"
        for chart in _charts(args):
            limit = args.limit if args.limit is not None else known.get((chart, digest))
            if limit is None:
                log.info("no limit for %s %s; calibrating first", chart, digest)
                limit = _calibrate_one(args, chart, scenario).limit
            req = SimulateRequest(chart=chart, scenario=scenario, limit=limit, shifts=shifts,
                                  chi_form=args.chi_form, **_run_options(args))
            res = _dispatch(args, "/simulate", req, service.simulate, SimulateResponse)
            summaries.extend(read_summaries(res.csv))
            for s in res.summaries:
                log.info("%s %s mu11=%g: ARL=%.2f SDRL=%.2f", chart, digest, s.mu11, s.arl,
                         s.sdrl)
    _write(emit_table(summaries, "long"), args.output)
    return EXIT_OK


def cmd_monitor(args) -> int:
    bundle = json.loads(Path(args.bundle).read_text())
    snaps, _ = read_snapshots(args.snapshots)
    req = MonitorRequest(bundle=bundle, chart=args.chart, limit=args.limit, lam=args.lam,
                         chi_form=args.chi_form,
                         snapshots=[Snapshot(t=s.t, counts=s.counts.tolist()) for s in snaps])
    res = _dispatch(args, "/monitor", req, service.run_monitor, MonitorResponse)
    if args.trace:
        lines = ["t,stat,alarm,spring"] + [f"{s.t},{s.stat!r},{int(s.alarm)},{s.spring}"
                                           for s in res.trace]
        _write("\n".join(lines) + "\n", args.trace)
    if res.first_alarm is None:
        print(f"no alarm ({res.steps} steps)")
        return EXIT_OK
    print(f"alarm at t={res.first_alarm}")
    return EXIT_ALARM


def cmd_report(args) -> int:
    summaries = []
    for path in args.summaries:
        summaries += read_summaries(Path(path).read_text())
    _write(emit_table(summaries, args.layout), args.output)
    return EXIT_OK


def cmd_serve(args) -> int:  # pragma: no cover - blocking
    import uvicorn

    uvicorn.run("netcusum.service.app:app", host=args.host, port=args.port)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chart", action="append", choices=CHART_CHOICES + ("all",),
                   help="chart to evaluate (repeatable, or 'all'; default WSCUSUM)")
    p.add_argument("--condition", choices=CONDITIONS, help="data-generating condition (default II)")
    p.add_argument("--scenario", action="append",
                   help="initial totals 'N1,N2' or a scenario JSON file (repeatable)")
    p.add_argument("--noise-center", choices=("previous", "mean"), default="previous")
    p.add_argument("--reps", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--horizon", type=int, default=DEFAULT_HORIZON)
    p.add_argument("--bmax", type=int, default=DEFAULT_BMAX)
    p.add_argument("--arl0", type=float, default=200.0, help="target in-control ARL")
    p.add_argument("--tolerance", type=float, default=0.02, help="relative calibration tolerance")
    p.add_argument("--m", type=int, default=1000, help="Phase-I sample size per replication")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--shared-baseline", action="store_true",
                   help="estimate one Phase-I baseline and reuse it in every replication")
    p.add_argument("--chi-form", action="store_true",
                   help="NEWMA: use sum_j p_ij/mu0_ij instead of the 1/n_i-scaled statistic")
    p.add_argument("--server", help="run on a netcusum service at this URL")
    p.add_argument("-o", "--output", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netcusum", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="transaction log -> snapshot CSV")
    p.add_argument("transactions")
    p.add_argument("--stations", required=True, help="station_id,matrix_index file")
    p.add_argument("--bucket-minutes", type=int, default=30)
    p.add_argument("--window", nargs=2, default=("06:00", "23:30"), metavar=("START", "END"))
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("baseline", help="IC snapshot CSV -> baseline bundle")
    p.add_argument("snapshots")
    p.add_argument("--mu1", default="uniform",
                   help="OC mean matrix as JSON (inline or file); default uniform rows")
    p.add_argument("--bmax", type=int, default=DEFAULT_BMAX)
    p.add_argument("--with-counts", action="store_true",
                   help="also estimate count-row baselines (needed by DTCUSUM-n)")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("calibrate", help="find the limit giving the target ARL0")
    _add_run_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="ARL/SDRL over a shift grid -> summary CSV")
    _add_run_flags(p)
    p.add_argument("--limit", type=float, help="control limit (h or L) for every chart")
    p.add_argument("--limits", help="calibration JSON written by 'calibrate'")
    p.add_argument("--shifts", type=lambda s: [float(v) for v in s.split(",")],
                   help="comma-separated mu11 values (default: the full table grid)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("monitor", help="replay a snapshot stream against a bundle")
    p.add_argument("snapshots")
    p.add_argument("--bundle", required=True)
    p.add_argument("--chart", choices=CHART_CHOICES, default="WSCUSUM")
    p.add_argument("--limit", type=float, required=True)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--chi-form", action="store_true")
    p.add_argument("--trace", help="write the t,stat,alarm,spring trace here ('-' for stdout)")
    p.add_argument("--server")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("report", help="summary CSVs -> ARL/SDRL table")
    p.add_argument("summaries", nargs="+")
    p.add_argument("--layout", choices=("wide", "long"), default="wide")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
