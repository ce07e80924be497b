"""Run-length Monte Carlo, control-limit calibration and result tables.

Replications are grouped into fixed-size blocks; block ``b`` draws from its
own counter-based stream, so results depend only on ``(seed, block_size)``
and never on how many worker processes share the blocks.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .baseline import BaselineSet, estimate_baseline_set
from .detectors import CHARTS, DEFAULT_LAMBDA, Detector, make_chart
from .network import TransitionSnapshot
from .simgen import ScenarioConfig, ScenarioGenerator, inject_shift, replication_rng

log = logging.getLogger(__name__)

DEFAULT_M = 1000
DEFAULT_BMAX = 4
DEFAULT_HORIZON = 100_000
DEFAULT_BLOCK = 1000
SHARED_BASELINE_BLOCK = 2**31
TABLE_SHIFTS = (0.45, 0.449, 0.448, 0.447, 0.446, 0.445, 0.44, 0.435, 0.43, 0.425, 0.42, 0.415,
                0.41, 0.405, 0.40, 0.35, 0.30, 0.25, 0.20, 0.15, 0.10, 0.05)


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChartConfig:
    name: str
    b_max: int = DEFAULT_BMAX
    lam: float = DEFAULT_LAMBDA
    chi_form: bool = False

    def __post_init__(self):
        if self.name not in CHARTS:
            raise ValueError(f"chart must be one of {CHARTS}")


@dataclass
class RunLengthSummary:
    chart: str
    scenario: str
    mu11: float
    reps: int
    arl: float
    sdrl: float
    p5: float
    p50: float
    p95: float
    censored: int
    horizon: int
    limit: float = math.nan

    @property
    def quantiles(self) -> tuple[float, float, float]:
        return self.p5, self.p50, self.p95

    @property
    def std_error(self) -> float:
        return self.sdrl / math.sqrt(self.reps)

    @classmethod
    def from_run_lengths(cls, rl: np.ndarray, chart: str, scenario: str, mu11: float,
                         horizon: int, limit: float = math.nan) -> "RunLengthSummary":
        rl = np.asarray(rl, dtype=np.float64)
        censored = int(np.count_nonzero(rl > horizon))
        if censored > 0.001 * len(rl):
            log.warning("%s %s mu11=%g: %d of %d runs censored at horizon %d",
                        chart, scenario, mu11, censored, len(rl), horizon)
        sdrl = float(np.std(rl, ddof=1)) if len(rl) > 1 else 0.0
        p5, p50, p95 = (float(v) for v in np.percentile(rl, [5, 50, 95]))
        return cls(chart, scenario, float(mu11), len(rl), float(rl.mean()), sdrl, p5, p50, p95,
                   censored, horizon, float(limit))


@dataclass
class CalibrationResult:
    chart: str
    scenario: str
    limit: float
    achieved_arl0: float
    reps: int
    target_arl0: float
    history: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"chart": self.chart, "scenario": self.scenario, "limit": self.limit,
                "achieved_arl0": self.achieved_arl0, "reps": self.reps,
                "target_arl0": self.target_arl0, "history": self.history}


# ---------------------------------------------------------------------------
# one block of replications

def _phase_one(cfg: ScenarioConfig, gen: ScenarioGenerator, chart: ChartConfig, m: int,
               shared: tuple[BaselineSet, BaselineSet | None] | None):
    if shared is not None:
        gen.run(m)
        prob, count = shared
        R = gen.reps
        idx = np.zeros(R, dtype=np.int64)
        return prob.take(idx), (count.take(idx) if count is not None else None)
    ic = gen.run(m)
    prob = estimate_baseline_set(ic, np.array(cfg.oc_target), chart.b_max, kind="prob")
    count = None
    if chart.name == "DTCUSUM-n":
        mean_totals = ic.sum(axis=-1).mean(axis=1)  # (R, K)
        mu1 = np.array(cfg.oc_target)[None] * mean_totals[..., None]
        count = estimate_baseline_set(ic, mu1, chart.b_max, kind="count")
    return prob, count


def shared_baselines(cfg: ScenarioConfig, chart: ChartConfig, m: int, seed: int):
    gen = ScenarioGenerator(cfg, 1, replication_rng(seed, SHARED_BASELINE_BLOCK))
    return _phase_one(cfg, gen, chart, m, None)


def _start(chart: ChartConfig, cfg: ScenarioConfig, mu11: float | None, reps: int,
           rng: np.random.Generator, m: int, shared):
    gen = ScenarioGenerator(cfg, reps, rng)
    prob, count = _phase_one(cfg, gen, chart, m, shared)
    if mu11 is not None and mu11 != cfg.true_mu11:
        gen.apply(inject_shift(cfg, mu11))
    det = make_chart(chart.name, prob, count, lam=chart.lam, chi_form=chart.chi_form)
    return gen, det


def simulate_block(chart: ChartConfig, cfg: ScenarioConfig, mu11: float | None, limit: float,
                   reps: int, rng: np.random.Generator, horizon: int = DEFAULT_HORIZON,
                   m: int = DEFAULT_M, shared=None, compact: bool = True) -> np.ndarray:
    """Run lengths of ``reps`` replications (``horizon + 1`` when censored).

    Finished replications are periodically dropped from the lockstep state
    (``compact``).  Dropping changes how the block's random stream is shared
    out among the survivors, so results are reproducible for a given seed and
    block size but not identical to an uncompacted run.
    """
    gen, det = _start(chart, cfg, mu11, reps, rng, m, shared)
    rl = np.full(reps, horizon + 1, dtype=np.int64)
    alive = np.arange(reps)
    done = 0
    for t in range(1, horizon + 1):
        stat = det.step(gen.step())
        # finished replications ride along until the next compaction
        hit = (stat > limit) & (rl[alive] > horizon)
        if hit.any():
            rl[alive[hit]] = t
            done += int(hit.sum())
            if compact and done * 8 >= len(alive):
                keep = rl[alive] > horizon
                alive = alive[keep]
                if len(alive) == 0:
                    break
                gen.take(keep)
                det.compress(keep)
                done = 0
    return rl


@dataclass
class RecordSet:
    """Running-maximum records of monitoring statistics for a set of replications.

    ``run_lengths(h)`` is the first time each statistic exceeded ``h``; it is
    exact for ``h < ceiling`` and censored at ``horizon + 1`` otherwise.
    """

    reps: int
    horizon: int
    ceiling: float
    rep: np.ndarray
    t: np.ndarray
    value: np.ndarray

    def run_lengths(self, h: float) -> np.ndarray:
        rl = np.full(self.reps, self.horizon + 1, dtype=np.int64)
        mask = self.value > h
        np.minimum.at(rl, self.rep[mask], self.t[mask])
        return rl

    def arl(self, h: float) -> float:
        return float(self.run_lengths(h).mean())

    @staticmethod
    def merge(parts: Sequence["RecordSet"]) -> "RecordSet":
        offset, reps, t, value = 0, [], [], []
        for p in parts:
            reps.append(p.rep + offset)
            t.append(p.t)
            value.append(p.value)
            offset += p.reps
        return RecordSet(offset, parts[0].horizon, min(p.ceiling for p in parts),
                         np.concatenate(reps), np.concatenate(t), np.concatenate(value))


def record_block(chart: ChartConfig, cfg: ScenarioConfig, mu11: float | None, reps: int,
                 rng: np.random.Generator, horizon: int, ceiling: float = math.inf,
                 m: int = DEFAULT_M, shared=None, compact: bool = True) -> RecordSet:
    """Record running-maximum breaks until each statistic exceeds ``ceiling`` or the horizon."""
    gen, det = _start(chart, cfg, mu11, reps, rng, m, shared)
    running = np.full(reps, -math.inf)
    alive = np.arange(reps)
    out_rep, out_t, out_v = [], [], []
    retired = 0
    for t in range(1, horizon + 1):
        stat = det.step(gen.step())
        new = stat > running[alive]
        if new.any():
            idx = alive[new]
            running[idx] = stat[new]
            out_rep.append(idx)
            out_t.append(np.full(len(idx), t, dtype=np.int64))
            out_v.append(stat[new].copy())
            retired += int(np.count_nonzero(stat[new] > ceiling))
        if compact and retired and retired * 8 >= len(alive):
            keep = running[alive] <= ceiling
            alive = alive[keep]
            if len(alive) == 0:
                break
            gen.take(keep)
            det.compress(keep)
            retired = 0
    cat = (lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dt))
    return RecordSet(reps, horizon, ceiling, cat(out_rep, np.int64), cat(out_t, np.int64),
                     cat(out_v, np.float64))


# ---------------------------------------------------------------------------
# block scheduling

def _blocks(reps: int, block_size: int) -> list[tuple[int, int]]:
    return [(b, min(block_size, reps - b * block_size))
            for b in range(math.ceil(reps / block_size))]


def _run_block(args):
    kind, chart, cfg, mu11, seed, block, n, kwargs = args
    rng = replication_rng(seed, block)
    if kind == "rl":
        return simulate_block(chart, cfg, mu11, reps=n, rng=rng, **kwargs)
    return record_block(chart, cfg, mu11, reps=n, rng=rng, **kwargs)


def _map_blocks(kind, chart, cfg, mu11, reps, seed, workers, block_size, **kwargs):
    jobs = [(kind, chart, cfg, mu11, seed, b, n, kwargs) for b, n in _blocks(reps, block_size)]
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_block, jobs))
    return [_run_block(j) for j in jobs]


# ---------------------------------------------------------------------------
# public operations

def run_length(chart: ChartConfig | str, scenario: ScenarioConfig, limit: float,
               horizon: int = DEFAULT_HORIZON, rng: np.random.Generator | None = None,
               mu11: float | None = None, m: int = DEFAULT_M) -> int:
    """Run length of a single replication: fresh Phase I, then a (possibly shifted) stream."""
    chart = ChartConfig(chart) if isinstance(chart, str) else chart
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = replication_rng(scenario.seed, 0) if rng is None else rng
    return int(simulate_block(chart, scenario, mu11, limit, 1, rng, horizon=horizon, m=m)[0])


def arl_sdrl(chart: ChartConfig | str, scenario: ScenarioConfig, limit: float, reps: int,
             horizon: int = DEFAULT_HORIZON, mu11: float | None = None, seed: int | None = None,
             workers: int = 1, block_size: int = DEFAULT_BLOCK, m: int = DEFAULT_M,
             shared_baseline: bool = False) -> RunLengthSummary:
    """ARL and SDRL over ``reps`` independent replications."""
    chart = ChartConfig(chart) if isinstance(chart, str) else chart
    seed = scenario.seed if seed is None else seed
    shared = shared_baselines(scenario, chart, m, seed) if shared_baseline else None
    mu11 = scenario.true_mu11 if mu11 is None else mu11
    parts = _map_blocks("rl", chart, scenario, mu11, reps, seed, workers, block_size,
                        limit=limit, horizon=horizon, m=m, shared=shared)
    return RunLengthSummary.from_run_lengths(np.concatenate(parts), chart.name,
                                             scenario.digest(), mu11, horizon, limit)


def record_statistics(chart: ChartConfig, scenario: ScenarioConfig, reps: int, seed: int,
                      horizon: int, ceiling: float = math.inf, workers: int = 1,
                      block_size: int = DEFAULT_BLOCK, m: int = DEFAULT_M,
                      shared_baseline: bool = False) -> RecordSet:
    shared = shared_baselines(scenario, chart, m, seed) if shared_baseline else None
    parts = _map_blocks("rec", chart, scenario, None, reps, seed, workers, block_size,
                        horizon=horizon, ceiling=ceiling, m=m, shared=shared)
    return RecordSet.merge(parts)


def bracket_and_bisect(arl_of, target: float, tolerance: float, start: float = 1.0,
                       ceiling: float = math.inf, max_doublings: int = 60,
                       max_bisections: int = 200):
    """Find ``h`` with ``|arl_of(h) - target| <= tolerance * target``.

    ``arl_of`` must be nondecreasing in ``h``.  Returns ``(h, arl, history)``.
    Raises CalibrationError when no bracket exists below ``ceiling``.
    """
    history = []

    def probe(h):
        a = arl_of(h)
        history.append((float(h), float(a)))
        return a

    hi = start
    a_hi = probe(hi)
    for _ in range(max_doublings):
        if a_hi >= target:
            break
        if hi >= ceiling:
            raise CalibrationError(f"calibration diverged: ARL {a_hi:.2f} < {target} "
                                   f"at the recording ceiling {ceiling:g}")
        hi = min(2 * hi, ceiling)
        a_hi = probe(hi)
    else:
        raise CalibrationError("calibration diverged: no upper bracket after 60 doublings")
    lo = hi
    a_lo = a_hi
    for _ in range(max_doublings):
        if a_lo < target:
            break
        lo /= 2
        a_lo = probe(lo)
    else:
        if probe(0.0) >= target:
            raise CalibrationError("calibration diverged: statistic never exceeds any limit")
        lo, a_lo = 0.0, history[-1][1]
    best = min(((abs(a - target), h, a) for h, a in ((lo, a_lo), (hi, a_hi))))
    for _ in range(max_bisections):
        if best[0] <= tolerance * target:
            break
        mid = 0.5 * (lo + hi)
        a = probe(mid)
        if abs(a - target) < best[0]:
            best = (abs(a - target), mid, a)
        if a < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(hi, 1e-300):
            break
    return best[1], best[2], history


def calibrate_limit(chart: ChartConfig | str, scenario: ScenarioConfig, target_arl0: float = 200.0,
                    reps: int = 10_000, tolerance: float = 0.02, seed: int | None = None,
                    horizon: int = DEFAULT_HORIZON, workers: int = 1,
                    block_size: int = DEFAULT_BLOCK, m: int = DEFAULT_M,
                    pilot_reps: int = 1000, shared_baseline: bool = False) -> CalibrationResult:
    """Bisect the control limit so the in-control ARL hits ``target_arl0``.

    Every probe of the bisection reuses the same recorded replications
    (common random numbers).  A pilot run sizes a recording ceiling so the
    main run can retire replications once they pass it.
    """
    chart = ChartConfig(chart) if isinstance(chart, str) else chart
    if target_arl0 <= 1:
        raise ValueError("target ARL0 must exceed 1")
    seed = scenario.seed if seed is None else seed
    ic = scenario
    kw = dict(workers=workers, block_size=block_size, m=m, shared_baseline=shared_baseline)
    pilot_horizon = min(horizon, int(25 * target_arl0))
    pilot = record_statistics(chart, ic, min(pilot_reps, reps), seed + 7919, pilot_horizon, **kw)
    h_pilot, _, _ = bracket_and_bisect(pilot.arl, target_arl0, 0.05)
    ceiling = 1.5 * h_pilot if h_pilot > 0 else 1.0
    history: list = []
    for _ in range(8):
        records = record_statistics(chart, ic, reps, seed, horizon, ceiling=ceiling, **kw)
        try:
            h, achieved, hist = bracket_and_bisect(records.arl, target_arl0, tolerance,
                                                   start=h_pilot or 1.0, ceiling=ceiling)
        except CalibrationError:
            if records.arl(ceiling) >= target_arl0:
                raise
            ceiling *= 2
            continue
        history.extend(hist)
        return CalibrationResult(chart.name, ic.digest(), float(h), float(achieved), reps,
                                 target_arl0, history)
    raise CalibrationError("calibration diverged: recording ceiling kept growing")


# ---------------------------------------------------------------------------
# tables

SUMMARY_FIELDS = ("chart", "scenario", "mu11", "reps", "arl", "sdrl", "p5", "p50", "p95",
                  "censored", "horizon", "limit")


def write_summaries(summaries: Iterable[RunLengthSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for s in summaries:
        w.writerow([repr(v) if isinstance(v, float) else v
                    for v in (getattr(s, f) for f in SUMMARY_FIELDS)])
    return buf.getvalue()


def read_summaries(text: str) -> list[RunLengthSummary]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(RunLengthSummary(
            chart=row["chart"], scenario=row["scenario"], mu11=float(row["mu11"]),
            reps=int(row["reps"]), arl=float(row["arl"]), sdrl=float(row["sdrl"]),
            p5=float(row["p5"]), p50=float(row["p50"]), p95=float(row["p95"]),
            censored=int(row["censored"]), horizon=int(row["horizon"]),
            limit=float(row.get("limit") or "nan")))
    return out


def emit_table(summaries: Sequence[RunLengthSummary], layout: str = "wide") -> str:
    """CSV text: ``wide`` mirrors the ARL/SDRL tables, ``long`` is one row per cell."""
    if not summaries:
        raise ValueError("no summaries to tabulate")
    if layout == "long":
        return write_summaries(summaries)
    if layout != "wide":
        raise ValueError("layout must be 'wide' or 'long'")
    shifts = sorted({s.mu11 for s in summaries}, reverse=True)
    scenarios = list(dict.fromkeys(s.scenario for s in summaries))
    charts = [c for c in CHARTS if any(s.chart == c for s in summaries)]
    charts += [c for c in dict.fromkeys(s.chart for s in summaries) if c not in charts]
    cells = {(s.mu11, s.scenario, s.chart): s for s in summaries}
    missing = [f"mu11={mu} {sc} {ch}" for mu in shifts for sc in scenarios for ch in charts
               if (mu, sc, ch) not in cells]
    if missing:
        raise ValueError("ragged grid, missing cells: " + "; ".join(missing))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mu11"] + [f"{sc} {ch} {stat}" for sc in scenarios for ch in charts
                           for stat in ("ARL", "SDRL")])
    for mu in shifts:
        row = [f"{mu:g}"]
        for sc in scenarios:
            for ch in charts:
                s = cells[(mu, sc, ch)]
                row += [f"{s.arl:.2f}", f"{s.sdrl:.2f}"]
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# live monitoring

@dataclass
class MonitorReport:
    chart: str
    limit: float
    trace: list[tuple[int, float, bool, int]]
    first_alarm: int | None

    @property
    def steps(self) -> int:
        return len(self.trace)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "stat", "alarm", "spring"))
        for t, stat, alarm, spring in self.trace:
            w.writerow((t, repr(stat), int(alarm), spring))
        return buf.getvalue()


def monitor(rows, snapshots: Iterable[TransitionSnapshot], chart: str, limit: float,
            count_rows=(), lam: float = DEFAULT_LAMBDA, chi_form: bool = False) -> MonitorReport:
    """Replay a snapshot stream through one chart; trace every step, note the first alarm."""
    det = Detector(chart, rows, limit, count_rows=count_rows, lam=lam, chi_form=chi_form)
    trace = []
    first = None
    for snap in snapshots:
        if snap.K != det.chart.K:
            raise ValueError(f"snapshot t={snap.t} has K={snap.K}, bundle has K={det.chart.K}")
        res = det.step(snap)
        trace.append((snap.t, res.stat, res.alarm, res.spring))
        if res.alarm and first is None:
            first = snap.t
    return MonitorReport(chart, float(limit), trace, first)
