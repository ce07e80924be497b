"""Charting procedures as step-updatable state machines.

All charts are vectorized over a leading replication axis: ``step`` takes a
``(R, K, K)`` stack of transition counts and returns ``R`` statistics, so a
single live stream is just ``R = 1`` and a Monte Carlo study runs thousands
of independent streams in lockstep.

Charts
------
WSCUSUM    decorrelated row CUSUMs, one global spring length, weighted sum
TCUSUM     plain row CUSUMs, max over rows
DTCUSUM    decorrelated row CUSUMs, per-row spring lengths, max over rows
DTCUSUM-n  DTCUSUM on raw count rows
NEWMA      EWMA of standardized row statistics with time-varying limits
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baseline import BaselineSet, CountRowBaseline, RowBaseline
from .decorrelate import predictor_table
from .network import TransitionSnapshot, probability_rows

CHARTS = ("WSCUSUM", "TCUSUM", "DTCUSUM", "DTCUSUM-n", "NEWMA")
DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class CusumVariant:
    decorrelate: bool
    spring: str       # "global" or "row"
    combine: str      # "weighted" or "max"
    data: str         # "prob" or "count"


CUSUM_VARIANTS = {
    "WSCUSUM": CusumVariant(True, "global", "weighted", "prob"),
    "TCUSUM": CusumVariant(False, "row", "max", "prob"),
    "DTCUSUM": CusumVariant(True, "row", "max", "prob"),
    "DTCUSUM-n": CusumVariant(True, "row", "max", "count"),
}


def cusum_update(c_plus, c_minus, score, k_ref):
    """One two-sided CUSUM recursion; returns ``(c_plus, c_minus, two_sided)``."""
    c_plus = np.maximum(0.0, c_plus + score - k_ref)
    c_minus = np.minimum(0.0, c_minus + score + k_ref)
    return c_plus, c_minus, np.maximum(c_plus, -c_minus)


def spring_update(prev_B, stat, b_max: int):
    """Spring length grows by one (capped at ``b_max``) while the statistic is positive."""
    out = np.where(np.asarray(stat) > 0, np.minimum(b_max, np.asarray(prev_B) + 1), 0)
    return int(out) if out.ndim == 0 else out


class CusumChart:
    """Vectorized CUSUM-family chart (WSCUSUM, TCUSUM, DTCUSUM, DTCUSUM-n)."""

    def __init__(self, name: str, baselines: BaselineSet):
        if name not in CUSUM_VARIANTS:
            raise ValueError(f"unknown CUSUM chart {name!r}")
        self.name = name
        self.variant = CUSUM_VARIANTS[name]
        if baselines.kind != self.variant.data:
            raise ValueError(f"{name} needs {self.variant.data} baselines, got {baselines.kind}")
        self.base = baselines
        self.b_max = baselines.B_max if self.variant.decorrelate else 0
        self.coef, self.scale = predictor_table(baselines.gamma, self.b_max)
        R, K = baselines.reps, baselines.K
        self.c_plus = np.zeros((R, K))
        self.c_minus = np.zeros((R, K))
        self.row_stat = np.zeros((R, K))
        self.hist = np.zeros((R, K, self.b_max))
        self.spring = np.zeros(R if self.variant.spring == "global" else (R, K), dtype=np.int64)
        self.stat = np.zeros(R)
        self.raw_scores = np.zeros((R, K))
        self.scores = np.zeros((R, K))
        self.t = 0

    @property
    def K(self) -> int:
        return self.base.K

    def _scores(self, counts):
        if self.variant.data == "count":
            x = np.asarray(counts, dtype=np.float64)
            totals = x.sum(axis=-1)
            valid = np.ones(totals.shape, dtype=bool)
        else:
            x, totals, valid = probability_rows(counts)
        raw = np.einsum("rij,rij->ri", x - self.base.mu0, self.base.direction)
        raw = np.where(valid, raw, 0.0)
        if self.b_max == 0:
            return raw, raw, totals, valid
        B = self.spring if self.spring.ndim == 2 else \
            np.broadcast_to(self.spring[:, None], raw.shape)
        c = np.take_along_axis(self.coef, B[..., None, None], axis=2)[:, :, 0, :]
        s = np.take_along_axis(self.scale, B[..., None], axis=2)[..., 0]
        pred = np.einsum("rkl,rkl->rk", c, self.hist)
        score = np.where(B > 0, (raw - pred) / s, raw)
        return raw, score, totals, valid

    def step(self, counts) -> np.ndarray:
        counts = np.asarray(counts)
        if counts.shape[-2:] != (self.K, self.K):
            raise ValueError(f"snapshot is {counts.shape[-2:]} but baselines are K={self.K}")
        counts = np.broadcast_to(counts, (self.c_plus.shape[0], self.K, self.K))
        raw, score, totals, valid = self._scores(counts)
        cp, cm, two = cusum_update(self.c_plus, self.c_minus, score, self.base.k_ref)
        self.c_plus = np.where(valid, cp, self.c_plus)
        self.c_minus = np.where(valid, cm, self.c_minus)
        self.row_stat = np.where(valid, two, self.row_stat)
        if self.variant.combine == "weighted":
            grand = totals.sum(axis=1)
            live = grand > 0
            w = totals / np.where(live, grand, 1.0)[:, None]
            self.stat = np.where(live, np.einsum("rk,rk->r", w, self.row_stat), self.stat)
        else:
            self.stat = self.row_stat.max(axis=1)
        if self.b_max:
            if self.variant.spring == "global":
                self.spring = spring_update(self.spring, self.stat, self.b_max)
            else:
                self.spring = np.where(valid, spring_update(self.spring, self.row_stat, self.b_max),
                                       self.spring)
            self.hist[..., 1:] = self.hist[..., :-1]
            self.hist[..., 0] = raw
        self.raw_scores, self.scores = raw, score
        self.t += 1
        return self.stat

    @property
    def spring_summary(self) -> np.ndarray:
        return self.spring if self.spring.ndim == 1 else self.spring.max(axis=1)

    def compress(self, keep: np.ndarray) -> None:
        """Drop finished replications (boolean or index mask over R)."""
        self.base = self.base.take(keep)
        for name in ("coef", "scale", "c_plus", "c_minus", "row_stat", "hist", "spring", "stat",
                     "raw_scores", "scores"):
            setattr(self, name, getattr(self, name)[keep])


class NewmaChart:
    """EWMA of standardized row statistics.

    ``stat`` is ``max_i |G_i| / c_t`` with ``c_t = sqrt(lam/(2-lam) (1-(1-lam)^(2t)))``
    so that an alarm is ``stat > L``.  ``chi_form=True`` switches the row
    statistic from ``sum_j p_ij / (mu0_ij n_i)`` to ``sum_j p_ij / mu0_ij``.
    """

    name = "NEWMA"

    def __init__(self, baselines: BaselineSet, lam: float = DEFAULT_LAMBDA,
                 chi_form: bool = False):
        if not 0 < lam <= 1:
            raise ValueError("lambda must lie in (0, 1]")
        mu0 = baselines.mu0
        if np.any(mu0 <= 0):
            raise ValueError("NEWMA requires strictly positive IC means")
        self.base = baselines
        self.lam, self.chi_form = lam, chi_form
        K = baselines.K
        self.spread = np.sum((1.0 - mu0) / mu0, axis=-1) - K * (K - 1)
        self.g = np.zeros(mu0.shape[:2])
        self.stat = np.zeros(mu0.shape[0])
        self.spring = np.zeros(mu0.shape[0], dtype=np.int64)
        self.t = 0

    @property
    def K(self) -> int:
        return self.base.K

    def limit_factor(self, t: int) -> float:
        lam = self.lam
        return float(np.sqrt(lam / (2 - lam) * (1 - (1 - lam) ** (2 * t))))

    def step(self, counts) -> np.ndarray:
        counts = np.asarray(counts)
        if counts.shape[-2:] != (self.K, self.K):
            raise ValueError(f"snapshot is {counts.shape[-2:]} but baselines are K={self.K}")
        p, n, valid = probability_rows(np.broadcast_to(counts, self.base.mu0.shape))
        mu0 = self.base.mu0
        safe_n = np.where(valid, n, 1.0)
        if self.chi_form:
            s = np.sum(p / mu0, axis=-1) - self.K
        else:
            s = np.sum(p / (mu0 * safe_n[..., None]), axis=-1) - self.K
        var = self.spread / safe_n
        ok = valid & (var > 0)
        u = np.where(ok, s / np.sqrt(np.where(ok, var, 1.0)), 0.0)
        self.g = np.where(valid, (1 - self.lam) * self.g + self.lam * u, self.g)
        self.t += 1
        self.stat = np.abs(self.g).max(axis=1) / self.limit_factor(self.t)
        return self.stat

    @property
    def spring_summary(self) -> np.ndarray:
        return self.spring

    def compress(self, keep: np.ndarray) -> None:
        self.base = self.base.take(keep)
        for name in ("spread", "g", "stat", "spring"):
            setattr(self, name, getattr(self, name)[keep])


def make_chart(name: str, baselines: BaselineSet, count_baselines: BaselineSet | None = None,
               lam: float = DEFAULT_LAMBDA, chi_form: bool = False):
    if name == "NEWMA":
        return NewmaChart(baselines, lam=lam, chi_form=chi_form)
    if name == "DTCUSUM-n":
        if count_baselines is None:
            raise ValueError("DTCUSUM-n needs count baselines")
        return CusumChart(name, count_baselines)
    return CusumChart(name, baselines)


# ---------------------------------------------------------------------------
# single-stream interface

@dataclass
class StepResult:
    t: int
    stat: float
    alarm: bool
    spring: int


class Detector:
    """One live stream monitored by one chart against a fixed limit (``h`` or ``L``)."""

    def __init__(self, chart: str, rows: Sequence[RowBaseline], limit: float,
                 count_rows: Sequence[CountRowBaseline] = (), lam: float = DEFAULT_LAMBDA,
                 chi_form: bool = False):
        counts = BaselineSet.from_rows(count_rows) if count_rows else None
        self.chart = make_chart(chart, BaselineSet.from_rows(rows), counts, lam=lam,
                                chi_form=chi_form)
        self.name = chart
        self.limit = float(limit)
        self.first_alarm: int | None = None

    def step(self, snapshot: TransitionSnapshot | np.ndarray) -> StepResult:
        counts = snapshot.counts if isinstance(snapshot, TransitionSnapshot) else snapshot
        stat = float(self.chart.step(np.asarray(counts)[None])[0])
        alarm = stat > self.limit
        t = self.chart.t
        if alarm and self.first_alarm is None:
            self.first_alarm = t
        return StepResult(t=t, stat=stat, alarm=alarm, spring=int(self.chart.spring_summary[0]))

    @property
    def row_statistics(self) -> np.ndarray:
        if isinstance(self.chart, NewmaChart):
            return self.chart.g[0].copy()
        return self.chart.row_stat[0].copy()


def _single_step(name: str, detector: Detector, snapshot, h: float | None):
    if detector.name != name:
        raise ValueError(f"detector runs {detector.name}, not {name}")
    if h is not None:
        detector.limit = float(h)
    res = detector.step(snapshot)
    return res.stat, res.alarm


def wscusum_step(detector: Detector, snapshot, h: float | None = None):
    return _single_step("WSCUSUM", detector, snapshot, h)


def tcusum_step(detector: Detector, snapshot, h: float | None = None):
    return _single_step("TCUSUM", detector, snapshot, h)


def dtcusum_step(detector: Detector, snapshot, h: float | None = None):
    return _single_step("DTCUSUM", detector, snapshot, h)


def dtcusum_n_step(detector: Detector, snapshot, h: float | None = None):
    return _single_step("DTCUSUM-n", detector, snapshot, h)


def newma_step(detector: Detector, snapshot, L: float | None = None):
    """Returns the EWMA vector ``G_t`` and the alarm flag."""
    _, alarm = _single_step("NEWMA", detector, snapshot, L)
    return detector.chart.g[0].copy(), alarm
