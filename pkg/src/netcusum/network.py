"""Transition-count and transition-probability snapshots of a directed network.

A snapshot holds the K x K matrix of flows ``counts[i, j]`` (units moving from
node ``i`` to node ``j``) observed in one time bucket.  Rows are converted to
probability rows for monitoring; rows without any outgoing flow are flagged
rather than filled with invented probabilities.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

log = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y/%m/%d %H:%M"
TRANSACTION_HEADER = ("user_id", "timestamp", "txn_type", "in_station",
                      "out_station", "direction", "fare")


class DegenerateSnapshotError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TransitionSnapshot:
    t: int
    counts: np.ndarray
    timestamp: datetime | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"counts must be square, got shape {counts.shape}")
        if counts.shape[0] < 2:
            raise ValueError("a network needs at least two nodes")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise ValueError("counts must be finite and nonnegative")
        if not np.all(counts == np.floor(counts)):
            raise ValueError("counts must be integral")
        counts = counts.astype(np.int64)
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass(frozen=True, eq=False)
class ProbabilitySnapshot:
    t: int
    probs: np.ndarray
    row_totals: np.ndarray
    row_valid: np.ndarray

    @property
    def K(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class TransactionRecord:
    """One row of a smart-card transaction log.

    ``timestamp`` may be left as the raw string; :func:`aggregate_log` parses
    it and skips the record if it is malformed.
    """

    user_id: str
    timestamp: datetime | str
    txn_type: str
    in_station: str
    out_station: str
    direction: int = 0
    fare: float = 0.0


def to_probability(snapshot: TransitionSnapshot) -> ProbabilitySnapshot:
    """Row-normalize a transition snapshot.

    Rows with zero total are marked invalid and filled with zeros; callers
    must consult ``row_valid`` before using them.
    """
    counts = snapshot.counts.astype(np.float64)
    totals = snapshot.counts.sum(axis=1)
    valid = totals > 0
    probs = np.zeros_like(counts)
    probs[valid] = counts[valid] / totals[valid, None]
    for arr in (probs, totals, valid):
        arr.flags.writeable = False
    return ProbabilitySnapshot(t=snapshot.t, probs=probs, row_totals=totals, row_valid=valid)


def probability_rows(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`to_probability` over any leading axes of ``(..., K, K)`` counts.

    Returns ``(probs, totals, valid)``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=-1)
    valid = totals > 0
    safe = np.where(valid, totals, 1.0)
    probs = np.where(valid[..., None], counts / safe[..., None], 0.0)
    return probs, totals, valid


def row_weights(snapshot: TransitionSnapshot | np.ndarray) -> np.ndarray:
    """Share of the total outgoing flow carried by each node."""
    totals = snapshot.row_totals if isinstance(snapshot, TransitionSnapshot) \
        else np.asarray(snapshot, dtype=np.float64)
    grand = totals.sum()
    if grand <= 0:
        raise DegenerateSnapshotError("degenerate snapshot: no flow in any row")
    return totals / grand


# ---------------------------------------------------------------------------
# transaction log ingestion

def parse_timestamp(value: datetime | str) -> datetime:
    if isinstance(value, datetime):
        return value
    return datetime.strptime(value.strip(), TIMESTAMP_FORMAT)


def parse_clock(value: str | time) -> time:
    if isinstance(value, time):
        return value
    return datetime.strptime(value.strip(), "%H:%M").time()


@dataclass
class BucketGrid:
    """Half-open buckets ``[start, start + width)`` covering a daily window."""

    bucket_minutes: int
    start: time
    end: time
    days: list[date] = field(default_factory=list)

    def __post_init__(self):
        if self.bucket_minutes <= 0 or 60 % self.bucket_minutes:
            raise ValueError("bucket_minutes must divide 60")
        span = _minutes(self.end) - _minutes(self.start)
        if span < 0:
            raise ValueError("daily window ends before it starts")
        self.per_day = span // self.bucket_minutes

    def index(self, ts: datetime) -> int | None:
        """Global bucket index of ``ts`` or None when outside the grid."""
        try:
            day = self.days.index(ts.date())
        except ValueError:
            return None
        offset = _minutes(ts.time()) - _minutes(self.start)
        if offset < 0:
            return None
        b = offset // self.bucket_minutes
        if b >= self.per_day:
            return None
        return day * self.per_day + b

    def bucket_start(self, idx: int) -> datetime:
        day, b = divmod(idx, self.per_day)
        base = datetime.combine(self.days[day], self.start)
        return base + timedelta(minutes=b * self.bucket_minutes)

    def __len__(self) -> int:
        return self.per_day * len(self.days)


def _minutes(clock: time) -> int:
    return clock.hour * 60 + clock.minute


def aggregate_log(records: Iterable[TransactionRecord], bucket_minutes: int,
                  station_index: Mapping[str, int],
                  day_window: tuple[str | time, str | time] = ("06:00", "23:30"),
                  days: Sequence[date] | None = None,
                  skipped: Counter | None = None) -> list[TransitionSnapshot]:
    """Count station-to-station trips per time bucket.

    Only ``USE`` records contribute (``ENT`` rows carry no destination).  Every
    day in ``days`` (default: the days seen in the records) contributes one
    snapshot per bucket of the daily window, so quiet buckets appear as
    all-zero snapshots.  Records with unknown stations or unparseable
    timestamps are skipped and tallied in ``skipped``.
    """
    skipped = Counter() if skipped is None else skipped
    K = len(station_index)
    uses = []
    for rec in records:
        if rec.txn_type.strip().upper() != "USE":
            continue
        try:
            ts = parse_timestamp(rec.timestamp)
        except (ValueError, TypeError):
            skipped["bad_timestamp"] += 1
            continue
        src = station_index.get(str(rec.in_station).strip())
        dst = station_index.get(str(rec.out_station).strip())
        if src is None or dst is None:
            skipped["unknown_station"] += 1
            continue
        uses.append((ts, src, dst))

    if days is None:
        days = sorted({ts.date() for ts, _, _ in uses})
    grid = BucketGrid(bucket_minutes, parse_clock(day_window[0]), parse_clock(day_window[1]),
                      sorted(days))
    counts = np.zeros((len(grid), K, K), dtype=np.int64)
    for ts, src, dst in uses:
        idx = grid.index(ts)
        if idx is None:
            skipped["outside_window"] += 1
            continue
        counts[idx, src, dst] += 1
    if sum(skipped.values()):
        log.warning("aggregate_log skipped records: %s", dict(skipped))
    return [TransitionSnapshot(t=i, counts=counts[i], timestamp=grid.bucket_start(i))
            for i in range(len(grid))]


def read_transactions(source: str | Path | TextIO) -> list[TransactionRecord]:
    """Read a transaction-log CSV; timestamps are kept raw for later parsing."""
    with _open_text(source) as fh:
        reader = csv.DictReader(fh)
        missing = set(TRANSACTION_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"transaction log missing columns: {sorted(missing)}")
        out = []
        for row in reader:
            out.append(TransactionRecord(
                user_id=row["user_id"], timestamp=row["timestamp"], txn_type=row["txn_type"],
                in_station=row["in_station"], out_station=row["out_station"],
                direction=int(row["direction"] or 0), fare=float(row["fare"] or 0.0)))
    return out


def read_station_index(source: str | Path | TextIO) -> dict[str, int]:
    """Parse ``station_id,matrix_index`` lines into a bijection onto ``0..K-1``."""
    index: dict[str, int] = {}
    with _open_text(source) as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and not row[1].strip().lstrip("-").isdigit():
                continue  # header
            index[row[0].strip()] = int(row[1])
    if sorted(index.values()) != list(range(len(index))):
        raise ValueError("station index must map onto 0..K-1 without gaps or repeats")
    return index


# ---------------------------------------------------------------------------
# snapshot series CSV: "# K=..,bucket_minutes=..,t_first=..,t_last=.." then t,i,j,count

def write_snapshots(snapshots: Sequence[TransitionSnapshot], dest: str | Path | TextIO,
                    bucket_minutes: int = 30) -> None:
    if not snapshots:
        raise ValueError("no snapshots to write")
    K = snapshots[0].K
    ts = [s.t for s in snapshots]
    if ts != list(range(ts[0], ts[0] + len(ts))):
        raise ValueError("snapshot time indices must be consecutive")
    with _open_text(dest, "w") as fh:
        fh.write(f"# K={K},bucket_minutes={bucket_minutes},t_first={ts[0]},t_last={ts[-1]}\n")
        fh.write("t,i,j,count\n")
        for s in snapshots:
            if s.K != K:
                raise ValueError("all snapshots must share K")
            for i, j in zip(*np.nonzero(s.counts)):
                fh.write(f"{s.t},{i},{j},{s.counts[i, j]}\n")


def read_snapshots(source: str | Path | TextIO) -> tuple[list[TransitionSnapshot], dict]:
    """Inverse of :func:`write_snapshots`; returns ``(snapshots, metadata)``.

    Raises ValueError naming the offending line for malformed rows.
    """
    with _open_text(source) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("line 1: missing '# K=...' metadata line")
    meta = {}
    for item in lines[0].lstrip("#").split(","):
        key, _, value = item.strip().partition("=")
        meta[key] = int(value)
    K, t0, t1 = meta["K"], meta["t_first"], meta["t_last"]
    counts = np.zeros((t1 - t0 + 1, K, K), dtype=np.int64)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("t,"):
            continue
        try:
            t, i, j, c = (int(v) for v in line.split(","))
            if not (t0 <= t <= t1 and 0 <= i < K and 0 <= j < K and c >= 0):
                raise ValueError("out of range")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: malformed snapshot row {line!r} ({exc})") from None
        counts[t - t0, i, j] = c
    return [TransitionSnapshot(t=t0 + k, counts=counts[k]) for k in range(len(counts))], meta


def snapshots_to_array(snapshots: Sequence[TransitionSnapshot]) -> np.ndarray:
    return np.stack([s.counts for s in snapshots]) if snapshots else np.zeros((0, 2, 2), np.int64)


class _open_text:
    """Context manager accepting a path or an already-open text stream."""

    def __init__(self, source, mode="r"):
        self.source, self.mode, self.owned = source, mode, False

    def __enter__(self) -> TextIO:
        if isinstance(self.source, io.IOBase) or hasattr(self.source, "read") \
                or hasattr(self.source, "write"):
            return self.source
        self.fh = open(self.source, self.mode, newline="")
        self.owned = True
        return self.fh

    def __exit__(self, *exc):
        if self.owned:
            self.fh.close()
