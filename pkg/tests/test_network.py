import io
import random
from collections import Counter
from datetime import date, datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from netcusum.network import (DegenerateSnapshotError, TransactionRecord, TransitionSnapshot,
                              aggregate_log, probability_rows, read_snapshots,
                              read_station_index, read_transactions, row_weights,
                              to_probability, write_snapshots)

SAMPLE_LOG = """user_id,timestamp,txn_type,in_station,out_station,direction,fare
900125532,2012/12/31 18:27,ENT,29,29,1,0
900125532,2012/12/31 18:47,USE,29,49,2,10.5
900125582,2012/12/31 18:18,ENT,27,27,1,0
900125582,2012/12/31 18:44,USE,27,48,2,10.5
900125585,2012/12/31 6:45,ENT,49,49,1,0
900125585,2012/12/31 7:24,USE,49,97,2,9.7
900125600,2012/12/31 19:07,ENT,6,6,1,0
900125600,2012/12/31 19:14,USE,6,18,2,4.9
900125603,2012/12/31 10:52,ENT,6,6,1,0
900125603,2012/12/31 11:02,USE,6,3,2,4.9
"""

IDENTITY_100 = {str(k): k for k in range(100)}

count_matrices = st.integers(2, 5).flatmap(
    lambda k: arrays(np.int64, (k, k), elements=st.integers(0, 10_000)))


def _record(ts, src, dst, kind="USE"):
    return TransactionRecord("u", ts, kind, str(src), str(dst))


class TestSnapshot:
    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            TransitionSnapshot(0, np.zeros((2, 3)))

    def test_rejects_negative_and_fractional(self):
        with pytest.raises(ValueError):
            TransitionSnapshot(0, np.array([[1, -1], [0, 0]]))
        with pytest.raises(ValueError):
            TransitionSnapshot(0, np.array([[1.5, 0], [0, 0]]))

    def test_rejects_single_node(self):
        with pytest.raises(ValueError):
            TransitionSnapshot(0, np.array([[3]]))

    def test_counts_are_read_only(self):
        s = TransitionSnapshot(0, np.array([[1, 2], [3, 4]]))
        with pytest.raises(ValueError):
            s.counts[0, 0] = 7


class TestToProbability:
    def test_ic_mean_matrix(self):
        p = to_probability(TransitionSnapshot(0, np.array([[45, 55], [95, 5]])))
        np.testing.assert_allclose(p.probs, [[0.45, 0.55], [0.95, 0.05]], rtol=0, atol=1e-15)
        assert p.row_totals.tolist() == [100, 100]
        assert p.row_valid.all()

    def test_zero_row_flagged(self):
        p = to_probability(TransitionSnapshot(0, np.array([[0, 0], [3, 1]])))
        assert p.row_valid.tolist() == [False, True]
        assert p.probs[0].tolist() == [0.0, 0.0]
        np.testing.assert_allclose(p.probs[1], [0.75, 0.25])

    def test_boundary_probability(self):
        p = to_probability(TransitionSnapshot(0, np.array([[100, 0], [1, 1]])))
        assert p.probs[0].tolist() == [1.0, 0.0]

    @given(count_matrices)
    def test_round_trip_recovers_counts(self, counts):
        p = to_probability(TransitionSnapshot(0, counts))
        back = np.rint(p.probs * p.row_totals[:, None]).astype(np.int64)
        assert np.array_equal(back[p.row_valid], counts[p.row_valid])
        assert np.all(counts[~p.row_valid] == 0)

    @given(count_matrices)
    def test_rows_stochastic(self, counts):
        p = to_probability(TransitionSnapshot(0, counts))
        assert np.all((p.probs >= 0) & (p.probs <= 1))
        np.testing.assert_allclose(p.probs[p.row_valid].sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.array_equal(p.row_valid, p.row_totals > 0)

    def test_vectorized_matches_single(self):
        rng = np.random.default_rng(0)
        stack = rng.integers(0, 4, size=(50, 3, 3))
        probs, totals, valid = probability_rows(stack)
        for k in range(50):
            one = to_probability(TransitionSnapshot(k, stack[k]))
            assert np.array_equal(one.probs, probs[k])
            assert np.array_equal(one.row_valid, valid[k])


class TestRowWeights:
    @pytest.mark.parametrize("totals, expected", [
        ((100, 300), (0.25, 0.75)),
        ((100, 100), (0.5, 0.5)),
        ((0, 50), (0.0, 1.0)),
    ])
    def test_examples(self, totals, expected):
        counts = np.diag(totals)
        np.testing.assert_allclose(row_weights(TransitionSnapshot(0, counts)), expected)

    def test_all_zero_is_degenerate(self):
        with pytest.raises(DegenerateSnapshotError, match="degenerate snapshot"):
            row_weights(TransitionSnapshot(0, np.zeros((2, 2))))

    @given(count_matrices)
    def test_probability_vector(self, counts):
        if counts.sum() == 0:
            return
        w = row_weights(TransitionSnapshot(0, counts))
        assert np.all(w >= 0)
        assert abs(w.sum() - 1) <= 1e-12


class TestAggregateLog:
    def test_sample_rows_bucket(self):
        recs = read_transactions(io.StringIO(SAMPLE_LOG))
        snaps = aggregate_log(recs, 30, IDENTITY_100)
        by_start = {s.timestamp: s for s in snaps}
        s = by_start[datetime(2012, 12, 31, 18, 30)]
        assert s.counts[29, 49] == 1 and s.counts[27, 48] == 1
        assert s.counts.sum() == 2
        # ENT rows never count
        assert sum(x.counts[29, 29] + x.counts[27, 27] for x in snaps) == 0
        assert sum(x.counts.sum() for x in snaps) == 5

    def test_grid_covers_window(self):
        snaps = aggregate_log(read_transactions(io.StringIO(SAMPLE_LOG)), 30, IDENTITY_100)
        assert len(snaps) == 35  # 06:00 .. 23:30 in half hours
        assert snaps[0].timestamp == datetime(2012, 12, 31, 6, 0)
        assert [s.t for s in snaps] == list(range(35))

    def test_boundary_is_half_open(self):
        snaps = aggregate_log([_record("2012/12/31 19:00", 1, 2)], 30, {"1": 0, "2": 1})
        hit = [s for s in snaps if s.counts.sum()]
        assert len(hit) == 1 and hit[0].timestamp == datetime(2012, 12, 31, 19, 0)

    def test_empty_stream(self):
        assert aggregate_log([], 30, {"a": 0, "b": 1}) == []
        snaps = aggregate_log([], 30, {"a": 0, "b": 1}, days=[date(2020, 1, 1)])
        assert len(snaps) == 35 and all(s.counts.sum() == 0 for s in snaps)
        assert aggregate_log([], 30, {"a": 0, "b": 1}, day_window=("08:00", "08:00"),
                             days=[date(2020, 1, 1)]) == []

    def test_skips_are_counted(self):
        skipped = Counter()
        recs = [_record("2012/12/31 08:00", 1, 9), _record("not a time", 1, 2),
                _record("2012/12/31 05:00", 1, 2), _record("2012/12/31 08:00", 1, 2)]
        snaps = aggregate_log(recs, 30, {"1": 0, "2": 1}, skipped=skipped)
        assert skipped == Counter(unknown_station=1, bad_timestamp=1, outside_window=1)
        assert sum(s.counts.sum() for s in snaps) == 1

    def test_diagonal_use_counted(self):
        snaps = aggregate_log([_record("2012/12/31 08:00", 1, 1)], 30, {"1": 0, "2": 1})
        assert sum(s.counts[0, 0] for s in snaps) == 1

    def test_bucket_must_divide_hour(self):
        with pytest.raises(ValueError):
            aggregate_log([_record("2012/12/31 08:00", 1, 2)], 7, {"1": 0, "2": 1})

    @settings(max_examples=25)
    @given(st.randoms(use_true_random=False))
    def test_permutation_invariant(self, rnd):
        recs = read_transactions(io.StringIO(SAMPLE_LOG))
        shuffled = list(recs)
        rnd.shuffle(shuffled)
        a = aggregate_log(recs, 30, IDENTITY_100)
        b = aggregate_log(shuffled, 30, IDENTITY_100)
        assert all(np.array_equal(x.counts, y.counts) for x, y in zip(a, b))

    def test_each_record_in_one_bucket(self):
        rng = random.Random(5)
        recs = [_record(f"2020/01/0{rng.randint(1, 3)} {rng.randint(6, 22):02d}:"
                        f"{rng.randint(0, 59):02d}", rng.randint(0, 3), rng.randint(0, 3))
                for _ in range(500)]
        snaps = aggregate_log(recs, 15, {str(k): k for k in range(4)})
        assert sum(s.counts.sum() for s in snaps) == 500


class TestFiles:
    def test_station_index_with_header(self):
        idx = read_station_index(io.StringIO("station_id,matrix_index\nA,1\nB,0\n"))
        assert idx == {"A": 1, "B": 0}

    def test_station_index_must_be_bijection(self):
        with pytest.raises(ValueError):
            read_station_index(io.StringIO("A,0\nB,2\n"))

    def test_transactions_missing_column(self):
        with pytest.raises(ValueError, match="missing columns"):
            read_transactions(io.StringIO("user_id,timestamp\n1,2012/12/31 18:00\n"))

    def test_snapshot_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        snaps = [TransitionSnapshot(t, rng.integers(0, 3, (3, 3))) for t in range(5, 25)]
        path = tmp_path / "s.csv"
        write_snapshots(snaps, path, bucket_minutes=15)
        back, meta = read_snapshots(path)
        assert meta == {"K": 3, "bucket_minutes": 15, "t_first": 5, "t_last": 24}
        assert [s.t for s in back] == [s.t for s in snaps]
        assert all(np.array_equal(a.counts, b.counts) for a, b in zip(snaps, back))
        buf = io.StringIO()
        write_snapshots(back, buf, bucket_minutes=15)
        assert buf.getvalue() == path.read_text()

    def test_zero_entries_omitted(self):
        buf = io.StringIO()
        write_snapshots([TransitionSnapshot(0, np.array([[0, 2], [0, 0]]))], buf)
        assert buf.getvalue().splitlines()[2:] == ["0,0,1,2"]

    @pytest.mark.parametrize("row", ["0,0,1", "0,5,0,1", "0,0,1,-3", "x,0,0,1"])
    def test_malformed_row_names_line(self, row):
        text = "# K=2,bucket_minutes=30,t_first=0,t_last=0\nt,i,j,count\n0,0,0,1\n" + row + "\n"
        with pytest.raises(ValueError, match="line 4"):
            read_snapshots(io.StringIO(text))

    def test_non_consecutive_rejected(self):
        snaps = [TransitionSnapshot(0, np.eye(2)), TransitionSnapshot(2, np.eye(2))]
        with pytest.raises(ValueError):
            write_snapshots(snaps, io.StringIO())
