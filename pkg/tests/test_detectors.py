import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netcusum.baseline import BaselineSet, estimate_network_baselines
from netcusum.decorrelate import (DeviationBuffer, build_gamma_blocks, decorrelated_score,
                                  raw_score)
from netcusum.detectors import (CusumChart, Detector, NewmaChart, cusum_update, dtcusum_n_step,
                                dtcusum_step, make_chart, newma_step, spring_update,
                                tcusum_step, wscusum_step)
from netcusum.network import TransitionSnapshot, to_probability
from netcusum.simgen import ScenarioConfig, ScenarioGenerator, replication_rng

MU1 = np.full((2, 2), 0.5)


def phase_one(seed=0, condition="II", totals=(100, 100), m=400, b_max=4, noise_center="mean"):
    cfg = ScenarioConfig(condition, totals, noise_center=noise_center)
    gen = ScenarioGenerator(cfg, 1, replication_rng(seed, 0))
    ic = gen.run(m)[0]
    return gen, ic, estimate_network_baselines(ic, MU1, b_max)


def exact_rows(b_max=4, gamma=None):
    """Baselines with mu0 exactly at the IC mean matrix (for noise-free checks)."""
    _, _, rows = phase_one()
    for r, mu in zip(rows, ([0.45, 0.55], [0.95, 0.05])):
        r.mu0 = np.array(mu)
        d = r.mu1 - r.mu0
        r.k_ref = 0.5 * d[:1] @ r.sigma_red_inv @ d[:1]
        if gamma is not None:
            r.gamma = np.array(gamma, dtype=float)
    return rows


def zero_lag(rows):
    for r in rows:
        r.gamma = np.r_[r.gamma[0], np.zeros(r.B_max)]
    return rows


class ReferenceChart:
    """Literal single-stream transcription built only from the row-level primitives."""

    def __init__(self, name, rows):
        self.name, self.rows = name, rows
        self.global_spring = name == "WSCUSUM"
        self.decorrelate = name != "TCUSUM"
        K = len(rows)
        self.cp, self.cm, self.row_stat = np.zeros(K), np.zeros(K), np.zeros(K)
        self.buffers = [DeviationBuffer(r.B_max) for r in rows]
        self.spring = 0 if self.global_spring else [0] * K
        self.stat = 0.0

    def step(self, counts):
        snap = to_probability(TransitionSnapshot(0, counts))
        for i, r in enumerate(self.rows):
            if not snap.row_valid[i]:
                self.buffers[i].push(np.zeros(r.K))
                continue
            p = snap.probs[i]
            B = self.spring if self.global_spring else self.spring[i]
            if not self.decorrelate or B == 0:
                e = raw_score(p, r)
            else:
                e = decorrelated_score(p, self.buffers[i], build_gamma_blocks(r.gamma, B), r)
            cp, cm, two = cusum_update(self.cp[i], self.cm[i], e, r.k_ref)
            self.cp[i], self.cm[i], self.row_stat[i] = cp, cm, two
            self.buffers[i].push(p - r.mu0)
            if self.decorrelate and not self.global_spring:
                self.spring[i] = spring_update(self.spring[i], two, r.B_max)
        if self.name == "WSCUSUM":
            n = snap.row_totals
            if n.sum() > 0:
                self.stat = float(n @ self.row_stat / n.sum())
            self.spring = spring_update(self.spring, self.stat, self.rows[0].B_max)
        else:
            self.stat = float(self.row_stat.max())
        return self.stat


class TestPrimitives:
    def test_cusum_update_example(self):
        cp, cm, two = cusum_update(0.3, -0.2, 1.2, 0.5)
        assert cp == pytest.approx(1.0) and cm == 0 and two == pytest.approx(1.0)

    def test_cusum_decay(self):
        cp, cm, _ = cusum_update(0.3, -0.3, 0.0, 0.5)
        assert cp == 0 and cm == 0

    def test_cusum_drift_cancellation(self):
        cp, _, _ = cusum_update(0.7, 0.0, 0.5, 0.5)
        assert cp == pytest.approx(0.7)

    @pytest.mark.parametrize("prev, stat, expected", [(2, 0.5, 3), (4, 0.5, 4), (3, 0.0, 0),
                                                      (0, 1e-300, 1)])
    def test_spring_update(self, prev, stat, expected):
        assert spring_update(prev, stat, 4) == expected

    def test_spring_update_vectorized(self):
        out = spring_update(np.array([0, 3, 4, 2]), np.array([1.0, 1.0, 1.0, 0.0]), 4)
        assert out.tolist() == [1, 4, 4, 0]


class TestWscusum:
    def test_at_mean_forever(self):
        det = Detector("WSCUSUM", exact_rows(), limit=1e-9)
        for _ in range(50):
            stat, alarm = wscusum_step(det, np.array([[45, 55], [95, 5]]))
            assert stat == 0 and not alarm

    def test_weighted_mean_example(self):
        ch = CusumChart("WSCUSUM", BaselineSet.from_rows(exact_rows()))
        ch.c_plus[:] = [[2.0, 4.0]]
        ch.row_stat[:] = [[2.0, 4.0]]
        ch.base.k_ref[:] = 0.0
        ch.b_max = 0
        ch.step(np.array([[[45, 55], [95, 5]]]))
        assert ch.stat[0] == pytest.approx(3.0)

    def test_dimension_mismatch(self):
        det = Detector("WSCUSUM", exact_rows(), limit=1.0)
        with pytest.raises(ValueError):
            det.step(np.ones((3, 3), dtype=int))

    def test_invalid_row_weight_zero_and_carry_over(self):
        rows = exact_rows()
        ch = CusumChart("WSCUSUM", BaselineSet.from_rows(rows))
        ch.step(np.array([[[30, 70], [95, 5]]]))
        before = ch.row_stat[0].copy()
        ch.step(np.array([[[0, 0], [95, 5]]]))
        assert ch.row_stat[0, 0] == before[0]
        assert ch.stat[0] == pytest.approx(ch.row_stat[0, 1])
        s = ch.stat.copy()
        ch.step(np.zeros((1, 2, 2), dtype=int))
        assert ch.stat[0] == s[0]

    def test_reset_coupling(self):
        gen, _, rows = phase_one(seed=1)
        ch = CusumChart("WSCUSUM", BaselineSet.from_rows(rows))
        zero_seen = 0
        for _ in range(500):
            was_zero = ch.spring[0] == 0
            ch.step(gen.step())
            if was_zero:
                # the step after a reset scores the raw projection
                np.testing.assert_array_equal(ch.scores, ch.raw_scores)
            assert (ch.spring[0] == 0) == (ch.stat[0] == 0)
            zero_seen += int(ch.stat[0] == 0)
        assert zero_seen > 0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_convex_combination_bounds(self, seed):
        gen, _, rows = phase_one(seed=seed % 7, m=200)
        rng = np.random.default_rng(seed)
        ch = CusumChart("WSCUSUM", BaselineSet.from_rows(rows))
        for _ in range(100):
            counts = rng.multinomial(rng.integers(0, 50), [0.4, 0.6], size=2)[None]
            stat = ch.step(counts)[0]
            valid = counts[0].sum(axis=1) > 0
            if valid.any():
                assert ch.row_stat[0, valid].min() - 1e-12 <= stat
                assert stat <= ch.row_stat[0, valid].max() + 1e-12
            assert math.isfinite(stat) and stat >= 0


class TestReferenceEquivalence:
    @pytest.mark.parametrize("name", ["WSCUSUM", "DTCUSUM", "TCUSUM"])
    @pytest.mark.parametrize("seed", range(4))
    def test_vectorized_matches_loop(self, name, seed):
        gen, _, rows = phase_one(seed=seed, noise_center="previous")
        ref = ReferenceChart(name, rows)
        det = Detector(name, rows, limit=math.inf)
        rng = np.random.default_rng(seed)
        for t in range(400):
            counts = gen.step()[0]
            if t % 37 == 5:
                counts = counts.copy()
                counts[rng.integers(2)] = 0  # exercise invalid rows
            expected = ref.step(counts)
            got = det.step(counts).stat
            assert got == pytest.approx(expected, rel=1e-9, abs=1e-12)


class TestTcusum:
    def test_single_row_is_plain_cusum(self):
        rows = exact_rows()
        det = Detector("TCUSUM", rows, math.inf)
        rng = np.random.default_rng(4)
        cp = cm = 0.0
        for _ in range(200):
            c = np.array([rng.multinomial(100, [0.45, 0.55]), [95, 5]])
            stat, _ = tcusum_step(det, c)
            cp, cm, two = cusum_update(cp, cm, raw_score(c[0] / 100, rows[0]), rows[0].k_ref)
            assert stat == pytest.approx(max(two, 0.0), abs=1e-12)

    def test_noise_free_shift_grows_by_k(self):
        rows = exact_rows()
        det = Detector("TCUSUM", rows, math.inf)
        k = rows[0].k_ref
        for t in range(1, 10_001):
            stat, _ = tcusum_step(det, np.array([[50, 50], [95, 5]]))
        assert stat / 10_000 == pytest.approx(k, rel=1e-9)

    def test_wrong_wrapper(self):
        det = Detector("TCUSUM", exact_rows(), 1.0)
        with pytest.raises(ValueError):
            wscusum_step(det, np.array([[45, 55], [95, 5]]))


class TestDtcusum:
    def test_zero_lags_identical_to_tcusum(self):
        gen, _, rows = phase_one(seed=2, noise_center="previous")
        rows = zero_lag(rows)
        a, b = Detector("DTCUSUM", rows, math.inf), Detector("TCUSUM", rows, math.inf)
        for _ in range(500):
            c = gen.step()[0]
            assert dtcusum_step(a, c)[0] == tcusum_step(b, c)[0]

    def test_row_spring_resets(self):
        gen, _, rows = phase_one(seed=3)
        ch = CusumChart("DTCUSUM", BaselineSet.from_rows(rows))
        for _ in range(300):
            ch.step(gen.step())
            assert np.array_equal(ch.spring[0] == 0, ch.row_stat[0] == 0)

    def test_independent_rows_max(self):
        gen, _, rows = phase_one(seed=5)
        both = CusumChart("DTCUSUM", BaselineSet.from_rows(rows))
        for _ in range(200):
            c = gen.step()
            stat = both.step(c)[0]
            assert stat == both.row_stat[0].max()


def scaled_count_set(rows, n):
    base = BaselineSet.from_rows(rows)
    return BaselineSet(mu0=base.mu0 * n, direction=base.direction / n, k_ref=base.k_ref.copy(),
                       gamma=base.gamma * n ** 2, B_max=base.B_max, kind="count")


class TestDtcusumN:
    def test_matches_dtcusum_on_fixed_totals(self):
        gen, _, rows = phase_one(seed=6)
        prob = CusumChart("DTCUSUM", BaselineSet.from_rows(rows))
        count = CusumChart("DTCUSUM-n", scaled_count_set(rows, 100.0))
        for _ in range(300):
            c = gen.step()
            np.testing.assert_allclose(count.step(c), prob.step(c), rtol=1e-9, atol=1e-12)

    def test_at_mean_forever(self):
        rows = exact_rows()
        count = Detector.__new__(Detector)
        count.chart, count.name, count.limit, count.first_alarm = \
            CusumChart("DTCUSUM-n", scaled_count_set(rows, 100.0)), "DTCUSUM-n", 1e-9, None
        for _ in range(20):
            stat, alarm = dtcusum_n_step(count, np.array([[45, 55], [95, 5]]))
            assert stat == 0 and not alarm

    def test_zero_row_is_an_observation(self):
        rows = exact_rows()
        cs = scaled_count_set(rows, 100.0)
        ch = CusumChart("DTCUSUM-n", cs)
        ch.step(np.array([[[0, 0], [95, 5]]]))
        expected = (-cs.mu0[0, 0]) @ cs.direction[0, 0]
        assert ch.raw_scores[0, 0] == pytest.approx(expected)

    def test_needs_count_baselines(self):
        with pytest.raises(ValueError):
            make_chart("DTCUSUM-n", BaselineSet.from_rows(exact_rows()))
        with pytest.raises(ValueError):
            CusumChart("DTCUSUM-n", BaselineSet.from_rows(exact_rows()))


class TestNewma:
    def test_limit_factor(self):
        ch = NewmaChart(BaselineSet.from_rows(exact_rows()))
        assert ch.limit_factor(1) == pytest.approx(0.1, rel=1e-12)
        assert ch.limit_factor(10_000) == pytest.approx(math.sqrt(0.1 / 1.9), rel=1e-12)

    def test_ewma_recursion(self):
        ch = NewmaChart(BaselineSet.from_rows(exact_rows()), chi_form=True)
        ch.g[:] = 0.0
        c = np.array([[[60, 40], [90, 10]]])
        p = c[0] / 100
        mu0 = ch.base.mu0[0]
        u = (np.sum(p / mu0, axis=1) - 2) / np.sqrt(ch.spread[0] / 100)
        ch.step(c)
        np.testing.assert_allclose(ch.g[0], 0.1 * u, rtol=1e-12)
        assert ch.stat[0] == pytest.approx(np.abs(0.1 * u).max() / 0.1)

    def test_displayed_statistic(self):
        ch = NewmaChart(BaselineSet.from_rows(exact_rows()))
        c = np.array([[[60, 40], [90, 10]]])
        p, mu0 = c[0] / 100, ch.base.mu0[0]
        u = (np.sum(p / (mu0 * 100), axis=1) - 2) / np.sqrt(ch.spread[0] / 100)
        ch.step(c)
        np.testing.assert_allclose(ch.g[0], 0.1 * u, rtol=1e-12)

    def test_g_update_from_u(self):
        # G = (1 - lam) G + lam U with G_prev = 0 and U = 2 -> 0.2
        rows = exact_rows()
        ch = NewmaChart(BaselineSet.from_rows(rows), chi_form=True)
        sd = np.sqrt(ch.spread[0, 0] / 100)
        # choose p11 so that (p11/0.45 + (1-p11)/0.55 - 2) / sd = 2
        a = 1 / 0.45 - 1 / 0.55
        p11 = (2 * sd + 2 - 1 / 0.55) / a
        n11 = p11 * 100
        ch.base.mu0[0, 0] = [0.45, 0.55]
        # feed fractional evidence directly through the probability path
        ch.g[:] = 0
        p = np.array([[[n11, 100 - n11], [95, 5]]])
        ch.step(p)
        assert ch.g[0, 0] == pytest.approx(0.2, rel=1e-9)

    def test_zero_mean_rejected(self):
        rows = exact_rows()
        rows[1].mu0 = np.array([1.0, 0.0])
        with pytest.raises(ValueError, match="strictly positive"):
            NewmaChart(BaselineSet.from_rows(rows))

    def test_zero_row_carries_over(self):
        det = Detector("NEWMA", exact_rows(), 1e9, chi_form=True)
        newma_step(det, np.array([[60, 40], [90, 10]]))
        g, _ = newma_step(det, np.array([[0, 0], [90, 10]]))
        g_prev = det.chart.g[0, 0]
        assert g[0] == g_prev

    def test_alarm_when_any_row_exceeds(self):
        det = Detector("NEWMA", exact_rows(), 3.0, chi_form=True)
        _, alarm = newma_step(det, np.array([[10, 90], [95, 5]]))
        assert alarm


class TestInvariants:
    @pytest.mark.parametrize("name", ["WSCUSUM", "TCUSUM", "DTCUSUM", "NEWMA"])
    def test_finite_nonnegative(self, name):
        gen, _, rows = phase_one(seed=8, noise_center="previous")
        ch = make_chart(name, BaselineSet.from_rows(rows), chi_form=True)
        for _ in range(300):
            s = ch.step(gen.step())
            assert np.all(np.isfinite(s)) and np.all(s >= 0)

    @pytest.mark.parametrize("name", ["WSCUSUM", "TCUSUM", "DTCUSUM", "NEWMA"])
    def test_alarm_monotone_in_limit(self, name):
        gen, _, rows = phase_one(seed=9)
        stream = gen.run(400)[0]
        firsts = []
        for h in (0.5, 1.0, 2.0, 4.0, 8.0):
            det = Detector(name, rows, h, chi_form=True)
            for c in stream:
                det.step(c)
            firsts.append(det.first_alarm if det.first_alarm is not None else math.inf)
        assert firsts == sorted(firsts)

    def test_degeneration_scores_equal_raw(self):
        gen, _, rows = phase_one(seed=10, noise_center="previous")
        ch = CusumChart("WSCUSUM", BaselineSet.from_rows(zero_lag(rows)))
        for _ in range(300):
            ch.step(gen.step())
            np.testing.assert_array_equal(ch.scores, ch.raw_scores)
