import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpatta.conformal import weighted_threshold
from cpatta.weighting import (
    W_MAX,
    W_MIN,
    WeightingInputError,
    WeightingStrategy,
    WeightState,
    calibration_weight,
    pseudo_coverage,
    update_weight,
)


class TestPseudoCoverage:
    def test_examples(self):
        assert pseudo_coverage([0, 1, 2, 0], [{0}, {1, 2}, {0}, {0, 1}]) == 0.75
        assert pseudo_coverage([0, 2, 1], [{0, 1, 2}] * 3) == 1.0
        assert pseudo_coverage([0, 2, 1], [set()] * 3) == 0.0

    def test_mask_form(self):
        mask = np.array([[True, False], [False, False], [True, True]])
        assert pseudo_coverage([0, 1, 1], mask) == pytest.approx(2 / 3)

    def test_errors(self):
        with pytest.raises(WeightingInputError):
            pseudo_coverage([], [])
        with pytest.raises(WeightingInputError):
            pseudo_coverage([0, 1], [{0}])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.sets(st.integers(0, 4))), min_size=1, max_size=30), st.randoms(use_true_random=False))
    def test_joint_permutation_invariance(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = pseudo_coverage([p[0] for p in pairs], [p[1] for p in pairs])
        b = pseudo_coverage([p[0] for p in shuffled], [p[1] for p in shuffled])
        assert a == pytest.approx(b)


class TestUpdateWeight:
    def test_examples(self):
        s = update_weight(WeightState(0.1), 0.8)
        assert s.t_acc == pytest.approx(1.105170918, abs=1e-9)
        assert s.w == pytest.approx(0.904837418, abs=1e-9)
        s = update_weight(WeightState(0.1), 0.9)
        assert s.t_acc == pytest.approx(1.0, abs=1e-15) and s.w == pytest.approx(1.0, abs=1e-15)
        s = update_weight(WeightState(0.1), 1.0)
        assert s.t_acc == pytest.approx(0.904837, abs=1e-6)
        assert s.w == pytest.approx(1.105171, abs=1e-6)

    def test_history_appended(self):
        s = update_weight(update_weight(WeightState(0.2), 0.5), 0.9)
        assert [h[0] for h in s.history] == [1, 2]
        assert s.history[-1][1:] == (0.9, s.w, s.t_acc)

    def test_rejects_bad_pc(self):
        for pc in (-0.1, 1.1, float("nan")):
            with pytest.raises(WeightingInputError):
                update_weight(WeightState(0.1), pc)

    def test_state_validation(self):
        with pytest.raises(WeightingInputError):
            WeightState(0.0)
        with pytest.raises(WeightingInputError):
            WeightState(0.1, w=0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=300), st.floats(0.05, 0.5))
    def test_positive_and_bounded(self, pcs, alpha):
        s = WeightState(alpha)
        for pc in pcs:
            s = update_weight(s, pc)
            assert W_MIN <= s.w <= W_MAX and s.t_acc > 0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=300), st.floats(0.05, 0.5))
    def test_product_recurrence_holds_even_when_clamped(self, pcs, alpha):
        s = WeightState(alpha)
        for pc in pcs:
            nxt = update_weight(s, pc)
            assert nxt.w * nxt.t_acc == pytest.approx(s.w, rel=1e-12)
            s = nxt

    def test_closed_form_small_deviations(self):
        rng = np.random.default_rng(1)
        alpha = 0.1
        pcs = (1 - alpha) + rng.uniform(-0.002, 0.002, 1000)
        s = WeightState(alpha)
        log_t = log_w = 0.0
        for pc in pcs:
            s = update_weight(s, pc)
            log_t += (1 - alpha) - pc
            log_w -= log_t
        assert s.t_acc == pytest.approx(math.exp(log_t), rel=1e-10)
        assert s.w == pytest.approx(math.exp(log_w), rel=1e-10)

    def test_under_coverage_shrinks_weight(self):
        s = WeightState(0.2)
        ws = []
        for pc in np.linspace(0.79, 0.5, 6):
            s = update_weight(s, float(pc))
            ws.append(s.w)
        assert all(a > b for a, b in zip(ws, ws[1:]))

    def test_over_coverage_grows_weight(self):
        s = WeightState(0.2, t_acc=0.9)
        ws = [s.w]
        for _ in range(6):
            s = update_weight(s, 0.95)
            ws.append(s.w)
        assert all(a < b for a, b in zip(ws, ws[1:]))

    def test_floor_reached_under_sustained_under_coverage(self):
        s = WeightState(0.1)
        for _ in range(100):
            s = update_weight(s, 0.0)
        assert s.w == W_MIN

    def test_under_coverage_widens_threshold(self):
        rng = np.random.default_rng(5)
        scores = rng.random(100)
        s = WeightState(0.2)
        taus = [weighted_threshold(scores, s.w, 0.2).tau]
        for pc in rng.uniform(0.3, 0.79, 15):
            s = update_weight(s, float(pc))
            taus.append(weighted_threshold(scores, s.w, 0.2).tau)
        assert all(a <= b for a, b in zip(taus, taus[1:]))


class TestCalibrationWeight:
    def test_examples(self):
        state = WeightState(0.1, w=0.9048)
        assert calibration_weight(WeightingStrategy("uniform"), state, 10) == 1.0
        assert calibration_weight(WeightingStrategy("adaptive"), state, 10) == 0.9048
        np.testing.assert_allclose(calibration_weight(WeightingStrategy("geometric_decay", 0.9), state, 3), [0.729, 0.81, 0.9])

    def test_validation(self):
        with pytest.raises(WeightingInputError):
            WeightingStrategy("geometric_decay", rho=1.0)
        with pytest.raises(WeightingInputError):
            WeightingStrategy("bogus")
        with pytest.raises(WeightingInputError):
            calibration_weight(WeightingStrategy("uniform"), None, 0)
