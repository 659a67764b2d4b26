"""Feature formulas against independent direct-sum oracles and closed forms."""

import numpy as np
import pytest

from pimoe.errors import InsufficientData, InvalidArgument, OutOfRange
from pimoe.features import (
    assemble_features,
    dv_at_dq,
    feature_names,
    q_at_dv,
    stat_features,
)
from pimoe.preprocess import build_charge_vector, sample_relaxation
from pimoe.synthgen import SynthConfig, gen_battery

from conftest import make_cycle


def oracle_stats(x):
    """Two-pass direct-summation reference, written from the formulas."""
    n = len(x)
    mean = sum(x) / n
    var = sum((v - mean) ** 2 for v in x) / (n - 1)
    if var == 0.0:
        skew = kurt = 0.0
    else:
        skew = sum(((v - mean) / var**0.5) ** 3 for v in x) / n
        kurt = sum(((v - mean) / var**0.5) ** 4 for v in x) / n - 3.0
    return max(x), mean, min(x), var, skew, kurt


class TestStatFeatures:
    def test_hand_case(self):
        got = stat_features(np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
        assert got[0] == 5.0 and got[1] == 3.0 and got[2] == 1.0
        assert got[3] == pytest.approx(2.5, abs=1e-12)
        assert got[4] == pytest.approx(0.0, abs=1e-12)
        assert got[5] == pytest.approx(-1.912, abs=1e-12)
        np.testing.assert_allclose(got, oracle_stats([1, 2, 3, 4, 5]), atol=1e-12)

    def test_constant_input_degenerate(self):
        got = stat_features(np.full(8, 3.3))
        assert got[3] == 0.0 and got[4] == 0.0 and got[5] == 0.0

    def test_symmetric_input_zero_skew(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            half = rng.normal(size=50)
            x = np.concatenate([half, -half])
            assert stat_features(x)[4] == pytest.approx(0.0, abs=1e-9)

    def test_matches_oracle_on_random_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            n = int(rng.integers(2, 10_000))
            x = rng.normal(loc=rng.uniform(-5, 5), scale=rng.uniform(0.1, 10), size=n)
            got = np.array(stat_features(x))
            want = np.array(oracle_stats(list(x)))
            err = np.abs(got - want) / np.maximum(1.0, np.abs(want))
            assert err.max() < 1e-12

    def test_too_short(self):
        with pytest.raises(InsufficientData):
            stat_features(np.array([1.0]))


class TestChargeWindows:
    def test_q_at_dv_linear_closed_form(self):
        c = make_cycle(v_lo=3.0, v_hi=4.2)  # q(V) = 1000 (V - 3.0)
        assert q_at_dv(c, 3.2, 0.05) == pytest.approx(50.0, abs=1e-9)

    def test_q_at_dv_zero_window(self, linear_cycle):
        assert q_at_dv(linear_cycle, 3.5, 0.0) == 0.0

    def test_q_at_dv_window_past_cutoff(self, linear_cycle):
        with pytest.raises(OutOfRange):
            q_at_dv(linear_cycle, 4.19, 0.05)

    def test_dv_at_dq_linear_closed_form(self):
        c = make_cycle(v_lo=3.0, v_hi=4.2)
        assert dv_at_dq(c, 3.1, 200.0) == pytest.approx(0.2, abs=1e-9)

    def test_dv_at_dq_zero(self, linear_cycle):
        assert dv_at_dq(linear_cycle, 3.4, 0.0) == 0.0

    def test_dv_at_dq_insufficient_charge(self, linear_cycle):
        with pytest.raises(OutOfRange):
            dv_at_dq(linear_cycle, 4.1, 200.0)

    def test_mutual_consistency_on_monotone_curves(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            c = make_cycle(slope_mah_per_v=float(rng.uniform(600, 4000)))
            v_start = float(rng.uniform(3.0, 3.9))
            dv = float(rng.uniform(0.01, 0.2))
            dq = q_at_dv(c, v_start, dv)
            assert dv_at_dq(c, v_start, dq) == pytest.approx(dv, abs=1e-9)


class TestAssemble:
    def _parts(self, cycle):
        q = build_charge_vector(cycle, 3.3, 50)
        relax = sample_relaxation(cycle, 30.0, 30)
        return q, relax

    def test_full_layout(self, linear_cycle):
        q, relax = self._parts(linear_cycle)
        f = assemble_features(linear_cycle, q, relax, mode="full12")
        assert f.shape == (12,)
        assert len(feature_names("full12")) == 12
        # relax stats occupy the first six slots
        np.testing.assert_allclose(f[:6], stat_features(relax.values_v), atol=1e-12)
        assert f[10] == pytest.approx(q_at_dv(linear_cycle, 3.3, 0.05), abs=1e-12)
        assert f[11] == pytest.approx(dv_at_dq(linear_cycle, 3.3, 200.0), abs=1e-12)

    def test_charge_only_drops_relax_block(self, linear_cycle):
        q, relax = self._parts(linear_cycle)
        full = assemble_features(linear_cycle, q, relax, mode="full12")
        short = assemble_features(linear_cycle, q, None, mode="charge_only6")
        assert short.shape == (6,)
        np.testing.assert_array_equal(short, full[6:])

    def test_mode_mismatch(self, linear_cycle):
        q, relax = self._parts(linear_cycle)
        with pytest.raises(InvalidArgument):
            assemble_features(linear_cycle, q, None, mode="full12")
        with pytest.raises(InvalidArgument):
            assemble_features(linear_cycle, q, relax, mode="charge_only6")

    def test_deterministic(self, linear_cycle):
        q, relax = self._parts(linear_cycle)
        a = assemble_features(linear_cycle, q, relax, mode="full12")
        b = assemble_features(linear_cycle, q, relax, mode="full12")
        np.testing.assert_array_equal(a, b)


class TestAgingTrend:
    def test_q_window_shrinks_as_battery_ages(self):
        # noise-free synthetic cell: the small-window charge must decline
        # monotonically over life when measured from a fixed start voltage
        series, _ = gen_battery(SynthConfig(n_batteries=1, seed=9, max_cycles=150), 0)
        values = [q_at_dv(c, 3.5, 0.05) for c in series.cycles]
        diffs = np.diff(values)
        assert np.all(diffs <= 1e-12)
        assert values[0] > values[-1]
