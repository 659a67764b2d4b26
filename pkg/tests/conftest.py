"""Shared fixtures. BLAS threading is pinned before numpy loads so timings
and results reflect a single CPU core."""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from pimoe.core import BatterySeries, ConditionTriple, CycleRecord


def make_cycle(
    cycle_index=1,
    capacity_mah=3000.0,
    condition=None,
    v_lo=3.0,
    v_hi=4.2,
    n_points=121,
    slope_mah_per_v=1000.0,
    current_a=1.75,
    relax_minutes=31.0,
    relax_v0=4.2,
    relax_drop=0.1,
    relax_tau_s=600.0,
):
    """A clean analytic cycle: linear q(V) charge curve, exponential rest decay."""
    condition = condition or ConditionTriple(0.5, 1.0, 25.0)
    v = np.linspace(v_lo, v_hi, n_points)
    q = slope_mah_per_v * (v - v_lo)
    t = q * 3.6 / current_a
    relax_t = np.arange(0.0, relax_minutes * 60.0 + 1.0, 5.0)
    relax_v = relax_v0 - relax_drop * (1.0 - np.exp(-relax_t / relax_tau_s))
    return CycleRecord(
        cycle_index=cycle_index,
        charge_t_s=t,
        charge_v=v,
        charge_i_a=np.full_like(v, current_a),
        charge_q_mah=q,
        relax_t_s=relax_t,
        relax_v=relax_v,
        max_discharge_capacity_mah=capacity_mah,
        condition=condition,
    )


def make_series(
    battery_id="b0",
    n_cycles=12,
    capacities=None,
    condition=None,
    nominal=3500.0,
    **cycle_kwargs,
):
    condition = condition or ConditionTriple(0.5, 1.0, 25.0)
    if capacities is None:
        capacities = 3200.0 - 10.0 * np.arange(n_cycles)
    cycles = [
        make_cycle(
            cycle_index=i + 1,
            capacity_mah=float(capacities[i]),
            condition=condition,
            **cycle_kwargs,
        )
        for i in range(len(capacities))
    ]
    return BatterySeries(
        battery_id=battery_id,
        chemistry="NCA",
        nominal_capacity_mah=nominal,
        cutoff_voltage_v=(2.65, 4.2),
        cycles=cycles,
    )


@pytest.fixture
def linear_cycle():
    return make_cycle()


@pytest.fixture
def small_series():
    return make_series()
