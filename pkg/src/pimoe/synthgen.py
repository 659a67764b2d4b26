"""Deterministic synthetic battery fleets with known ground truth.

Capacity follows a three-phase envelope over an effective age: a square
root early-fade term, a linear middle term, and an exponential knee term.
Applied conditions scale how fast effective age accumulates, so harsher
schedules age cells faster. Each cycle's charge segment comes from a
monotone charge-versus-voltage template shifted by an age-dependent
polarization drop, and the rest segment is a two-exponential decay whose
amplitude grows with internal resistance. Every random draw is seeded per
(fleet seed, battery index), so generation is order-independent and
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import BatterySeries, ConditionTriple, CycleRecord, Dataset
from .errors import InvalidArgument


@dataclass(frozen=True)
class ChemistryProfile:
    name: str = "NCA"
    nominal_capacity_mah: float = 3500.0
    cutoff_voltage_v: tuple[float, float] = (2.65, 4.2)
    v_charge_lo: float = 3.1  # generator emits the charge segment from here to cutoff
    v_empty: float = 2.9
    v_full: float = 4.26  # open-circuit voltage of a brand-new full cell
    curvature: float = 0.35  # charge-fraction curve bend; > 0 keeps it convex


@dataclass(frozen=True)
class DegradationParams:
    early_coeff: float = 0.05
    linear_coeff: float = 0.12
    knee_coeff: float = 0.015
    knee_onset_age: float = 150.0
    knee_tau: float = 18.0
    charge_rate_exponent: float = 0.6
    discharge_rate_exponent: float = 0.3
    temp_doubling_c: float = 20.0
    ref_charge_c: float = 0.5
    ref_discharge_c: float = 1.0
    ref_temp_c: float = 25.0
    r0_ohm: float = 0.030
    r_growth: float = 1.2  # fractional resistance growth by knee onset

    def __post_init__(self):
        if min(self.early_coeff, self.linear_coeff, self.knee_coeff) < 0:
            raise InvalidArgument("degradation coefficients must be >= 0")
        if self.knee_onset_age <= 0:
            raise InvalidArgument("knee onset must lie within the simulated life")


@dataclass(frozen=True)
class ConditionSchedule:
    """fixed: one triple per battery, round-robin from ``conditions``.

    two_phase: a short conditioning phase, then either random charge rates
    redrawn every ``switch_every`` cycles or a fixed per-battery combo.
    """

    mode: str = "fixed"
    conditions: tuple[tuple[float, float, float], ...] = ((0.5, 1.0, 25.0),)
    phase1_cycles: int = 20
    phase1_condition: tuple[float, float, float] = (0.5, 2.0, 25.0)
    phase2_charge_rates: tuple[float, ...] = (1.0, 2.0, 3.0)
    phase2_discharge_c: float = 3.0
    switch_every: int = 5
    phase2_fixed: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.mode not in ("fixed", "two_phase"):
            raise InvalidArgument(f"unknown schedule mode {self.mode!r}")


@dataclass(frozen=True)
class SynthConfig:
    n_batteries: int = 12
    chemistry: ChemistryProfile = ChemistryProfile()
    degradation: DegradationParams = DegradationParams()
    schedule: ConditionSchedule = ConditionSchedule()
    cell_sigma: float = 0.08
    capacity_noise_mah: float = 0.0
    voltage_noise_v: float = 0.0
    max_cycles: int = 210
    eol_soh: float = 0.68
    relax_duration_s: float = 1860.0
    relax_step_s: float = 20.0
    charge_points: int = 140
    # When set, the recorded charge segment uses this diagnostic C-rate
    # every cycle (reference-performance style) while the schedule still
    # drives degradation; when None, each cycle is recorded at its own
    # applied charge rate.
    measurement_charge_c: float | None = None
    seed: int = 0
    id_prefix: str = "synth"

    def __post_init__(self):
        if self.seed is None:
            raise InvalidArgument("a seed is mandatory for reproducible fleets")
        if self.n_batteries < 1:
            raise InvalidArgument("need at least one battery")


@dataclass
class SynthFleet:
    dataset: Dataset
    stage_labels: dict[str, np.ndarray] = field(default_factory=dict)


STAGES = ("early", "mid", "late")
EARLY_AGE_FRACTION = 0.45


def _rate_multiplier(cond: ConditionTriple, deg: DegradationParams) -> float:
    return (
        (cond.charge_c_rate / deg.ref_charge_c) ** deg.charge_rate_exponent
        * (cond.discharge_c_rate / deg.ref_discharge_c) ** deg.discharge_rate_exponent
        * 2.0 ** ((cond.temperature_c - deg.ref_temp_c) / deg.temp_doubling_c)
    )


def _envelope(age: float, deg: DegradationParams, scale: float) -> float:
    a = age / deg.knee_onset_age
    fade = deg.early_coeff * scale * np.sqrt(a) + deg.linear_coeff * scale * a
    if age > deg.knee_onset_age:
        fade += deg.knee_coeff * np.expm1((age - deg.knee_onset_age) / deg.knee_tau)
    return 1.0 - fade


def _charge_fraction(v_ocv: np.ndarray, chem: ChemistryProfile) -> np.ndarray:
    """Normalized charge fraction versus open-circuit voltage (convex, monotone)."""
    u = np.clip((v_ocv - chem.v_empty) / (chem.v_full - chem.v_empty), 0.0, 1.0)
    w = chem.curvature
    return (1.0 - w) * u + w * u * u


def _battery_schedule(cfg: SynthConfig, index: int) -> list[ConditionTriple]:
    sch = cfg.schedule
    n = cfg.max_cycles
    if sch.mode == "fixed":
        c, d, t = sch.conditions[index % len(sch.conditions)]
        return [ConditionTriple(c, d, t)] * n
    out = [ConditionTriple(*sch.phase1_condition)] * min(sch.phase1_cycles, n)
    remaining = n - len(out)
    if remaining <= 0:
        return out
    _, _, temp = sch.phase1_condition
    if sch.phase2_fixed is not None:
        c, d = sch.phase2_fixed[index % len(sch.phase2_fixed)]
        out.extend([ConditionTriple(c, d, temp)] * remaining)
        return out
    rng = np.random.default_rng([cfg.seed, index, 7])
    block = 0
    current = None
    for _ in range(remaining):
        if block == 0:
            current = ConditionTriple(
                float(rng.choice(sch.phase2_charge_rates)), sch.phase2_discharge_c, temp
            )
            block = sch.switch_every
        out.append(current)
        block -= 1
    return out


def gen_battery(cfg: SynthConfig, index: int) -> tuple[BatterySeries, np.ndarray]:
    """One simulated cell plus its per-cycle stage labels."""
    chem, deg = cfg.chemistry, cfg.degradation
    cell_rng = np.random.default_rng([cfg.seed, index])
    noise_rng = np.random.default_rng([cfg.seed, index, 1])

    # Cell-to-cell variability: faster-fading cells also grow resistance
    # faster, so relaxation features carry a usable fingerprint of the rate.
    z = cell_rng.normal()
    scale = float(np.exp(cfg.cell_sigma * z))
    knee_onset = deg.knee_onset_age / np.sqrt(scale)
    r_growth = deg.r_growth * scale**0.8

    schedule = _battery_schedule(cfg, index)
    v_grid_base = np.linspace(chem.v_charge_lo, chem.cutoff_voltage_v[1], cfg.charge_points)
    local = replace(deg, knee_onset_age=knee_onset, r_growth=r_growth)

    cycles: list[CycleRecord] = []
    stages: list[str] = []
    age = 0.0
    for k, cond in enumerate(schedule):
        age += _rate_multiplier(cond, deg)
        soh = _envelope(age, local, scale)
        if soh < cfg.eol_soh:
            break

        meas_c = cfg.measurement_charge_c or cond.charge_c_rate
        i_amp = meas_c * chem.nominal_capacity_mah / 1000.0
        resistance = deg.r0_ohm * (1.0 + r_growth * age / knee_onset)
        pol = i_amp * resistance

        frac = _charge_fraction(v_grid_base - pol, chem)
        q = soh * chem.nominal_capacity_mah * (frac - frac[0])
        q = np.maximum.accumulate(q)
        t = q * 3.6 / i_amp
        v = v_grid_base.copy()
        if cfg.voltage_noise_v > 0:
            v = v + noise_rng.normal(0.0, cfg.voltage_noise_v, size=v.shape)
        current = np.full_like(v, i_amp)

        relax_t = np.arange(0.0, cfg.relax_duration_s + cfg.relax_step_s, cfg.relax_step_s)
        amplitude = pol * 1.6
        relax_v = chem.cutoff_voltage_v[1] - amplitude * (
            0.55 * (1.0 - np.exp(-relax_t / 90.0)) + 0.45 * (1.0 - np.exp(-relax_t / 700.0))
        )
        if cfg.voltage_noise_v > 0:
            relax_v = relax_v + noise_rng.normal(0.0, cfg.voltage_noise_v, size=relax_v.shape)

        cap = soh * chem.nominal_capacity_mah
        if cfg.capacity_noise_mah > 0:
            cap += noise_rng.normal(0.0, cfg.capacity_noise_mah)

        cycles.append(
            CycleRecord(
                cycle_index=k + 1,
                charge_t_s=t,
                charge_v=v,
                charge_i_a=current,
                charge_q_mah=q,
                relax_t_s=relax_t,
                relax_v=relax_v,
                max_discharge_capacity_mah=float(cap),
                condition=cond,
            )
        )
        if age >= knee_onset:
            stages.append("late")
        elif age >= EARLY_AGE_FRACTION * knee_onset:
            stages.append("mid")
        else:
            stages.append("early")

    series = BatterySeries(
        battery_id=f"{cfg.id_prefix}{index:03d}",
        chemistry=chem.name,
        nominal_capacity_mah=chem.nominal_capacity_mah,
        cutoff_voltage_v=chem.cutoff_voltage_v,
        cycles=cycles,
    )
    return series, np.array(stages)


def gen_fleet(cfg: SynthConfig) -> SynthFleet:
    batteries = []
    labels: dict[str, np.ndarray] = {}
    for i in range(cfg.n_batteries):
        b, stages = gen_battery(cfg, i)
        batteries.append(b)
        labels[b.battery_id] = stages
    tag = cfg.schedule.mode
    ds = Dataset(name=f"{cfg.id_prefix}-fleet", batteries=batteries, condition_tag=tag)
    return SynthFleet(dataset=ds, stage_labels=labels)


def tpsl_config(
    n_batteries: int = 12,
    seed: int = 0,
    max_cycles: int = 130,
    random_phase2: bool = True,
    switch_every: int = 5,
    **overrides,
) -> SynthConfig:
    """A second-life style fleet: 20 conditioning cycles, then harsher loads."""
    chem = ChemistryProfile(
        name="NCM",
        nominal_capacity_mah=2400.0,
        cutoff_voltage_v=(3.0, 4.2),
        v_charge_lo=3.2,
        v_empty=2.95,
        v_full=4.26,
    )
    schedule = ConditionSchedule(
        mode="two_phase",
        phase1_cycles=20,
        phase1_condition=(0.5, 2.0, 25.0),
        phase2_charge_rates=(1.0, 2.0, 3.0),
        phase2_discharge_c=3.0,
        switch_every=switch_every,
        phase2_fixed=None if random_phase2 else ((1.0, 2.0), (2.0, 2.0), (3.0, 2.0)),
    )
    return SynthConfig(
        n_batteries=n_batteries,
        chemistry=chem,
        schedule=schedule,
        max_cycles=max_cycles,
        seed=seed,
        id_prefix="tpsl",
        **overrides,
    )
