"""Cycle cleaning, curve resampling, and sliding-window sample assembly.

All functions are pure. Per-sample randomness (the random start-of-charge
policy) is derived from (seed, battery_id, cycle_index) so results do not
depend on iteration order.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .core import BatterySeries, CycleRecord
from .errors import (
    HorizonTooLong,
    InsufficientData,
    InsufficientRelaxation,
    InvalidArgument,
    MalformedCycle,
    NotFitted,
    OutOfRange,
)

CAPACITY_DEVIATION_MAH = 200.0
CURRENT_FLUCTUATION_TOL = 0.05


# ---------------------------------------------------------------------------
# charge-curve repair
# ---------------------------------------------------------------------------


def monotone_charge_curve(c: CycleRecord) -> tuple[np.ndarray, np.ndarray]:
    """Return (voltage, cumulative mAh) with strictly increasing voltage.

    Points below the running voltage maximum (sensor jitter) are dropped;
    among points at an identical voltage the last one is kept, since charge
    keeps accumulating while the reading is flat.
    """
    v, q = c.charge_v, c.charge_q_mah
    if len(v) < 2:
        raise MalformedCycle(f"cycle {c.cycle_index}: charge segment has fewer than 2 points")
    keep = v >= np.maximum.accumulate(v)
    v, q = v[keep], q[keep]
    # collapse duplicate voltages, keeping the last occurrence
    last = np.ones(len(v), dtype=bool)
    last[:-1] = v[1:] > v[:-1]
    v, q = v[last], q[last]
    if len(v) < 2:
        raise MalformedCycle(f"cycle {c.cycle_index}: charge curve collapses under cleanup")
    return v, q


def charge_at_voltage(v_grid: np.ndarray, q_grid: np.ndarray, v: float) -> float:
    """Linear interpolation of cumulative charge at a voltage."""
    if v < v_grid[0] or v > v_grid[-1]:
        raise OutOfRange(f"voltage {v:.4f} V outside measured range "
                         f"[{v_grid[0]:.4f}, {v_grid[-1]:.4f}]")
    return float(np.interp(v, v_grid, q_grid))


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RemovalRecord:
    cycle_index: int
    rule: str
    detail: str


@dataclass
class CleanResult:
    series: BatterySeries
    removed: list[RemovalRecord]


def _flag_capacity_outliers(cycles: list[CycleRecord]) -> list[int]:
    caps = np.array([c.max_discharge_capacity_mah for c in cycles])
    flagged = []
    for i in range(1, len(caps) - 1):
        if (
            abs(caps[i] - caps[i - 1]) > CAPACITY_DEVIATION_MAH
            and abs(caps[i] - caps[i + 1]) > CAPACITY_DEVIATION_MAH
        ):
            flagged.append(i)
    return flagged


def clean_cycles(b: BatterySeries, current_tol: float = CURRENT_FLUCTUATION_TOL) -> CleanResult:
    """Remove anomalous cycles and re-index the survivors contiguously.

    Three removal rules: capacity deviating more than 200 mAh from both
    neighbors, zero charge-phase capacity change, and abnormal current
    fluctuation within the constant-current portion (relative std above
    ``current_tol``). The neighbor rule is iterated to a fixed point so the
    whole operation is idempotent.
    """
    if len(b.cycles) < 3:
        raise InsufficientData(
            f"{b.battery_id}: need at least 3 cycles to clean, have {len(b.cycles)}"
        )

    removed: list[RemovalRecord] = []
    kept = list(b.cycles)

    def flag(c: CycleRecord, rule: str, detail: str):
        removed.append(RemovalRecord(c.cycle_index, rule, detail))

    survivors = []
    for c in kept:
        dq = float(c.charge_q_mah[-1] - c.charge_q_mah[0]) if len(c.charge_q_mah) else 0.0
        if dq <= 0:
            flag(c, "zero_charge_delta", f"charge-phase capacity change {dq:.3f} mAh")
            continue
        i_abs = np.abs(c.charge_i_a)
        cc = i_abs >= 0.5 * i_abs.max() if len(i_abs) else np.zeros(0, dtype=bool)
        if cc.sum() >= 2:
            i_cc = i_abs[cc]
            rel = float(np.std(i_cc) / np.mean(i_cc))
            if rel > current_tol:
                flag(c, "current_fluctuation", f"relative std {rel:.4f} in CC segment")
                continue
        survivors.append(c)
    kept = survivors

    while True:
        idx = _flag_capacity_outliers(kept)
        if not idx:
            break
        for i in idx:
            flag(
                kept[i],
                "capacity_deviation",
                f"deviates > {CAPACITY_DEVIATION_MAH:.0f} mAh from both neighbors",
            )
        kept = [c for i, c in enumerate(kept) if i not in set(idx)]

    reindexed = [replace(c, cycle_index=i + 1) for i, c in enumerate(kept)]
    series = replace(b, cycles=reindexed)
    return CleanResult(series=series, removed=removed)


# ---------------------------------------------------------------------------
# curve resampling
# ---------------------------------------------------------------------------


@dataclass
class ChargeVector:
    """Cumulative charge resampled on an even voltage grid.

    ``values_mah`` holds n_segments + 1 grid values including the leading
    zero at v_start. The model-facing view drops that constant zero, so the
    default 50 segments feed a 50-wide predictor input.
    """

    values_mah: np.ndarray
    v_start_v: float
    v_end_v: float

    @property
    def n_segments(self) -> int:
        return len(self.values_mah) - 1

    def model_values(self) -> np.ndarray:
        return self.values_mah[1:]


def build_charge_vector(c: CycleRecord, v_start: float, n: int = 50) -> ChargeVector:
    """Resample cumulative charge at n even voltage increments up to cutoff.

    values[i] is the charge accumulated between v_start and
    v_start + i * (v_end - v_start) / n, linearly interpolated in voltage.
    """
    if n < 1:
        raise InvalidArgument(f"need at least 1 voltage segment, got {n}")
    v_grid, q_grid = monotone_charge_curve(c)
    v_end = float(v_grid[-1])
    if v_start < v_grid[0] or v_start >= v_end:
        raise OutOfRange(
            f"v_start {v_start:.4f} V outside curve range [{v_grid[0]:.4f}, {v_end:.4f})"
        )
    targets = v_start + (v_end - v_start) * np.arange(n + 1) / n
    q = np.interp(targets, v_grid, q_grid)
    q0 = q[0]
    values = q - q0
    values = np.maximum.accumulate(values)  # guard tiny interpolation wiggles
    return ChargeVector(values_mah=values, v_start_v=float(v_start), v_end_v=v_end)


@dataclass
class RelaxVector:
    """Open-circuit voltage sampled over the post-charge rest window."""

    values_v: np.ndarray
    window_min: float


def sample_relaxation(c: CycleRecord, window_min: float = 30.0, m: int = 30) -> RelaxVector:
    """m evenly spaced voltage readings over [0, window_min] minutes."""
    if m < 2:
        raise InvalidArgument(f"need at least 2 relaxation samples, got {m}")
    if len(c.relax_t_s) < 2:
        raise InsufficientRelaxation(f"cycle {c.cycle_index}: no usable rest segment")
    t = c.relax_t_s - c.relax_t_s[0]
    window_s = window_min * 60.0
    if t[-1] < window_s:
        raise InsufficientRelaxation(
            f"cycle {c.cycle_index}: rest spans {t[-1]:.0f} s < requested {window_s:.0f} s"
        )
    targets = np.linspace(0.0, window_s, m)
    values = np.interp(targets, t, c.relax_v)
    if values[0] < values[-1]:
        warnings.warn(
            f"cycle {c.cycle_index}: relaxation voltage rises over the window",
            stacklevel=2,
        )
    return RelaxVector(values_v=values, window_min=window_min)


# ---------------------------------------------------------------------------
# start-of-charge policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedStart:
    voltage_v: float


@dataclass(frozen=True)
class RandomSocStart:
    """Draw v_start per sample from an SOC range mapped through the cycle's own curve."""

    seed: int
    soc_range: tuple[float, float] = (0.10, 0.50)

    def __post_init__(self):
        lo, hi = self.soc_range
        if not 0.0 <= lo < hi < 1.0:
            raise InvalidArgument(f"soc_range must satisfy 0 <= lo < hi < 1, got {self.soc_range}")


def _sample_rng(seed: int, battery_id: str, cycle_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(battery_id.encode("utf-8")), cycle_index])


def resolve_v_start(policy, b: BatterySeries, c: CycleRecord) -> float:
    if isinstance(policy, FixedStart):
        return policy.voltage_v
    if isinstance(policy, RandomSocStart):
        v_grid, q_grid = monotone_charge_curve(c)
        rng = _sample_rng(policy.seed, b.battery_id, c.cycle_index)
        soc = rng.uniform(*policy.soc_range)
        q_total = q_grid[-1] - q_grid[0]
        return float(np.interp(q_grid[0] + soc * q_total, q_grid, v_grid))
    raise InvalidArgument(f"unknown v_start policy {policy!r}")


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """One training/inference unit anchored at a single observed cycle."""

    q: ChargeVector
    features: np.ndarray
    conditions: np.ndarray  # (L, 3) raw condition triples for the target cycles
    target_mah: np.ndarray  # (L,) future max discharge capacities
    origin: tuple[str, int]
    nominal_capacity_mah: float
    capacity_history_mah: np.ndarray | None = None


def build_samples(
    b: BatterySeries,
    horizon: int,
    v_start_policy,
    n_segments: int = 50,
    relax_window_min: float = 30.0,
    relax_points: int = 30,
    feature_mode: str = "full12",
    history_window: int = 0,
) -> list[Sample]:
    """Sliding-window samples: one per anchor cycle t in [1, N - L].

    The target is the capacity sequence of cycles t+1 .. t+L and the
    condition matrix holds the actual applied conditions of those cycles.
    With a nonzero history window the anchor range shrinks so every sample
    carries its trailing capacity history.
    """
    from .features import assemble_features  # local import to avoid a cycle

    if horizon < 1:
        raise InvalidArgument(f"horizon must be >= 1, got {horizon}")
    n = len(b.cycles)
    if n <= horizon:
        raise HorizonTooLong(f"{b.battery_id}: {n} cycles cannot support horizon {horizon}")
    if history_window < 0:
        raise InvalidArgument("history_window must be >= 0")

    caps = b.capacities()
    samples: list[Sample] = []
    first_anchor = max(1, history_window)
    for t in range(first_anchor, n - horizon + 1):  # 1-based anchor indices
        c = b.cycles[t - 1]
        v_start = resolve_v_start(v_start_policy, b, c)
        q = build_charge_vector(c, v_start, n_segments)
        relax = None
        if feature_mode == "full12":
            relax = sample_relaxation(c, relax_window_min, relax_points)
        features = assemble_features(c, q, relax, mode=feature_mode)
        future = b.cycles[t : t + horizon]
        conditions = np.stack([fc.condition.as_array() for fc in future])
        target = caps[t : t + horizon].copy()
        history = None
        if history_window:
            history = caps[t - history_window : t].copy()
        samples.append(
            Sample(
                q=q,
                features=features,
                conditions=conditions,
                target_mah=target,
                origin=(b.battery_id, c.cycle_index),
                nominal_capacity_mah=b.nominal_capacity_mah,
                capacity_history_mah=history,
            )
        )
    return samples


def build_inference_sample(
    b: BatterySeries,
    anchor_cycle: int,
    horizon: int,
    v_start_policy,
    conditions: np.ndarray | None = None,
    n_segments: int = 50,
    relax_window_min: float = 30.0,
    relax_points: int = 30,
    feature_mode: str = "full12",
    history_window: int = 0,
) -> Sample:
    """A deployment-style sample anchored at one cycle of a cleaned series.

    Future conditions default to the anchor cycle's condition repeated over
    the horizon. Targets are filled from cycles that actually exist beyond
    the anchor and padded with NaN, so the caller can compare where truth
    is available.
    """
    n = len(b.cycles)
    if not 1 <= anchor_cycle <= n:
        raise InvalidArgument(f"anchor cycle {anchor_cycle} outside series of {n} cycles")
    if history_window and anchor_cycle <= history_window:
        raise InsufficientData(
            f"anchor {anchor_cycle} cannot supply a {history_window}-cycle history"
        )
    c = b.cycles[anchor_cycle - 1]
    v_start = resolve_v_start(v_start_policy, b, c)
    q = build_charge_vector(c, v_start, n_segments)
    relax = None
    if feature_mode == "full12":
        relax = sample_relaxation(c, relax_window_min, relax_points)
    from .features import assemble_features

    features = assemble_features(c, q, relax, mode=feature_mode)
    if conditions is None:
        conditions = np.tile(c.condition.as_array(), (horizon, 1))
    else:
        conditions = np.asarray(conditions, dtype=np.float64)[:horizon]
        if conditions.shape[0] < horizon:
            raise InvalidArgument(
                f"conditions cover {conditions.shape[0]} steps, horizon needs {horizon}"
            )
    target = np.full(horizon, np.nan)
    available = b.capacities()[anchor_cycle : anchor_cycle + horizon]
    target[: len(available)] = available
    history = None
    if history_window:
        history = b.capacities()[anchor_cycle - history_window : anchor_cycle].copy()
    return Sample(
        q=q,
        features=features,
        conditions=conditions,
        target_mah=target,
        origin=(b.battery_id, c.cycle_index),
        nominal_capacity_mah=b.nominal_capacity_mah,
        capacity_history_mah=history,
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    """Per-column min/max fitted on training data only; frozen after fit."""

    mins: np.ndarray
    maxs: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        span = self.maxs - self.mins
        out = np.empty_like(x, dtype=np.float64)
        const = span == 0
        safe = np.where(const, 1.0, span)
        out = (x - self.mins) / safe
        out = np.clip(out, 0.0, 1.0)
        if np.any(const):
            out = np.where(const, 0.5, out)
        return out


def fit_norm(columns: np.ndarray) -> NormStats:
    """Fit min/max over rows of a (n, d) matrix."""
    columns = np.asarray(columns, dtype=np.float64)
    if columns.ndim != 2 or columns.shape[0] < 1:
        raise InvalidArgument(f"expected a (n, d) matrix, got shape {columns.shape}")
    return NormStats(mins=columns.min(axis=0), maxs=columns.max(axis=0))


def fit_feature_norm(samples: list[Sample]) -> NormStats:
    if not samples:
        raise InvalidArgument("cannot fit normalization on an empty sample list")
    return fit_norm(np.stack([s.features for s in samples]))


def apply_norm(samples: list[Sample], stats: NormStats | None) -> list[Sample]:
    """Return copies of the samples with features mapped into [0, 1]."""
    if stats is None:
        raise NotFitted("normalization stats must be fitted before apply")
    return [replace(s, features=stats.transform(s.features)) for s in samples]
