"""Physics-informed features from charge and relaxation curves.

Twelve features in the full layout: six statistics of the relaxation
voltage (max, mean, min, var, skew, excess kurtosis), four statistics of
the resampled cumulative-charge vector (max, mean, var, kurt), the charge
absorbed over a 0.05 V rise from the sampled start voltage, and the
voltage rise needed to absorb 200 mAh from that same reference. The
charge-only mode keeps the last six, for cells measured without a rest
period.

Statistic conventions are deliberate: variance uses the n-1 denominator
while skew and kurtosis average over n and standardize by the square root
of that same variance. Zero-variance inputs define skew and kurtosis as 0.
"""

from __future__ import annotations

import numpy as np

from .core import CycleRecord
from .errors import InsufficientData, InvalidArgument, OutOfRange
from .preprocess import ChargeVector, RelaxVector, monotone_charge_curve

FULL_FEATURE_NAMES = (
    "relax_max",
    "relax_mean",
    "relax_min",
    "relax_var",
    "relax_skew",
    "relax_kurt",
    "charge_max",
    "charge_mean",
    "charge_var",
    "charge_kurt",
    "q_0p05_mah",
    "dv_200_v",
)
CHARGE_ONLY_FEATURE_NAMES = FULL_FEATURE_NAMES[6:]

DV_WINDOW_V = 0.05
DQ_WINDOW_MAH = 200.0


def stat_features(x: np.ndarray) -> tuple[float, float, float, float, float, float]:
    """(max, mean, min, var, skew, excess kurtosis) of a 1-D sequence."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 2:
        raise InsufficientData(f"need at least 2 points for statistics, got {n}")
    mean = float(np.mean(x))
    dev = x - mean
    var = float(np.sum(dev * dev) / (n - 1))
    if var == 0.0:
        skew = kurt = 0.0
    else:
        z = dev / np.sqrt(var)
        skew = float(np.mean(z**3))
        kurt = float(np.mean(z**4) - 3.0)
    return float(np.max(x)), mean, float(np.min(x)), var, skew, kurt


def q_at_dv(c: CycleRecord, v_start: float, dv: float = DV_WINDOW_V) -> float:
    """Charge absorbed while the voltage rises by dv from v_start (mAh)."""
    if dv < 0:
        raise InvalidArgument(f"dv must be >= 0, got {dv}")
    v_grid, q_grid = monotone_charge_curve(c)
    if v_start < v_grid[0] or v_start + dv > v_grid[-1]:
        raise OutOfRange(
            f"window [{v_start:.4f}, {v_start + dv:.4f}] V exceeds curve range "
            f"[{v_grid[0]:.4f}, {v_grid[-1]:.4f}]"
        )
    q0 = np.interp(v_start, v_grid, q_grid)
    q1 = np.interp(v_start + dv, v_grid, q_grid)
    return float(q1 - q0)


def dv_at_dq(c: CycleRecord, v_start: float, dq: float = DQ_WINDOW_MAH) -> float:
    """Voltage rise needed to absorb dq mAh starting from v_start (V)."""
    if dq < 0:
        raise InvalidArgument(f"dq must be >= 0, got {dq}")
    v_grid, q_grid = monotone_charge_curve(c)
    if v_start < v_grid[0] or v_start > v_grid[-1]:
        raise OutOfRange(f"v_start {v_start:.4f} V outside curve range")
    q0 = float(np.interp(v_start, v_grid, q_grid))
    if q0 + dq > q_grid[-1]:
        raise OutOfRange(
            f"only {q_grid[-1] - q0:.1f} mAh remain beyond {v_start:.4f} V, need {dq:.1f}"
        )
    # invert the (strictly monotone) charge curve: voltage at cumulative charge
    v1 = float(np.interp(q0 + dq, q_grid, v_grid))
    return v1 - v_start


def assemble_features(
    c: CycleRecord,
    charge: ChargeVector,
    relax: RelaxVector | None,
    mode: str = "full12",
) -> np.ndarray:
    """Fixed-order feature vector; length 12 for full12, 6 for charge_only6."""
    if mode == "full12":
        if relax is None:
            raise InvalidArgument("full12 mode requires a relaxation vector")
    elif mode == "charge_only6":
        if relax is not None:
            raise InvalidArgument("charge_only6 mode must not receive a relaxation vector")
    else:
        raise InvalidArgument(f"unknown feature mode {mode!r}")

    cmax, cmean, _, cvar, _, ckurt = stat_features(charge.model_values())
    q_small = q_at_dv(c, charge.v_start_v, DV_WINDOW_V)
    dv_ref = dv_at_dq(c, charge.v_start_v, DQ_WINDOW_MAH)
    charge_part = [cmax, cmean, cvar, ckurt, q_small, dv_ref]

    if mode == "charge_only6":
        out = np.array(charge_part, dtype=np.float64)
    else:
        rmax, rmean, rmin, rvar, rskew, rkurt = stat_features(relax.values_v)
        out = np.array([rmax, rmean, rmin, rvar, rskew, rkurt] + charge_part, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise InvalidArgument(f"non-finite feature value for cycle {c.cycle_index}")
    return out


def feature_names(mode: str) -> tuple[str, ...]:
    if mode == "full12":
        return FULL_FEATURE_NAMES
    if mode == "charge_only6":
        return CHARGE_ONLY_FEATURE_NAMES
    raise InvalidArgument(f"unknown feature mode {mode!r}")
