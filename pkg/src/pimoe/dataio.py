"""CSV dataset schemas, the ingest archive, and small file helpers.

cycles.csv columns: battery_id, cycle, phase{charge|relax}, t_s, voltage_v,
current_a. summary.csv columns: battery_id, cycle,
max_discharge_capacity_mAh, charge_c, discharge_c, temp_c. UTF-8, header
row mandatory, '.' decimal separator. Cumulative charge is reconstructed
on read by trapezoidal integration of |current| over time, so the writer
does not need a charge column.

An optional meta.json sidecar carries per-battery nameplate data
(chemistry, nominal capacity, cutoff window); without it those fields are
inferred from the data with documented rules.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import BatterySeries, ConditionTriple, CycleRecord, Dataset
from .errors import IngestError

CYCLES_HEADER = ["battery_id", "cycle", "phase", "t_s", "voltage_v", "current_a"]
SUMMARY_HEADER = [
    "battery_id",
    "cycle",
    "max_discharge_capacity_mAh",
    "charge_c",
    "discharge_c",
    "temp_c",
]
STAGES_HEADER = ["battery_id", "cycle", "stage"]


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def write_dataset(ds: Dataset, out_dir) -> dict[str, Path]:
    """Write cycles.csv, summary.csv, and meta.json into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cycles_path = out / "cycles.csv"
    summary_path = out / "summary.csv"
    meta_path = out / "meta.json"

    with open(cycles_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CYCLES_HEADER)
        for b in ds.batteries:
            for c in b.cycles:
                for t, v, i in zip(c.charge_t_s, c.charge_v, c.charge_i_a):
                    w.writerow([b.battery_id, c.cycle_index, "charge", t, v, i])
                for t, v in zip(c.relax_t_s, c.relax_v):
                    w.writerow([b.battery_id, c.cycle_index, "relax", t, v, 0.0])

    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for b in ds.batteries:
            for c in b.cycles:
                w.writerow(
                    [
                        b.battery_id,
                        c.cycle_index,
                        c.max_discharge_capacity_mah,
                        c.condition.charge_c_rate,
                        c.condition.discharge_c_rate,
                        c.condition.temperature_c,
                    ]
                )

    meta = {
        "name": ds.name,
        "condition_tag": ds.condition_tag,
        "batteries": {
            b.battery_id: {
                "chemistry": b.chemistry,
                "nominal_capacity_mah": b.nominal_capacity_mah,
                "cutoff_min_v": b.cutoff_voltage_v[0],
                "cutoff_max_v": b.cutoff_voltage_v[1],
            }
            for b in ds.batteries
        },
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return {"cycles": cycles_path, "summary": summary_path, "meta": meta_path}


def write_stage_labels(labels: dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(STAGES_HEADER)
        for bid in sorted(labels):
            for cycle, stage in enumerate(labels[bid], start=1):
                w.writerow([bid, cycle, stage])
    return path


def read_stage_labels(path) -> dict[str, np.ndarray]:
    rows: dict[str, list[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != STAGES_HEADER:
            raise IngestError(f"stages header must be {STAGES_HEADER}, got {header}", row=1)
        for rec in reader:
            rows.setdefault(rec[0], []).append(rec[2])
    return {bid: np.array(v) for bid, v in rows.items()}


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------


def _parse_float(value: str, row: int, column: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise IngestError(f"{column} is not a number: {value!r}", row=row) from None
    if not np.isfinite(out):
        raise IngestError(f"{column} is not finite: {value!r}", row=row)
    return out


def _parse_cycle(value: str, row: int) -> int:
    try:
        cycle = int(value)
    except ValueError:
        raise IngestError(f"cycle is not an integer: {value!r}", row=row) from None
    if cycle < 1:
        raise IngestError(f"cycle must be >= 1, got {cycle}", row=row)
    return cycle


def _integrate_charge(t: np.ndarray, i_a: np.ndarray) -> np.ndarray:
    """Cumulative |I| dt in mAh (A*s / 3.6)."""
    if len(t) == 0:
        return np.zeros(0)
    dt = np.diff(t)
    amps = np.abs(i_a)
    increments = dt * (amps[1:] + amps[:-1]) / 2.0
    return np.concatenate([[0.0], np.cumsum(increments)]) / 3.6


def read_dataset(
    cycles_path,
    summary_path,
    meta_path=None,
    name: str = "ingested",
) -> Dataset:
    """Parse and validate the two CSVs (plus optional meta) into a Dataset."""
    seg: dict[tuple[str, int, str], list[tuple[float, float, float]]] = {}
    order: list[tuple[str, int]] = []
    with open(cycles_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CYCLES_HEADER:
            raise IngestError(f"cycles header must be {CYCLES_HEADER}, got {header}", row=1)
        for n, rec in enumerate(reader, start=2):
            if len(rec) != len(CYCLES_HEADER):
                raise IngestError(f"expected {len(CYCLES_HEADER)} columns, got {len(rec)}", row=n)
            bid, cyc_s, phase, t_s, v_s, i_s = rec
            if not bid:
                raise IngestError("empty battery_id", row=n)
            if phase not in ("charge", "relax"):
                raise IngestError(f"phase must be charge|relax, got {phase!r}", row=n)
            cyc = _parse_cycle(cyc_s, n)
            point = (
                _parse_float(t_s, n, "t_s"),
                _parse_float(v_s, n, "voltage_v"),
                _parse_float(i_s, n, "current_a"),
            )
            key = (bid, cyc, phase)
            bucket = seg.get(key)
            if bucket is None:
                bucket = seg[key] = []
                if phase == "charge":
                    order.append((bid, cyc))
            elif bucket and point[0] < bucket[-1][0]:
                raise IngestError(
                    f"t_s decreases within {bid} cycle {cyc} phase {phase}", row=n
                )
            bucket.append(point)
    if not seg:
        raise IngestError("cycles file contains no data rows", row=2)

    summary: dict[tuple[str, int], tuple[float, ConditionTriple]] = {}
    with open(summary_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SUMMARY_HEADER:
            raise IngestError(f"summary header must be {SUMMARY_HEADER}, got {header}", row=1)
        for n, rec in enumerate(reader, start=2):
            if len(rec) != len(SUMMARY_HEADER):
                raise IngestError(f"expected {len(SUMMARY_HEADER)} columns, got {len(rec)}", row=n)
            bid, cyc_s, cap_s, cc_s, dc_s, tc_s = rec
            cyc = _parse_cycle(cyc_s, n)
            if (bid, cyc) in summary:
                raise IngestError(f"duplicate summary row for {bid} cycle {cyc}", row=n)
            cap = _parse_float(cap_s, n, "max_discharge_capacity_mAh")
            if cap <= 0:
                raise IngestError(f"capacity must be positive, got {cap}", row=n)
            cond = ConditionTriple(
                _parse_float(cc_s, n, "charge_c"),
                _parse_float(dc_s, n, "discharge_c"),
                _parse_float(tc_s, n, "temp_c"),
            )
            summary[(bid, cyc)] = (cap, cond)

    meta = {"batteries": {}}
    if meta_path is not None and Path(meta_path).exists():
        meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))

    per_battery: dict[str, list[CycleRecord]] = {}
    for bid, cyc in order:
        charge = seg.get((bid, cyc, "charge"))
        relax = seg.get((bid, cyc, "relax"), [])
        if (bid, cyc) not in summary:
            raise IngestError(f"{bid} cycle {cyc} has cycle data but no summary row")
        cap, cond = summary[(bid, cyc)]
        t = np.array([p[0] for p in charge])
        v = np.array([p[1] for p in charge])
        i = np.array([p[2] for p in charge])
        rt = np.array([p[0] for p in relax])
        rv = np.array([p[1] for p in relax])
        per_battery.setdefault(bid, []).append(
            CycleRecord(
                cycle_index=cyc,
                charge_t_s=t,
                charge_v=v,
                charge_i_a=i,
                charge_q_mah=_integrate_charge(t, i),
                relax_t_s=rt,
                relax_v=rv,
                max_discharge_capacity_mah=cap,
                condition=cond,
            )
        )
    for bid, cyc in summary:
        if (bid, cyc, "charge") not in seg:
            raise IngestError(f"summary row for {bid} cycle {cyc} has no cycle data")

    batteries = []
    for bid in sorted(per_battery):
        cycles = sorted(per_battery[bid], key=lambda c: c.cycle_index)
        info = meta.get("batteries", {}).get(bid, {})
        if info:
            chem = info["chemistry"]
            nominal = info["nominal_capacity_mah"]
            cutoff = (info["cutoff_min_v"], info["cutoff_max_v"])
        else:
            chem = "OTHER"
            nominal = max(c.max_discharge_capacity_mah for c in cycles)
            volts = np.concatenate([c.charge_v for c in cycles])
            cutoff = (float(volts.min()), float(volts.max()))
        batteries.append(
            BatterySeries(
                battery_id=bid,
                chemistry=chem,
                nominal_capacity_mah=nominal,
                cutoff_voltage_v=cutoff,
                cycles=cycles,
            )
        )
    return Dataset(
        name=meta.get("name", name),
        batteries=batteries,
        condition_tag=meta.get("condition_tag", ""),
    )


def read_dataset_dir(data_dir, name: str = "ingested") -> Dataset:
    d = Path(data_dir)
    return read_dataset(d / "cycles.csv", d / "summary.csv", d / "meta.json", name=name)


# ---------------------------------------------------------------------------
# conditions file (future-use schedule for prediction)
# ---------------------------------------------------------------------------

CONDITIONS_HEADER = ["step", "charge_c", "discharge_c", "temp_c"]


def read_conditions_file(path) -> np.ndarray:
    """Future-condition schedule as an (L, 3) array ordered by step."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CONDITIONS_HEADER:
            raise IngestError(f"conditions header must be {CONDITIONS_HEADER}, got {header}", row=1)
        for n, rec in enumerate(reader, start=2):
            step = _parse_cycle(rec[0], n)
            rows.append(
                (
                    step,
                    _parse_float(rec[1], n, "charge_c"),
                    _parse_float(rec[2], n, "discharge_c"),
                    _parse_float(rec[3], n, "temp_c"),
                )
            )
    if not rows:
        raise IngestError("conditions file contains no rows", row=2)
    rows.sort(key=lambda r: r[0])
    expected = list(range(1, len(rows) + 1))
    if [r[0] for r in rows] != expected:
        raise IngestError("step column must cover 1..L without gaps")
    return np.array([[r[1], r[2], r[3]] for r in rows], dtype=np.float64)
