"""Domain types for batteries, cycles, datasets, and train/val/test splits."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidDataset

CHEMISTRIES = ("NCA", "NCM", "NCMNCA", "OTHER")


@dataclass(frozen=True)
class ConditionTriple:
    """Applied use condition for one cycle: C-rates are dimensionless, temperature in Celsius."""

    charge_c_rate: float
    discharge_c_rate: float
    temperature_c: float

    def __post_init__(self):
        if not (self.charge_c_rate > 0 and self.discharge_c_rate > 0):
            raise InvalidArgument("C-rates must be positive")
        if not math.isfinite(self.temperature_c):
            raise InvalidArgument("temperature must be finite")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.charge_c_rate, self.discharge_c_rate, self.temperature_c], dtype=np.float64
        )


@dataclass
class CycleRecord:
    """One cycle's raw measurements.

    The charge segment is stored as parallel arrays (time s, voltage V,
    current A, cumulative charge mAh); the rest segment carries only time
    and open-circuit voltage, its current is implicitly zero.
    """

    cycle_index: int
    charge_t_s: np.ndarray
    charge_v: np.ndarray
    charge_i_a: np.ndarray
    charge_q_mah: np.ndarray
    relax_t_s: np.ndarray
    relax_v: np.ndarray
    max_discharge_capacity_mah: float
    condition: ConditionTriple

    def __post_init__(self):
        if self.cycle_index < 1:
            raise InvalidArgument(f"cycle_index must be >= 1, got {self.cycle_index}")
        if self.max_discharge_capacity_mah <= 0:
            raise InvalidArgument("max_discharge_capacity_mah must be positive")
        n = len(self.charge_t_s)
        if not (len(self.charge_v) == len(self.charge_i_a) == len(self.charge_q_mah) == n):
            raise InvalidArgument("charge arrays must have equal lengths")
        if len(self.relax_t_s) != len(self.relax_v):
            raise InvalidArgument("relaxation arrays must have equal lengths")


@dataclass
class BatterySeries:
    """An ordered cycle history for one cell."""

    battery_id: str
    chemistry: str
    nominal_capacity_mah: float
    cutoff_voltage_v: tuple[float, float]
    cycles: list[CycleRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.chemistry not in CHEMISTRIES:
            raise InvalidArgument(f"unknown chemistry {self.chemistry!r}")
        if self.nominal_capacity_mah <= 0:
            raise InvalidArgument("nominal capacity must be positive")
        lo, hi = self.cutoff_voltage_v
        if not lo < hi:
            raise InvalidArgument("cutoff window must satisfy min < max")
        idx = [c.cycle_index for c in self.cycles]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InvalidArgument(f"cycle_index must be strictly increasing for {self.battery_id}")

    def capacities(self) -> np.ndarray:
        return np.array([c.max_discharge_capacity_mah for c in self.cycles], dtype=np.float64)

    def soh(self) -> np.ndarray:
        return self.capacities() / self.nominal_capacity_mah


@dataclass
class Dataset:
    name: str
    batteries: list[BatterySeries]
    condition_tag: str = ""

    def __post_init__(self):
        ids = [b.battery_id for b in self.batteries]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("battery ids must be unique")

    def battery_ids(self) -> list[str]:
        return [b.battery_id for b in self.batteries]

    def get(self, battery_id: str) -> BatterySeries:
        for b in self.batteries:
            if b.battery_id == battery_id:
                return b
        raise KeyError(battery_id)


def battery_condition_tag(b: BatterySeries) -> str:
    """Stable per-battery grouping key.

    Cells cycled under at most two distinct conditions (a first-life
    conditioning phase plus one second-life condition) are tagged by their
    final condition; cells with more distinct conditions are grouped as
    random-condition cells.
    """
    triples = {
        (c.condition.charge_c_rate, c.condition.discharge_c_rate, c.condition.temperature_c)
        for c in b.cycles
    }
    if len(triples) > 2:
        return f"{b.chemistry}-random"
    last = b.cycles[-1].condition
    return (
        f"{b.chemistry}-{last.temperature_c:g}-"
        f"{last.charge_c_rate:g}-{last.discharge_c_rate:g}"
    )


@dataclass(frozen=True)
class SplitSpec:
    """Battery-level split; battery granularity prevents cycle leakage."""

    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    train_fraction: float = 1.0

    def __post_init__(self):
        tr, va, te = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if tr & va or tr & te or va & te:
            raise InvalidArgument("split id sets must be disjoint")
        if not 0 < self.train_fraction <= 1:
            raise InvalidArgument("train_fraction must be in (0, 1]")


def _group_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(tag.encode("utf-8"))])


def partition_dataset(
    ds: Dataset,
    fraction: float,
    seed: int,
    val_fraction: float = 0.2,
    test_fraction: float = 0.25,
) -> SplitSpec:
    """Split batteries per condition group, then thin the train pool.

    Per group the ordering is a seeded shuffle, test and validation cells
    come off the front, and the retained train count is
    ceil(fraction * pool size). Because the ordering depends only on
    (seed, group), test ids are identical for every fraction and train
    sets nest: fraction f1 < f2 implies train(f1) is a subset of train(f2).
    """
    if not ds.batteries:
        raise InvalidDataset("cannot partition an empty dataset")
    if not 0 < fraction <= 1:
        raise InvalidArgument(f"fraction must be in (0, 1], got {fraction}")
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise InvalidArgument("val_fraction + test_fraction must leave room for training cells")

    groups: dict[str, list[str]] = {}
    for b in ds.batteries:
        groups.setdefault(battery_condition_tag(b), []).append(b.battery_id)

    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    for tag in sorted(groups):
        ids = sorted(groups[tag])
        order = [ids[i] for i in _group_rng(seed, tag).permutation(len(ids))]
        n = len(order)
        n_test = int(round(test_fraction * n))
        n_val = int(round(val_fraction * n))
        if n_test + n_val >= n:  # always keep at least one train cell per group
            n_val = max(0, n - n_test - 1)
        test.extend(order[:n_test])
        val.extend(order[n_test : n_test + n_val])
        pool = order[n_test + n_val :]
        train.extend(pool[: math.ceil(fraction * len(pool))])

    return SplitSpec(
        train_ids=tuple(train),
        val_ids=tuple(val),
        test_ids=tuple(test),
        train_fraction=fraction,
    )


@dataclass(frozen=True)
class SummaryRow:
    condition_tag: str
    n_batteries: int
    min_cycles: int
    mean_cycles: float
    max_cycles: int
    min_capacity_mah: float
    max_capacity_mah: float


def dataset_summary(ds: Dataset) -> list[SummaryRow]:
    """Per condition group: battery count, cycle-count stats, capacity range."""
    groups: dict[str, list[BatterySeries]] = {}
    for b in ds.batteries:
        groups.setdefault(battery_condition_tag(b), []).append(b)
    rows = []
    for tag in sorted(groups):
        cells = groups[tag]
        counts = [len(b.cycles) for b in cells]
        caps = np.concatenate([b.capacities() for b in cells]) if cells else np.array([])
        rows.append(
            SummaryRow(
                condition_tag=tag,
                n_batteries=len(cells),
                min_cycles=min(counts),
                mean_cycles=float(np.mean(counts)),
                max_cycles=max(counts),
                min_capacity_mah=float(caps.min()),
                max_capacity_mah=float(caps.max()),
            )
        )
    return rows
