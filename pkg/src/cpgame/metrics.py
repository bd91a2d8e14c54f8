"""Per-cycle reports, communication overhead and run-level aggregation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .channel import ChannelConfig, Schedule
from .world import DensityField

DETECTION_BYTES = 1024
DETECTION_DENSITY = 0.5  # points/m^2 above which a grid is taken to hold one reportable object


class Overhead(NamedTuple):
    early_bits: float
    late_bits: float
    mbps: float


def early_fusion_bits(schedule: Schedule, density: DensityField, cfg: ChannelConfig) -> float:
    """Every scheduled upload counted exactly once at ``c0 * rho`` bits."""
    return float(sum(density.of(i)[sorted(gs)].sum() for (i, _, _), gs in schedule.links().items()) * cfg.c0)


def late_fusion_bits(fused: np.ndarray, rows: Iterable[int], b_det: int = DETECTION_BYTES,
                     rho_det: float = DETECTION_DENSITY) -> float:
    """One broadcast per listed CAV row, one detection record per grid it sees well enough."""
    rows = list(rows)
    if not rows:
        return 0.0
    objects = int((fused[rows] >= rho_det).sum())
    return float(objects * b_det * 8)


def comm_overhead(schedule: Schedule, density: DensityField, fused: np.ndarray, broadcasters: Iterable[int],
                  cfg: ChannelConfig, duration: float, b_det: int = DETECTION_BYTES,
                  rho_det: float = DETECTION_DENSITY) -> Overhead:
    """Early and late bits sent in ``duration`` seconds and their combined rate in Mbit/s."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    early = early_fusion_bits(schedule, density, cfg)
    late = late_fusion_bits(fused, [density.index(i) for i in broadcasters], b_det, rho_det)
    return Overhead(early, late, (early + late) / duration / 1e6)


@dataclass(frozen=True)
class CycleReport:
    cycle: int
    system_utility: float = 0.0
    per_cav_utility: tuple = ()
    early_bits: float = 0.0
    late_bits: float = 0.0
    overhead_mbps: float = 0.0
    max_leader_delay: float = 0.0
    n_links: int = 0
    n_coalitions: int = 0
    coalition_sizes: tuple = ()
    reformed: bool = False
    formation_rounds: int = 0
    formation_converged: bool = True
    pdpg_rounds: int = 0
    pdpg_converged: bool = True
    potential_trace: tuple = ()
    violations: int = 0
    deadline_misses: int = 0

    def __post_init__(self):
        if self.overhead_mbps < 0 or self.early_bits < 0 or self.late_bits < 0:
            raise ValueError("overhead cannot be negative")
        if self.system_utility < 0 or any(u < 0 for u in self.per_cav_utility):
            raise ValueError("utilities cannot be negative")

    @property
    def ok(self) -> bool:
        return (self.violations == 0 and self.deadline_misses == 0
                and self.pdpg_converged and self.formation_converged)


# scalar columns that get summary statistics
SCALARS = ("system_utility", "early_bits", "late_bits", "overhead_mbps", "max_leader_delay", "n_links",
           "n_coalitions", "formation_rounds", "pdpg_rounds")

CSV_COLUMNS = tuple(f.name for f in fields(CycleReport))


def _cell(value):
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, tuple):
        return ";".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return value


def write_cycle_csv(reports: Sequence[CycleReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([_cell(getattr(r, c)) for c in CSV_COLUMNS])


@dataclass
class Stat:
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def of(cls, values) -> "Stat":
        a = np.asarray(values, dtype=float)
        if a.size == 0:
            return cls(math.nan, math.nan, math.nan, math.nan)
        return cls(float(a.mean()), float(a.std()), float(a.min()), float(a.max()))


@dataclass
class RunSummary:
    n_cycles: int
    stats: dict = field(default_factory=dict)
    pdpg_failures: int = 0
    formation_failures: int = 0
    violations: int = 0
    deadline_misses: int = 0

    @property
    def ok(self) -> bool:
        return not (self.pdpg_failures or self.formation_failures or self.violations or self.deadline_misses)

    def mean(self, name: str) -> float:
        return self.stats[name].mean

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ok"] = self.ok
        return out


def aggregate_run(reports: Sequence[CycleReport]) -> RunSummary:
    """Mean/std/min/max of every scalar column plus failure counters."""
    return RunSummary(
        n_cycles=len(reports),
        stats={name: Stat.of([getattr(r, name) for r in reports]) for name in SCALARS},
        pdpg_failures=sum(not r.pdpg_converged for r in reports),
        formation_failures=sum(not r.formation_converged for r in reports),
        violations=sum(r.violations for r in reports),
        deadline_misses=sum(r.deadline_misses for r in reports),
    )


def write_summary_json(summary: RunSummary, path, **extra) -> None:
    with open(path, "w") as fh:
        json.dump({**extra, **summary.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
