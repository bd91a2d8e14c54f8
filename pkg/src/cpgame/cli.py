"""Config loading, the per-cycle simulation loop, batch runs and the command line."""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import ChannelConfig, ChannelRealization, Schedule, pathloss_db, validate_schedule
from .coalition import CoalitionConfig, Partition, form_clusters, should_reform
from .metrics import CycleReport, aggregate_run, comm_overhead, write_cycle_csv, write_summary_json
from .perception import UtilityCurve, fuse_effective_density, per_vehicle_utility
from .scheduling import (
    SCHEDULERS,
    SchedulerConfig,
    SchedulingContext,
    baseline_mug,
    baseline_nc,
    baseline_rs,
    run_pdpg,
)
from .world import GridWorld, ScenarioConfig, World, spawn_vehicles, step_mobility

log = logging.getLogger(__name__)

# independent random substreams of one run seed
STREAMS = {"mobility": 0, "rs": 2}

SECTIONS = {
    "scenario": ScenarioConfig,
    "channel": ChannelConfig,
    "perception": UtilityCurve,
    "coalition": CoalitionConfig,
    "scheduler": SchedulerConfig,
}


@dataclass(frozen=True)
class SimConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    perception: UtilityCurve = field(default_factory=UtilityCurve)
    coalition: CoalitionConfig = field(default_factory=CoalitionConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)

    def with_seed(self, seed: int) -> "SimConfig":
        return dataclasses.replace(self, scenario=dataclasses.replace(self.scenario, rng_seed=int(seed)))


def _convert(raw: str, default, name: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low not in configparser.ConfigParser.BOOLEAN_STATES:
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return configparser.ConfigParser.BOOLEAN_STATES[low]
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(","))
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    return raw


def load_config(path=None, require_seed: bool = True) -> SimConfig:
    """Read an INI file with optional [scenario] [channel] [perception] [coalition] [scheduler] sections.

    Unknown sections or keys are errors. ``rng_seed`` under [scenario] is required unless
    ``require_seed`` is off (the caller then supplies seeds).
    """
    if path is None:
        if require_seed:
            raise ValueError("a config file with [scenario] rng_seed is required")
        return SimConfig()
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    parts = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
    for section, cls in SECTIONS.items():
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in known:
                    raise ValueError(f"unknown key {key!r} in [{section}]")
                kwargs[key] = _convert(raw, getattr(defaults, key), key)
        parts[section] = cls(**kwargs)
    if require_seed and not parser.has_option("scenario", "rng_seed"):
        raise ValueError("[scenario] rng_seed is required")
    return SimConfig(**parts)


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, STREAMS[name]]))


def run_cycle(world: World, partition: Partition | None, sim: SimConfig, scheduler: str = "ours",
              now: float = 0.0, rs_rng: np.random.Generator | None = None
              ) -> tuple[Partition, Schedule, CycleReport]:
    """One cooperation cycle: clustering, scheduling, fusion with delay checks, then utilities and metrics."""
    if scheduler not in SCHEDULERS:
        raise ValueError(f"unknown scheduler {scheduler!r}")
    ours = scheduler == "ours"
    seed = world.cfg.rng_seed

    # 1. cluster formation
    reformed = False
    if not ours:
        partition = Partition.empty()
    elif should_reform(partition, world, sim.coalition, now):
        partition = form_clusters(world, sim.perception, sim.coalition, now=now)
        reformed = True
    log.debug("cycle %d phase 1: %d coalitions (reformed=%s)", world.cycle, len(partition.coalitions), reformed)

    # 2. scheduling
    realization = ChannelRealization.draw(world.cavs, sim.channel, seed, world.cycle)
    ctx = SchedulingContext(world, sim.perception, sim.channel, realization, partition)
    game = None
    if ours:
        game = run_pdpg(ctx, sim.scheduler)
        schedule = game.schedule
    elif scheduler == "nc":
        schedule = baseline_nc(ctx)
    elif scheduler == "rs":
        rng = rs_rng if rs_rng is not None else _stream(seed, "rs")
        schedule = baseline_rs(ctx, rng, attempt_factor=sim.scheduler.rs_attempt_factor)
    else:
        schedule = baseline_mug(ctx)
    log.debug("cycle %d phase 2: %d links", world.cycle, len(schedule.links()))

    # 3. early fusion and delay checks
    violations = validate_schedule(schedule, partition if ours else None)
    if ours:
        violations += partition.check(world.cav_ids, sim.coalition.n_max)
    fused = fuse_effective_density(schedule, world.density, partition if ours else None)
    delays = [ctx.delay(r, schedule) for r in sorted(schedule.receivers())]
    misses = sum(d > ctx.deadline for d in delays)
    log.debug("cycle %d phase 3: %d violations, %d deadline misses", world.cycle, len(violations), misses)

    # 4. late fusion and metrics; only the hierarchical scheme shares detections
    per_cav = per_vehicle_utility(fused, world.req, sim.perception, late=ours)
    broadcasters = world.cav_ids if ours else ()
    overhead = comm_overhead(schedule, world.density, fused, broadcasters, sim.channel, world.cfg.cycle_duration)
    report = CycleReport(
        cycle=world.cycle,
        system_utility=float(per_cav.sum()),
        per_cav_utility=tuple(float(u) for u in per_cav),
        early_bits=overhead.early_bits,
        late_bits=overhead.late_bits,
        overhead_mbps=overhead.mbps,
        max_leader_delay=max(delays, default=0.0),
        n_links=len(schedule.links()),
        n_coalitions=len(partition.coalitions),
        coalition_sizes=tuple(partition.sizes()),
        reformed=reformed,
        formation_rounds=partition.rounds if reformed else 0,
        formation_converged=partition.converged,
        pdpg_rounds=game.rounds if game else 0,
        pdpg_converged=game.converged if game else True,
        potential_trace=tuple(game.trace) if game else (),
        violations=len(violations),
        deadline_misses=int(misses),
    )
    log.debug("cycle %d phase 4: utility %.3f, %.3f Mbit/s", world.cycle, report.system_utility, report.overhead_mbps)
    return partition, schedule, report


def simulate(sim: SimConfig, scheduler: str, cycles: int) -> list[CycleReport]:
    """Run ``cycles`` cycles from a fresh fleet; the fleet trajectory depends only on the seed."""
    cfg = sim.scenario
    grids = GridWorld.from_config(cfg)
    mobility = _stream(cfg.rng_seed, "mobility")
    rs_rng = _stream(cfg.rng_seed, "rs")
    vehicles = spawn_vehicles(cfg, mobility)
    partition = None
    reports = []
    for c in range(cycles):
        world = World.build(cfg, vehicles, cycle=c, grids=grids)
        partition, _, report = run_cycle(world, partition, sim, scheduler, now=c * cfg.cycle_duration,
                                         rs_rng=rs_rng)
        reports.append(report)
        vehicles = step_mobility(vehicles, cfg.cycle_duration, cfg, mobility)
    return reports


@dataclass(frozen=True)
class RunSpec:
    config_path: str | None
    schedulers: tuple[str, ...] = ("ours",)
    cycles: int = 100
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    update_mode: str | None = None
    jobs: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")
        for s in self.schedulers:
            if s not in SCHEDULERS:
                raise ValueError(f"unknown scheduler {s!r}")


def run_dir(out_dir, scheduler: str, seed: int) -> Path:
    return Path(out_dir) / f"{scheduler}_seed{seed}"


def _one(args):
    sim, scheduler, seed, cycles, out_dir = args
    reports = simulate(sim.with_seed(seed), scheduler, cycles)
    summary = aggregate_run(reports)
    d = run_dir(out_dir, scheduler, seed)
    d.mkdir(parents=True, exist_ok=True)
    write_cycle_csv(reports, d / "cycles.csv")
    write_summary_json(summary, d / "summary.json", scheduler=scheduler, seed=seed, cycles=cycles)
    return scheduler, seed, summary


COMPARISON_COLUMNS = ("scheduler", "seed", "cycles", "utility_mean", "utility_std", "overhead_mbps_mean",
                      "early_bits_mean", "late_bits_mean", "max_leader_delay_max", "pdpg_rounds_mean",
                      "pdpg_failures", "formation_failures", "violations", "deadline_misses", "ok")


def run_batch(spec: RunSpec) -> int:
    """Every (seed, scheduler) run plus comparison.csv; returns 1 if any run flagged a problem."""
    sim = load_config(spec.config_path, require_seed=False)
    if spec.update_mode:
        sim = dataclasses.replace(sim, scheduler=dataclasses.replace(sim.scheduler, update_mode=spec.update_mode))
    jobs = [(sim, s, seed, spec.cycles, spec.out_dir) for seed in spec.seeds for s in spec.schedulers]
    if spec.jobs > 1:
        with ProcessPoolExecutor(spec.jobs) as pool:
            results = list(pool.map(_one, jobs))
    else:
        results = [_one(j) for j in jobs]
    rows = []
    for scheduler, seed, sm in sorted(results, key=lambda r: (SCHEDULERS.index(r[0]), r[1])):
        st = sm.stats
        rows.append((scheduler, seed, sm.n_cycles, st["system_utility"].mean, st["system_utility"].std,
                     st["overhead_mbps"].mean, st["early_bits"].mean, st["late_bits"].mean,
                     st["max_leader_delay"].max, st["pdpg_rounds"].mean, sm.pdpg_failures,
                     sm.formation_failures, sm.violations, sm.deadline_misses, int(sm.ok)))
        if not sm.ok:
            log.error("%s seed %d flagged: %d violations, %d deadline misses, %d+%d non-converged cycles",
                      scheduler, seed, sm.violations, sm.deadline_misses, sm.pdpg_failures, sm.formation_failures)
    Path(spec.out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(spec.out_dir) / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return 0 if all(r[-1] for r in rows) else 1


def curve_table(curve: UtilityCurve, rho_max: float = 6.0, step: float = 0.1) -> list[tuple[float, float]]:
    n = int(round(rho_max / step))
    rho = np.round(np.arange(n + 1) * step, 10)
    return list(zip(rho.tolist(), np.atleast_1d(curve(rho)).tolist()))


def rate_table(cfg: ChannelConfig, tx_power_dbm: float = 23.0, distances: Sequence[float] = range(10, 210, 10)):
    """Noise-limited link budget per distance: no shadowing, no fading, no interference."""
    out = []
    for d in distances:
        pl = pathloss_db(d, cfg.carrier_ghz)
        snr_db = tx_power_dbm - pl - cfg.noise_dbm
        rate = cfg.subchannel_hz * math.log2(1.0 + 10.0 ** (snr_db / 10.0))
        out.append((float(d), pl, snr_db, rate / 1e6))
    return out


def _write_rows(header, rows, out):
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
    finally:
        if out:
            fh.close()


def _seed_list(text: str) -> tuple[int, ...]:
    seeds = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return tuple(seeds)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpgame", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="one seed, one scheduler")
    run.add_argument("config")
    run.add_argument("--scheduler", choices=SCHEDULERS, default="ours")
    run.add_argument("--cycles", type=int, default=100)
    run.add_argument("--seed", type=int, help="overrides rng_seed from the config")
    run.add_argument("--update-mode", choices=("sequential", "synchronous"))
    run.add_argument("--out", default="runs")

    batch = sub.add_parser("batch", help="every seed x scheduler combination plus a comparison table")
    batch.add_argument("config", nargs="?")
    batch.add_argument("--schedulers", default=",".join(SCHEDULERS))
    batch.add_argument("--seeds", type=_seed_list, default=(0,), help="e.g. 0-19 or 1,4,7")
    batch.add_argument("--cycles", type=int, default=100)
    batch.add_argument("--update-mode", choices=("sequential", "synchronous"))
    batch.add_argument("--out", default="runs")
    batch.add_argument("--jobs", type=int, default=1)

    curve = sub.add_parser("curve", help="utility curve samples as CSV")
    curve.add_argument("config", nargs="?")
    curve.add_argument("--rho-max", type=float, default=6.0)
    curve.add_argument("--step", type=float, default=0.1)
    curve.add_argument("--out")

    rates = sub.add_parser("rate-table", help="noise-limited rate versus distance as CSV")
    rates.add_argument("config", nargs="?")
    rates.add_argument("--d-min", type=float, default=10.0)
    rates.add_argument("--d-max", type=float, default=200.0)
    rates.add_argument("--step", type=float, default=10.0)
    rates.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            sim = load_config(args.config, require_seed=args.seed is None)
            seed = sim.scenario.rng_seed if args.seed is None else args.seed
            spec = RunSpec(args.config, (args.scheduler,), args.cycles, (seed,), args.out, args.update_mode)
            return run_batch(spec)
        if args.command == "batch":
            schedulers = tuple(s.strip() for s in args.schedulers.split(",") if s.strip())
            spec = RunSpec(args.config, schedulers, args.cycles, args.seeds, args.out, args.update_mode, args.jobs)
            return run_batch(spec)
        sim = load_config(args.config, require_seed=False)
        if args.command == "curve":
            _write_rows(("rho", "utility"), curve_table(sim.perception, args.rho_max, args.step), args.out)
        else:
            n = int(round((args.d_max - args.d_min) / args.step))
            distances = [args.d_min + i * args.step for i in range(n + 1)]
            _write_rows(("distance_m", "pathloss_db", "snr_db", "rate_mbps"),
                        rate_table(sim.channel, sim.scenario.tx_power_dbm, distances), args.out)
        return 0
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
