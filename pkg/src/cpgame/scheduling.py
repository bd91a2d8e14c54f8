"""Leader scheduling game, greedy best response, exhaustive oracle and baseline schedulers."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .channel import (
    ChannelConfig,
    ChannelRealization,
    Schedule,
    Upload,
    leader_delay,
    link_rates,
    sinr,
)
from .coalition import Partition
from .perception import UtilityCurve, late_fusion, requirement_weights
from .world import World

log = logging.getLogger(__name__)

_TOL = 1e-12


@dataclass(frozen=True)
class SchedulerConfig:
    max_game_iterations: int = 10
    update_mode: str = "sequential"
    rs_attempt_factor: int = 1
    budget_rule: str = "active"

    def __post_init__(self):
        if self.budget_rule not in ("active", "all"):
            raise ValueError(f"unknown budget rule {self.budget_rule!r}")
        if self.max_game_iterations < 1:
            raise ValueError("max_game_iterations must be >= 1")
        if self.update_mode not in ("sequential", "synchronous"):
            raise ValueError(f"unknown update mode {self.update_mode!r}")


@dataclass
class SchedulingContext:
    """Everything a scheduler reads in one cycle."""

    world: World
    curve: UtilityCurve
    channel: ChannelConfig
    realization: ChannelRealization
    partition: Partition = field(default_factory=Partition.empty)

    def __post_init__(self):
        self.density = self.world.density
        self.rho = self.density.rho
        self.row = {vid: n for n, vid in enumerate(self.density.ids)}
        self.weights = requirement_weights(self.world.req)

    @property
    def deadline(self) -> float:
        return self.world.cfg.cycle_duration

    def compute(self, vid: int) -> float:
        return self.world.vehicle(vid).compute_capacity

    def distance(self, i: int, j: int) -> float:
        return float(np.hypot(*(self.world.vehicle(i).position - self.world.vehicle(j).position)))

    def cluster_req(self, h: int) -> np.ndarray:
        return self.world.req[[self.row[m] for m in self.partition.cluster(h)]].any(axis=0)

    def delay(self, receiver: int, schedule: Schedule, rates=None) -> float:
        return leader_delay(receiver, schedule, self.density, self.realization, self.channel,
                            self.compute(receiver), rates)


Profile = dict  # leader id -> frozenset[Upload]


def profile_schedule(profile: Profile) -> Schedule:
    return Schedule(itertools.chain.from_iterable(profile.values()))


def fused_density(profile: Profile, ctx: SchedulingContext, skip: int | None = None) -> np.ndarray:
    fused = ctx.rho.copy()
    for h, strategy in profile.items():
        if h == skip:
            continue
        for u in strategy:
            fused[ctx.row[u.receiver], u.grid] += ctx.rho[ctx.row[u.sender], u.grid]
    return fused


def _with_strategy(base: np.ndarray, h_row: int, strategy, ctx: SchedulingContext) -> np.ndarray:
    fused = base.copy()
    for u in strategy:
        fused[h_row, u.grid] += ctx.rho[ctx.row[u.sender], u.grid]
    return fused


def leader_utility(h: int, profile: Profile, ctx: SchedulingContext) -> float:
    """Late-fused utility summed over the collective requirement region of h's cluster."""
    return float(late_fusion(fused_density(profile, ctx), ctx.curve)[ctx.cluster_req(h)].sum())


def potential(profile: Profile, ctx: SchedulingContext) -> float:
    """Late-fused utility summed over every grid of the scene."""
    return float(late_fusion(fused_density(profile, ctx), ctx.curve).sum())


def allocate_budget(partition: Partition, n_subchannels: int, rule: str = "active") -> dict[int, tuple[int, ...]]:
    """Equal split of the subchannels as contiguous blocks, remainder to the lowest leader ids.

    ``rule="active"`` splits over leaders that have members (a lone leader has nobody to
    schedule); ``rule="all"`` splits over every leader.
    """
    budget = {h: () for h in partition.leaders}
    active = sorted(h for h, S in zip(partition.leaders, partition.coalitions) if rule == "all" or len(S) > 1)
    if not active:
        return budget
    base, extra = divmod(n_subchannels, len(active))
    start = 0
    for rank, h in enumerate(active):
        n = base + (1 if rank < extra else 0)
        budget[h] = tuple(range(start, start + n))
        start += n
    return budget


def _enforce_deadline(h: int, order: list[int], strategy: set, ctx: SchedulingContext) -> frozenset:
    """Drop whole members, lowest priority first, until h's uploads fit in the cycle."""
    strategy = set(strategy)
    for m in reversed(order):
        sched = Schedule(strategy)
        if ctx.delay(h, sched) <= ctx.deadline:
            break
        strategy = {u for u in strategy if u.sender != m}
    return frozenset(strategy)


def pps_best_response(h: int, profile: Profile, ctx: SchedulingContext, pool: Sequence[int]) -> frozenset:
    """Perception-priority greedy response of leader h against the other leaders' strategies.

    Candidate grids are h's collective requirement grids that nobody has saturated yet.
    Members are ranked once by the utility their candidate grids would add at h, take one
    idle subchannel each (best gain to h first) and upload all their candidate grids.
    """
    base = fused_density(profile, ctx, skip=h)
    cand = ctx.cluster_req(h) & (base.max(axis=0) < ctx.curve.rho_th)
    if not cand.any() or not pool:
        return frozenset()
    own = base[ctx.row[h]]
    scored = []
    for m in sorted(ctx.partition.cluster(h) - {h}):
        if ctx.distance(m, h) > ctx.world.cfg.r_comm:
            continue
        rho_m = ctx.rho[ctx.row[m]]
        grids = np.flatnonzero(ctx.world.sens[ctx.row[m]] & cand & (rho_m > 0))
        if len(grids) == 0:
            continue
        score = float((ctx.curve(rho_m[grids] + own[grids]) - ctx.curve(own[grids])).sum())
        if score > 0:
            scored.append((-score, m, grids))
    scored.sort(key=lambda t: (t[0], t[1]))
    idle = list(pool)
    strategy, order = set(), []
    for _, m, grids in scored:
        if not idle:
            log.debug("leader %d out of subchannels; member %d starved", h, m)
            break
        k = max(idle, key=lambda c: (ctx.realization.h(m, h, c), -c))
        idle.remove(k)
        order.append(m)
        strategy.update(Upload(m, h, int(g), k) for g in grids)
    return _enforce_deadline(h, order, strategy, ctx)


def _feasible_strategies(h: int, ctx: SchedulingContext, pool: Sequence[int], grids_of: dict):
    members = sorted(grids_of)
    for n in range(len(members) + 1):
        for chosen in itertools.combinations(members, n):
            for ks in itertools.permutations(pool, n):
                full = {Upload(m, h, int(g), k) for m, k in zip(chosen, ks) for g in grids_of[m]}
                if not full or ctx.delay(h, Schedule(full)) <= ctx.deadline:
                    yield frozenset(full)
                    continue
                # full upload misses the deadline: fall back to every non-empty grid subset
                subsets = [
                    [c for r in range(1, len(grids_of[m]) + 1) for c in itertools.combinations(grids_of[m], r)]
                    for m in chosen
                ]
                for pick in itertools.product(*subsets):
                    s = {Upload(m, h, int(g), k) for m, k, gs in zip(chosen, ks, pick) for g in gs}
                    if ctx.delay(h, Schedule(s)) <= ctx.deadline:
                        yield frozenset(s)


def exact_best_response(h: int, profile: Profile, ctx: SchedulingContext, pool: Sequence[int],
                        max_members: int = 3, max_grids: int = 8) -> frozenset:
    """Exhaustive maximiser of h's utility over all feasible strategies (tiny instances only).

    Keeps h's current strategy unless another one is strictly better.
    """
    req = ctx.cluster_req(h)
    grids_of = {}
    for m in sorted(ctx.partition.cluster(h) - {h}):
        if ctx.distance(m, h) > ctx.world.cfg.r_comm:
            continue
        g = np.flatnonzero(req & (ctx.rho[ctx.row[m]] > 0))
        if len(g):
            grids_of[m] = tuple(g.tolist())
    if len(grids_of) > max_members or len(set().union(*grids_of.values()) if grids_of else ()) > max_grids:
        raise ValueError("instance too large for exhaustive enumeration")
    base = fused_density(profile, ctx, skip=h)
    h_row = ctx.row[h]

    def value(strategy):
        return float(late_fusion(_with_strategy(base, h_row, strategy, ctx), ctx.curve)[req].sum())

    current = profile.get(h, frozenset())
    best, best_val = current, value(current)
    for s in _feasible_strategies(h, ctx, pool, grids_of):
        v = value(s)
        if v > best_val + 1e-12:
            best, best_val = s, v
    return best


@dataclass
class GameResult:
    schedule: Schedule
    profile: Profile
    rounds: int
    converged: bool
    trace: list[float]
    round_trace: list[float]


BestResponse = Callable[[int, Profile, SchedulingContext, Sequence[int]], frozenset]


def run_pdpg(ctx: SchedulingContext, cfg: SchedulerConfig = SchedulerConfig(),
             best_response: BestResponse = pps_best_response) -> GameResult:
    """Leaders repeatedly best-respond until no strategy changes or the iteration cap.

    Sequential mode updates leaders one at a time in ascending id against the live profile and
    only adopts a strategy that strictly raises the leader's utility, so the potential never
    drops. Synchronous mode updates all leaders against the previous round's profile.
    """
    leaders = sorted(ctx.partition.leaders)
    budget = allocate_budget(ctx.partition, ctx.channel.n_subchannels, cfg.budget_rule)
    profile: Profile = {h: frozenset() for h in leaders}
    trace = [potential(profile, ctx)]
    round_trace = [trace[0]]
    rounds, converged = 0, not leaders
    while leaders and rounds < cfg.max_game_iterations:
        rounds += 1
        changed = False
        if cfg.update_mode == "sequential":
            for h in leaders:
                new = best_response(h, profile, ctx, budget[h])
                if new == profile[h]:
                    continue
                trial = {**profile, h: new}
                if leader_utility(h, trial, ctx) > leader_utility(h, profile, ctx) + _TOL:
                    profile = trial
                    trace.append(potential(profile, ctx))
                    changed = True
        else:
            prev = profile
            new_profile = {h: best_response(h, prev, ctx, budget[h]) for h in leaders}
            changed = new_profile != prev
            profile = new_profile
            trace.append(potential(profile, ctx))
        round_trace.append(trace[-1])
        if not changed:
            converged = True
            break
    if not converged:
        log.warning("scheduling game did not settle within %d rounds", rounds)
    return GameResult(profile_schedule(profile), profile, rounds, converged, trace, round_trace)


# -- baselines ---------------------------------------------------------------


def baseline_nc(ctx: SchedulingContext) -> Schedule:
    """No cooperation: nothing is transmitted."""
    return Schedule()


def _link_conflicts(link, schedule: Schedule, ctx: SchedulingContext) -> bool:
    """True if ``link`` breaks half-duplex, one-subchannel-per-link or any SINR floor on its subchannel."""
    i, j, k = link
    links = schedule.links()
    if any((i, j, c) in links for c in range(ctx.channel.n_subchannels)):
        return True
    if (j, i, k) in links:
        return True
    # a radio cannot send and receive on the same subchannel
    on_k = [l for l in links if l[2] == k]
    if any(b == i or a == j for (a, b, _) in on_k):
        return True
    tx = set(schedule.transmitters(k)) | {i}
    floor = 10.0 ** (ctx.channel.sinr_min_db / 10.0)
    return any(sinr(a, b, c, tx, ctx.realization, ctx.channel) < floor for (a, b, c) in on_k + [link])


def _within_deadline(link, schedule: Schedule, ctx: SchedulingContext) -> bool:
    k = link[2]
    return all(ctx.delay(r, schedule) <= ctx.deadline
               for r in {b for (_, b, c) in schedule.links() if c == k})


def _link_feasible(link, grids, schedule: Schedule, ctx: SchedulingContext) -> Schedule | None:
    """``schedule`` plus ``link`` carrying ``grids`` if every constraint still holds, else None."""
    if _link_conflicts(link, schedule, ctx):
        return None
    trial = schedule.with_link(link, grids)
    return trial if _within_deadline(link, trial, ctx) else None


def _cav_pairs(ctx: SchedulingContext):
    ids = ctx.density.ids
    return [(i, j) for i in ids for j in ids if i != j and ctx.distance(i, j) <= ctx.world.cfg.r_comm]


def baseline_rs(ctx: SchedulingContext, rng: np.random.Generator, subchannels: Sequence[int] | None = None,
                attempt_factor: int = 1) -> Schedule:
    """Random conflict-free links; each accepted sender uploads its whole sensing region."""
    subchannels = list(range(ctx.channel.n_subchannels) if subchannels is None else subchannels)
    ids = list(ctx.density.ids)
    schedule = Schedule()
    if not subchannels or len(ids) < 2:
        return schedule
    for _ in range(attempt_factor * len(subchannels) * len(ids)):
        a, b = rng.choice(len(ids), size=2, replace=False)
        k = subchannels[int(rng.integers(len(subchannels)))]
        i, j = ids[a], ids[b]
        if ctx.distance(i, j) > ctx.world.cfg.r_comm:
            continue
        grids = np.flatnonzero(ctx.rho[ctx.row[i]] > 0)
        if len(grids) == 0:
            continue
        trial = _link_feasible((i, j, k), grids, schedule, ctx)
        if trial is not None:
            schedule = trial
    return schedule


def baseline_mug(ctx: SchedulingContext, subchannels: Sequence[int] | None = None) -> Schedule:
    """Greedy: repeatedly add the feasible link with the largest utility gain.

    A link's payload is every grid the sender senses that the receiver has not saturated;
    the gain is the receiver's own utility increase over its requirement region (the
    baseline shares raw data only). Ties go to (sender, receiver, subchannel) order.
    """
    subchannels = list(range(ctx.channel.n_subchannels) if subchannels is None else subchannels)
    schedule = Schedule()
    if not subchannels:
        return schedule
    fused = ctx.rho.copy()
    req = ctx.world.req
    rho_th = ctx.curve.rho_th

    def offer(i, j):
        rj = ctx.row[j]
        rho_i = ctx.rho[ctx.row[i]]
        grids = np.flatnonzero((fused[rj] < rho_th) & (rho_i > 0))
        useful = grids[req[rj, grids]]
        before = fused[rj, useful]
        return float((ctx.curve(before + rho_i[useful]) - ctx.curve(before)).sum()), grids

    open_ks = {p: list(subchannels) for p in _cav_pairs(ctx)}
    offers = {p: offer(*p) for p in open_ks}
    while True:
        ranked = sorted((p for p in open_ks if offers[p][0] > _TOL), key=lambda p: (-offers[p][0], p))
        chosen = None
        for i, j in ranked:
            grids = offers[(i, j)][1]
            for k in list(open_ks[(i, j)]):
                if _link_conflicts((i, j, k), schedule, ctx):
                    # more links only add interference and radio conflicts
                    open_ks[(i, j)].remove(k)
                    continue
                trial = schedule.with_link((i, j, k), grids)
                if _within_deadline((i, j, k), trial, ctx):
                    chosen = (i, j, trial)
                    break
            if chosen:
                break
            if not open_ks[(i, j)]:
                del open_ks[(i, j)]
        if chosen is None:
            return schedule
        i, j, schedule = chosen
        grids = offers.pop((i, j))[1]
        del open_ks[(i, j)]
        fused[ctx.row[j], grids] += ctx.rho[ctx.row[i], grids]
        for p in open_ks:
            if p[1] == j:
                offers[p] = offer(*p)


SCHEDULERS = ("ours", "nc", "rs", "mug")
