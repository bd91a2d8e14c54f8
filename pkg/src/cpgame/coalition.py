"""Perception-driven coalition formation with motion-aware stability and leader election."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .perception import UtilityCurve
from .world import World

log = logging.getLogger(__name__)

_TOL = 1e-12


@dataclass(frozen=True)
class CoalitionConfig:
    n_max: int = 4
    t_stab: float = 0.5
    alpha: float = 0.7
    neighbor_radius: float = 100.0
    max_rounds: int = 50
    speed_deviation: float = 5.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass(frozen=True)
class Partition:
    coalitions: tuple[frozenset, ...]
    leaders: tuple[int, ...]
    formed_at: float = 0.0
    rounds: int = 0
    converged: bool = True
    phi_trace: tuple[float, ...] = ()
    phi_decreases: int = 0
    cycle_broken: bool = False
    _leader_of: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(self.coalitions) != len(self.leaders):
            raise ValueError("one leader per coalition")
        m = {}
        for S, h in zip(self.coalitions, self.leaders):
            for i in S:
                m[i] = h
        object.__setattr__(self, "_leader_of", m)

    @classmethod
    def empty(cls) -> "Partition":
        return cls((), ())

    @classmethod
    def singletons(cls, ids: Iterable[int]) -> "Partition":
        ids = sorted(ids)
        return cls(tuple(frozenset([i]) for i in ids), tuple(ids))

    @property
    def members(self) -> frozenset:
        return frozenset(self._leader_of)

    def leader_of(self, vid: int) -> int | None:
        return self._leader_of.get(vid)

    def is_leader(self, vid: int) -> bool:
        return self._leader_of.get(vid) == vid

    def cluster(self, leader: int) -> frozenset:
        return self.coalitions[self.leaders.index(leader)]

    def sizes(self) -> list[int]:
        return [len(S) for S in self.coalitions]

    def check(self, universe: Iterable[int], n_max: int) -> list[str]:
        """Structural problems; empty when the partition is valid."""
        problems = []
        seen = set()
        for S, h in zip(self.coalitions, self.leaders):
            if not S:
                problems.append("empty coalition")
            if seen & S:
                problems.append(f"overlap {sorted(seen & S)}")
            seen |= S
            if h not in S:
                problems.append(f"leader {h} outside its coalition")
            if len(S) > n_max:
                problems.append(f"coalition of size {len(S)} > {n_max}")
        if seen != set(universe):
            problems.append("partition does not cover the CAV set")
        return problems


def coalition_value(S: Iterable[int], world: World, curve: UtilityCurve) -> float:
    """Early-fusion gain of ``S`` over late fusion among its members."""
    rows = [world.density.index(i) for i in S]
    if not rows:
        raise ValueError("coalition must be non-empty")
    rho = world.density.rho[rows]
    active = (rho > 0).any(axis=0)
    rho = rho[:, active]
    return float((curve(rho.sum(axis=0)) - curve(rho.max(axis=0))).sum())


def potential(coalitions: Iterable[Iterable[int]], world: World, curve: UtilityCurve) -> float:
    return sum(coalition_value(S, world, curve) for S in coalitions)


def predicted_position(position, velocity, member_velocities: Sequence, t_stab: float) -> np.ndarray:
    """Extrapolate with the deviation from the coalition mean velocity."""
    mean_v = np.mean(np.asarray(member_velocities, dtype=float), axis=0)
    return np.asarray(position, dtype=float) + (np.asarray(velocity, dtype=float) - mean_v) * t_stab


def _req_mask(S, world: World) -> np.ndarray:
    return world.req[[world.density.index(i) for i in S]].any(axis=0)


def stability_coefficient(i: int, S: Iterable[int], world: World, cfg: CoalitionConfig,
                          req_mask: np.ndarray | None = None) -> float:
    """Share of i's predicted sensing grids that fall in S's requirement region.

    ``S`` is the coalition i would belong to; the prediction uses the mean velocity over
    ``S | {i}`` while the requirement region is that of ``S`` without i.
    """
    S = set(S)
    team = S | {i}
    vi = world.vehicle(i)
    pred = predicted_position(vi.position, vi.velocity, [world.vehicle(m).velocity for m in team], cfg.t_stab)
    pred_mask = world.grids.region_mask(pred, world.cfg.r_sens)
    n_pred = int(pred_mask.sum())
    if n_pred == 0:
        return 0.0
    others = S - {i}
    if not others:
        return 0.0
    req = _req_mask(others, world) if req_mask is None else req_mask
    return float((pred_mask & req).sum()) / n_pred


def marginal_contribution(i: int, S: Iterable[int], world: World, curve: UtilityCurve,
                          cfg: CoalitionConfig, _cache: dict | None = None) -> float:
    """Stability-weighted immediate gain of adding i to coalition S (which must not contain i)."""
    S = frozenset(S)
    if i in S:
        raise ValueError(f"{i} already belongs to the coalition")
    if not S:
        return 0.0
    if len(S) + 1 > cfg.n_max:
        raise ValueError("coalition is full")
    if _cache is not None and S in _cache:
        req, fused = _cache[S]
    else:
        rows = [world.density.index(m) for m in S]
        req = world.req[rows].any(axis=0)
        fused = world.density.rho[rows].sum(axis=0)
        if _cache is not None:
            _cache[S] = (req, fused)
    beta = stability_coefficient(i, S, world, cfg, req_mask=req)
    if beta == 0.0:
        return 0.0
    row = world.density.index(i)
    grids = world.sens[row] & req
    rho_i = world.density.rho[row, grids]
    base = fused[grids]
    early = float((curve(base + rho_i) - curve(base)).sum())
    return beta * early


def elect_leader(S: Iterable[int], world: World, alpha: float) -> int:
    """Member closest to the coalition's mean position and velocity; ties go to the lowest id."""
    ids = sorted(S)
    if not ids:
        raise ValueError("coalition must be non-empty")
    x = np.array([world.vehicle(i).position for i in ids])
    v = np.array([world.vehicle(i).velocity for i in ids])
    score = alpha * np.hypot(*(x - x.mean(axis=0)).T) + (1 - alpha) * np.hypot(*(v - v.mean(axis=0)).T)
    best = score.min()
    return next(i for i, s in zip(ids, score) if s <= best + 1e-9)


def neighbor_coalitions(i: int, coalitions: dict, world: World, cfg: CoalitionConfig) -> list:
    """Coalition keys (other than i's own) whose centroid is closer than the neighbour radius."""
    xi = world.vehicle(i).position
    out = []
    for key, S in sorted(coalitions.items()):
        if i in S:
            continue
        centroid = np.mean([world.vehicle(m).position for m in S], axis=0)
        if np.hypot(*(centroid - xi)) < cfg.neighbor_radius:
            out.append(key)
    return out


def form_clusters(world: World, curve: UtilityCurve, cfg: CoalitionConfig, now: float = 0.0,
                  on_sweep=None) -> Partition:
    """Hedonic-shift dynamics from singletons.

    Each CAV, in ascending id order, compares its contribution to its current coalition with
    the contribution it would make to each neighbouring coalition that has room, and moves
    immediately when some coalition offers a strictly larger one. Sweeps repeat until one
    makes no move or ``cfg.max_rounds`` is hit. ``on_sweep(partition)`` is called after every sweep.

    The contribution rule has no potential, so sweeps can cycle. Once a sweep ends in a
    partition seen before, moves must also strictly raise the coalition potential, which
    guarantees termination.
    """
    ids = list(world.cav_ids)
    coalitions = {i: {i} for i in ids}
    where = {i: i for i in ids}
    cache: dict = {}
    phi = potential(coalitions.values(), world, curve)
    trace = [phi]
    decreases = 0
    rounds = 0
    converged = not ids
    guarded = False
    seen = set()

    def snapshot():
        groups = sorted((frozenset(S) for S in coalitions.values()), key=min)
        return Partition(tuple(groups), tuple(elect_leader(S, world, cfg.alpha) for S in groups),
                         formed_at=now, rounds=rounds)

    while ids and rounds < cfg.max_rounds:
        rounds += 1
        moved = False
        for i in ids:
            cur = where[i]
            rest = coalitions[cur] - {i}
            best_val = marginal_contribution(i, rest, world, curve, cfg, cache) if rest else 0.0
            best = cur
            for key in neighbor_coalitions(i, coalitions, world, cfg):
                S = coalitions[key]
                if len(S) + 1 > cfg.n_max:
                    continue
                val = marginal_contribution(i, S, world, curve, cfg, cache)
                if val > best_val + _TOL:
                    best_val, best = val, key
            if best == cur:
                continue
            before = coalition_value(coalitions[cur], world, curve) + coalition_value(coalitions[best], world, curve)
            if guarded:
                best = _guarded_target(i, cur, coalitions, world, curve, cfg, cache, best_val)
                if best == cur:
                    continue
                before = coalition_value(coalitions[cur], world, curve) + coalition_value(coalitions[best], world, curve)
            coalitions[cur].discard(i)
            coalitions[best].add(i)
            where[i] = best
            after = coalition_value(coalitions[best], world, curve)
            if coalitions[cur]:
                after += coalition_value(coalitions[cur], world, curve)
            else:
                del coalitions[cur]
            if after < before - 1e-9:
                decreases += 1
                log.debug("migration of %d lowered the coalition potential by %.3g", i, before - after)
            phi += after - before
            trace.append(phi)
            moved = True
        if on_sweep is not None:
            on_sweep(snapshot())
        if not moved:
            converged = True
            break
        key = frozenset(frozenset(S) for S in coalitions.values())
        if key in seen and not guarded:
            guarded = True
            log.debug("coalition sweep cycle detected after %d sweeps", rounds)
        seen.add(key)
    if not converged:
        log.warning("cluster formation stopped after %d sweeps without converging", rounds)
    p = snapshot()
    return Partition(p.coalitions, p.leaders, formed_at=now, rounds=rounds, converged=converged,
                     phi_trace=tuple(trace), phi_decreases=decreases, cycle_broken=guarded)


def _guarded_target(i, cur, coalitions, world, curve, cfg, cache, _):
    """Best contribution-improving move of i that also strictly raises the coalition potential."""
    rest = coalitions[cur] - {i}
    stay = marginal_contribution(i, rest, world, curve, cfg, cache) if rest else 0.0
    v_cur = coalition_value(coalitions[cur], world, curve)
    v_rest = coalition_value(rest, world, curve) if rest else 0.0
    best, best_val = cur, stay
    for key in neighbor_coalitions(i, coalitions, world, cfg):
        S = coalitions[key]
        if len(S) + 1 > cfg.n_max:
            continue
        val = marginal_contribution(i, S, world, curve, cfg, cache)
        if val <= best_val + _TOL:
            continue
        gain = v_rest + coalition_value(S | {i}, world, curve) - v_cur - coalition_value(S, world, curve)
        if gain > 1e-9:
            best, best_val = key, val
    return best


def is_nash_stable(partition: Partition, world: World, curve: UtilityCurve, cfg: CoalitionConfig) -> bool:
    """True when no CAV gains by moving to a neighbouring coalition with spare capacity."""
    coalitions = {min(S): set(S) for S in partition.coalitions}
    for i in world.cav_ids:
        own = next(S for S in coalitions.values() if i in S)
        rest = own - {i}
        stay = marginal_contribution(i, rest, world, curve, cfg) if rest else 0.0
        for key in neighbor_coalitions(i, coalitions, world, cfg):
            S = coalitions[key]
            if len(S) + 1 <= cfg.n_max and marginal_contribution(i, S, world, curve, cfg) > stay + _TOL:
                return False
    return True


def should_reform(prev: Partition | None, world: World, cfg: CoalitionConfig, now: float) -> bool:
    """Re-run formation on CAV entry/exit, member drift, speed incoherence or an expired window."""
    if prev is None:
        return True
    if prev.members != set(world.cav_ids):
        return True
    if now - prev.formed_at > cfg.t_stab + 1e-9:
        return True
    for S in prev.coalitions:
        if len(S) < 2:
            continue
        x = np.array([world.vehicle(i).position for i in S])
        v = np.array([world.vehicle(i).velocity for i in S])
        if (np.hypot(*(x - x.mean(axis=0)).T) > cfg.neighbor_radius).any():
            return True
        if (np.hypot(*(v - v.mean(axis=0)).T) > cfg.speed_deviation).any():
            return True
    return False
