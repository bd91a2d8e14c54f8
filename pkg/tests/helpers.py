import dataclasses
import itertools

import numpy as np

from cpgame.channel import ChannelConfig, ChannelRealization
from cpgame.coalition import Partition
from cpgame.perception import UtilityCurve
from cpgame.scheduling import SchedulingContext
from cpgame.world import DensityField, ScenarioConfig, VehicleState, World

CURVE = UtilityCurve()


def make_world(positions, velocities=None, cfg=None, cycle=0, cav=None):
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    if cfg is None:
        cfg = ScenarioConfig(n_vehicles=max(n, 1), n_cavs=max(n, 1))
    if velocities is None:
        velocities = np.zeros((n, 2))
    cav = [True] * n if cav is None else cav
    vehicles = [
        VehicleState(id=i, position=positions[i], velocity=np.asarray(velocities[i], dtype=float),
                     is_cav=cav[i], tx_power=cfg.tx_power_dbm, compute_capacity=cfg.compute_flops)
        for i in range(n)
    ]
    return World.build(cfg, vehicles, cycle=cycle)


def tiny_config(n, extent=(40.0, 50.0), ppf=400.0):
    return ScenarioConfig(scene_extent=extent, grid_size=10.0, n_vehicles=n, n_cavs=n, r_sens=15.0,
                          r_req=20.0, r_comm=500.0, points_per_frame=ppf)


def random_partition(ids, rng, n_clusters, max_size):
    """Random coalitions over ``ids`` (at most ``n_clusters`` with members), random leaders."""
    ids = list(ids)
    rng.shuffle(ids)
    groups, start = [], 0
    for _ in range(n_clusters):
        if start >= len(ids):
            break
        size = int(rng.integers(1, max_size + 1))
        groups.append(ids[start:start + size])
        start += size
    groups += [[i] for i in ids[start:]]
    leaders = [int(rng.choice(g)) for g in groups]
    return Partition(tuple(frozenset(int(x) for x in g) for g in groups), tuple(leaders))


def tiny_instance(rng, n_clusters=3, max_size=5, n_sub=4, extent=(40.0, 50.0), ppf=400.0, seed=0):
    """A small world with a random partition, ready for the scheduling game."""
    sizes = [int(rng.integers(1, max_size + 1)) for _ in range(n_clusters)]
    n = sum(sizes)
    cfg = tiny_config(n, extent, ppf)
    pos = rng.uniform([0, 0], extent, size=(n, 2))
    world = make_world(pos, rng.normal(0, 2, size=(n, 2)), cfg)
    ids = list(range(n))
    groups, start = [], 0
    for s in sizes:
        groups.append(ids[start:start + s])
        start += s
    leaders = [int(rng.choice(g)) for g in groups]
    partition = Partition(tuple(frozenset(g) for g in groups), tuple(leaders))
    channel = ChannelConfig(n_subchannels=n_sub)
    realization = ChannelRealization.draw(world.cavs, channel, seed, 0)
    return SchedulingContext(world, CURVE, channel, realization, partition)


def all_partitions(items):
    """Every set partition of ``items`` (Bell-number many)."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for p in all_partitions(rest):
        for k in range(len(p)):
            yield p[:k] + [[first] + p[k]] + p[k + 1:]
        yield [[first]] + p


def naive_late_utility(fused, req, curve):
    """Flat double loop over (CAV, grid)."""
    total = 0.0
    for i in range(req.shape[0]):
        for g in range(req.shape[1]):
            if req[i, g]:
                total += max(curve(fused[k, g]) for k in range(fused.shape[0]))
    return total


def subsets(seq):
    seq = list(seq)
    return itertools.chain.from_iterable(itertools.combinations(seq, r) for r in range(len(seq) + 1))


def with_density(world, rho):
    """Same world with hand-set raw densities (one row per CAV)."""
    rho = np.asarray(rho, dtype=float)
    return dataclasses.replace(world, density=DensityField(world.density.ids, rho), by_id=world.by_id)
