"""Sidelink channel: path loss, SINR rates, schedule constraints and the cycle deadline."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .world import DensityField

CHANNEL_STREAM = 1


@dataclass(frozen=True)
class ChannelConfig:
    carrier_ghz: float = 5.9
    bandwidth_mhz: float = 40.0
    n_subchannels: int = 10
    noise_psd_dbm_hz: float = -174.0
    shadowing_sigma_db: float = 4.0
    fading: bool = True
    # bits per (point/m^2) in one 10 m grid: 100 m^2 * 4 float32 per point
    c0: float = 100.0 * 4 * 32
    n_bit: float = 100.0
    sinr_min_db: float = 0.0

    def __post_init__(self):
        if self.n_subchannels < 1:
            raise ValueError("n_subchannels must be >= 1")
        if self.bandwidth_mhz <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def subchannel_hz(self) -> float:
        return self.bandwidth_mhz * 1e6 / self.n_subchannels

    @property
    def noise_dbm(self) -> float:
        return self.noise_psd_dbm_hz + 10.0 * math.log10(self.subchannel_hz)

    @property
    def noise_mw(self) -> float:
        return 10.0 ** (self.noise_dbm / 10.0)


class Upload(NamedTuple):
    sender: int
    receiver: int
    grid: int
    subchannel: int


class Schedule:
    """Active upload variables grouped by link; a link (i, j, k) is active iff it carries some grid."""

    __slots__ = ("_links", "_uploads", "_tx")

    def __init__(self, uploads: Iterable = ()):
        links = defaultdict(set)
        for u in uploads:
            u = Upload(*u)
            links[(u.sender, u.receiver, u.subchannel)].add(u.grid)
        self._set({l: frozenset(g) for l, g in links.items()})

    def _set(self, links: dict):
        self._links = dict(sorted(links.items()))
        self._uploads = None
        self._tx = None

    @classmethod
    def from_links(cls, links: dict) -> "Schedule":
        out = cls.__new__(cls)
        out._set({tuple(l): frozenset(int(g) for g in gs) for l, gs in links.items() if len(gs)})
        return out

    def with_link(self, link, grids) -> "Schedule":
        """Copy with ``grids`` added on ``link``."""
        link = tuple(int(x) for x in link)
        links = dict(self._links)
        merged = links.get(link, frozenset()) | frozenset(int(g) for g in grids)
        if merged:
            links[link] = merged
        out = Schedule.__new__(Schedule)
        out._set(links)
        return out

    def __iter__(self) -> Iterator[Upload]:
        return iter(sorted(self.uploads))

    def __len__(self):
        return sum(len(g) for g in self._links.values())

    def __contains__(self, item):
        u = Upload(*item)
        return u.grid in self._links.get((u.sender, u.receiver, u.subchannel), ())

    def __eq__(self, other):
        return isinstance(other, Schedule) and self._links == other._links

    def __hash__(self):
        return hash(frozenset(self._links.items()))

    def __or__(self, other: "Schedule") -> "Schedule":
        links = dict(self._links)
        for l, g in other._links.items():
            links[l] = links.get(l, frozenset()) | g
        out = Schedule.__new__(Schedule)
        out._set(links)
        return out

    def __repr__(self):
        return f"Schedule({len(self)} uploads, {len(self._links)} links)"

    @property
    def uploads(self) -> frozenset:
        if self._uploads is None:
            self._uploads = frozenset(
                Upload(i, j, g, k) for (i, j, k), gs in self._links.items() for g in gs)
        return self._uploads

    def links(self) -> dict[tuple[int, int, int], frozenset]:
        return self._links

    def transmitters(self, k: int) -> set[int]:
        if self._tx is None:
            tx = defaultdict(set)
            for (i, _, c) in self._links:
                tx[c].add(i)
            self._tx = dict(tx)
        return self._tx.get(k, set())

    def receivers(self) -> set[int]:
        return {j for (_, j, _) in self._links}

    def inbound(self, receiver: int) -> list[tuple[int, int, int]]:
        return [l for l in self._links if l[1] == receiver]


def pathloss_db(distance: float, carrier_ghz: float = 5.9) -> float:
    d = max(float(distance), 1.0)
    return 32.4 + 21.0 * math.log10(d) + 20.0 * math.log10(carrier_ghz)


def dbm_to_mw(dbm):
    return 10.0 ** (np.asarray(dbm, dtype=float) / 10.0)


def _pair_rng(seed: int, cycle: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, CHANNEL_STREAM, cycle, *key]))


class ChannelRealization:
    """Linear power gains ``gain[i, j, k]`` and transmit powers over a fixed id set."""

    def __init__(self, ids, gain: np.ndarray, power_dbm):
        self.ids = tuple(ids)
        self.gain = np.asarray(gain, dtype=float)
        self.power_mw = dbm_to_mw(np.broadcast_to(power_dbm, (len(self.ids),)))
        self._index = {vid: n for n, vid in enumerate(self.ids)}

    def h(self, i: int, j: int, k: int) -> float:
        return float(self.gain[self._index[i], self._index[j], k])

    def p(self, i: int) -> float:
        return float(self.power_mw[self._index[i]])

    @classmethod
    def draw(cls, vehicles, cfg: ChannelConfig, seed: int, cycle: int) -> "ChannelRealization":
        """Path loss x log-normal shadowing (per link, symmetric) x Rayleigh power (per link and subchannel).

        Each random term depends only on (seed, cycle, i, j[, k]).
        """
        vehicles = sorted(vehicles, key=lambda v: v.id)
        n, K = len(vehicles), cfg.n_subchannels
        gain = np.ones((n, n, K))
        for a in range(n):
            for b in range(a + 1, n):
                va, vb = vehicles[a], vehicles[b]
                pl = pathloss_db(np.hypot(*(va.position - vb.position)), cfg.carrier_ghz)
                shadow = 0.0
                if cfg.shadowing_sigma_db > 0:
                    shadow = _pair_rng(seed, cycle, 0, va.id, vb.id).normal(0.0, cfg.shadowing_sigma_db)
                base = 10.0 ** (-(pl + shadow) / 10.0)
                for x, y, i, j in ((a, b, va.id, vb.id), (b, a, vb.id, va.id)):
                    fade = _pair_rng(seed, cycle, 1, i, j).exponential(1.0, K) if cfg.fading else 1.0
                    gain[x, y] = base * fade
        return cls([v.id for v in vehicles], gain, [v.tx_power for v in vehicles])

    @classmethod
    def deterministic(cls, vehicles, cfg: ChannelConfig) -> "ChannelRealization":
        """Path loss only; unit shadowing and fading multipliers."""
        vehicles = sorted(vehicles, key=lambda v: v.id)
        n = len(vehicles)
        gain = np.ones((n, n, cfg.n_subchannels))
        for a in range(n):
            for b in range(n):
                if a != b:
                    d = np.hypot(*(vehicles[a].position - vehicles[b].position))
                    gain[a, b] = 10.0 ** (-pathloss_db(d, cfg.carrier_ghz) / 10.0)
        return cls([v.id for v in vehicles], gain, [v.tx_power for v in vehicles])


def sinr(i: int, j: int, k: int, transmitters: Iterable[int], realization: ChannelRealization,
         cfg: ChannelConfig) -> float:
    interference = sum(realization.p(t) * realization.h(t, j, k) for t in set(transmitters) - {i, j})
    return realization.p(i) * realization.h(i, j, k) / (interference + cfg.noise_mw)


def link_rate(i: int, j: int, k: int, schedule: Schedule, realization: ChannelRealization,
              cfg: ChannelConfig) -> float:
    """Shannon rate (bit/s) of link i -> j on subchannel k under co-channel interference."""
    return cfg.subchannel_hz * math.log2(1.0 + sinr(i, j, k, schedule.transmitters(k), realization, cfg))


def link_rates(schedule: Schedule, realization: ChannelRealization, cfg: ChannelConfig, links=None) -> dict:
    links = schedule.links() if links is None else links
    return {
        (i, j, k): cfg.subchannel_hz * math.log2(1.0 + sinr(i, j, k, schedule.transmitters(k), realization, cfg))
        for (i, j, k) in links
    }


class Violation(NamedTuple):
    kind: str
    detail: tuple


def validate_schedule(schedule: Schedule, partition=None) -> list[Violation]:
    """Every violated constraint instance; an empty list means the schedule is feasible.

    Half-duplex and single-subchannel-per-link are always checked; the cluster structure
    (member -> own leader) only when a ``partition`` is given.
    """
    out = []
    links = schedule.links()
    per_pair = defaultdict(list)
    for (i, j, k) in links:
        per_pair[(i, j)].append(k)
        if i < j and (j, i, k) in links:
            out.append(Violation("half_duplex", (i, j, k)))
        if i == j:
            out.append(Violation("self_link", (i, k)))
    for (i, j), ks in sorted(per_pair.items()):
        if len(ks) > 1:
            out.append(Violation("multi_subchannel", (i, j, tuple(sorted(ks)))))
    if partition is not None:
        for (i, j) in sorted(per_pair):
            if not partition.is_leader(j):
                out.append(Violation("non_leader_receiver", (i, j)))
            elif partition.leader_of(i) != j:
                out.append(Violation("non_member_upload", (i, j)))
    return out


def data_volume(i: int, j: int, k: int, schedule: Schedule, density: DensityField, cfg: ChannelConfig) -> float:
    grids = schedule.links().get((i, j, k))
    if not grids:
        return 0.0
    return float(density.of(i)[list(grids)].sum()) * cfg.c0


def transmission_delay(i: int, j: int, k: int, schedule: Schedule, density: DensityField,
                       realization: ChannelRealization, cfg: ChannelConfig) -> float:
    s = data_volume(i, j, k, schedule, density, cfg)
    if s == 0:
        return 0.0
    r = link_rate(i, j, k, schedule, realization, cfg)
    return math.inf if r <= 0 else s / r


def computation_delay(leader: int, schedule: Schedule, density: DensityField, cfg: ChannelConfig,
                      compute_flops: float) -> float:
    bits = sum(data_volume(i, j, k, schedule, density, cfg) for (i, j, k) in schedule.inbound(leader))
    return bits * cfg.n_bit / compute_flops


def leader_delay(leader: int, schedule: Schedule, density: DensityField, realization: ChannelRealization,
                 cfg: ChannelConfig, compute_flops: float, rates: dict | None = None) -> float:
    """Slowest inbound transmission plus fusion compute time at ``leader``."""
    inbound = schedule.inbound(leader)
    if rates is None:
        rates = link_rates(schedule, realization, cfg, inbound)
    worst, bits = 0.0, 0.0
    for link in inbound:
        s = data_volume(*link, schedule, density, cfg)
        bits += s
        r = rates[link]
        worst = max(worst, math.inf if r <= 0 else s / r)
    return worst + bits * cfg.n_bit / compute_flops


def check_deadline(leader: int, schedule: Schedule, density: DensityField, realization: ChannelRealization,
                   cfg: ChannelConfig, compute_flops: float, cycle_duration: float) -> bool:
    return leader_delay(leader, schedule, density, realization, cfg, compute_flops) <= cycle_duration
