"""Scenario configuration, grid discretisation, mobility and LiDAR density surrogate."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

KMH_60 = 60.0 / 3.6
LANE_WIDTH = 3.5
LANES_PER_DIRECTION = 2

# unit travel directions of the four approaches: east, west, north, south
_HEADINGS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


@dataclass(frozen=True)
class ScenarioConfig:
    scene_extent: tuple[float, float] = (400.0, 400.0)
    grid_size: float = 10.0
    n_vehicles: int = 100
    n_cavs: int = 20
    r_sens: float = 50.0
    r_req: float = 75.0
    r_comm: float = 100.0
    cycle_duration: float = 0.1
    points_per_frame: float = 5600.0
    speed_range: tuple[float, float] = (0.0, KMH_60)
    tx_power_dbm: float = 23.0
    compute_flops: float = 1e12
    occlusion: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not self.r_sens > 0:
            raise ValueError("r_sens must be positive")
        if self.r_req < self.r_sens:
            raise ValueError("r_req must be >= r_sens")
        if not self.grid_size > 0:
            raise ValueError("grid_size must be positive")
        if not 0 <= self.n_cavs <= self.n_vehicles:
            raise ValueError("n_cavs must lie in [0, n_vehicles]")
        for length in self.scene_extent:
            cells = length / self.grid_size
            if length <= 0 or abs(cells - round(cells)) > 1e-9:
                raise ValueError("scene_extent must be a positive multiple of grid_size")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ValueError("speed_range must satisfy 0 <= lo <= hi")
        if self.cycle_duration <= 0:
            raise ValueError("cycle_duration must be positive")


@dataclass(frozen=True)
class VehicleState:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    is_cav: bool = False
    tx_power: float = 23.0
    compute_capacity: float = 1e12
    lane: int = 0

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


class GridWorld:
    """Row-major tiling of the scene; grid ``g = row * n_cols + col`` with rows along x."""

    def __init__(self, extent: Sequence[float], grid_size: float, origin=(0.0, 0.0)):
        self.extent = (float(extent[0]), float(extent[1]))
        self.grid_size = float(grid_size)
        self.origin = np.asarray(origin, dtype=float)
        self.n_rows = int(round(self.extent[0] / self.grid_size))
        self.n_cols = int(round(self.extent[1] / self.grid_size))
        r, c = np.meshgrid(np.arange(self.n_rows), np.arange(self.n_cols), indexing="ij")
        self.centers = np.stack(
            [self.origin[0] + (r.ravel() + 0.5) * self.grid_size,
             self.origin[1] + (c.ravel() + 0.5) * self.grid_size],
            axis=1,
        )

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "GridWorld":
        return cls(cfg.scene_extent, cfg.grid_size)

    @property
    def n_grids(self) -> int:
        return self.n_rows * self.n_cols

    def center(self, g: int) -> np.ndarray:
        return self.centers[g]

    def grid_of(self, point) -> int:
        """Grid id containing ``point``; -1 when outside the extent."""
        rc = np.floor((np.asarray(point, dtype=float) - self.origin) / self.grid_size).astype(int)
        if not (0 <= rc[0] < self.n_rows and 0 <= rc[1] < self.n_cols):
            return -1
        return int(rc[0] * self.n_cols + rc[1])

    def distances(self, point) -> np.ndarray:
        return np.hypot(*(self.centers - np.asarray(point, dtype=float)).T)

    def region_mask(self, point, radius: float) -> np.ndarray:
        return self.distances(point) <= radius

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float) - self.origin
        return bool(0 <= p[0] <= self.extent[0] and 0 <= p[1] <= self.extent[1])


def sensing_region(vehicle: VehicleState, grids: GridWorld, radius: float) -> frozenset[int]:
    """Grids whose centre lies within ``radius`` of the vehicle (also used for requirement regions)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    return frozenset(np.flatnonzero(grids.region_mask(vehicle.position, radius)).tolist())


def cluster_requirement_region(members: Iterable[VehicleState], grids: GridWorld, r_req: float) -> frozenset[int]:
    members = list(members)
    if not members:
        raise ValueError("members must be non-empty")
    mask = np.zeros(grids.n_grids, dtype=bool)
    for m in members:
        mask |= grids.region_mask(m.position, r_req)
    return frozenset(np.flatnonzero(mask).tolist())


def occlusion_mask(vehicle: VehicleState, others: Sequence[VehicleState], grids: GridWorld,
                   candidates: np.ndarray) -> np.ndarray:
    """Boolean mask of candidate grids whose sight line crosses a grid occupied by another vehicle."""
    own = grids.grid_of(vehicle.position)
    occupied = {grids.grid_of(o.position) for o in others if o.id != vehicle.id}
    occupied.discard(-1)
    occupied.discard(own)
    blocked = np.zeros(grids.n_grids, dtype=bool)
    if not occupied:
        return blocked
    occ = np.zeros(grids.n_grids, dtype=bool)
    occ[list(occupied)] = True
    step = grids.grid_size / 4.0
    for g in np.flatnonzero(candidates):
        seg = grids.centers[g] - vehicle.position
        n = max(int(np.hypot(*seg) / step), 1)
        pts = vehicle.position + np.outer(np.arange(1, n) / n, seg)
        if len(pts) == 0:
            continue
        rc = np.floor((pts - grids.origin) / grids.grid_size).astype(int)
        ok = (rc[:, 0] >= 0) & (rc[:, 0] < grids.n_rows) & (rc[:, 1] >= 0) & (rc[:, 1] < grids.n_cols)
        ids = rc[ok, 0] * grids.n_cols + rc[ok, 1]
        ids = ids[ids != g]
        if occ[ids].any():
            blocked[g] = True
    return blocked


def generate_density(vehicle: VehicleState, grids: GridWorld, cfg: ScenarioConfig,
                     others: Sequence[VehicleState] = ()) -> np.ndarray:
    """Per-grid point density (points/m^2) of one CAV: truncated inverse-square, normalised per frame."""
    if not vehicle.is_cav:
        raise ValueError(f"vehicle {vehicle.id} is not a CAV")
    d = grids.distances(vehicle.position)
    support = d <= cfg.r_sens
    if cfg.occlusion:
        support &= ~occlusion_mask(vehicle, others, grids, support)
    weight = np.where(support, 1.0 / np.maximum(d, grids.grid_size / 2.0) ** 2, 0.0)
    total = weight.sum() * grids.grid_size ** 2
    if total == 0:
        return weight
    return weight * (cfg.points_per_frame / total)


@dataclass(frozen=True)
class DensityField:
    """Raw densities, one row per CAV id in ``ids`` order."""

    ids: tuple[int, ...]
    rho: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "_index", {vid: n for n, vid in enumerate(self.ids)})

    def index(self, vid: int) -> int:
        return self._index[vid]

    def of(self, vid: int) -> np.ndarray:
        return self.rho[self._index[vid]]

    def __contains__(self, vid) -> bool:
        return vid in self._index


def _lane_geometry(lane: int, extent: tuple[float, float]):
    """Heading, entry point and lateral axis of approach lane ``lane``."""
    approach, k = divmod(lane, LANES_PER_DIRECTION)
    heading = _HEADINGS[approach]
    offset = LANE_WIDTH * (k + 0.5)
    cx, cy = extent[0] / 2.0, extent[1] / 2.0
    # right-hand traffic
    if approach == 0:
        entry = np.array([0.0, cy - offset])
    elif approach == 1:
        entry = np.array([extent[0], cy + offset])
    elif approach == 2:
        entry = np.array([cx + offset, 0.0])
    else:
        entry = np.array([cx - offset, extent[1]])
    return heading, entry


def spawn_vehicles(cfg: ScenarioConfig, rng: np.random.Generator) -> list[VehicleState]:
    """Place vehicles uniformly on the lanes of a two-road orthogonal intersection."""
    n_lanes = 4 * LANES_PER_DIRECTION
    cav_ids = set(rng.choice(cfg.n_vehicles, size=cfg.n_cavs, replace=False).tolist())
    vehicles = []
    for vid in range(cfg.n_vehicles):
        lane = int(rng.integers(n_lanes))
        heading, entry = _lane_geometry(lane, cfg.scene_extent)
        length = cfg.scene_extent[0] if heading[0] != 0 else cfg.scene_extent[1]
        pos = entry + heading * rng.uniform(0.0, length)
        speed = rng.uniform(*cfg.speed_range)
        vehicles.append(VehicleState(
            id=vid, position=pos, velocity=heading * speed, is_cav=vid in cav_ids,
            tx_power=cfg.tx_power_dbm, compute_capacity=cfg.compute_flops, lane=lane,
        ))
    return vehicles


def step_mobility(vehicles: Sequence[VehicleState], dt: float, cfg: ScenarioConfig,
                  rng: np.random.Generator) -> list[VehicleState]:
    """Advance every vehicle by one Euler step; leavers re-enter at their lane entry with a fresh speed."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = []
    w, h = cfg.scene_extent
    for v in vehicles:
        pos = v.position + v.velocity * dt
        if 0.0 <= pos[0] <= w and 0.0 <= pos[1] <= h:
            out.append(replace(v, position=pos))
            continue
        heading, entry = _lane_geometry(v.lane, cfg.scene_extent)
        speed = rng.uniform(*cfg.speed_range)
        out.append(replace(v, position=entry.copy(), velocity=heading * speed))
    return out


@dataclass(frozen=True)
class World:
    """Immutable per-cycle snapshot shared by clustering, scheduling and metrics."""

    cfg: ScenarioConfig
    grids: GridWorld
    vehicles: tuple[VehicleState, ...]
    density: DensityField
    sens: np.ndarray
    req: np.ndarray
    cycle: int = 0
    by_id: dict = field(default_factory=dict, compare=False)

    @classmethod
    def build(cls, cfg: ScenarioConfig, vehicles: Sequence[VehicleState], cycle: int = 0,
              grids: GridWorld | None = None) -> "World":
        grids = grids or GridWorld.from_config(cfg)
        cavs = sorted((v for v in vehicles if v.is_cav), key=lambda v: v.id)
        rho = np.zeros((len(cavs), grids.n_grids))
        sens = np.zeros_like(rho, dtype=bool)
        req = np.zeros_like(rho, dtype=bool)
        for n, v in enumerate(cavs):
            rho[n] = generate_density(v, grids, cfg, vehicles)
            d = grids.distances(v.position)
            sens[n] = d <= cfg.r_sens
            req[n] = d <= cfg.r_req
        density = DensityField(tuple(v.id for v in cavs), rho)
        return cls(cfg, grids, tuple(vehicles), density, sens, req, cycle,
                   {v.id: v for v in vehicles})

    @property
    def cav_ids(self) -> tuple[int, ...]:
        return self.density.ids

    @property
    def cavs(self) -> list[VehicleState]:
        return [self.by_id[i] for i in self.cav_ids]

    def vehicle(self, vid: int) -> VehicleState:
        return self.by_id[vid]
