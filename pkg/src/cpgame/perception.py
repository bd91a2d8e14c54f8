"""Perception utility curve, early/late fusion and the aggregate objective."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .world import DensityField


class StructuralViolation(ValueError):
    """A schedule uploads outside the member -> own-leader structure."""


@dataclass(frozen=True)
class UtilityCurve:
    """Saturating exponential ``f(rho) = f_max * (1 - exp(-lam * rho))``.

    ``lam`` defaults to ``ln(1/epsilon) / rho_th`` so that ``f(rho_th) = (1 - epsilon) f_max``.
    """

    f_max: float = 1.0
    rho_th: float = 2.0
    epsilon: float = 0.05
    lam: float | None = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.rho_th <= 0 or self.f_max <= 0:
            raise ValueError("rho_th and f_max must be positive")
        if self.lam is None:
            object.__setattr__(self, "lam", math.log(1.0 / self.epsilon) / self.rho_th)
        elif self.lam <= 0:
            raise ValueError("lam must be positive")

    def __call__(self, rho):
        arr = np.asarray(rho, dtype=float)
        if np.any(arr < 0):
            raise ValueError("density must be non-negative")
        out = self.f_max * -np.expm1(-self.lam * arr)
        return float(out) if out.ndim == 0 else out


def utility(rho, curve: UtilityCurve = UtilityCurve()):
    return curve(rho)


def fuse_effective_density(schedule, density: DensityField, partition=None) -> np.ndarray:
    """Effective density per CAV row: receivers add every scheduled upload to their own raw density.

    With a ``partition`` the uploads must go from a member to the leader of its own coalition.
    Without one (baseline schedulers) any receiver fuses what it receives.
    """
    fused = density.rho.copy()
    for up in schedule:
        if partition is not None:
            if not partition.is_leader(up.receiver):
                raise StructuralViolation(f"upload to non-leader {up.receiver}")
            if up.sender == up.receiver or partition.leader_of(up.sender) != up.receiver:
                raise StructuralViolation(f"{up.sender} is not a member of {up.receiver}'s cluster")
        fused[density.index(up.receiver), up.grid] += density.of(up.sender)[up.grid]
    return fused


def late_fusion(fused: np.ndarray, curve: UtilityCurve) -> np.ndarray:
    """Per-grid best detection quality over all vehicles."""
    if fused.shape[0] == 0:
        return np.zeros(fused.shape[1])
    return curve(fused.max(axis=0))


def late_fusion_utility(g: int, fused: np.ndarray, curve: UtilityCurve) -> float:
    if fused.shape[0] == 0:
        return 0.0
    return float(curve(fused[:, g].max()))


def vehicle_utility(row: int, fused: np.ndarray, req: np.ndarray, curve: UtilityCurve) -> float:
    """Sum of late-fused utility over the requirement region of CAV row ``row``."""
    return float(late_fusion(fused, curve)[req[row]].sum())


def per_vehicle_utility(fused: np.ndarray, req: np.ndarray, curve: UtilityCurve,
                        late: bool = True) -> np.ndarray:
    if not late:
        return np.where(req, curve(fused), 0.0).sum(axis=1)
    return req.astype(float) @ late_fusion(fused, curve)


def system_utility(fused: np.ndarray, req: np.ndarray, curve: UtilityCurve, late: bool = True) -> float:
    """Aggregate objective; ``late=False`` gives the no-cooperation accounting."""
    return float(per_vehicle_utility(fused, req, curve, late).sum())


def requirement_weights(req: np.ndarray, rows: Iterable[int] | None = None) -> np.ndarray:
    """How many CAVs (optionally restricted to ``rows``) require each grid."""
    sel = req if rows is None else req[list(rows)]
    return sel.sum(axis=0).astype(float)
