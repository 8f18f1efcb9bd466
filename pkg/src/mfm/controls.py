"""Relaxed (Young-measure) controls on uniform time slices over finite control grids."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .measures import (
    EmpiricalMeasure,
    LipschitzNet,
    ProductDomain,
    build_lipschitz_net,
    narrow_metric_d,
    transport,
    wasserstein_p,
)

ROW_TOL = 1e-12
COMPAT_TOL = 1e-9


class ControlError(ValueError):
    pass


@dataclass(frozen=True)
class ControlGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] == 0:
            raise ControlError("control grid must be nonempty")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def dist(self) -> np.ndarray:
        return np.linalg.norm(self.points[:, None, :] - self.points[None, :, :], axis=2)

    def to_json(self) -> list:
        return self.points.tolist()


@dataclass(frozen=True)
class RelaxedControl:
    """Kernel of shape (K, |grid|); row k is the control law on [kT/K, (k+1)T/K)."""

    grid: ControlGrid
    kernel: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        k = np.asarray(self.kernel, float)
        if k.ndim != 2 or k.shape[1] != self.grid.size or k.shape[0] == 0:
            raise ControlError(f"kernel shape {k.shape} does not match grid of size {self.grid.size}")
        if np.any(k < 0) or not np.all(np.isfinite(k)):
            raise ControlError("kernel entries must be finite and nonnegative")
        if np.max(np.abs(k.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ControlError("each kernel row must sum to 1")
        object.__setattr__(self, "kernel", k)

    @property
    def K(self) -> int:
        return self.kernel.shape[0]

    @property
    def slice_width(self) -> float:
        return self.T / self.K

    def mix(self, other: "RelaxedControl", eps: float) -> "RelaxedControl":
        """(1 - eps) * self + eps * other, both on the same grid and slicing."""
        if other.K != self.K or other.grid.size != self.grid.size:
            raise ControlError("controls must share grid and slicing")
        k = (1.0 - eps) * self.kernel + eps * other.kernel
        k = k / k.sum(axis=1, keepdims=True)
        return RelaxedControl(self.grid, k, self.T)

    def refined(self, L: int) -> np.ndarray:
        """Kernel rows on a grid of L uniform steps (L must be a multiple of K)."""
        if L % self.K:
            raise ControlError(f"time grid of {L} steps does not refine {self.K} control slices")
        return np.repeat(self.kernel, L // self.K, axis=0)

    def as_measure(self, sub: int = 8) -> EmpiricalMeasure:
        """The Young measure on [0,T] x grid, atoms at (time, grid index) with midpoint subdivision."""
        h = self.slice_width / sub
        t = (np.arange(self.K * sub) + 0.5) * h
        rows = np.repeat(self.kernel, sub, axis=0) * h
        ti, ui = np.nonzero(rows > 0)
        pts = np.column_stack([t[ti], ui.astype(float)])
        return EmpiricalMeasure(pts, rows[ti, ui])

    def to_json(self) -> dict:
        return {"K": self.K, "T": self.T, "grid": self.grid.to_json(), "kernel": self.kernel.tolist()}

    @classmethod
    def from_json(cls, obj: dict, T: float | None = None) -> "RelaxedControl":
        kernel = np.asarray(obj["kernel"], float)
        if kernel.shape[0] != int(obj["K"]):
            raise ControlError(f"K={obj['K']} but kernel has {kernel.shape[0]} rows")
        return cls(ControlGrid(obj["grid"]), kernel, float(T if T is not None else obj.get("T", 1.0)))


def dirac_control(grid: ControlGrid, index_path, K: int, T: float = 1.0) -> RelaxedControl:
    """Ordinary open-loop control: grid point index_path[k] on slice k (an int means constant)."""
    idx = np.full(K, index_path, dtype=int) if np.isscalar(index_path) else np.asarray(index_path, int)
    if idx.shape != (K,):
        raise ControlError(f"index path must have length K={K}")
    if np.any(idx < 0) or np.any(idx >= grid.size):
        raise ControlError("index out of range")
    kernel = np.zeros((K, grid.size))
    kernel[np.arange(K), idx] = 1.0
    return RelaxedControl(grid, kernel, T)


def integrate_control(phi: Callable, xi: RelaxedControl, t_end: float):
    """Left-Riemann value of int_{[0,t_end] x U} phi(tau, u) xi(d(tau, u)).

    ``phi(tau, u)`` receives a grid point and returns a scalar or vector. The
    last, partially covered slice is prorated.
    """
    if t_end < 0 or t_end > xi.T + 1e-12:
        raise ControlError(f"t_end={t_end} outside [0, {xi.T}]")
    h = xi.slice_width
    total = 0.0
    k = 0
    while k < xi.K and k * h < t_end:
        width = min(h, t_end - k * h)
        tau = k * h
        for j, w in enumerate(xi.kernel[k]):
            if w > 0:
                total = total + width * w * np.asarray(phi(tau, xi.grid.points[j]), float)
        k += 1
    return total


@dataclass(frozen=True)
class ControlDistribution:
    """Weighted atoms (x0, xi); all controls share grid, slicing and horizon."""

    x0: np.ndarray
    controls: tuple
    weights: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0, float)
        if x0.ndim == 1:
            x0 = x0[:, None]
        w = np.asarray(self.weights, float)
        ctrls = tuple(self.controls)
        if not (len(ctrls) == len(w) == x0.shape[0]) or len(w) == 0:
            raise ControlError("atoms must be nonempty and consistent")
        if np.any(w < 0) or abs(w.sum() - 1.0) > ROW_TOL:
            raise ControlError("weights must be a probability vector")
        first = ctrls[0]
        for c in ctrls[1:]:
            if c.K != first.K or c.grid.size != first.grid.size or c.T != first.T:
                raise ControlError("all relaxed controls must share grid, K and T")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "controls", ctrls)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_measure(cls, m0: EmpiricalMeasure, controls: Sequence[RelaxedControl]) -> "ControlDistribution":
        return cls(m0.points.copy(), tuple(controls), m0.weights.copy())

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    @property
    def K(self) -> int:
        return self.controls[0].K

    @property
    def grid(self) -> ControlGrid:
        return self.controls[0].grid

    def kernels(self) -> np.ndarray:
        return np.stack([c.kernel for c in self.controls])

    def x0_marginal(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.x0, self.weights)

    def shifted(self, shift) -> "ControlDistribution":
        return ControlDistribution(self.x0 + np.asarray(shift, float), self.controls, self.weights)

    def mixed(self, others: Sequence[RelaxedControl], eps: float) -> "ControlDistribution":
        return ControlDistribution(self.x0, tuple(c.mix(o, eps) for c, o in zip(self.controls, others)), self.weights)

    def to_json(self) -> dict:
        return {
            "atoms": [
                {"x0": [float(v) for v in x], "xi": c.to_json(), "w": float(w)}
                for x, c, w in zip(self.x0, self.controls, self.weights)
            ]
        }

    @classmethod
    def from_json(cls, obj: dict, T: float | None = None) -> "ControlDistribution":
        atoms = obj["atoms"]
        if not atoms:
            raise ControlError("empty control distribution")
        x0 = np.array([a["x0"] for a in atoms], float).reshape(len(atoms), -1)
        ctrls = tuple(RelaxedControl.from_json(a["xi"], T) for a in atoms)
        return cls(x0, ctrls, [a["w"] for a in atoms])


@dataclass(frozen=True)
class CompatibilityReport:
    passed: bool
    gap: float


def validate_compatibility(alpha: ControlDistribution, m0: EmpiricalMeasure, tol: float = COMPAT_TOL) -> CompatibilityReport:
    """W_1 between the x0-marginal of alpha and m0; passes iff <= tol."""
    if alpha.dim != m0.dim:
        raise ControlError(f"dimension mismatch: alpha has {alpha.dim}, m0 has {m0.dim}")
    proj = alpha.x0_marginal()
    a_mass, m_mass = proj.mass, m0.mass
    if abs(a_mass - m_mass) > tol:
        return CompatibilityReport(False, abs(a_mass - m_mass))
    gap, _ = wasserstein_p(
        EmpiricalMeasure(proj.points, proj.weights / a_mass), EmpiricalMeasure(m0.points, m0.weights / m_mass), 1.0
    )
    return CompatibilityReport(gap <= tol, float(gap))


def control_domain(grid: ControlGrid, T: float) -> ProductDomain:
    return ProductDomain(0.0, float(T), grid.dist)


def default_control_net(grid: ControlGrid, T: float, seed: int = 0, L_max: int = 6, per_level_count: int = 8) -> LipschitzNet:
    return build_lipschitz_net(control_domain(grid, T), L_max, per_level_count, seed)


def control_metric(xi: RelaxedControl, xi2: RelaxedControl, net: LipschitzNet) -> float:
    if xi.grid.size != net.domain.grid_size or xi2.grid.size != net.domain.grid_size:
        raise ControlError("control grid does not match the net domain")
    if abs(xi.T - net.domain.t_hi) > 1e-12 or abs(xi2.T - net.domain.t_hi) > 1e-12:
        raise ControlError("control horizon does not match the net domain")
    return narrow_metric_d(xi.as_measure(), xi2.as_measure(), net)


def control_metric_matrix(A: Sequence[RelaxedControl], B: Sequence[RelaxedControl], net: LipschitzNet) -> np.ndarray:
    """Pairwise control_metric; net integrals are computed once per control."""
    from .measures import net_integrals

    def sig(c):
        mu = c.as_measure()
        return mu.mass, net_integrals(mu, net)

    SA = [sig(c) for c in A]
    SB = {id(c): sig(c) for c in B}
    out = np.zeros((len(A), len(B)))
    for i, (ma, Ia) in enumerate(SA):
        for j, c in enumerate(B):
            mb, Ib = SB[id(c)]
            v = abs(ma - mb)
            for l, (x, y) in enumerate(zip(Ia, Ib), start=1):
                v += 2.0**-l * float(np.max(np.abs(x - y)))
            out[i, j] = v
    return out


def alpha_distance(alpha: ControlDistribution, alpha2: ControlDistribution, p: float, net: LipschitzNet):
    """W_p over atoms with ground metric |x0 - x0'| + control_metric(xi, xi'). Returns (distance, plan)."""
    if alpha.dim != alpha2.dim:
        raise ControlError(f"dimension mismatch: {alpha.dim} vs {alpha2.dim}")
    dx = np.linalg.norm(alpha.x0[:, None, :] - alpha2.x0[None, :, :], axis=2)
    dc = control_metric_matrix(alpha.controls, alpha2.controls, net)
    cost, plan = transport(alpha.weights, alpha2.weights, (dx + dc) ** p)
    return max(cost, 0.0) ** (1.0 / p), plan
