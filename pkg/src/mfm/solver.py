"""Motions of the major/minor-agent system: delayed Euler scheme and Picard iteration.

All trajectories live on a uniform grid of L steps, where L is the least
common multiple of the requested resolution and the slice counts of the
controls, so every control is constant on each step. Integrals are
left-Riemann sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .controls import ControlDistribution, ControlGrid, RelaxedControl, validate_compatibility
from .dynamics import DynamicsSpec, eval_block, growth_envelope_G, validate_slll, SamplerConfig
from .measures import EmpiricalMeasure, TrajectoryBundle, sigma_p_moment, wasserstein_p


class SolverError(RuntimeError):
    pass


class NoConvergence(SolverError):
    def __init__(self, msg: str, residual: float, iterations: int):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class Scenario:
    spec: DynamicsSpec
    m0: EmpiricalMeasure
    y0: np.ndarray
    alpha: ControlDistribution
    zeta: RelaxedControl
    T: float
    p: float
    U: ControlGrid
    V: ControlGrid
    N: int = 128
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "y0", np.atleast_1d(np.asarray(self.y0, float)))

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def validate(self, sampler: SamplerConfig | None = None) -> dict:
        """Compatibility of alpha with m0 and sampled SLLL validation at c = G(|y0|, sigma_p(m0), A)."""
        compat = validate_compatibility(self.alpha, self.m0)
        c = self.envelope_radius()
        cfg = sampler or SamplerConfig(T=self.T, p=self.p, U=self.U.points, V=self.V.points)
        slll = validate_slll(self.spec, c, cfg)
        return {"compatibility": compat, "slll": slll, "c": c}

    def envelope_radius(self) -> float:
        return growth_envelope_G(float(np.linalg.norm(self.y0)), sigma_p_moment(self.m0, self.p), self.spec.A, self.T)


@dataclass(frozen=True)
class MeasureFlow:
    """Coordinate means and sigma_p of m(t) on the time grid."""

    time_grid: np.ndarray
    means: np.ndarray
    sigma: np.ndarray

    @classmethod
    def of_curves(cls, time_grid, curves: np.ndarray, weights: np.ndarray, p: float) -> "MeasureFlow":
        means = np.einsum("n,nkd->kd", weights, curves)
        norms = np.linalg.norm(curves, axis=2)
        sigma = np.einsum("n,nk->k", weights, norms**p) ** (1.0 / p)
        return cls(np.asarray(time_grid), means, sigma)

    @classmethod
    def constant(cls, time_grid, mu: EmpiricalMeasure, p: float) -> "MeasureFlow":
        k = len(time_grid)
        return cls(np.asarray(time_grid), np.tile(mu.mean(), (k, 1)), np.full(k, sigma_p_moment(mu, p)))


@dataclass
class Motion:
    time_grid: np.ndarray
    y: np.ndarray
    chi: TrajectoryBundle
    p: float
    metadata: dict = field(default_factory=dict)

    def m_at(self, k: int) -> EmpiricalMeasure:
        return self.chi.node(k)

    @property
    def m_path(self) -> list:
        return [self.chi.node(k) for k in range(len(self.time_grid))]

    def y_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.time_grid, self.y[:, i]) for i in range(self.y.shape[1])])

    def flow(self) -> MeasureFlow:
        return MeasureFlow.of_curves(self.time_grid, self.chi.curves, self.chi.weights, self.p)

    def sigma_path(self) -> np.ndarray:
        return self.flow().sigma

    def terminal(self) -> tuple[EmpiricalMeasure, np.ndarray]:
        return self.m_at(len(self.time_grid) - 1), self.y[-1]


def reconciled_steps(base: int, *slice_counts: int) -> int:
    L = int(base)
    for k in slice_counts:
        L = L * int(k) // math.gcd(L, int(k))
    return L


def _time_grid(T: float, L: int) -> np.ndarray:
    return np.linspace(0.0, T, L + 1)


def _minor_drift(spec, tau, X, mean, sigma, y, ku, kv, U, V):
    """sum_u ku[:, u] f_I(tau, X, m, y, u) + sum_v kv[v] f_II(tau, X, m, y, v) for all atoms."""
    n = X.shape[0]
    env = {"t": tau, "x": X, "y": y, "mean": mean, "sigma_p": sigma}
    out = np.zeros_like(X)
    active = np.nonzero(ku.any(axis=0))[0]
    for j in active:
        out += ku[:, j, None] * eval_block(spec.f_I, {**env, "u": U[j]}, (n,))
    for j in np.nonzero(kv)[0]:
        out += kv[j] * eval_block(spec.f_II, {**env, "v": V[j]}, (n,))
    return out


def _major_drift(spec, tau, y, mean, sigma, kv, V):
    env = {"t": tau, "y": y, "mean": mean, "sigma_p": sigma}
    out = np.zeros_like(y)
    for j in np.nonzero(kv)[0]:
        out += kv[j] * eval_block(spec.g, {**env, "v": V[j]}, ())
    return out


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise SolverError(f"non-finite state in {what}")


def trajectory_T0(spec: DynamicsSpec, flow: MeasureFlow, y_curve: np.ndarray, x0, xi, zeta: RelaxedControl, time_grid, U: ControlGrid, V: ControlGrid) -> np.ndarray:
    """Minor-agent trajectories for a given flow m(.) and major path y(.).

    ``x0`` is one point (d,) or a batch (n, d); ``xi`` a RelaxedControl or one
    per atom. Returns curves of shape (L+1, d) or (n, L+1, d).
    """
    single = np.ndim(x0) == 1
    X0 = np.atleast_2d(np.asarray(x0, float))
    ctrls = [xi] if isinstance(xi, RelaxedControl) else list(xi)
    if len(ctrls) == 1 and X0.shape[0] > 1:
        ctrls = ctrls * X0.shape[0]
    tg = np.asarray(time_grid, float)
    L = len(tg) - 1
    dt = tg[1] - tg[0]
    KU = np.stack([c.refined(L) for c in ctrls], axis=1)  # (L, n, |U|)
    KV = zeta.refined(L)
    X = np.empty((X0.shape[0], L + 1, X0.shape[1]))
    X[:, 0] = X0
    for j in range(L):
        drift = _minor_drift(spec, tg[j], X[:, j], flow.means[j], flow.sigma[j], y_curve[j], KU[j], KV[j], U.points, V.points)
        X[:, j + 1] = X[:, j] + dt * drift
    _check_finite(X, "trajectory_T0")
    return X[0] if single else X


def major_T0(spec: DynamicsSpec, flow: MeasureFlow, y0, zeta: RelaxedControl, time_grid, V: ControlGrid) -> np.ndarray:
    """Major-agent path y = y0 + int g(tau, y(tau), m(tau), v) zeta(d(tau, v)); shape (L+1, d')."""
    tg = np.asarray(time_grid, float)
    L = len(tg) - 1
    dt = tg[1] - tg[0]
    KV = zeta.refined(L)
    Y = np.empty((L + 1, len(np.atleast_1d(y0))))
    Y[0] = y0
    for j in range(L):
        Y[j + 1] = Y[j] + dt * _major_drift(spec, tg[j], Y[j], flow.means[j], flow.sigma[j], KV[j], V.points)
    _check_finite(Y, "major_T0")
    return Y


def delayed_euler_solve(scn: Scenario, N: int | None = None) -> Motion:
    """Scheme with every argument of the dynamics delayed by T/N.

    Before time 0 the state, major state and distribution are frozen at their
    initial values.
    """
    N = scn.N if N is None else int(N)
    if N < 1:
        raise SolverError("N must be >= 1")
    alpha, zeta = scn.alpha, scn.zeta
    L = reconciled_steps(N, alpha.K, zeta.K)
    s = L // N
    tg = _time_grid(scn.T, L)
    dt = scn.T / L
    KU = np.stack([c.refined(L) for c in alpha.controls], axis=1)
    KV = zeta.refined(L)
    n, d = alpha.x0.shape
    w = alpha.weights
    X = np.empty((n, L + 1, d))
    Y = np.empty((L + 1, scn.y0.shape[0]))
    means = np.empty((L + 1, d))
    sigma = np.empty(L + 1)
    X[:, 0] = alpha.x0
    Y[0] = scn.y0
    m0_mean, m0_sigma = scn.m0.mean(), sigma_p_moment(scn.m0, scn.p)
    means[0] = w @ alpha.x0
    sigma[0] = np.dot(w, np.linalg.norm(alpha.x0, axis=1) ** scn.p) ** (1.0 / scn.p)
    Up, Vp = scn.U.points, scn.V.points
    for j in range(L):
        jd = j - s
        if jd < 0:
            Xd, Yd, md, sd = alpha.x0, scn.y0, m0_mean, m0_sigma
        else:
            Xd, Yd, md, sd = X[:, jd], Y[jd], means[jd], sigma[jd]
        X[:, j + 1] = X[:, j] + dt * _minor_drift(scn.spec, tg[j], Xd, md, sd, Yd, KU[j], KV[j], Up, Vp)
        Y[j + 1] = Y[j] + dt * _major_drift(scn.spec, tg[j], Yd, md, sd, KV[j], Vp)
        means[j + 1] = w @ X[:, j + 1]
        sigma[j + 1] = np.dot(w, np.linalg.norm(X[:, j + 1], axis=1) ** scn.p) ** (1.0 / scn.p)
    _check_finite(X, "delayed_euler_solve")
    _check_finite(Y, "delayed_euler_solve")
    return Motion(tg, Y, TrajectoryBundle(tg, X, w), scn.p, {"solver": "delayed_euler", "N": N, "L": L})


def picard_solve(
    scn: Scenario,
    time_grid_size: int | None = None,
    tol: float = 1e-6,
    max_iter: int = 200,
    init: str = "frozen",
) -> Motion:
    """Fixed point of (m, y) -> (e_.#T_0[f, m, y]#alpha, T^0[g, m, y0, zeta]).

    The residual is sup_t of the index-coupling bound on W_p(m_k, m_{k+1})
    plus |y_k - y_{k+1}|; it dominates the Wasserstein residual. Plain
    iteration switches to damping 0.5 after the residual first increases.
    ``init`` is "frozen" (m = m0, y = y0) or "terminal" (constant paths at the
    terminal state of the first iterate).
    """
    if tol <= 0:
        raise SolverError("tol must be positive")
    M = scn.N if time_grid_size is None else int(time_grid_size)
    alpha, zeta = scn.alpha, scn.zeta
    L = reconciled_steps(M, alpha.K, zeta.K)
    tg = _time_grid(scn.T, L)
    w = alpha.weights
    n, d = alpha.x0.shape
    X = np.broadcast_to(alpha.x0[:, None, :], (n, L + 1, d)).copy()
    Y = np.broadcast_to(scn.y0, (L + 1, scn.y0.shape[0])).copy()

    def step(X, Y):
        flow = MeasureFlow.of_curves(tg, X, w, scn.p)
        Yn = major_T0(scn.spec, flow, scn.y0, zeta, tg, scn.V)
        Xn = trajectory_T0(scn.spec, flow, Y, alpha.x0, alpha.controls, zeta, tg, scn.U, scn.V)
        return Xn, Yn

    if init == "terminal":
        X1, Y1 = step(X, Y)
        X = np.broadcast_to(X1[:, -1:, :], X.shape).copy()
        Y = np.broadcast_to(Y1[-1], Y.shape).copy()
    elif init != "frozen":
        raise SolverError(f"unknown initial guess {init!r}")

    theta = 1.0
    prev = math.inf
    history = []
    for it in range(1, max_iter + 1):
        Xn, Yn = step(X, Y)
        dx = np.linalg.norm(Xn - X, axis=2)
        res = float(np.max(np.dot(w, dx**scn.p) ** (1.0 / scn.p) + np.linalg.norm(Yn - Y, axis=1)))
        history.append(res)
        if res <= tol:
            X, Y = Xn, Yn
            break
        if res > prev:
            theta = 0.5
        prev = res
        X = X + theta * (Xn - X)
        Y = Y + theta * (Yn - Y)
    else:
        raise NoConvergence(f"no convergence within {max_iter} iterations (residual {history[-1]:.3e})", history[-1], max_iter)
    meta = {"solver": "picard", "M": M, "L": L, "iterations": it, "residual": history[-1], "damping": theta, "init": init}
    return Motion(tg, Y, TrajectoryBundle(tg, X, w), scn.p, meta)


def _positions_at(motion: Motion, t: float) -> tuple[np.ndarray, np.ndarray]:
    return motion.chi.positions(t), motion.y_at(t)


def motion_gap(a: Motion, b: Motion, times: Sequence[float] | None = None) -> tuple[float, np.ndarray]:
    """sup_t [W_p(m_a(t), m_b(t)) + |y_a(t) - y_b(t)|] and the per-time values.

    Default times are the nodes of the coarser grid.
    """
    if times is None:
        times = a.time_grid if len(a.time_grid) <= len(b.time_grid) else b.time_grid
    vals = np.empty(len(times))
    for k, t in enumerate(times):
        xa, ya = _positions_at(a, t)
        xb, yb = _positions_at(b, t)
        wp, _ = wasserstein_p(EmpiricalMeasure(xa, a.chi.weights), EmpiricalMeasure(xb, b.chi.weights), a.p)
        vals[k] = wp + np.linalg.norm(ya - yb)
    return float(vals.max()), vals
