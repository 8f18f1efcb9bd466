"""Empirical measures, Wasserstein transport, and the narrow-convergence metric.

Measures are finite weighted atom clouds in R^d. Transport is exact for small
problems (sorted coupling in 1-d, assignment for uniform equal-size clouds,
network simplex otherwise) and entropic above ``exact_threshold`` atoms.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

MASS_TOL = 1e-12
PLAN_TOL = 1e-9
MERGE_TOL = 1e-12


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.ndim != 2 or pts.shape[0] != w.shape[0]:
            raise MeasureError("points and weights disagree in length")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise MeasureError("non-finite atom")
        if np.any(w < 0):
            raise MeasureError("negative weight")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @classmethod
    def dirac(cls, point, mass: float = 1.0) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(point, dtype=float))[None, :], [mass])

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def is_probability(self, tol: float = MASS_TOL) -> bool:
        return self.size > 0 and abs(self.mass - 1.0) <= tol

    def mean(self) -> np.ndarray:
        return self.weights @ self.points / self.mass

    def merged(self, tol: float = MERGE_TOL) -> "EmpiricalMeasure":
        """Combine atoms closer than ``tol`` (sup-norm) and drop zero weights."""
        keep = self.weights > 0
        pts, w = self.points[keep], self.weights[keep]
        if len(w) == 0:
            return EmpiricalMeasure(np.zeros((0, self.dim)), np.zeros(0))
        order = np.lexsort(pts.T[::-1])
        pts, w = pts[order], w[order]
        out_p, out_w = [pts[0]], [w[0]]
        for x, wi in zip(pts[1:], w[1:]):
            if np.max(np.abs(x - out_p[-1])) <= tol:
                out_w[-1] += wi
            else:
                out_p.append(x)
                out_w.append(wi)
        return EmpiricalMeasure(np.array(out_p), np.array(out_w))

    def equals(self, other: "EmpiricalMeasure", tol: float = MERGE_TOL) -> bool:
        a, b = self.merged(tol), other.merged(tol)
        if a.size != b.size or a.dim != b.dim:
            return False
        return bool(np.all(np.abs(a.points - b.points) <= tol) and np.all(np.abs(a.weights - b.weights) <= tol))

    def to_json(self) -> dict:
        return {"dim": self.dim, "atoms": [{"x": [float(c) for c in x], "w": float(w)} for x, w in zip(self.points, self.weights)]}

    @classmethod
    def from_json(cls, obj: dict) -> "EmpiricalMeasure":
        dim = int(obj["dim"])
        atoms = obj["atoms"]
        if not atoms:
            raise MeasureError("empty measure")
        pts = np.array([a["x"] for a in atoms], dtype=float).reshape(len(atoms), -1)
        if pts.shape[1] != dim:
            raise MeasureError(f"atom dimension {pts.shape[1]} != declared dim {dim}")
        return cls(pts, [a["w"] for a in atoms])


@dataclass(frozen=True)
class TransportPlan:
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    cost: float
    method: str = "exact"
    gap: float = 0.0

    @classmethod
    def from_matrix(cls, P: np.ndarray, cost: float, method: str = "exact", gap: float = 0.0) -> "TransportPlan":
        i, j = np.nonzero(P > 0)
        return cls(i, j, P[i, j], float(cost), method, float(gap))

    def dense(self, n: int, m: int) -> np.ndarray:
        P = np.zeros((n, m))
        np.add.at(P, (self.rows, self.cols), self.mass)
        return P

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "mass"])
        for i, j, m in zip(self.rows, self.cols, self.mass):
            w.writerow([int(i), int(j), repr(float(m))])
        return buf.getvalue()


def sigma_p_moment(mu: EmpiricalMeasure, p: float) -> float:
    """p-th moment radius around the origin, (sum w |x|^p)^(1/p)."""
    if p < 1:
        raise MeasureError("p must be >= 1")
    if not mu.is_probability():
        raise MeasureError("not a probability")
    norms = np.linalg.norm(mu.points, axis=1)
    return float(np.dot(mu.weights, norms**p) ** (1.0 / p))


def cost_matrix(X: np.ndarray, Y: np.ndarray, p: float) -> np.ndarray:
    D = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=2)
    return D**p


def _sorted_coupling(x: np.ndarray, a: np.ndarray, y: np.ndarray, b: np.ndarray):
    """North-west corner rule on sorted supports; optimal for convex costs on the line."""
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    ca, cb = np.cumsum(a[ix]), np.cumsum(b[iy])
    ca[-1] = cb[-1] = max(ca[-1], cb[-1])
    # breakpoints of the two quantile functions
    cuts = np.unique(np.concatenate([[0.0], ca, cb]))
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    masses = np.diff(cuts)
    ki = np.minimum(np.searchsorted(ca, mids), len(ix) - 1)
    kj = np.minimum(np.searchsorted(cb, mids), len(iy) - 1)
    rows, cols = ix[ki], iy[kj]
    keep = masses > 0
    rows, cols, masses = rows[keep], cols[keep], masses[keep]
    P = np.zeros((len(x), len(y)))
    np.add.at(P, (rows, cols), masses)
    return P


def _network_simplex(a: np.ndarray, b: np.ndarray, C: np.ndarray) -> np.ndarray:
    for backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{backend}", "1")
    import ot

    a = a / a.sum()
    b = b / b.sum()
    P = ot.emd(a, b, np.ascontiguousarray(C), numItermax=10_000_000)
    return np.maximum(P, 0.0)


def _round_to_feasible(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # marginal rounding that keeps P >= 0 and hits (a, b) exactly up to float error
    r = np.minimum(a / np.maximum(P.sum(1), 1e-300), 1.0)
    P = P * r[:, None]
    c = np.minimum(b / np.maximum(P.sum(0), 1e-300), 1.0)
    P = P * c[None, :]
    ea, eb = a - P.sum(1), b - P.sum(0)
    if ea.sum() > 0:
        P = P + np.outer(ea, eb) / ea.sum()
    return P


def _northwest_support(a: np.ndarray, b: np.ndarray):
    """Edges of the north-west corner plan; always a feasible support."""
    i = j = 0
    ra, rb = a.copy(), b.copy()
    edges = []
    while i < len(a) and j < len(b):
        edges.append((i, j))
        m = min(ra[i], rb[j])
        ra[i] -= m
        rb[j] -= m
        if ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    return np.array(edges, int).T


def _restricted_lp(a, b, C, mask):
    """Exact transport restricted to the edges in ``mask`` (sparse HiGHS LP)."""
    from scipy.optimize import linprog
    from scipy.sparse import coo_matrix, vstack

    ri, ci = np.nonzero(mask)
    k = np.arange(len(ri))
    A = vstack([
        coo_matrix((np.ones(len(ri)), (ri, k)), shape=(len(a), len(ri))),
        coo_matrix((np.ones(len(ri)), (ci, k)), shape=(len(b), len(ri))),
    ]).tocsr()
    res = linprog(C[ri, ci], A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if not res.success:
        return None, None
    P = np.zeros_like(C)
    P[ri, ci] = np.maximum(res.x, 0.0)
    return _round_to_feasible(P, a, b), np.asarray(res.eqlin.marginals[len(a):], float)


def _dual_bound(a, b, C, g):
    # c-transforms give a feasible dual pair, hence a certified lower bound
    fc = np.min(C - g[None, :], axis=1)
    gc = np.min(C - fc[:, None], axis=0)
    return float(a @ fc + b @ gc), fc, gc


def sinkhorn_annealed(a, b, C, gap_tol: float = 1e-4, eps_min: float = 1e-9, max_inner: int = 2000):
    """Entropic transport with epsilon halving and absorption-stabilized scaling.

    Stops once the primal-dual gap falls below ``gap_tol``. The primal value is
    the cost of an exactly feasible plan and the dual value comes from
    c-transforms of the current potentials, so the gap is a certified bound.
    When scaling stalls at small epsilon, the plan is polished by an exact LP
    on the edges with small reduced cost under the current dual.
    Returns (plan, primal_cost, gap).
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    scale = float(C.max()) if C.max() > 0 else 1.0
    marg_tol = 0.1 * gap_tol / scale
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    eps = scale
    best = None
    nw = _northwest_support(a, b)
    while True:
        K = np.exp((f[:, None] + g[None, :] - C) / eps)
        u, v = np.ones(len(a)), np.ones(len(b))
        stalled = True
        for it in range(max_inner):
            u = a / (K @ v)
            v = b / (K.T @ u)
            if max(np.abs(np.log(u)).max(), np.abs(np.log(v)).max()) > 30:
                f += eps * np.log(u)
                g += eps * np.log(v)
                K = np.exp((f[:, None] + g[None, :] - C) / eps)
                u[:] = 1.0
                v[:] = 1.0
            if it % 20 == 0 and np.abs(u * (K @ v) - a).sum() < marg_tol:
                stalled = False
                break
        f += eps * np.log(u)
        g += eps * np.log(v)
        P = _round_to_feasible(np.exp((f[:, None] + g[None, :] - C) / eps), a, b)
        primal = float((P * C).sum())
        dual, fc, gc = _dual_bound(a, b, C, g)
        if best is None or primal - dual < best[2]:
            best = (P, primal, max(primal - dual, 0.0))
        if best[2] <= gap_tol:
            return best
        if stalled or eps <= eps_min * scale:
            break
        eps *= 0.5
    reduced = C - fc[:, None] - gc[None, :]
    tau = 8 * eps
    for _ in range(6):
        mask = reduced <= tau
        mask[nw[0], nw[1]] = True
        P, g_lp = _restricted_lp(a, b, C, mask)
        if P is not None:
            primal = float((P * C).sum())
            dual = max(dual, _dual_bound(a, b, C, g_lp)[0])
            if primal - dual < best[2]:
                best = (P, primal, max(primal - dual, 0.0))
            if best[2] <= gap_tol:
                break
        tau *= 4
    return best


def transport(a, b, C, exact_threshold: int = 512, gap_tol: float = 1e-4):
    """Optimal plan for a general cost matrix. Returns (cost, TransportPlan)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n, m = C.shape
    if n == 0 or m == 0:
        raise MeasureError("empty measure")
    if max(n, m) > exact_threshold:
        ia, ib = np.nonzero(a > 0)[0], np.nonzero(b > 0)[0]
        Pr, cost, gap = sinkhorn_annealed(a[ia], b[ib], C[np.ix_(ia, ib)], gap_tol=gap_tol)
        P = np.zeros((n, m))
        P[np.ix_(ia, ib)] = Pr
        return cost, TransportPlan.from_matrix(P, cost, "entropic", gap)
    if n == m and np.allclose(a, 1.0 / n, rtol=0, atol=1e-15) and np.allclose(b, 1.0 / m, rtol=0, atol=1e-15):
        r, c = linear_sum_assignment(C)
        P = np.zeros((n, m))
        P[r, c] = a[r]
        method = "assignment"
    else:
        P = _network_simplex(a, b, C)
        method = "network_simplex"
    cost = float((P * C).sum())
    return cost, TransportPlan.from_matrix(P, cost, method)


def wasserstein_p(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0, exact_threshold: int = 512):
    """W_p distance and an optimal plan for ground cost |x - x'|^p."""
    if mu.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.size == 0 or nu.size == 0:
        raise MeasureError("empty measure")
    if not (mu.is_probability() and nu.is_probability()):
        raise MeasureError("not a probability")
    if p < 1:
        raise MeasureError("p must be >= 1")
    if mu.dim == 1:
        x, y = mu.points[:, 0], nu.points[:, 0]
        P = _sorted_coupling(x, mu.weights, y, nu.weights)
        cost = float((P * np.abs(x[:, None] - y[None, :]) ** p).sum())
        plan = TransportPlan.from_matrix(P, cost, "sorted")
    else:
        C = cost_matrix(mu.points, nu.points, p)
        cost, plan = transport(mu.weights, nu.weights, C, exact_threshold)
    return max(cost, 0.0) ** (1.0 / p), plan


def coupled_wasserstein_bound(X: np.ndarray, Y: np.ndarray, w: np.ndarray, p: float) -> float:
    """(sum_i w_i |X_i - Y_i|^p)^(1/p): the cost of the index coupling, an upper bound on W_p."""
    d = np.linalg.norm(X - Y, axis=-1)
    return float(np.dot(w, d**p) ** (1.0 / p))


@dataclass(frozen=True)
class TrajectoryBundle:
    """Weighted curves on a shared time grid; curves has shape (n, len(time_grid), d)."""

    time_grid: np.ndarray
    curves: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        tg = np.asarray(self.time_grid, float)
        cv = np.asarray(self.curves, float)
        if cv.ndim != 3 or cv.shape[1] != len(tg):
            raise MeasureError("curves must have shape (n, len(time_grid), d)")
        if np.any(np.diff(tg) <= 0):
            raise MeasureError("time grid must be increasing")
        object.__setattr__(self, "time_grid", tg)
        object.__setattr__(self, "curves", cv)
        object.__setattr__(self, "weights", np.asarray(self.weights, float))

    def node(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.curves[:, k, :], self.weights)

    def positions(self, t: float) -> np.ndarray:
        tg = self.time_grid
        if t < tg[0] - 1e-12 or t > tg[-1] + 1e-12:
            raise MeasureError(f"t={t} outside [{tg[0]}, {tg[-1]}]")
        t = min(max(t, tg[0]), tg[-1])
        k = int(np.searchsorted(tg, t, side="right")) - 1
        k = min(k, len(tg) - 2)
        if t == tg[k]:
            return self.curves[:, k, :]
        s = (t - tg[k]) / (tg[k + 1] - tg[k])
        return (1 - s) * self.curves[:, k, :] + s * self.curves[:, k + 1, :]

    def evaluate(self, t: float) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.positions(t), self.weights)

    def to_json(self) -> dict:
        return {
            "time_grid": [float(t) for t in self.time_grid],
            "curves": [{"values": c.tolist(), "w": float(w)} for c, w in zip(self.curves, self.weights)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrajectoryBundle":
        curves = np.array([c["values"] for c in obj["curves"]], float)
        return cls(obj["time_grid"], curves, [c["w"] for c in obj["curves"]])


def push_forward(mu, h: Callable | None = None, t: float | None = None) -> EmpiricalMeasure:
    """h#mu for a point map h, or e_t#chi when mu is a TrajectoryBundle and t is given."""
    if isinstance(mu, TrajectoryBundle):
        if t is None:
            raise MeasureError("evaluation time required for a trajectory bundle")
        return mu.evaluate(t)
    pts = np.array([np.atleast_1d(h(x)) for x in mu.points], float)
    return EmpiricalMeasure(pts, mu.weights.copy())


# ---------------------------------------------------------------------------
# Lipschitz nets and the narrow metric on [t_lo, t_hi] x (finite metric grid)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProductDomain:
    """Compact space [t_lo, t_hi] x G with metric |t - t'| + D[i, j]."""

    t_lo: float
    t_hi: float
    grid_dist: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.grid_dist, float)
        if not (np.isfinite(self.t_lo) and np.isfinite(self.t_hi)) or self.t_hi < self.t_lo:
            raise MeasureError("unbounded domain")
        if D.ndim != 2 or D.shape[0] != D.shape[1] or D.shape[0] == 0:
            raise MeasureError("grid distance table must be square and nonempty")
        if not np.all(np.isfinite(D)):
            raise MeasureError("unbounded domain")
        object.__setattr__(self, "grid_dist", D)

    @property
    def grid_size(self) -> int:
        return self.grid_dist.shape[0]

    def distance(self, t1, i1, t2, i2):
        return np.abs(np.asarray(t1) - np.asarray(t2)) + self.grid_dist[np.asarray(i1), np.asarray(i2)]

    def contains(self, mu: EmpiricalMeasure, tol: float = 1e-12) -> bool:
        if mu.dim != 2:
            return False
        t, idx = mu.points[:, 0], mu.points[:, 1]
        return bool(
            np.all(t >= self.t_lo - tol)
            and np.all(t <= self.t_hi + tol)
            and np.all(idx == np.round(idx))
            and np.all((idx >= 0) & (idx < self.grid_size))
        )


@dataclass(frozen=True)
class NetFunction:
    """w -> clamp(min_j (b_j + l * d_W(w, z_j)), -1, 1)."""

    lip: int
    anchor_t: np.ndarray
    anchor_i: np.ndarray
    offsets: np.ndarray

    def __call__(self, domain: ProductDomain, t, i) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        i = np.atleast_1d(np.asarray(i, int))
        d = np.abs(t[:, None] - self.anchor_t[None, :]) + domain.grid_dist[i[:, None], self.anchor_i[None, :]]
        return np.clip(np.min(self.offsets[None, :] + self.lip * d, axis=1), -1.0, 1.0)


@dataclass(frozen=True)
class LipschitzNet:
    domain: ProductDomain
    levels: tuple
    seed: int

    @property
    def L_max(self) -> int:
        return len(self.levels)


def build_lipschitz_net(domain: ProductDomain, L_max: int = 6, per_level_count: int = 8, seed: int = 0, anchors: int = 3) -> LipschitzNet:
    """Seeded family of clamped cone-minimum functions, level l being l-Lipschitz."""
    if not isinstance(domain, ProductDomain):
        raise MeasureError("unbounded domain")
    if L_max < 1 or per_level_count < 1:
        raise MeasureError("L_max and per_level_count must be >= 1")
    rng = np.random.default_rng(seed)
    levels = []
    for l in range(1, L_max + 1):
        funcs = []
        for _ in range(per_level_count):
            funcs.append(
                NetFunction(
                    lip=l,
                    anchor_t=rng.uniform(domain.t_lo, domain.t_hi, anchors),
                    anchor_i=rng.integers(0, domain.grid_size, anchors),
                    offsets=rng.uniform(-1.0, 1.0, anchors),
                )
            )
        levels.append(tuple(funcs))
    return LipschitzNet(domain, tuple(levels), seed)


def net_integrals(mu: EmpiricalMeasure, net: LipschitzNet) -> list[np.ndarray]:
    t, idx = mu.points[:, 0], mu.points[:, 1].astype(int)
    return [np.array([mu.weights @ phi(net.domain, t, idx) for phi in level]) for level in net.levels]


def narrow_metric_d(mu: EmpiricalMeasure, nu: EmpiricalMeasure, net: LipschitzNet) -> float:
    """||mu| - |nu|| + sum_l 2^-l max_j |int phi_lj dmu - int phi_lj dnu|, truncated at L_max."""
    if not (net.domain.contains(mu) and net.domain.contains(nu)):
        raise MeasureError("measure not supported on the net's domain")
    Imu, Inu = net_integrals(mu, net), net_integrals(nu, net)
    total = abs(mu.mass - nu.mass)
    for l, (a, b) in enumerate(zip(Imu, Inu), start=1):
        total += 2.0**-l * float(np.max(np.abs(a - b)))
    return float(total)


def lipschitz_approx(phi_values, dist: np.ndarray, l: float) -> np.ndarray:
    """phi_l(w) = min_z (phi(z) + l d(w, z)) on a finite metric grid."""
    phi = np.asarray(phi_values, float)
    D = np.asarray(dist, float)
    if D.shape != (len(phi), len(phi)):
        raise MeasureError("distance table does not match grid")
    return np.min(phi[None, :] + l * D, axis=1)


def modulus_of_continuity(phi_values, dist: np.ndarray, delta: float) -> float:
    """Sampled omega(delta) = max |phi(w) - phi(w')| over grid pairs with d(w, w') <= delta."""
    phi = np.asarray(phi_values, float)
    mask = np.asarray(dist) <= delta + 1e-15
    diffs = np.abs(phi[:, None] - phi[None, :])
    return float(np.max(np.where(mask, diffs, 0.0)))


def lipschitz_ratio(values, dist: np.ndarray) -> float:
    """max |f(w) - f(w')| / d(w, w') over distinct grid pairs."""
    v = np.asarray(values, float)
    D = np.asarray(dist, float)
    diffs = np.abs(v[:, None] - v[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(D > 0, diffs / D, 0.0)
    return float(r.max())


def measures_to_json(measures: Sequence[EmpiricalMeasure]) -> str:
    return json.dumps([m.to_json() for m in measures])
