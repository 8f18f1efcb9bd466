"""Deviation bounds between two motions, growth envelopes, and perturbation sweeps."""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controls import ControlDistribution, RelaxedControl
from .dynamics import SamplerConfig, dist_c, eval_block, growth_envelope_G, parse_block
from .measures import EmpiricalMeasure, TransportPlan, sigma_p_moment, transport, wasserstein_p
from .solver import Motion, Scenario, SolverError, delayed_euler_solve, motion_gap, picard_solve

ENVELOPE_SLACK = -1e-9


class StabilityError(ValueError):
    pass


class HypothesisViolation(StabilityError):
    """The radius c does not cover the growth envelope of the perturbed data."""

    def __init__(self, c: float, required: float):
        super().__init__(f"radius c={c:.6g} is below the growth envelope {required:.6g}")
        self.c = c
        self.required = required


@dataclass
class KeyEstimateReport:
    time_grid: np.ndarray
    lhs: np.ndarray
    tilde_a: np.ndarray
    bar_a: np.ndarray
    hat_a_integral: np.ndarray
    dist_f: float = 0.0
    dist_g: float = 0.0
    initial_gap: float = 0.0
    c: float = math.nan
    L_star: float = math.nan
    constants: dict = field(default_factory=dict)
    rhs: np.ndarray | None = None
    passed: bool | None = None

    def margin(self) -> float:
        return float(np.min(self.rhs - self.lhs)) if self.rhs is not None else math.nan

    def to_json(self) -> dict:
        out = {
            "t": self.time_grid.tolist(),
            "lhs": self.lhs.tolist(),
            "tilde_a": self.tilde_a.tolist(),
            "bar_a": self.bar_a.tolist(),
            "hat_a_integral": self.hat_a_integral.tolist(),
            "dist_f": self.dist_f,
            "dist_g": self.dist_g,
            "initial_gap": self.initial_gap,
            "c": self.c,
            "L_star": self.L_star,
            "constants": self.constants,
            "pass": self.passed,
        }
        if self.rhs is not None:
            out["rhs"] = self.rhs.tolist()
        return out


def _check_grids(a: Motion, b: Motion) -> np.ndarray:
    if a.time_grid.shape != b.time_grid.shape or not np.allclose(a.time_grid, b.time_grid, rtol=0, atol=1e-12):
        raise StabilityError("motions are not on a common time grid")
    return a.time_grid


def diagonal_plan(n: int, weights) -> TransportPlan:
    idx = np.arange(n)
    return TransportPlan(idx, idx.copy(), np.asarray(weights, float), 0.0, "diagonal", 0.0)


def _cumulative(dt, rates):
    """Left-Riemann integrals over [0, t_k] for k = 0..L from per-step rates (L, ...)."""
    out = np.zeros((rates.shape[0] + 1,) + rates.shape[1:])
    np.cumsum(rates * dt, axis=0, out=out[1:])
    return out


def _phi(scn: Scenario, motion: Motion) -> np.ndarray:
    """f_I along the motion for every atom, step and U point: shape (n, L, |U|, d)."""
    tg = motion.time_grid
    L = len(tg) - 1
    flow = motion.flow()
    X = motion.chi.curves[:, :L]  # (n, L, d)
    n = X.shape[0]
    out = np.empty((n, L, scn.U.size, scn.spec.d))
    env = {"t": tg[:L][None, :], "x": X, "y": motion.y[:L][None], "mean": flow.means[:L][None], "sigma_p": flow.sigma[:L][None]}
    for j, u in enumerate(scn.U.points):
        out[:, :, j] = eval_block(scn.spec.f_I, {**env, "u": u}, (n, L))
    return out


def _psi_eta(scn: Scenario, motion: Motion):
    """psi(t, v) = g(t, y, m, v) and eta(t, v) = sum_i w_i f_II(t, x_i, m, y, v); shapes (L, |V|, .)."""
    tg = motion.time_grid
    L = len(tg) - 1
    flow = motion.flow()
    X = motion.chi.curves[:, :L]
    w = motion.chi.weights
    n = X.shape[0]
    psi = np.empty((L, scn.V.size, scn.spec.d_prime))
    eta = np.empty((L, scn.V.size, scn.spec.d))
    genv = {"t": tg[:L], "y": motion.y[:L], "mean": flow.means[:L], "sigma_p": flow.sigma[:L]}
    fenv = {"t": tg[:L][None, :], "x": X, "y": motion.y[:L][None], "mean": flow.means[:L][None], "sigma_p": flow.sigma[:L][None]}
    for j, v in enumerate(scn.V.points):
        psi[:, j] = eval_block(scn.spec.g, {**genv, "v": v}, (L,))
        f2 = eval_block(scn.spec.f_II, {**fenv, "v": v}, (n, L))
        eta[:, j] = np.einsum("n,nld->ld", w, f2)
    return psi, eta


def hat_a_matrix(scn: Scenario, motion: Motion, alpha2: ControlDistribution, pairs=None) -> np.ndarray:
    """hat a(t_k, i, j) for the requested (i, j) pairs (all pairs if None).

    Returns shape (L+1, P) for a pair list, or (L+1, n, n') for all pairs.
    """
    tg = motion.time_grid
    L = len(tg) - 1
    dt = tg[1] - tg[0]
    phi = _phi(scn, motion)
    K1 = np.stack([c.refined(L) for c in scn.alpha.controls])  # (n, L, |U|)
    K2 = np.stack([c.refined(L) for c in alpha2.controls])
    if pairs is None:
        own = np.einsum("nlud,nlu->nld", phi, K1)
        cross = np.einsum("nlud,mlu->nmld", phi, K2)
        diff = own[:, None] - cross  # (n, n', L, d)
        cum = _cumulative(dt, np.moveaxis(diff, 2, 0))
        return np.linalg.norm(cum, axis=-1)
    i, j = np.asarray(pairs[0]), np.asarray(pairs[1])
    diff = np.einsum("plud,plu->pld", phi[i], K1[i] - K2[j])
    cum = _cumulative(dt, np.moveaxis(diff, 1, 0))
    return np.linalg.norm(cum, axis=-1)


def hat_a_optimal_plan(scn: Scenario, motion: Motion, alpha2: ControlDistribution) -> TransportPlan:
    """Plan between alpha and alpha2 minimizing the terminal-time integral of hat a."""
    H = hat_a_matrix(scn, motion, alpha2)[-1]
    _, plan = transport(scn.alpha.weights, alpha2.weights, H)
    return plan


def key_estimate_terms(
    motion: Motion, motion2: Motion, scn: Scenario, scn2: Scenario, plan: TransportPlan | None = None
) -> KeyEstimateReport:
    """lhs(t) and the forcing terms, all evaluated along the unprimed motion.

    ``plan`` couples the atoms of scn.alpha and scn2.alpha; by default the
    diagonal plan when both have the same weights, else the plan of the
    optimal x0 coupling.
    """
    tg = _check_grids(motion, motion2)
    L = len(tg) - 1
    dt = tg[1] - tg[0]
    a1, a2 = scn.alpha, scn2.alpha
    if plan is None:
        if a1.size == a2.size and np.array_equal(a1.weights, a2.weights):
            plan = diagonal_plan(a1.size, a1.weights)
        else:
            C = np.linalg.norm(a1.x0[:, None] - a2.x0[None], axis=2) ** motion.p
            _, plan = transport(a1.weights, a2.weights, C)
    _check_plan(plan, a1.weights, a2.weights)

    psi, eta = _psi_eta(scn, motion)
    Z1, Z2 = scn.zeta.refined(L), scn2.zeta.refined(L)
    dz = Z1 - Z2  # (L, |V|)
    tilde = np.linalg.norm(_cumulative(dt, np.einsum("lvd,lv->ld", psi, dz)), axis=1)
    bar = np.linalg.norm(_cumulative(dt, np.einsum("lvd,lv->ld", eta, dz)), axis=1)
    H = hat_a_matrix(scn, motion, a2, (plan.rows, plan.cols))
    hat_int = H @ plan.mass

    lhs = np.empty(L + 1)
    for k in range(L + 1):
        wp, _ = wasserstein_p(motion.m_at(k), motion2.m_at(k), motion.p)
        lhs[k] = wp + np.linalg.norm(motion.y[k] - motion2.y[k])
    init = wasserstein_p(scn.m0, scn2.m0, scn.p)[0] + float(np.linalg.norm(scn.y0 - scn2.y0))
    return KeyEstimateReport(tg, lhs, tilde, bar, hat_int, initial_gap=init)


def _check_plan(plan: TransportPlan, a, b, tol: float = 1e-9):
    n, m = len(a), len(b)
    if np.any(plan.rows >= n) or np.any(plan.cols >= m):
        raise StabilityError("plan indices out of range")
    r = np.bincount(plan.rows, plan.mass, n)
    c = np.bincount(plan.cols, plan.mass, m)
    if np.max(np.abs(r - a)) > tol or np.max(np.abs(c - b)) > tol:
        raise StabilityError("plan marginals do not match the control distributions")


def envelope_constants(L_star: float, T: float) -> dict:
    K = math.exp(L_star * T)
    E = math.exp((L_star * K + L_star) * T)
    return {"C0": K * E, "C1": T * K * E, "C2": K * E, "C3": E, "C4": K * E}


def required_radius(scn: Scenario) -> float:
    return growth_envelope_G(float(np.linalg.norm(scn.y0)), sigma_p_moment(scn.m0, scn.p), scn.spec.A, scn.T)


def key_estimate_bound(
    report: KeyEstimateReport, scn: Scenario, scn2: Scenario, c: float | None = None, sampler: SamplerConfig | None = None
) -> KeyEstimateReport:
    """Fill dist_c, L*, C0..C4 and rhs; pass iff lhs <= rhs at every node.

    Forcing terms enter as running suprema. The Lipschitz constants are the
    larger of the two declared tables at radius c.
    """
    need = required_radius(scn2)
    if c is None:
        c = max(need, required_radius(scn))
    if c < need * (1 - 1e-12):
        raise HypothesisViolation(c, need)
    e1, e2 = scn.spec.constants(c), scn2.spec.constants(c)
    L_star = max(e1.B, e2.B) + max(e1.B_prime, e2.B_prime)
    cfg = sampler or SamplerConfig(T=scn.T, p=scn.p, U=scn.U.points, V=scn.V.points)
    df = dist_c(scn.spec, scn2.spec, "f", c, cfg)
    dg = dist_c(scn.spec, scn2.spec, "g", c, cfg)
    C = envelope_constants(L_star, scn.T)
    run = np.maximum.accumulate
    rhs = (
        C["C0"] * report.initial_gap
        + C["C1"] * (df + dg)
        + C["C2"] * run(report.hat_a_integral)
        + C["C3"] * run(report.tilde_a)
        + C["C4"] * run(report.bar_a)
    )
    report.dist_f, report.dist_g, report.c, report.L_star = df, dg, float(c), L_star
    report.constants = C
    report.rhs = rhs
    report.passed = bool(np.all(report.lhs <= rhs + 1e-12 * (1 + rhs)))
    return report


def key_estimate(motion, motion2, scn, scn2, plan=None, c=None, sampler=None) -> KeyEstimateReport:
    return key_estimate_bound(key_estimate_terms(motion, motion2, scn, scn2, plan), scn, scn2, c, sampler)


# -- growth envelopes ---------------------------------------------------------


@dataclass
class EnvelopeReport:
    passed: bool
    which: str
    min_slack: float
    worst: dict


def check_growth_envelopes(motion: Motion, scn: Scenario, which: str = "scheme") -> EnvelopeReport:
    """Evaluate the a-priori bounds at every node for y, sigma_p and each bundle curve.

    "scheme": |y| + sigma_p <= (t + |y0| + 2 s0) e^{2At}; "limit": the same with
    s0 in place of 2 s0. Every curve must obey (|x0| + t) e^{At} + (t + |y0| + 2 s0) e^{2At}.
    """
    if which not in ("scheme", "limit"):
        raise StabilityError("which must be 'scheme' or 'limit'")
    t = motion.time_grid
    A = scn.spec.A
    s0 = sigma_p_moment(scn.m0, scn.p)
    y0 = float(np.linalg.norm(scn.y0))
    k = 2.0 if which == "scheme" else 1.0
    env_ys = (t + y0 + k * s0) * np.exp(2 * A * t)
    ys = np.linalg.norm(motion.y, axis=1) + motion.sigma_path()
    slack_ys = env_ys - ys
    X = motion.chi.curves
    x0n = np.linalg.norm(X[:, 0], axis=1)
    env_x = (x0n[:, None] + t[None]) * np.exp(A * t)[None] + ((t + y0 + 2 * s0) * np.exp(2 * A * t))[None]
    slack_x = env_x - np.linalg.norm(X, axis=2)
    i_ys = int(np.argmin(slack_ys))
    ix = np.unravel_index(int(np.argmin(slack_x)), slack_x.shape)
    if slack_ys[i_ys] <= slack_x[ix]:
        worst = {"kind": "y+sigma_p", "t": float(t[i_ys]), "value": float(ys[i_ys]), "envelope": float(env_ys[i_ys])}
        m = float(slack_ys[i_ys])
    else:
        worst = {"kind": "x", "atom": int(ix[0]), "t": float(t[ix[1]]), "value": float(np.linalg.norm(X[ix])), "envelope": float(env_x[ix])}
        m = float(slack_x[ix])
    return EnvelopeReport(m >= ENVELOPE_SLACK, which, m, worst)


# -- perturbation sweeps ----------------------------------------------------


@dataclass(frozen=True)
class Perturbation:
    """Direction of a perturbation; ``apply(base, eps)`` moves eps along it.

    Dynamics receive eps * (expression) additively; m0 and the alpha atoms are
    shifted together by eps * dm0; controls are mixed (1 - eps) * own + eps * alternative.
    """

    df_I: tuple | None = None
    df_II: tuple | None = None
    dg: tuple | None = None
    dm0: np.ndarray | None = None
    dy0: np.ndarray | None = None
    dalpha: tuple | None = None
    dzeta: RelaxedControl | None = None

    def apply(self, base: Scenario, eps: float) -> Scenario:
        spec = base.spec
        if any(x is not None for x in (self.df_I, self.df_II, self.dg)):
            dims = {"d": spec.d, "d_prime": spec.d_prime, "u": spec.dim_u, "v": spec.dim_v}
            blk = lambda name, src: None if src is None else parse_block(name, src, dims)
            spec = spec.perturbed(blk("f_I", self.df_I), blk("f_II", self.df_II), blk("g", self.dg), eps)
        m0, alpha = base.m0, base.alpha
        if self.dm0 is not None:
            shift = eps * np.asarray(self.dm0, float)
            m0 = EmpiricalMeasure(m0.points + shift, m0.weights)
            alpha = alpha.shifted(shift)
        if self.dalpha is not None:
            alpha = alpha.mixed(self.dalpha, eps)
        y0 = base.y0 if self.dy0 is None else base.y0 + eps * np.asarray(self.dy0, float)
        zeta = base.zeta if self.dzeta is None else base.zeta.mix(self.dzeta, eps)
        return base.with_(spec=spec, m0=m0, alpha=alpha, y0=y0, zeta=zeta)

    @property
    def channels(self) -> list:
        names = ["df_I", "df_II", "dg", "dm0", "dy0", "dalpha", "dzeta"]
        return [n for n in names if getattr(self, n) is not None]


SWEEP_COLUMNS = ["eps", "D", "dist_f", "dist_g", "tilde_a_sup", "bar_a_sup", "hat_a_int_sup", "pass"]


@dataclass
class SweepRow:
    eps: float
    D: float
    report: KeyEstimateReport

    def as_dict(self) -> dict:
        r = self.report
        return {
            "eps": self.eps,
            "D": self.D,
            "dist_f": r.dist_f,
            "dist_g": r.dist_g,
            "tilde_a_sup": float(r.tilde_a.max()),
            "bar_a_sup": float(r.bar_a.max()),
            "hat_a_int_sup": float(r.hat_a_integral.max()),
            "pass": bool(r.passed),
        }


@dataclass
class SweepResult:
    rows: list
    D_nonincreasing: bool
    D_zero_at_zero: bool | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in self.rows:
            d = row.as_dict()
            w.writerow([repr(float(d[c])) if c != "pass" else str(d[c]).lower() for c in SWEEP_COLUMNS])
        return buf.getvalue()


class SweepError(SolverError):
    def __init__(self, eps: float, cause: Exception):
        super().__init__(f"solve failed at eps={eps:g}: {cause}")
        self.eps = eps
        self.cause = cause


def solve_motion(scn: Scenario, solver: str = "picard", tol: float = 1e-8, max_iter: int = 500) -> Motion:
    if solver == "picard":
        return picard_solve(scn, tol=tol, max_iter=max_iter)
    if solver == "euler":
        return delayed_euler_solve(scn)
    raise StabilityError(f"unknown solver {solver!r}")


def worker_count(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("MFM_THREADS", default)))
    except ValueError:
        return default


def stability_sweep(
    base: Scenario,
    perturbation: Perturbation,
    scales: Sequence[float],
    solver: str = "picard",
    tol: float = 1e-8,
    sampler: SamplerConfig | None = None,
    workers: int | None = None,
    max_iter: int = 500,
) -> SweepResult:
    """Solve the perturbed motion at each scale and record D(eps) and the key-estimate terms.

    Rows come back in the order of ``scales``. D_nonincreasing is checked
    along the scales sorted decreasingly.
    """
    reference = solve_motion(base, solver, tol, max_iter)

    def one(eps):
        scn2 = perturbation.apply(base, eps)
        try:
            m2 = solve_motion(scn2, solver, tol, max_iter)
        except SolverError as e:
            raise SweepError(eps, e) from e
        D, _ = motion_gap(reference, m2, reference.time_grid)
        rep = key_estimate(reference, m2, base, scn2, sampler=sampler)
        return SweepRow(float(eps), D, rep)

    n = workers or worker_count()
    if n > 1:
        with ThreadPoolExecutor(n) as ex:
            rows = list(ex.map(one, scales))
    else:
        rows = [one(e) for e in scales]
    by_eps = sorted(rows, key=lambda r: -r.eps)
    Ds = [r.D for r in by_eps]
    nonincr = all(b <= a + 1e-12 for a, b in zip(Ds, Ds[1:]))
    zero = [r.D for r in rows if r.eps == 0]
    return SweepResult(rows, nonincr, (zero[0] == 0.0) if zero else None)
