"""Seeded self-checks of the distances and the Lipschitz approximation.

The transport check compares against a plain linear program over the
transportation polytope solved with scipy's HiGHS, which shares no code with
the production transport paths.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

from .measures import (
    EmpiricalMeasure,
    ProductDomain,
    build_lipschitz_net,
    lipschitz_approx,
    lipschitz_ratio,
    modulus_of_continuity,
    narrow_metric_d,
    wasserstein_p,
)

AXIOM_TOL = 1e-9


def lp_transport_cost(a, b, C) -> float:
    """min <C, P> over P >= 0 with row sums a and column sums b."""
    a, b, C = np.asarray(a, float), np.asarray(b, float), np.asarray(C, float)
    n, m = C.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"LP oracle failed: {res.message}")
    return float(res.fun)


def lp_wasserstein(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float) -> float:
    C = np.linalg.norm(mu.points[:, None, :] - nu.points[None, :, :], axis=2) ** p
    return max(lp_transport_cost(mu.weights, nu.weights, C), 0.0) ** (1.0 / p)


def random_measure(rng, n: int, d: int, uniform: bool | None = None) -> EmpiricalMeasure:
    pts = rng.normal(size=(n, d)) * rng.uniform(0.5, 2.0)
    if uniform is None:
        uniform = rng.random() < 0.3
    if uniform:
        return EmpiricalMeasure.uniform(pts)
    w = rng.uniform(0.05, 1.0, n)
    return EmpiricalMeasure(pts, w / w.sum())


def random_domain_measure(rng, domain: ProductDomain, n: int, mass: float = 1.0) -> EmpiricalMeasure:
    t = rng.uniform(domain.t_lo, domain.t_hi, n)
    i = rng.integers(0, domain.grid_size, n)
    w = rng.uniform(0.05, 1.0, n)
    return EmpiricalMeasure(np.column_stack([t, i.astype(float)]), mass * w / w.sum())


def _axioms(dist, a, b, c) -> dict:
    ab, ba, ac, bc, aa = dist(a, b), dist(b, a), dist(a, c), dist(b, c), dist(a, a)
    return {
        "symmetry": abs(ab - ba),
        "identity": abs(aa),
        "triangle": max(0.0, ac - ab - bc),
        "nonneg": max(0.0, -min(ab, ac, bc)),
    }


def wasserstein_axioms(seed: int = 0, trials: int = 200, max_atoms: int = 32, max_dim: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    worst = {"symmetry": 0.0, "identity": 0.0, "triangle": 0.0, "nonneg": 0.0}
    for _ in range(trials):
        d = int(rng.integers(1, max_dim + 1))
        p = float(rng.choice([1.0, 2.0]))
        a, b, c = (random_measure(rng, int(rng.integers(1, max_atoms + 1)), d) for _ in range(3))
        r = _axioms(lambda x, y: wasserstein_p(x, y, p)[0], a, b, c)
        worst = {k: max(worst[k], r[k]) for k in worst}
    return {"worst": worst, "passed": all(v <= AXIOM_TOL for v in worst.values()), "trials": trials}


def narrow_axioms(seed: int = 0, trials: int = 200, max_atoms: int = 32) -> dict:
    rng = np.random.default_rng(seed + 1)
    grid = rng.uniform(-1, 1, size=(5, 2))
    domain = ProductDomain(0.0, 1.0, np.linalg.norm(grid[:, None] - grid[None], axis=2))
    net = build_lipschitz_net(domain, 6, 8, seed)
    worst = {"symmetry": 0.0, "identity": 0.0, "triangle": 0.0, "nonneg": 0.0}
    for _ in range(trials):
        ms = [random_domain_measure(rng, domain, int(rng.integers(1, max_atoms + 1)), float(rng.choice([1.0, 1.0, 0.5, 2.0]))) for _ in range(3)]
        r = _axioms(lambda x, y: narrow_metric_d(x, y, net), *ms)
        worst = {k: max(worst[k], r[k]) for k in worst}
    return {"worst": worst, "passed": all(v <= AXIOM_TOL for v in worst.values()), "trials": trials}


def transport_oracle(seed: int = 0, trials: int = 200, max_atoms: int = 6) -> dict:
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 4))
        p = float(rng.choice([1.0, 1.5, 2.0]))
        mu = random_measure(rng, int(rng.integers(1, max_atoms + 1)), d)
        nu = random_measure(rng, int(rng.integers(1, max_atoms + 1)), d)
        worst = max(worst, abs(wasserstein_p(mu, nu, p)[0] - lp_wasserstein(mu, nu, p)))
    return {"worst": worst, "passed": worst <= AXIOM_TOL, "trials": trials}


def lipschitz_approx_check(seed: int = 0, trials: int = 50) -> dict:
    """Lipschitz pair check, bound preservation and the 2 omega(2C'/l) error bound."""
    rng = np.random.default_rng(seed + 3)
    worst_lip = worst_bound = worst_err = -np.inf
    for _ in range(trials):
        n = int(rng.integers(2, 40))
        pts = np.sort(rng.uniform(-1, 1, n)) if rng.random() < 0.5 else rng.uniform(-1, 1, (n, 2))
        pts = pts.reshape(n, -1)
        D = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        phi = rng.uniform(-1, 1, n) * rng.uniform(0.1, 3.0)
        Cp = float(np.max(np.abs(phi)))
        l = int(rng.integers(1, 30))
        hat = lipschitz_approx(phi, D, l)
        worst_lip = max(worst_lip, lipschitz_ratio(hat, D) - l)
        worst_bound = max(worst_bound, float(np.max(np.abs(hat))) - Cp)
        worst_err = max(worst_err, float(np.max(np.abs(phi - hat))) - 2 * modulus_of_continuity(phi, D, 2 * Cp / l))
    slack = 1e-9
    return {
        "lipschitz_excess": worst_lip,
        "bound_excess": worst_bound,
        "error_excess": worst_err,
        "passed": worst_lip <= slack and worst_bound <= slack and worst_err <= slack,
        "trials": trials,
    }


def metric_selftest(seed: int = 0, trials: int = 200) -> dict:
    checks = {
        "wasserstein_axioms": wasserstein_axioms(seed, trials),
        "narrow_axioms": narrow_axioms(seed, trials),
        "transport_oracle": transport_oracle(seed, trials),
        "lipschitz_approx": lipschitz_approx_check(seed, min(trials, 50)),
    }
    return {"seed": seed, "checks": checks, "passed": all(c["passed"] for c in checks.values())}
