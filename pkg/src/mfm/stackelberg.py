"""Leader-follower games over finite menus of major and minor-agent controls."""
from __future__ import annotations

import csv
import io
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .controls import ControlGrid, validate_compatibility
from .dynamics import DynamicsSpec
from .measures import EmpiricalMeasure
from .solver import Motion, NoConvergence, Scenario, SolverError, delayed_euler_solve, picard_solve
from .stability import worker_count

PAYOFF_VARS = {"t", "y", "mean", "sigma_p"}
DEFAULT_TIE_TOL = 1e-9


class StackelbergError(ValueError):
    pass


class PayoffError(SolverError):
    def __init__(self, alpha: int, zeta: int, cause: Exception):
        super().__init__(f"payoff evaluation failed for (alpha={alpha}, zeta={zeta}): {cause}")
        self.pair = (alpha, zeta)
        self.cause = cause


def parse_payoff(src: str, d: int, d_prime: int):
    node = ex.parse_expr(src)
    for kind, idx in ex.variables(node):
        if kind not in PAYOFF_VARS:
            raise StackelbergError(f"payoff may not reference {kind}{idx}")
        if kind == "y" and idx >= d_prime or kind == "mean" and idx >= d:
            raise StackelbergError(f"index {idx} out of range in {kind}")
    return node


def terminal_value(node, motion: Motion) -> float:
    m, y = motion.terminal()
    mf = motion.flow()
    env = {"t": motion.time_grid[-1], "y": y, "mean": mf.means[-1], "sigma_p": mf.sigma[-1]}
    return float(ex.evaluate(node, env))


@dataclass
class StackelbergProblem:
    spec: DynamicsSpec
    m0: EmpiricalMeasure
    y0: np.ndarray
    T: float
    p: float
    U: ControlGrid
    V: ControlGrid
    sigma_L: object
    sigma_F: object
    leader_candidates: list
    follower_candidates: list
    tie_tol: float = DEFAULT_TIE_TOL
    N: int = 512
    name: str = ""
    _memo: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.y0 = np.atleast_1d(np.asarray(self.y0, float))
        if not self.leader_candidates or not self.follower_candidates:
            raise StackelbergError("candidate menus must be nonempty")
        if self.tie_tol < 0:
            raise StackelbergError("tie_tol must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.follower_candidates), len(self.leader_candidates)

    def scenario(self, a: int, z: int) -> Scenario:
        return Scenario(
            self.spec, self.m0, self.y0, self.follower_candidates[a], self.leader_candidates[z],
            self.T, self.p, self.U, self.V, self.N, f"{self.name}[alpha={a},zeta={z}]",
        )

    def check_compatibility(self) -> list:
        """Indices of follower candidates whose x0-marginal differs from m0."""
        return [k for k, a in enumerate(self.follower_candidates) if not validate_compatibility(a, self.m0).passed]


def solve_pair(scn: Scenario) -> Motion:
    try:
        return picard_solve(scn, tol=1e-10, max_iter=500)
    except NoConvergence:
        return delayed_euler_solve(scn, 256)


def evaluate_payoffs(problem: StackelbergProblem, a: int, z: int) -> tuple[float, float]:
    """(Sigma_F, Sigma_L) at the terminal state of the motion for the pair; memoized."""
    nf, nl = problem.shape
    if not (0 <= a < nf and 0 <= z < nl):
        raise StackelbergError(f"pair ({a}, {z}) out of range for menus {problem.shape}")
    key = (a, z)
    with problem._lock:
        if key in problem._memo:
            return problem._memo[key]
    try:
        motion = solve_pair(problem.scenario(a, z))
        val = (terminal_value(problem.sigma_F, motion), terminal_value(problem.sigma_L, motion))
    except (SolverError, ex.ExprEvalError) as e:
        raise PayoffError(a, z, e) from e
    with problem._lock:
        problem._memo.setdefault(key, val)
        return problem._memo[key]


def payoff_table(problem: StackelbergProblem, workers: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Arrays SF, SL of shape (followers, leaders)."""
    nf, nl = problem.shape
    pairs = [(a, z) for z in range(nl) for a in range(nf)]
    n = workers or worker_count()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            vals = list(pool.map(lambda az: evaluate_payoffs(problem, *az), pairs))
    else:
        vals = [evaluate_payoffs(problem, a, z) for a, z in pairs]
    SF, SL = np.empty((nf, nl)), np.empty((nf, nl))
    for (a, z), (f, l) in zip(pairs, vals):
        SF[a, z], SL[a, z] = f, l
    return SF, SL


def best_responses(SF_column, tie_tol: float = DEFAULT_TIE_TOL) -> list:
    col = np.asarray(SF_column, float)
    top = col.max()
    return [int(i) for i in np.nonzero(col >= top - tie_tol)[0]]


def best_response_set(problem: StackelbergProblem, z: int) -> list:
    nf, _ = problem.shape
    return best_responses([evaluate_payoffs(problem, a, z)[0] for a in range(nf)], problem.tie_tol)


@dataclass
class GameSolution:
    zeta_star: int
    alpha_star: int
    leader_value: float
    follower_value: float
    table: list
    SF: np.ndarray
    SL: np.ndarray
    tie_tol: float = DEFAULT_TIE_TOL

    def to_json(self) -> dict:
        return {
            "zeta_star": self.zeta_star,
            "alpha_star": self.alpha_star,
            "leader_value": self.leader_value,
            "follower_value": self.follower_value,
            "tie_tol": self.tie_tol,
            "table": self.table,
        }

    def payoff_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "zeta", "sigma_F", "sigma_L", "best_response"])
        nf, nl = self.SF.shape
        for z in range(nl):
            br = set(self.table[z]["best_responses"])
            for a in range(nf):
                w.writerow([a, z, repr(float(self.SF[a, z])), repr(float(self.SL[a, z])), str(a in br).lower()])
        return buf.getvalue()

    def satisfies_definition(self) -> bool:
        """alpha* is a best response to zeta*, and zeta* is optimal against best responses."""
        nf, nl = self.SF.shape
        if self.alpha_star not in best_responses(self.SF[:, self.zeta_star], self.tie_tol):
            return False
        for z in range(nl):
            O = best_responses(self.SF[:, z], self.tie_tol)
            if self.leader_value < max(self.SL[a, z] for a in O) - self.tie_tol:
                return False
        return True


def solve_from_table(SF, SL, tie_tol: float = DEFAULT_TIE_TOL) -> GameSolution:
    """Optimistic commitment solution; ties broken by lowest index."""
    SF, SL = np.asarray(SF, float), np.asarray(SL, float)
    if SF.shape != SL.shape or SF.size == 0:
        raise StackelbergError("payoff tables must be nonempty and of equal shape")
    nf, nl = SF.shape
    table, v, pick = [], np.empty(nl), np.empty(nl, int)
    for z in range(nl):
        O = best_responses(SF[:, z], tie_tol)
        vals = SL[O, z]
        pick[z] = O[int(np.argmax(vals))]
        v[z] = vals.max()
        table.append({"zeta": z, "best_responses": O, "sigma_F": SF[:, z].tolist(), "sigma_L": SL[:, z].tolist(), "value": float(v[z])})
    zs = int(np.argmax(v))
    a = int(pick[zs])
    return GameSolution(zs, a, float(SL[a, zs]), float(SF[a, zs]), table, SF, SL, tie_tol)


def solve_stackelberg(problem: StackelbergProblem, workers: int | None = None) -> GameSolution:
    SF, SL = payoff_table(problem, workers)
    return solve_from_table(SF, SL, problem.tie_tol)


def enumerate_solution(SF, SL, tie_tol: float = DEFAULT_TIE_TOL) -> tuple[int, int]:
    """Brute-force reference: scan every pair and keep the first that satisfies both conditions with the best leader value."""
    SF, SL = np.asarray(SF, float), np.asarray(SL, float)
    nf, nl = SF.shape

    def is_br(a, z):
        return all(SF[a, z] >= SF[b, z] - tie_tol for b in range(nf))

    def value(z):
        return max(SL[a, z] for a in range(nf) if is_br(a, z))

    best = None
    for z in range(nl):
        for a in range(nf):
            if not is_br(a, z) or SL[a, z] < value(z):
                continue
            if all(SL[a, z] >= value(z2) - tie_tol for z2 in range(nl)):
                if best is None or SL[a, z] > SL[best[1], best[0]]:
                    best = (z, a)
    return best


# -- file format ----------------------------------------------------------------


def problem_from_json(obj: dict, validate: bool = True) -> StackelbergProblem:
    from .io import PROBLEM_SCHEMA, ScenarioError, _common, build_alpha, build_control, check_schema

    check_schema(obj, PROBLEM_SCHEMA)
    spec, m0, y0, T, p, U, V = _common(obj)
    leaders = [build_control(c, T, V, f"/leader_candidates/{k}") for k, c in enumerate(obj["leader_candidates"])]
    followers = [build_alpha(a, T, U, f"/follower_candidates/{k}") for k, a in enumerate(obj["follower_candidates"])]
    try:
        sl = parse_payoff(obj["sigma_L"], spec.d, spec.d_prime)
    except (ex.ExprSyntaxError, StackelbergError) as e:
        raise ScenarioError(str(e), "/sigma_L") from None
    try:
        sf = parse_payoff(obj["sigma_F"], spec.d, spec.d_prime)
    except (ex.ExprSyntaxError, StackelbergError) as e:
        raise ScenarioError(str(e), "/sigma_F") from None
    prob = StackelbergProblem(
        spec, m0, y0, T, p, U, V, sl, sf, leaders, followers,
        float(obj.get("tie_tol", DEFAULT_TIE_TOL)), int(obj.get("N", 512)), obj.get("name", ""),
    )
    if validate:
        from .io import validate_scenario

        for k, a in enumerate(prob.follower_candidates):
            rep = validate_compatibility(a, m0)
            if not rep.passed:
                raise ScenarioError(f"follower candidate is not compatible with m0 (W_1 gap {rep.gap:.6g})", f"/follower_candidates/{k}", "validation")
        validate_scenario(prob.scenario(0, 0))
    return prob


def problem_to_json(prob: StackelbergProblem) -> dict:
    dyn = prob.spec.to_json()
    dyn.pop("dims")
    return {
        "name": prob.name,
        "dynamics": dyn,
        "m0": prob.m0.to_json(),
        "y0": prob.y0.tolist(),
        "T": prob.T,
        "p": prob.p,
        "grids": {"U": prob.U.to_json(), "V": prob.V.to_json()},
        "N": prob.N,
        "sigma_L": ex.to_source(prob.sigma_L),
        "sigma_F": ex.to_source(prob.sigma_F),
        "leader_candidates": [c.to_json() for c in prob.leader_candidates],
        "follower_candidates": [a.to_json() for a in prob.follower_candidates],
        "tie_tol": prob.tie_tol,
    }
