"""Dynamics specifications f = f_I + f_II and g, their validation, and dist_c."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import expr as ex
from .measures import EmpiricalMeasure, sigma_p_moment, wasserstein_p

# variables each block may reference
ALLOWED = {
    "f_I": {"t", "x", "y", "u", "mean", "sigma_p"},
    "f_II": {"t", "x", "y", "v", "mean", "sigma_p"},
    "g": {"t", "y", "v", "mean", "sigma_p"},
}


class DynamicsError(ValueError):
    pass


@dataclass(frozen=True)
class MeasureFunctionals:
    """The channel through which dynamics see the population: coordinate means and sigma_p."""

    mean: np.ndarray
    sigma_p: float | np.ndarray

    @classmethod
    def of(cls, mu: EmpiricalMeasure, p: float) -> "MeasureFunctionals":
        return cls(mu.mean(), sigma_p_moment(mu, p))


@dataclass(frozen=True)
class LipschitzEntry:
    c: float
    B_I: float
    B_II: float
    B_prime: float

    @property
    def B(self) -> float:
        return self.B_I + self.B_II


@dataclass(frozen=True)
class DynamicsSpec:
    f_I: tuple
    f_II: tuple
    g: tuple
    A: float
    lipschitz: tuple = ()
    d: int = 1
    d_prime: int = 1
    dim_u: int = 1
    dim_v: int = 1

    def block(self, which: str) -> tuple:
        if which not in ALLOWED:
            raise DynamicsError(f"unknown block {which!r}")
        return getattr(self, which)

    def constants(self, c: float) -> LipschitzEntry:
        """Declared constants valid on the ball of radius c (smallest tabulated radius >= c)."""
        ok = [e for e in self.lipschitz if e.c >= c - 1e-12]
        if not ok:
            raise DynamicsError(f"no Lipschitz constants declared for c={c:.6g}")
        return min(ok, key=lambda e: e.c)

    def to_json(self) -> dict:
        return {
            "f_I": [ex.to_source(n) for n in self.f_I],
            "f_II": [ex.to_source(n) for n in self.f_II],
            "g": [ex.to_source(n) for n in self.g],
            "A": self.A,
            "lipschitz": [{"c": e.c, "B_I": e.B_I, "B_II": e.B_II, "B_prime": e.B_prime} for e in self.lipschitz],
            "dims": {"d": self.d, "d_prime": self.d_prime, "u": self.dim_u, "v": self.dim_v},
        }

    def perturbed(self, df_I=None, df_II=None, dg=None, eps: float = 1.0) -> "DynamicsSpec":
        """Add eps * (perturbation expression) coordinate-wise to the chosen blocks."""

        def add(block, delta):
            if delta is None:
                return block
            if len(delta) != len(block):
                raise DynamicsError("perturbation has wrong number of coordinates")
            return tuple(ex.BinOp("+", b, ex.BinOp("*", ex.Num(float(eps)), d)) for b, d in zip(block, delta))

        return DynamicsSpec(
            add(self.f_I, df_I), add(self.f_II, df_II), add(self.g, dg), self.A, self.lipschitz,
            self.d, self.d_prime, self.dim_u, self.dim_v,
        )


def _check_block(name: str, nodes: Sequence, dims: dict) -> None:
    for k, node in enumerate(nodes):
        for kind, idx in ex.variables(node):
            if kind not in ALLOWED[name]:
                raise DynamicsError(f"{kind} not allowed in {name} (coordinate {k})")
            limit = {"x": dims["d"], "mean": dims["d"], "y": dims["d_prime"], "u": dims["u"], "v": dims["v"]}.get(kind)
            if limit is not None and idx >= limit:
                raise DynamicsError(f"unknown identifier {kind}{idx} in {name} (coordinate {k}): index out of range")


def parse_block(name: str, sources: Sequence[str], dims: dict) -> tuple:
    nodes = []
    for k, src in enumerate(sources):
        try:
            nodes.append(ex.parse_expr(str(src)))
        except ex.ExprSyntaxError as e:
            raise DynamicsError(f"{name}[{k}]: {e}") from None
    _check_block(name, nodes, dims)
    return tuple(nodes)


def parse_dynamics(source, dims: dict | None = None) -> DynamicsSpec:
    """Build a DynamicsSpec from a dynamics block (JSON text or already-decoded dict).

    Block keys: f_I, f_II, g (lists of coordinate expressions), A, lipschitz
    (list of {c, B_I, B_II, B_prime}), and optionally dims {d, d_prime, u, v}.
    """
    obj = json.loads(source) if isinstance(source, str) else dict(source)
    for key in ("f_I", "f_II", "g", "A"):
        if key not in obj:
            raise DynamicsError(f"dynamics block missing {key!r}")
    dd = dict(obj.get("dims", {}))
    if dims:
        dd.update(dims)
    dd.setdefault("d", len(obj["f_I"]))
    dd.setdefault("d_prime", len(obj["g"]))
    dd.setdefault("u", 1)
    dd.setdefault("v", 1)
    if len(obj["f_I"]) != dd["d"] or len(obj["f_II"]) != dd["d"]:
        raise DynamicsError(f"f_I and f_II need {dd['d']} coordinates")
    if len(obj["g"]) != dd["d_prime"]:
        raise DynamicsError(f"g needs {dd['d_prime']} coordinates")
    table = tuple(
        sorted(
            (LipschitzEntry(float(e["c"]), float(e["B_I"]), float(e["B_II"]), float(e["B_prime"])) for e in obj.get("lipschitz", [])),
            key=lambda e: e.c,
        )
    )
    return DynamicsSpec(
        parse_block("f_I", obj["f_I"], dd),
        parse_block("f_II", obj["f_II"], dd),
        parse_block("g", obj["g"], dd),
        float(obj["A"]),
        table,
        int(dd["d"]),
        int(dd["d_prime"]),
        int(dd["u"]),
        int(dd["v"]),
    )


def eval_block(nodes: Sequence, env: dict, shape: tuple) -> np.ndarray:
    """Evaluate coordinate expressions; returns array of shape shape + (len(nodes),)."""
    out = np.empty(shape + (len(nodes),))
    for k, node in enumerate(nodes):
        out[..., k] = ex.evaluate(node, env)
    return out


def eval_dynamics(spec: DynamicsSpec, which: str, t, state, mf: MeasureFunctionals, control, y=None) -> np.ndarray:
    """Evaluate f_I, f_II, f (= f_I + f_II, control is (u, v)) or g at one or many states.

    ``state`` is x for the f-blocks and y for g; leading axes of ``state`` are
    broadcast over. ``y`` is the major-agent state for the f-blocks.
    """
    state = np.asarray(state, float)
    env = {"t": t, "mean": np.asarray(mf.mean, float), "sigma_p": mf.sigma_p}
    shape = state.shape[:-1]
    if which == "g":
        env["y"] = state
        env["v"] = np.asarray(control, float)
        return eval_block(spec.g, env, shape)
    env["x"] = state
    env["y"] = np.asarray(y, float)
    if which == "f":
        u, v = control
        return eval_dynamics(spec, "f_I", t, state, mf, u, y) + eval_dynamics(spec, "f_II", t, state, mf, v, y)
    if which == "f_I":
        env["u"] = np.asarray(control, float)
        return eval_block(spec.f_I, env, shape)
    if which == "f_II":
        env["v"] = np.asarray(control, float)
        return eval_block(spec.f_II, env, shape)
    raise DynamicsError(f"unknown block {which!r}")


def growth_envelope_G(c1: float, c2: float, c3: float, T: float) -> float:
    """(1 + c1 + c2) * exp(2 c3 T)."""
    return (1.0 + c1 + c2) * math.exp(2.0 * c3 * T)


# -- sampling ---------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    T: float = 1.0
    p: float = 2.0
    n_samples: int = 256
    n_pairs: int = 256
    t_nodes: int = 33
    x_radius: float | None = None  # defaults to c
    atom_counts: tuple = (1, 4, 16)
    seed: int = 0
    U: np.ndarray | None = None
    V: np.ndarray | None = None


@dataclass
class _Samples:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    measures: list
    mean: np.ndarray
    sigma: np.ndarray


def sample_ball_measure(rng, d: int, count: int, c: float, p: float) -> EmpiricalMeasure:
    """Random atom cloud rescaled so that sigma_p lies in (0, c]."""
    pts = rng.normal(size=(count, d))
    mu = EmpiricalMeasure.uniform(pts)
    s = sigma_p_moment(mu, p)
    target = c * rng.uniform(0.0, 1.0) ** 0.5
    if s > 0:
        pts = pts * (target / s)
    return EmpiricalMeasure.uniform(pts)


def _sample_ball(rng, n: int, dim: int, r: float) -> np.ndarray:
    z = rng.normal(size=(n, dim))
    z /= np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-300)
    return z * r * rng.uniform(0, 1, size=(n, 1)) ** (1.0 / dim)


def _draw(spec: DynamicsSpec, c: float, cfg: SamplerConfig, rng, n: int) -> _Samples:
    R = c if cfg.x_radius is None else cfg.x_radius
    t_grid = np.linspace(0.0, cfg.T, cfg.t_nodes)
    t = t_grid[rng.integers(0, cfg.t_nodes, n)]
    x = _sample_ball(rng, n, spec.d, R)
    y = _sample_ball(rng, n, spec.d_prime, c)
    # include the extremes of the y ball and x box
    y[: min(n, 4)] *= c / np.maximum(np.linalg.norm(y[: min(n, 4)], axis=1, keepdims=True), 1e-300)
    counts = np.asarray(cfg.atom_counts)[rng.integers(0, len(cfg.atom_counts), n)]
    ms = [sample_ball_measure(rng, spec.d, int(k), c, cfg.p) for k in counts]
    mean = np.array([m.mean() for m in ms])
    sigma = np.array([sigma_p_moment(m, cfg.p) for m in ms])
    return _Samples(t, x, y, ms, mean, sigma)


def _grid(points, dim) -> np.ndarray:
    if points is None:
        return np.zeros((1, dim))
    g = np.asarray(points, float)
    return g[:, None] if g.ndim == 1 else g


def _f_parts(spec, S, u, v, idx=slice(None)):
    env = {"t": S.t[idx], "x": S.x[idx], "y": S.y[idx], "mean": S.mean[idx], "sigma_p": S.sigma[idx]}
    n = len(S.t[idx])
    fI = eval_block(spec.f_I, {**env, "u": np.broadcast_to(u, (n, len(u)))}, (n,))
    fII = eval_block(spec.f_II, {**env, "v": np.broadcast_to(v, (n, len(v)))}, (n,))
    return fI, fII


def _g_val(spec, S, v, idx=slice(None)):
    n = len(S.t[idx])
    env = {"t": S.t[idx], "y": S.y[idx], "mean": S.mean[idx], "sigma_p": S.sigma[idx], "v": np.broadcast_to(v, (n, len(v)))}
    return eval_block(spec.g, env, (n,))


@dataclass
class SLLLReport:
    passed: bool
    c: float
    growth_ratio: float
    lipschitz: dict
    declared: dict
    witness: dict | None = None
    notes: str = "sampled validation; x drawn from a box of the configured radius"


def validate_slll(spec: DynamicsSpec, c: float, cfg: SamplerConfig = SamplerConfig()) -> SLLLReport:
    """Sampled check of the growth bound (constant A) and the Lipschitz constants at radius c."""
    if c <= 0:
        raise DynamicsError("c must be positive")
    rng = np.random.default_rng(cfg.seed)
    U, V = _grid(cfg.U, spec.dim_u), _grid(cfg.V, spec.dim_v)
    S = _draw(spec, c, cfg, rng, cfg.n_samples)

    growth = 0.0
    witness = None
    denom_f = 1.0 + np.linalg.norm(S.x, axis=1) + S.sigma + np.linalg.norm(S.y, axis=1)
    denom_g = 1.0 + np.linalg.norm(S.y, axis=1) + S.sigma
    for u in U:
        for v in V:
            fI, fII = _f_parts(spec, S, u, v)
            r = (np.linalg.norm(fI, axis=1) + np.linalg.norm(fII, axis=1)) / denom_f
            k = int(np.argmax(r))
            if r[k] > growth:
                growth = float(r[k])
                witness = {"kind": "growth_f", "t": float(S.t[k]), "x": S.x[k].tolist(), "y": S.y[k].tolist(), "u": u.tolist(), "v": v.tolist(), "ratio": growth}
    for v in V:
        r = np.linalg.norm(_g_val(spec, S, v), axis=1) / denom_g
        k = int(np.argmax(r))
        if r[k] > growth:
            growth = float(r[k])
            witness = {"kind": "growth_g", "t": float(S.t[k]), "y": S.y[k].tolist(), "v": v.tolist(), "ratio": growth}

    # difference quotients on perturbed pairs
    P = _perturbed_pairs(spec, S, c, cfg, rng)
    base = _Samples(S.t[P["i"]], S.x[P["i"]], S.y[P["i"]], [S.measures[i] for i in P["i"]], S.mean[P["i"]], S.sigma[P["i"]])
    other = P["samples"]
    dist_state = np.linalg.norm(base.x - other.x, axis=1) + P["w"] + np.linalg.norm(base.y - other.y, axis=1)
    dist_g = P["w"] + np.linalg.norm(base.y - other.y, axis=1)
    lip = {"B_I": 0.0, "B_II": 0.0, "B_prime": 0.0}
    ok = dist_state > 0
    okg = dist_g > 0
    for u in U:
        for v in V:
            a1, a2 = _f_parts(spec, base, u, v)
            b1, b2 = _f_parts(spec, other, u, v)
            if ok.any():
                lip["B_I"] = max(lip["B_I"], float(np.max(np.linalg.norm(a1 - b1, axis=1)[ok] / dist_state[ok])))
                lip["B_II"] = max(lip["B_II"], float(np.max(np.linalg.norm(a2 - b2, axis=1)[ok] / dist_state[ok])))
    for v in V:
        ga, gb = _g_val(spec, base, v), _g_val(spec, other, v)
        if okg.any():
            lip["B_prime"] = max(lip["B_prime"], float(np.max(np.linalg.norm(ga - gb, axis=1)[okg] / dist_g[okg])))

    declared = {"A": spec.A}
    try:
        e = spec.constants(c)
        declared.update(B_I=e.B_I, B_II=e.B_II, B_prime=e.B_prime)
    except DynamicsError:
        declared.update(B_I=None, B_II=None, B_prime=None)
    slack = 1.0 + 1e-6
    passed = growth <= spec.A * slack
    if not passed and witness is not None:
        witness["violates"] = "A"
    for key, val in lip.items():
        bound = declared[key]
        if bound is None or val > bound * slack:
            if passed:
                witness = {"kind": "lipschitz", "constant": key, "observed": val, "declared": bound}
            passed = False
    return SLLLReport(passed, float(c), growth, lip, declared, witness if not passed else None)


def _perturbed_pairs(spec, S, c, cfg, rng):
    """Partners of sampled points, perturbing x only, y only, m only, or everything.

    Returns the partner samples and the exact W_p distance between the paired measures.
    """
    n = cfg.n_pairs
    i = rng.integers(0, len(S.t), n)
    mode = np.arange(n) % 4
    scale = 10.0 ** rng.uniform(-4, 0, n)
    R = c if cfg.x_radius is None else cfg.x_radius
    x2 = S.x[i].copy()
    y2 = S.y[i].copy()
    ms2 = []
    w = np.zeros(n)
    for k in range(n):
        m = S.measures[i[k]]
        if mode[k] in (0, 3):
            x2[k] = _clip_ball(x2[k] + scale[k] * rng.normal(size=spec.d), R)
        if mode[k] in (1, 3):
            y2[k] = _clip_ball(y2[k] + scale[k] * rng.normal(size=spec.d_prime), c)
        if mode[k] in (2, 3):
            m2 = EmpiricalMeasure(m.points + scale[k] * rng.normal(size=m.points.shape), m.weights)
            s2 = sigma_p_moment(m2, cfg.p)
            if s2 > c:
                m2 = EmpiricalMeasure(m2.points * (c / s2), m2.weights)
            w[k] = wasserstein_p(m, m2, cfg.p)[0]
        else:
            m2 = m
        ms2.append(m2)
    mean2 = np.array([m.mean() for m in ms2])
    sig2 = np.array([sigma_p_moment(m, cfg.p) for m in ms2])
    return {"i": i, "samples": _Samples(S.t[i], x2, y2, ms2, mean2, sig2), "w": w}


def _clip_ball(z, r):
    nz = np.linalg.norm(z)
    return z if nz <= r else z * (r / nz)


def dist_c(spec: DynamicsSpec, spec2: DynamicsSpec, which: str, c: float, cfg: SamplerConfig = SamplerConfig()) -> float:
    """Sampled lower estimate of sup |f - f'| (or |g - g'|) over the c-restricted domain.

    Sampling covers the t-grid exhaustively, a seeded cloud of (x, m, y)
    states, and every control grid point.
    """
    if which not in ("f", "g"):
        raise DynamicsError("which must be 'f' or 'g'")
    if (spec.d, spec.d_prime) != (spec2.d, spec2.d_prime):
        raise DynamicsError("dimension mismatch between dynamics")
    rng = np.random.default_rng(cfg.seed)
    U, V = _grid(cfg.U, spec.dim_u), _grid(cfg.V, spec.dim_v)
    S = _draw(spec, c, cfg, rng, cfg.n_samples)
    # every t node for every state sample
    tg = np.linspace(0.0, cfg.T, cfg.t_nodes)
    n = len(S.t)
    idx = np.repeat(np.arange(n), len(tg))
    full = _Samples(np.tile(tg, n), S.x[idx], S.y[idx], None, S.mean[idx], S.sigma[idx])
    best = 0.0
    if which == "f":
        for u in U:
            for v in V:
                a1, a2 = _f_parts(spec, full, u, v)
                b1, b2 = _f_parts(spec2, full, u, v)
                best = max(best, float(np.max(np.linalg.norm((a1 + a2) - (b1 + b2), axis=1))))
    else:
        for v in V:
            best = max(best, float(np.max(np.linalg.norm(_g_val(spec, full, v) - _g_val(spec2, full, v), axis=1))))
    return best
