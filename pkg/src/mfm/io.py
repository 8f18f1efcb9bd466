"""Scenario and problem files: JSON schema checks, loading, and result emission."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import jsonschema
import numpy as np

from .controls import ControlDistribution, ControlError, ControlGrid, RelaxedControl
from .dynamics import DynamicsError, parse_dynamics
from .measures import EmpiricalMeasure, MeasureError
from .solver import Motion, Scenario


class ScenarioError(ValueError):
    """Schema or validation failure; ``pointer`` is a JSON pointer into the file."""

    def __init__(self, msg: str, pointer: str = "", kind: str = "schema"):
        super().__init__(f"{pointer or '/'}: {msg}" if pointer else msg)
        self.pointer = pointer
        self.kind = kind


_vec = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_control = {
    "type": "object",
    "required": ["K", "grid", "kernel"],
    "properties": {"K": {"type": "integer", "minimum": 1}, "grid": {"type": "array"}, "kernel": _mat, "T": {"type": "number"}},
}
_alpha = {
    "type": "object",
    "required": ["atoms"],
    "properties": {
        "atoms": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "object", "required": ["x0", "xi", "w"], "properties": {"x0": _vec, "xi": _control, "w": {"type": "number", "minimum": 0}}},
        }
    },
}
_measure = {
    "type": "object",
    "required": ["dim", "atoms"],
    "properties": {
        "dim": {"type": "integer", "minimum": 1},
        "atoms": {"type": "array", "minItems": 1, "items": {"type": "object", "required": ["x", "w"], "properties": {"x": _vec, "w": {"type": "number", "minimum": 0}}}},
    },
}
_exprs = {"type": "array", "items": {"type": "string"}, "minItems": 1}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["dynamics", "m0", "y0", "alpha", "zeta", "T", "p", "grids"],
    "properties": {
        "name": {"type": "string"},
        "dynamics": {
            "type": "object",
            "required": ["f_I", "f_II", "g", "A"],
            "properties": {
                "f_I": _exprs,
                "f_II": _exprs,
                "g": _exprs,
                "A": {"type": "number", "minimum": 0},
                "lipschitz": {
                    "type": "array",
                    "items": {"type": "object", "required": ["c", "B_I", "B_II", "B_prime"]},
                },
            },
        },
        "m0": _measure,
        "y0": _vec,
        "alpha": _alpha,
        "zeta": _control,
        "T": {"type": "number", "exclusiveMinimum": 0},
        "p": {"type": "number", "minimum": 1},
        "grids": {"type": "object", "required": ["U", "V"], "properties": {"U": {"type": "array", "minItems": 1}, "V": {"type": "array", "minItems": 1}}},
        "N": {"type": "integer", "minimum": 1, "maximum": 65536},
    },
}

PROBLEM_SCHEMA = {
    **SCENARIO_SCHEMA,
    "required": [k for k in SCENARIO_SCHEMA["required"] if k not in ("alpha", "zeta")]
    + ["sigma_L", "sigma_F", "leader_candidates", "follower_candidates"],
    "properties": {
        **SCENARIO_SCHEMA["properties"],
        "sigma_L": {"type": "string"},
        "sigma_F": {"type": "string"},
        "leader_candidates": {"type": "array", "minItems": 1, "items": _control},
        "follower_candidates": {"type": "array", "minItems": 1, "items": _alpha},
        "tie_tol": {"type": "number", "minimum": 0},
    },
}


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def check_schema(obj, schema=SCENARIO_SCHEMA) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(obj), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return
    e = errors[0]
    path = list(e.absolute_path)
    if e.validator == "required":
        missing = [k for k in e.validator_value if k not in e.instance]
        path.append(missing[0])
        raise ScenarioError(f"missing required key {missing[0]!r}", _pointer(path))
    raise ScenarioError(e.message, _pointer(path))


def _grid(obj, ptr) -> ControlGrid:
    try:
        return ControlGrid(obj)
    except (ControlError, ValueError) as e:
        raise ScenarioError(str(e), ptr) from None


def _same_grid(a: ControlGrid, b: ControlGrid) -> bool:
    return a.points.shape == b.points.shape and np.allclose(a.points, b.points, atol=1e-12, rtol=0)


def build_control(obj, T: float, grid: ControlGrid, ptr: str) -> RelaxedControl:
    try:
        c = RelaxedControl.from_json(obj, T)
    except (ControlError, ValueError) as e:
        raise ScenarioError(str(e), ptr) from None
    if not _same_grid(c.grid, grid):
        raise ScenarioError("control grid differs from the scenario grid", ptr + "/grid")
    return c


def build_alpha(obj, T: float, grid: ControlGrid, ptr: str) -> ControlDistribution:
    ctrls = [build_control(a["xi"], T, grid, f"{ptr}/atoms/{i}/xi") for i, a in enumerate(obj["atoms"])]
    x0 = [a["x0"] for a in obj["atoms"]]
    try:
        return ControlDistribution(np.array(x0, float), tuple(ctrls), [a["w"] for a in obj["atoms"]])
    except (ControlError, ValueError) as e:
        raise ScenarioError(str(e), ptr) from None


def _common(obj):
    T, p = float(obj["T"]), float(obj["p"])
    U = _grid(obj["grids"]["U"], "/grids/U")
    V = _grid(obj["grids"]["V"], "/grids/V")
    try:
        m0 = EmpiricalMeasure.from_json(obj["m0"])
    except (MeasureError, ValueError) as e:
        raise ScenarioError(str(e), "/m0") from None
    if not m0.is_probability():
        raise ScenarioError("m0 is not a probability", "/m0")
    y0 = np.asarray(obj["y0"], float)
    dims = {"d": m0.dim, "d_prime": len(y0), "u": U.dim, "v": V.dim}
    try:
        spec = parse_dynamics(obj["dynamics"], dims)
    except DynamicsError as e:
        raise ScenarioError(str(e), "/dynamics") from None
    return spec, m0, y0, T, p, U, V


def scenario_from_json(obj: dict, validate: bool = True) -> Scenario:
    check_schema(obj, SCENARIO_SCHEMA)
    spec, m0, y0, T, p, U, V = _common(obj)
    alpha = build_alpha(obj["alpha"], T, U, "/alpha")
    zeta = build_control(obj["zeta"], T, V, "/zeta")
    scn = Scenario(spec, m0, y0, alpha, zeta, T, p, U, V, int(obj.get("N", 128)), obj.get("name", ""))
    if validate:
        validate_scenario(scn)
    return scn


def validate_scenario(scn: Scenario) -> dict:
    rep = scn.validate()
    if not rep["compatibility"].passed:
        raise ScenarioError(f"alpha is not compatible with m0 (W_1 gap {rep['compatibility'].gap:.6g})", "/alpha", "validation")
    if not rep["slll"].passed:
        raise ScenarioError(f"dynamics fail SLLL validation at c={rep['c']:.6g}: {rep['slll'].witness}", "/dynamics", "validation")
    return rep


def load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ScenarioError(f"file not found: {p}", "", "schema")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON: {e}", "", "schema") from None


def load_scenario(path, validate: bool = True):
    """Load a scenario file, or a Stackelberg problem file when it carries sigma_L."""
    obj = load_json(path)
    if isinstance(obj, dict) and "sigma_L" in obj:
        from .stackelberg import problem_from_json

        return problem_from_json(obj, validate)
    return scenario_from_json(obj, validate)


def scenario_to_json(scn: Scenario) -> dict:
    dyn = scn.spec.to_json()
    dyn.pop("dims")
    return {
        "name": scn.name,
        "dynamics": dyn,
        "m0": scn.m0.to_json(),
        "y0": [float(v) for v in scn.y0],
        "alpha": scn.alpha.to_json(),
        "zeta": scn.zeta.to_json(),
        "T": scn.T,
        "p": scn.p,
        "grids": {"U": scn.U.to_json(), "V": scn.V.to_json()},
        "N": scn.N,
    }


# -- emission ---------------------------------------------------------------


def fmt(x: float) -> str:
    return repr(float(x))


def motion_csv(motion: Motion) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dprime = motion.y.shape[1]
    w.writerow(["t"] + [f"y_{i}" for i in range(dprime)] + ["sigma_p"])
    sig = motion.sigma_path()
    for k, t in enumerate(motion.time_grid):
        w.writerow([fmt(t)] + [fmt(v) for v in motion.y[k]] + [fmt(sig[k])])
    return buf.getvalue()


def motion_json(motion: Motion) -> dict:
    return {"p": motion.p, "metadata": motion.metadata, "y": motion.y.tolist(), "bundle": motion.chi.to_json()}


def motion_from_json(obj: dict) -> Motion:
    from .measures import TrajectoryBundle

    chi = TrajectoryBundle.from_json(obj["bundle"])
    return Motion(chi.time_grid, np.asarray(obj["y"], float), chi, float(obj["p"]), dict(obj.get("metadata", {})))


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


_PERTURBATION_SCHEMA = {
    "type": "object",
    "properties": {
        "df_I": _exprs,
        "df_II": _exprs,
        "dg": _exprs,
        "dm0": _vec,
        "dy0": _vec,
        "dalpha": {"type": "array", "minItems": 1, "items": _control},
        "dzeta": _control,
    },
    "additionalProperties": False,
}


def perturbation_from_json(obj: dict, base: Scenario, ptr: str = "/perturbation"):
    from .stability import Perturbation

    try:
        check_schema(obj, _PERTURBATION_SCHEMA)
    except ScenarioError as e:
        raise ScenarioError(str(e).split(": ", 1)[-1], ptr + e.pointer) from None
    dalpha = None
    if "dalpha" in obj:
        if len(obj["dalpha"]) != base.alpha.size:
            raise ScenarioError(f"need one alternative control per alpha atom ({base.alpha.size})", ptr + "/dalpha")
        dalpha = tuple(build_control(c, base.T, base.U, f"{ptr}/dalpha/{k}") for k, c in enumerate(obj["dalpha"]))
    dzeta = build_control(obj["dzeta"], base.T, base.V, ptr + "/dzeta") if "dzeta" in obj else None
    for key, n in (("dm0", base.m0.dim), ("dy0", base.y0.shape[0])):
        if key in obj and len(obj[key]) != n:
            raise ScenarioError(f"shift must have {n} coordinates", f"{ptr}/{key}")
    tup = lambda k: tuple(obj[k]) if k in obj else None
    arr = lambda k: np.asarray(obj[k], float) if k in obj else None
    pert = Perturbation(tup("df_I"), tup("df_II"), tup("dg"), arr("dm0"), arr("dy0"), dalpha, dzeta)
    try:
        pert.apply(base, 1.0)
    except (DynamicsError, ControlError, MeasureError) as e:
        raise ScenarioError(str(e), ptr) from None
    return pert


def perturbation_to_json(pert) -> dict:
    out = {}
    for k in ("df_I", "df_II", "dg"):
        if getattr(pert, k) is not None:
            out[k] = list(getattr(pert, k))
    for k in ("dm0", "dy0"):
        if getattr(pert, k) is not None:
            out[k] = [float(v) for v in getattr(pert, k)]
    if pert.dalpha is not None:
        out["dalpha"] = [c.to_json() for c in pert.dalpha]
    if pert.dzeta is not None:
        out["dzeta"] = pert.dzeta.to_json()
    return out
