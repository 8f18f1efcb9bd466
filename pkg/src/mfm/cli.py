"""Command-line entry point: simulate, stability, stackelberg, metrics.

Exit codes: 0 success, 2 validation failure (schema, invariants, bad
overrides), 3 solver non-convergence. Every failure also writes
``error.json`` into the output directory.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

from . import io as sio
from .controls import ControlError
from .dynamics import DynamicsError, SamplerConfig
from .measures import MeasureError
from .solver import NoConvergence, SolverError, delayed_euler_solve, picard_solve

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3
N_RANGE = (1, 65536)
DEFAULT_SCALES = (1.0, 0.5, 0.25, 0.125)


@dataclass
class RunConfig:
    command: str
    scenario: Path | None
    out: Path
    N: int | None = None
    tol: float = 1e-8
    seed: int = 0
    emit: tuple = ("csv", "json")
    solver: str = "picard"
    scales: tuple = DEFAULT_SCALES
    perturbation: Path | None = None
    trials: int = 200
    max_iter: int = 200

    def check(self):
        if self.N is not None and not (N_RANGE[0] <= self.N <= N_RANGE[1]):
            raise sio.ScenarioError(f"--n must lie in [{N_RANGE[0]}, {N_RANGE[1]}]", "", "config")
        if self.max_iter < 1:
            raise sio.ScenarioError("--max-iter must be >= 1", "", "config")
        if not self.tol > 0:
            raise sio.ScenarioError("--tol must be positive", "", "config")
        bad = set(self.emit) - {"csv", "json"}
        if bad:
            raise sio.ScenarioError(f"unknown --emit formats {sorted(bad)}", "", "config")
        if self.command != "metrics" and self.scenario is None:
            raise sio.ScenarioError("--scenario is required", "", "config")


class RunFailure(Exception):
    def __init__(self, code: int, payload: dict):
        super().__init__(payload.get("message", ""))
        self.code = code
        self.payload = payload


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _sampler(scn, seed) -> SamplerConfig:
    return SamplerConfig(T=scn.T, p=scn.p, U=scn.U.points, V=scn.V.points, seed=seed)


def cmd_simulate(cfg: RunConfig) -> list:
    scn = sio.load_scenario(cfg.scenario)
    if not hasattr(scn, "alpha"):
        raise sio.ScenarioError("simulate expects a scenario file, not a game problem", "", "validation")
    if cfg.N is not None:
        scn = scn.with_(N=cfg.N)
    if cfg.solver == "euler":
        motion = delayed_euler_solve(scn)
    else:
        motion = picard_solve(scn, tol=cfg.tol, max_iter=cfg.max_iter)
    written = []
    if "csv" in cfg.emit:
        _write(cfg.out, "motion.csv", sio.motion_csv(motion))
        written.append("motion.csv")
    if "json" in cfg.emit:
        _write(cfg.out, "motion.json", sio.dumps(sio.motion_json(motion)))
        written.append("motion.json")
    return written


def cmd_stability(cfg: RunConfig) -> list:
    from .stability import stability_sweep

    obj = sio.load_json(cfg.scenario)
    scn = sio.load_scenario(cfg.scenario)
    if cfg.N is not None:
        scn = scn.with_(N=cfg.N)
    if cfg.perturbation is not None:
        pert = sio.perturbation_from_json(sio.load_json(cfg.perturbation), scn, "")
    elif isinstance(obj.get("perturbation"), dict):
        pert = sio.perturbation_from_json(obj["perturbation"], scn)
    else:
        raise sio.ScenarioError("no perturbation given (use --perturbation or a 'perturbation' key)", "/perturbation", "schema")
    res = stability_sweep(scn, pert, cfg.scales, cfg.solver, cfg.tol, _sampler(scn, cfg.seed), max_iter=cfg.max_iter)
    written = []
    if "csv" in cfg.emit:
        _write(cfg.out, "sweep.csv", res.to_csv())
        written.append("sweep.csv")
    if "json" in cfg.emit:
        payload = {
            "D_nonincreasing": res.D_nonincreasing,
            "D_zero_at_zero": res.D_zero_at_zero,
            "rows": [{**r.as_dict(), "key_estimate": r.report.to_json()} for r in res.rows],
        }
        _write(cfg.out, "key_estimate.json", sio.dumps(payload))
        written.append("key_estimate.json")
    return written


def cmd_stackelberg(cfg: RunConfig) -> list:
    from .stackelberg import solve_stackelberg

    prob = sio.load_scenario(cfg.scenario)
    if not hasattr(prob, "sigma_L"):
        raise sio.ScenarioError("stackelberg expects a problem file with sigma_L", "/sigma_L", "schema")
    if cfg.N is not None:
        prob.N = cfg.N
    sol = solve_stackelberg(prob)
    written = []
    if "json" in cfg.emit:
        _write(cfg.out, "solution.json", sio.dumps(sol.to_json()))
        written.append("solution.json")
    if "csv" in cfg.emit:
        _write(cfg.out, "payoffs.csv", sol.payoff_csv())
        written.append("payoffs.csv")
    return written


def cmd_metrics(cfg: RunConfig) -> list:
    from .selftest import metric_selftest

    report = metric_selftest(seed=cfg.seed, trials=cfg.trials)
    _write(cfg.out, "metrics.json", sio.dumps(report))
    if not report["passed"]:
        raise RunFailure(EXIT_VALIDATION, {"kind": "validation", "message": "metric self-test failed", "report": report["checks"]})
    return ["metrics.json"]


COMMANDS = {"simulate": cmd_simulate, "stability": cmd_stability, "stackelberg": cmd_stackelberg, "metrics": cmd_metrics}


def run(cfg: RunConfig) -> int:
    try:
        cfg.check()
        COMMANDS[cfg.command](cfg)
        return EXIT_OK
    except RunFailure as e:
        code, payload = e.code, e.payload
    except sio.ScenarioError as e:
        code, payload = EXIT_VALIDATION, {"kind": e.kind, "message": str(e), "pointer": e.pointer}
    except (DynamicsError, ControlError, MeasureError) as e:
        code, payload = EXIT_VALIDATION, {"kind": "validation", "message": str(e)}
    except NoConvergence as e:
        code, payload = EXIT_SOLVER, {"kind": "no_convergence", "message": str(e), "residual": e.residual, "iterations": e.iterations}
    except SolverError as e:
        cause = getattr(e, "cause", None)
        extra = {"residual": cause.residual} if isinstance(cause, NoConvergence) else {}
        code, payload = EXIT_SOLVER, {"kind": "solver", "message": str(e), **extra}
    payload = {"status": code, "command": cfg.command, **payload}
    try:
        _write(cfg.out, "error.json", sio.dumps(payload))
    except OSError:
        pass
    print(f"error: {payload['message']}", file=sys.stderr)
    return code


def _scales(text: str) -> tuple:
    try:
        vals = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("scales must be a nonempty list of nonnegative numbers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfm", description="Major/minor-agent mean-field motions.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", type=Path, required=name != "metrics")
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--n", type=int, default=None, help="time resolution N")
        p.add_argument("--tol", type=float, default=1e-8, help="Picard tolerance")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--emit", default="csv,json", help="comma list of csv,json")
        p.add_argument("--max-iter", type=int, default=200, help="Picard iteration cap")
        if name in ("simulate", "stability"):
            p.add_argument("--solver", choices=["picard", "euler"], default="picard")
        if name == "stability":
            p.add_argument("--scales", type=_scales, default=DEFAULT_SCALES)
            p.add_argument("--perturbation", type=Path, default=None)
        if name == "metrics":
            p.add_argument("--trials", type=int, default=200)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(
        command=args.command,
        scenario=args.scenario,
        out=args.out,
        N=args.n,
        tol=args.tol,
        seed=args.seed,
        emit=tuple(s.strip() for s in args.emit.split(",") if s.strip()),
        solver=getattr(args, "solver", "picard"),
        scales=getattr(args, "scales", DEFAULT_SCALES),
        perturbation=getattr(args, "perturbation", None),
        trials=getattr(args, "trials", 200),
        max_iter=args.max_iter,
    )
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
