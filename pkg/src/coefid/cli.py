"""Command-line front end: forward, reconstruct, study, lmm.

Settings come from built-in defaults, then an optional config file (INI-style
key = value with one section per command, or JSON), then command-line flags.
Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import fem, lmm, synth
from .mesh import build_uniform_mesh
from .recon_fem import FemReconConfig, reconstruct_fem
from .recon_nn import (SamplingPlan, TrainConfig, mixed_penalties, pinn_penalties, reconstruct_hybrid,
                       reconstruct_mixed, reconstruct_pinn, write_train_log)
from .study import StudyPlan, parameter_choice, run_convergence_study, write_outputs

log = logging.getLogger("coefid")

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2
NUMERICAL_ERRORS = (fem.SolverError, fem.AdmissibilityError, FloatingPointError, np.linalg.LinAlgError,
                    ArithmeticError)


class ConfigError(Exception):
    pass


def _floats(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(x) for x in str(v).replace(";", ",").split(",") if x.strip()]


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt(conv):
    return lambda v: None if v in (None, "", "none", "None") else conv(v)


SCHEMA = {
    "forward": {"problem": (str, "1d-affine-a"), "cells": (int, 64), "quad_level": (int, 2)},
    "reconstruct": {
        "problem": (str, "1d-affine-a"), "scheme": (str, "fem"), "delta": (float, 1e-2),
        "coupling": (str, "paper-rule"), "c_h": (float, 1.0), "c_gamma": (float, 1.0),
        "cells": (_opt(int), None), "gamma": (_opt(float), None), "noise_mode": (str, "smooth"),
        "steps": (int, 5000), "learning_rate": (float, 1e-3), "n_d": (int, 256), "n_b": (int, 64),
        "quad_level": (_opt(int), None), "max_iters": (int, 2000),
    },
    "study": {
        "problem": (str, "1d-affine-a"), "scheme": (str, "fem"), "deltas": (_floats, [1e-1, 3e-2, 1e-2, 3e-3]),
        "coupling": (str, "paper-rule"), "trials": (int, 3), "c_h": (float, 1.0), "c_gamma": (float, 1.0),
        "cells": (_opt(int), None), "gamma": (_opt(float), None), "steps": (int, 5000),
        "learning_rate": (float, 1e-3), "n_d": (int, 256), "n_b": (int, 64), "quad_level": (int, 0),
        "lmm_family": (str, "adams-bashforth"), "lmm_M": (int, 2), "dynamics": (str, "linear"),
        "horizon": (float, 1.0),
    },
    "lmm": {
        "family": (str, "adams-bashforth"), "M": (int, 2), "dynamics": (str, "linear"), "h": (float, 1e-2),
        "horizon": (float, 1.0), "stability_only": (_bool, False),
    },
}


def _read_config_file(path: str, command: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        common = {k: v for k, v in data.items() if not isinstance(v, dict)}
        return {**common, **data.get(command, {})}
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case (lmm M)
    try:
        cp.read_string(text if text.lstrip().startswith("[") else "[common]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"invalid config file: {exc}") from exc
    out = dict(cp["common"]) if cp.has_section("common") else {}
    if cp.has_section(command):
        out.update(cp[command])
    return out


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    schema = SCHEMA[command]
    raw = _read_config_file(args.config, command) if args.config else {}
    seed = raw.pop("seed", 0)
    raw = {k.replace("-", "_"): v for k, v in raw.items()}
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    cfg = {}
    for key, (conv, default) in schema.items():
        value = getattr(args, key, None)
        if value is None:
            value = raw.get(key, default)
        try:
            cfg[key] = conv(value) if value is not None else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    cfg["seed"] = int(args.seed if args.seed is not None else seed)
    _validate(command, cfg)
    return cfg


def _validate(command: str, cfg: dict) -> None:
    if "problem" in cfg and not (command == "study" and cfg["scheme"] == "lmm"):
        if cfg["problem"] not in synth.problem_ids():
            raise ConfigError(f"unknown problem id {cfg['problem']!r}; known: {', '.join(synth.problem_ids())}")
    if command == "reconstruct":
        if cfg["scheme"] not in ("fem", "hybrid", "mixed", "pinn"):
            raise ConfigError(f"unknown scheme {cfg['scheme']!r}")
        if cfg["noise_mode"] not in ("smooth", "nodal"):
            raise ConfigError(f"unknown noise mode {cfg['noise_mode']!r}")
        if cfg["scheme"] in ("mixed", "pinn") and cfg["noise_mode"] != "smooth":
            raise ConfigError(f"{cfg['scheme']} scheme needs smooth-mode observations (pointwise gradients)")
        if cfg["delta"] < 0:
            raise ConfigError("delta must be nonnegative")
        if cfg["coupling"] == "paper-rule" and cfg["delta"] == 0 and (cfg["cells"] is None or cfg["gamma"] is None):
            raise ConfigError("delta = 0 needs explicit cells and gamma")
    if command == "lmm":
        try:
            lmm.lmm_coefficients(cfg["family"], cfg["M"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if cfg["dynamics"] not in lmm.DYNAMICS:
            raise ConfigError(f"unknown dynamics {cfg['dynamics']!r}; known: {', '.join(lmm.DYNAMICS)}")


def config_hash(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, **cfg}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_dir(out: str, command: str, cfg: dict) -> Path:
    d = Path(out) / f"{command}-{config_hash(command, cfg)}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True))
    return d


def _dump(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")


# -- commands ----------------------------------------------------------------

def cmd_forward(cfg: dict, out: Path) -> int:
    problem = synth.get_problem(cfg["problem"])
    t0 = time.perf_counter()
    mesh = build_uniform_mesh(problem.dim, cfg["cells"])
    uh = fem.solve_dirichlet(mesh, problem.a_true, problem.f, cfg["quad_level"])
    uh.to_csv(out / "solution.csv")
    errors = {
        "problem": problem.name, "cells": cfg["cells"], "h": mesh.h,
        "l2_error": fem.error_norm(uh, problem.u_true, "L2"),
        "h1_semi_error": fem.error_norm(uh, problem.u_true, "H1semi"),
        "runtime_seconds": time.perf_counter() - t0,
    }
    _dump(out / "errors.json", errors)
    print(f"L2 error {errors['l2_error']:.3e}, H1 seminorm error {errors['h1_semi_error']:.3e}")
    return EXIT_OK


def cmd_reconstruct(cfg: dict, out: Path) -> int:
    problem = synth.get_problem(cfg["problem"])
    seed, scheme, delta = cfg["seed"], cfg["scheme"], cfg["delta"]
    t0 = time.perf_counter()
    if cfg["coupling"] == "manual" or (cfg["cells"] is not None and cfg["gamma"] is not None):
        if cfg["cells"] is None or cfg["gamma"] is None:
            raise ConfigError("manual coupling needs cells and gamma")
        cells, gamma = cfg["cells"], cfg["gamma"]
    else:
        choice = parameter_choice(delta, cfg["c_h"], cfg["c_gamma"])
        cells = cfg["cells"] or choice.cells
        gamma = choice.gamma if cfg["gamma"] is None else cfg["gamma"]
    mesh = build_uniform_mesh(problem.dim, cells)
    train = TrainConfig(steps=cfg["steps"], learning_rate=cfg["learning_rate"], seed=seed,
                        log_every=max(1, cfg["steps"] // 100))
    payload = {"scheme": scheme, "problem": problem.name, "delta": delta, "cells": cells}
    if scheme in ("fem", "hybrid"):
        obs = synth.make_observation(problem, delta, "L2", cfg["noise_mode"], seed, mesh)
        if scheme == "fem":
            level = 2 if cfg["quad_level"] is None else cfg["quad_level"]
            res = reconstruct_fem(problem, obs, mesh, FemReconConfig(gamma, problem.bounds, cfg["max_iters"],
                                                                     quad_level=level, seed=seed))
            with open(out / "iterations.csv", "w") as fh:
                fh.write("iteration,loss\n")
                fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(res.loss_history))
        else:
            level = 0 if cfg["quad_level"] is None else cfg["quad_level"]
            res = reconstruct_hybrid(problem, obs, mesh, gamma, train, n=level)
            write_train_log(out / "train_log.csv", res.extra["history"])
        payload["gamma"] = gamma
        payload["quad_level"] = level
    else:
        obs = synth.make_observation(problem, delta, "H1", "smooth", seed)
        plan = SamplingPlan(cfg["n_d"], cfg["n_b"], seed)
        if scheme == "mixed":
            pen = mixed_penalties(1.0, gamma, 1.0)
            res = reconstruct_mixed(problem, obs, plan, pen, train)
        else:
            pen = pinn_penalties(1.0, 1.0, gamma)
            res = reconstruct_pinn(problem, obs, plan, pen, train)
        write_train_log(out / "train_log.csv", res.extra["history"])
        payload["gammas"] = list(pen.values)
    res.a_h.to_csv(out / "coefficient.csv")
    payload.update(
        l2_error=res.l2_error, weighted_error=res.weighted_error, iterations=res.iterations,
        converged=bool(res.converged), loss_final=float(res.loss_history[-1]),
        coefficient_min=float(res.a_h.values.min()), coefficient_max=float(res.a_h.values.max()),
        runtime_seconds=time.perf_counter() - t0,
    )
    _dump(out / "result.json", payload)
    print(f"{scheme}: L2 coefficient error {res.l2_error:.4e} (converged={res.converged})")
    return EXIT_OK


def cmd_study(cfg: dict, out: Path, threads: int = 1) -> int:
    try:
        plan = StudyPlan(cfg["problem"], cfg["scheme"], cfg["deltas"], cfg["coupling"], cfg["trials"],
                         [cfg["seed"] + i for i in range(cfg["trials"])], cfg["c_h"], cfg["c_gamma"],
                         cfg["cells"], cfg["gamma"], cfg["steps"], cfg["learning_rate"], cfg["n_d"], cfg["n_b"],
                         cfg["quad_level"], cfg["lmm_family"], cfg["lmm_M"], cfg["dynamics"], cfg["horizon"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    records = run_convergence_study(plan, threads=threads)
    summary = write_outputs(plan, records, out)
    slope = summary.get("slope")
    print(f"{plan.scheme} study: slope {'n/a' if slope is None else f'{slope:.3f}'}, pass={summary.get('pass')}")
    return EXIT_OK


def cmd_lmm(cfg: dict, out: Path) -> int:
    scheme = lmm.lmm_coefficients(cfg["family"], cfg["M"])
    stable, moduli, boundary = lmm.discovery_stable(scheme)
    report = {"scheme": scheme.name, "family": scheme.family, "M": scheme.M, "order": scheme.p,
              "alpha": list(scheme.alpha), "beta": list(scheme.beta), "stable": stable,
              "root_moduli": moduli, "boundary": boundary}
    if not cfg["stability_only"]:
        f, y0 = lmm.DYNAMICS[cfg["dynamics"]]
        N = int(round(cfg["horizon"] / cfg["h"]))
        traj = lmm.reference_trajectory(f, y0, cfg["h"], N)
        traj.to_csv(out / "trajectory.csv")
        F = lmm.recover_dynamics(scheme, traj)
        lmm.write_recovery_csv(out / "recovery.csv", traj, F, f)
        true = np.stack([f(y) for y in traj.states])
        report.update(dynamics=cfg["dynamics"], h=cfg["h"], N=N, max_error=float(np.abs(F - true).max()),
                      condition_number=lmm.condition_number(scheme, N))
    _dump(out / "stability.json", report)
    print(f"{scheme.name}: stable={stable}, root moduli {', '.join(f'{m:.4f}' for m in moduli) or 'none'}"
          + (f", max recovery error {report['max_error']:.3e}" if "max_error" in report else ""))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coefid", description="Diffusion coefficient identification toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI or JSON config file")
    common.add_argument("--seed", type=int, help="base random seed (default 0)")
    common.add_argument("--out", default="runs", help="output root directory (default: runs)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for studies")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", parents=[common], help="solve the forward problem")
    p.add_argument("--problem")
    p.add_argument("--cells", type=int)
    p.add_argument("--quad-level", dest="quad_level", type=int)

    p = sub.add_parser("reconstruct", parents=[common], help="single coefficient reconstruction")
    p.add_argument("--problem")
    p.add_argument("--scheme", choices=["fem", "hybrid", "mixed", "pinn"])
    p.add_argument("--delta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--cells", type=int)
    p.add_argument("--coupling", choices=["paper-rule", "manual"])
    p.add_argument("--noise-mode", dest="noise_mode", choices=["smooth", "nodal"])
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--n-d", dest="n_d", type=int)
    p.add_argument("--n-b", dest="n_b", type=int)
    p.add_argument("--quad-level", dest="quad_level", type=int)

    p = sub.add_parser("study", parents=[common], help="convergence-rate study")
    p.add_argument("--problem")
    p.add_argument("--scheme", choices=["fem", "hybrid", "mixed", "pinn", "lmm"])
    p.add_argument("--deltas", help="comma-separated decreasing grid (h values for lmm)")
    p.add_argument("--trials", type=int)
    p.add_argument("--coupling", choices=["paper-rule", "manual"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lmm-family", dest="lmm_family")
    p.add_argument("--lmm-M", dest="lmm_M", type=int)
    p.add_argument("--dynamics")

    p = sub.add_parser("lmm", parents=[common], help="LMM stability report and dynamics recovery")
    p.add_argument("--family")
    p.add_argument("--M", type=int)
    p.add_argument("--dynamics")
    p.add_argument("--h", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--stability-only", dest="stability_only", action="store_const", const=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        out = run_dir(args.out, args.command, cfg)
        if args.command == "forward":
            return cmd_forward(cfg, out)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, out)
        if args.command == "study":
            return cmd_study(cfg, out, max(1, args.threads))
        return cmd_lmm(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
