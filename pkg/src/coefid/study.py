"""Convergence-rate studies: parameter choice, delta sweeps and log-log fits."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import lmm, synth
from .mesh import build_uniform_mesh
from .recon_fem import FemReconConfig, reconstruct_fem
from .recon_nn import (SamplingPlan, TrainConfig, mixed_penalties, pinn_penalties, reconstruct_hybrid,
                       reconstruct_mixed, reconstruct_pinn)

log = logging.getLogger(__name__)

SCHEMES = ("fem", "hybrid", "mixed", "pinn", "lmm")
MIN_CELLS = 4


class ParameterChoice:
    """Unpacks as (h, gamma); also keeps the requested h and the cell count."""

    def __init__(self, h: float, gamma: float, h_requested: float, cells: int):
        self.h, self.gamma, self.h_requested, self.cells = h, gamma, h_requested, cells

    def __iter__(self):
        return iter((self.h, self.gamma))

    def __repr__(self):
        return f"ParameterChoice(h={self.h}, gamma={self.gamma}, h_requested={self.h_requested}, cells={self.cells})"


def snap_cells(h: float) -> int:
    """Dyadic cell count whose mesh size is log-nearest to h, at least MIN_CELLS."""
    return max(MIN_CELLS, 2 ** max(0, round(math.log2(1.0 / h))))


def parameter_choice(delta: float, c_h: float = 1.0, c_gamma: float = 1.0) -> ParameterChoice:
    """h ~ c_h delta^(1/2) snapped to a dyadic mesh, gamma = c_gamma delta^2."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    h_req = c_h * math.sqrt(delta)
    cells = snap_cells(h_req)
    return ParameterChoice(1.0 / cells, c_gamma * delta**2, h_req, cells)


@dataclass
class StudyPlan:
    problem_id: str
    scheme: str
    delta_grid: list
    coupling: str = "paper-rule"
    trials_per_cell: int = 3
    seeds: list | None = None
    c_h: float = 1.0
    c_gamma: float = 1.0
    cells: int | None = None  # manual coupling
    gamma: float | None = None  # manual coupling
    steps: int = 5000
    learning_rate: float = 1e-3
    n_d: int = 256
    n_b: int = 64
    quad_level: int = 0
    lmm_family: str = "adams-bashforth"
    lmm_M: int = 2
    dynamics: str = "linear"
    horizon: float = 1.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        grid = [float(d) for d in self.delta_grid]
        if not grid or any(d <= 0 for d in grid) or any(b >= a for a, b in zip(grid, grid[1:])):
            raise ValueError("delta_grid must be positive and strictly decreasing")
        self.delta_grid = grid
        if self.coupling not in ("paper-rule", "manual"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.trials_per_cell < 1:
            raise ValueError("trials_per_cell must be >= 1")
        if self.seeds is None:
            self.seeds = list(range(self.trials_per_cell))
        elif len(self.seeds) != self.trials_per_cell:
            raise ValueError("len(seeds) must equal trials_per_cell")
        self.seeds = [int(s) for s in self.seeds]
        if self.scheme != "lmm":
            synth.get_problem(self.problem_id)
        else:
            lmm.lmm_coefficients(self.lmm_family, self.lmm_M)
            if self.dynamics not in lmm.DYNAMICS:
                raise ValueError(f"unknown dynamics {self.dynamics!r}")
        if self.coupling == "manual" and self.scheme != "lmm" and (self.cells is None or self.gamma is None):
            raise ValueError("manual coupling needs cells and gamma")


@dataclass
class RateRecord:
    delta: float
    h: float
    gamma: float | list
    l2_error: float
    weighted_error: float
    loss_final: float
    runtime_seconds: float
    seed: int
    h_requested: float = float("nan")
    converged: bool = True
    failure: str | None = None

    def __post_init__(self):
        for v in (self.l2_error, self.weighted_error):
            if not (math.isnan(v) or v >= 0):
                raise ValueError("errors must be nonnegative")


def _choice(plan: StudyPlan, delta: float) -> ParameterChoice:
    if plan.coupling == "manual":
        return ParameterChoice(1.0 / plan.cells, plan.gamma, 1.0 / plan.cells, plan.cells)
    return parameter_choice(delta, plan.c_h, plan.c_gamma)


def _run_lmm_cell(plan: StudyPlan, h: float, seed: int) -> RateRecord:
    f, y0 = lmm.DYNAMICS[plan.dynamics]
    N = int(round(plan.horizon / h))
    traj = lmm.reference_trajectory(f, y0, h, N)
    scheme = lmm.lmm_coefficients(plan.lmm_family, plan.lmm_M)
    F = lmm.recover_dynamics(scheme, traj)
    true = np.stack([f(y) for y in traj.states])
    err = float(np.abs(F - true).max())
    return RateRecord(h, h, float("nan"), err, float("nan"), float("nan"), 0.0, seed, h)


def run_cell(plan: StudyPlan, delta: float, seed: int) -> RateRecord:
    """One (delta, seed) cell; failures become records with a message."""
    t0 = time.perf_counter()
    try:
        if plan.scheme == "lmm":
            rec = _run_lmm_cell(plan, delta, seed)
        else:
            rec = _run_elliptic_cell(plan, delta, seed)
    except Exception as exc:  # recorded, study continues
        log.warning("cell delta=%g seed=%d failed: %s", delta, seed, exc)
        nan = float("nan")
        rec = RateRecord(delta, nan, nan, nan, nan, nan, 0.0, seed, converged=False,
                         failure=f"{type(exc).__name__}: {exc}")
    rec.runtime_seconds = time.perf_counter() - t0
    return rec


def _run_elliptic_cell(plan: StudyPlan, delta: float, seed: int) -> RateRecord:
    problem = synth.get_problem(plan.problem_id)
    ch = _choice(plan, delta)
    train = TrainConfig(steps=plan.steps, learning_rate=plan.learning_rate, seed=seed,
                        log_every=max(1, plan.steps // 20))
    if plan.scheme in ("fem", "hybrid"):
        obs = synth.make_observation(problem, delta, "L2", seed=seed)
        mesh = build_uniform_mesh(problem.dim, ch.cells)
        if plan.scheme == "fem":
            res = reconstruct_fem(problem, obs, mesh, FemReconConfig(ch.gamma, problem.bounds, seed=seed))
        else:
            res = reconstruct_hybrid(problem, obs, mesh, ch.gamma, train, n=plan.quad_level)
        gam = ch.gamma
    else:
        obs = synth.make_observation(problem, delta, "H1", seed=seed)
        sampling = SamplingPlan(plan.n_d, plan.n_b, seed)
        if plan.scheme == "mixed":
            pen = mixed_penalties(1.0, ch.gamma, 1.0)
            res = reconstruct_mixed(problem, obs, sampling, pen, train)
        else:
            pen = pinn_penalties(1.0, 1.0, ch.gamma)
            res = reconstruct_pinn(problem, obs, sampling, pen, train)
        gam = list(pen.values)
    return RateRecord(delta, ch.h, gam, res.l2_error, res.weighted_error, float(res.loss_history[-1]), 0.0,
                      seed, ch.h_requested, bool(res.converged))


def _run_cell_args(args):
    return run_cell(*args)


def run_convergence_study(plan: StudyPlan, threads: int = 1) -> list[RateRecord]:
    """All (delta, seed) cells, ordered by grid position then seed regardless of pool scheduling."""
    jobs = [(plan, d, s) for d in plan.delta_grid for s in plan.seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_run_cell_args, jobs))
    else:
        records = [run_cell(*j) for j in jobs]
    return records


def fit_rate(pairs) -> tuple[float, float, float]:
    """Least-squares line through (log x, log err): (slope, intercept, r^2)."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ValueError("need at least 3 points to fit a rate")
    x = np.array([p[0] for p in pairs], float)
    e = np.array([p[1] for p in pairs], float)
    if np.any(x <= 0) or np.any(e <= 0):
        raise ValueError("rate fit needs positive x and errors")
    lx, le = np.log(x), np.log(e)
    slope, intercept = np.polyfit(lx, le, 1)
    resid = le - (slope * lx + intercept)
    ss = float(((le - le.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), r2


def medians(records: list[RateRecord]) -> list[dict]:
    out = []
    for d in sorted({r.delta for r in records}, reverse=True):
        errs = [r.l2_error for r in records if r.delta == d and r.failure is None and math.isfinite(r.l2_error)]
        out.append({"delta": d, "median": float(np.median(errs)) if errs else float("nan"),
                    "min": min(errs, default=float("nan")), "max": max(errs, default=float("nan")),
                    "n_ok": len(errs)})
    return out


def summarize(plan: StudyPlan, records: list[RateRecord]) -> dict:
    rows = medians(records)
    ok = [(r["delta"], r["median"]) for r in rows if r["n_ok"] and r["median"] > 0]
    summary = {"problem_id": plan.problem_id, "scheme": plan.scheme, "medians": rows,
               "failures": sum(r.failure is not None for r in records)}
    med = [m for _, m in ok]
    summary["strictly_decreasing"] = len(med) == len(rows) and all(b < a for a, b in zip(med, med[1:]))
    if plan.scheme == "lmm":
        target = lmm.lmm_coefficients(plan.lmm_family, plan.lmm_M).p
        summary["target_slope"] = target
    else:
        beta = synth.certify_beta(synth.get_problem(plan.problem_id))
        target = 1.0 / (4.0 * (1.0 + beta))
        summary["beta"] = beta
        summary["target_slope"] = target
    if len(ok) >= 3:
        slope, intercept, r2 = fit_rate(ok)
        summary.update(slope=slope, intercept=intercept, r_squared=r2)
        if plan.scheme == "lmm":
            summary["pass"] = abs(slope - target) <= 0.3
        else:
            summary["pass"] = bool(slope >= 0.8 * target and summary["strictly_decreasing"])
    return summary


def write_outputs(plan: StudyPlan, records: list[RateRecord], out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in RateRecord.__dataclass_fields__.values()]
    with open(out / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in records:
            d = asdict(r)
            w.writerow([json.dumps(d[k]) if isinstance(d[k], list) else d[k] for k in names])
    summary = summarize(plan, records)
    summary["plan"] = asdict(plan)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    with open(out / "medians.dat", "w") as fh:
        fh.write("# delta median min max\n" if plan.scheme != "lmm" else "# h median min max\n")
        for r in summary["medians"]:
            fh.write(f"{r['delta']:.10g} {r['median']:.10g} {r['min']:.10g} {r['max']:.10g}\n")
    return summary
