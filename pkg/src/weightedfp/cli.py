"""Command line driver: ``solve``, ``simulate``, ``compare`` and ``validate``.

Exit codes: 0 success, 1 configuration error, 2 solver or simulation
failure, 3 invariant or comparison breach.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, boolean, build, floats, load
from .discrete_ops import OperatorBundle
from .mckean_vlasov import (
    DegenerateKDE,
    ParticleEscape,
    compare_marginals,
    field_moments,
    gaussian_l1_error,
    moments,
    ou_exact_marginal,
    ou_rates,
    sample_from_field,
    self_sampling_baseline,
    simulate_pde_driven,
    simulate_self_consistent,
    wasserstein1_samples,
)
from .model import norm_linf
from .resolvent import ResolventError, lambda_max_for
from .semigroup import (
    Trajectory,
    bump_test_function,
    evolve,
    gaussian_test_function,
    weak_form_residual,
)
from .validation import run_suite

OK, CONFIG_ERROR, SOLVER_FAILURE, BREACH = 0, 1, 2, 3
FMT = "%.16e"
MASS_TOL = 1e-9
POSITIVITY_TOL = 1e-12


class _Exit(Exception):
    def __init__(self, code: int, message: str, payload: dict | None = None) -> None:
        super().__init__(message)
        self.code = code
        self.payload = payload or {}


# ---------------------------------------------------------------------------
# output helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: list[str], rows: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(rows), fmt=FMT, delimiter=",", header=",".join(header), comments="")


def _metadata(cfg: RunConfig, command: str, extra: dict | None = None) -> dict:
    meta = {
        "command": command,
        "experiment": cfg.raw["experiment.name"],
        "version": __version__,
        "config": dict(sorted(cfg.raw.items())),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    meta.update(extra or {})
    return meta


def _enable_resolvent_log(cfg: RunConfig) -> logging.Handler | None:
    if not boolean(cfg.raw["output.resolvent_log"]):
        return None
    handler = logging.FileHandler(cfg.out / "resolvent.jsonl", mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger = logging.getLogger("weightedfp.resolvent")
    logger.setLevel(logging.DEBUG)
    logger.addHandler(handler)
    return handler


def _prepare(cfg: RunConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# solve


def _ou_parameters(cfg: RunConfig):
    """``(theta, sigma, m0, var0)`` when the run is an OU problem, else ``None``."""
    raw = cfg.raw
    c = cfg.problem.coefficients
    if raw["potential.kind"] != "quadratic" or raw["beta.kind"] != "linear":
        return None
    if not (c.b_is_zero or c.D_is_zero) or raw["initial.kind"] != "gaussian":
        return None
    a = floats(raw["potential.params"])[0]
    slope = floats(raw["beta.params"])[0]
    params = floats(raw["initial.params"])
    theta, sigma = ou_rates(slope, a)
    return theta, sigma, np.asarray(params[:-1]), params[-1]


def _ou_report(cfg: RunConfig, traj: Trajectory) -> dict | None:
    ou = _ou_parameters(cfg)
    if ou is None:
        return None
    theta, sigma, m0, var0 = ou
    g, w = cfg.problem.grid, cfg.problem.weight
    rows = []
    for t in sorted(set(cfg.sde["times"]) | {cfg.T}):
        if t > cfg.T + 1e-12:
            continue
        k = int(np.argmin(np.abs(traj.times - t)))
        tk = float(traj.times[k])
        mean, var = ou_exact_marginal(m0, var0, sigma, tk, theta)
        fm = field_moments(g, w, traj.fields[k])
        rows.append({
            "t": tk,
            "l1_error": gaussian_l1_error(g, w, traj.fields[k], mean, var),
            "exact_mean": mean,
            "exact_var": var,
            "pde_mean": fm["mean"],
            "pde_var": fm["var"],
        })
    return {"theta": theta, "sigma": sigma, "times": rows}


def _weak_form_report(cfg: RunConfig, ops: OperatorBundle, traj: Trajectory) -> dict:
    d = cfg.problem.grid.d
    R = cfg.problem.grid.R
    phis = [gaussian_test_function(np.zeros(d), 1.0), bump_test_function(np.full(d, 0.25), R / 2)]
    out = {}
    for phi in phis:
        try:
            out[phi.name] = weak_form_residual(traj, ops, cfg.problem.potential, phi)
        except ValueError as exc:
            out[phi.name] = str(exc)
    return out


def _write_trajectory(cfg: RunConfig, traj: Trajectory) -> None:
    g, w = cfg.problem.grid, cfg.problem.weight
    pts = g.cell_points().reshape(-1, g.d)
    names = ["x", "y"][: g.d]
    write_csv(cfg.out / "trajectory_grid.csv", names + ["rho"], np.column_stack([pts, w.cells.ravel()]))
    rows = np.column_stack([traj.times, np.stack([u.ravel() for u in traj.fields])])
    write_csv(cfg.out / "trajectory_u.csv", ["t"] + [f"u{i}" for i in range(g.size)], rows)
    mon = np.column_stack([traj.step_times, traj.mass, traj.linf, traj.minimum, traj.residuals])
    write_csv(cfg.out / "monitors.csv", ["t", "mass", "linf", "min", "residual"], mon)


def cmd_solve(cfg: RunConfig) -> int:
    _prepare(cfg)
    ops = OperatorBundle(cfg.problem.grid, cfg.problem.weight, cfg.problem.coefficients)
    lam0 = lambda_max_for(ops)
    if cfg.h >= lam0:
        raise _Exit(CONFIG_ERROR, f"time step h = {cfg.h:.6g} is not below lambda_0 = {lam0:.6g}",
                    {"h": cfg.h, "lambda_0": lam0})
    handler = _enable_resolvent_log(cfg)
    try:
        traj = evolve(ops, cfg.u0, cfg.T, cfg.steps, cfg.resolvent)
    except ResolventError as exc:
        raise _Exit(SOLVER_FAILURE, f"resolvent failed: {exc}", {"residual": exc.residual}) from exc
    finally:
        if handler is not None:
            logging.getLogger("weightedfp.resolvent").removeHandler(handler)
            handler.close()
    _write_trajectory(cfg, traj)

    m0 = traj.mass[0]
    drift = float(np.max(np.abs(traj.mass - m0)) / max(abs(m0), 1e-300))
    checks = [{"name": "mass", "value": drift, "tolerance": MASS_TOL, "pass": drift <= MASS_TOL}]
    if cfg.u0.min() >= 0:
        neg = max(0.0, -float(traj.minimum.min())) / max(norm_linf(cfg.u0), 1e-300)
        checks.append({"name": "positivity", "value": neg, "tolerance": POSITIVITY_TOL,
                       "pass": neg <= POSITIVITY_TOL})
    checks.append({"name": "linf_growth", "value": len(traj.breaches), "tolerance": 0,
                   "pass": not traj.breaches, "detail": traj.breaches[:5]})
    passed = all(c["pass"] for c in checks)
    score = {
        "command": "solve",
        "pass": passed,
        "checks": checks,
        "weak_form_residual": _weak_form_report(cfg, ops, traj),
        "ou_report": _ou_report(cfg, traj),
    }
    write_json(cfg.out / "scorecard.json", score)
    write_json(cfg.out / "metadata.json", _metadata(cfg, "solve", {
        "lambda_0": lam0,
        "h": cfg.h,
        "steps": cfg.steps,
        "T": cfg.T,
        "drift_bound": ops.drift_bound() if not math.isinf(lam0) else None,
        "max_residual": float(traj.residuals.max()),
        "tolerance": cfg.resolvent.tol,
        "final_mass": float(traj.mass[-1]),
    }))
    if not passed:
        raise _Exit(BREACH, "invariant breach: " + ", ".join(c["name"] for c in checks if not c["pass"]),
                    {"checks": checks})
    return OK


# ---------------------------------------------------------------------------
# simulate / compare


def _load_trajectory(directory: Path, cfg: RunConfig) -> Trajectory:
    data = np.loadtxt(directory / "trajectory_u.csv", delimiter=",", skiprows=1, ndmin=2)
    g = cfg.problem.grid
    if data.shape[1] != g.size + 1:
        raise _Exit(CONFIG_ERROR, f"trajectory in {directory} does not match the configured grid")
    mon = np.loadtxt(directory / "monitors.csv", delimiter=",", skiprows=1, ndmin=2)
    fields = [row.reshape(g.shape) for row in data[:, 1:]]
    return Trajectory(
        h=cfg.h,
        times=data[:, 0],
        fields=fields,
        step_times=mon[:, 0],
        mass=mon[:, 1],
        linf=mon[:, 2],
        minimum=mon[:, 3],
        residuals=mon[:, 4],
    )


def _particle_runs(cfg: RunConfig, ops: OperatorBundle, traj: Trajectory | None) -> dict:
    sde = cfg.sde
    dt = sde["dt"] if sde["dt"] is not None else cfg.h
    record = tuple(t for t in sde["times"] if t <= cfg.T + 1e-12)
    rng = np.random.default_rng([sde["seed"], 1])
    x0 = sample_from_field(cfg.problem.grid, cfg.problem.weight, cfg.u0, sde["N"], rng)
    runs = {}
    try:
        if sde["mode"] in ("pde", "both"):
            runs["pde"] = simulate_pde_driven(ops, cfg.problem.potential, x0, traj, dt, cfg.T,
                                              sde["seed"], record)
        if sde["mode"] in ("self", "both"):
            runs["self"] = simulate_self_consistent(ops, cfg.problem.potential, x0, sde["bandwidth"],
                                                    dt, cfg.T, sde["seed"], record)
    except (ParticleEscape, DegenerateKDE, ValueError) as exc:
        raise _Exit(SOLVER_FAILURE, f"simulation failed: {exc}") from exc
    return runs


def _write_particles(cfg: RunConfig, runs: dict) -> None:
    thin = max(1, cfg.sde["thin"])
    rows = []
    for label, run in runs.items():
        code = 0.0 if label == "pde" else 1.0
        for ens in run.ensembles:
            x = ens.positions[::thin]
            ids = np.arange(0, ens.N, thin)
            rows.append(np.column_stack([np.full(len(x), code), np.full(len(x), ens.t), ids, x]))
    names = ["mode", "t", "particle"] + ["x", "y"][: cfg.problem.grid.d]
    write_csv(cfg.out / "particles.csv", names, np.concatenate(rows))


def _marginal_report(cfg: RunConfig, runs: dict, traj: Trajectory) -> dict:
    g, w = cfg.problem.grid, cfg.problem.weight
    sigma = float(cfg.raw["compare.sigma"])
    factor = float(cfg.raw["compare.w1_factor"])
    report = {"sigma": sigma, "w1_factor": factor, "modes": {}}
    baselines = {}
    for label, run in runs.items():
        rows = []
        for ens in run.ensembles[1:]:
            k = int(np.argmin(np.abs(traj.times - ens.t)))
            u = traj.fields[k]
            l1, w1 = compare_marginals(ens, g, w, u)
            if k not in baselines:
                baselines[k] = self_sampling_baseline(g, w, u, ens.N, cfg.sde["seed"])
            pm = moments(ens.positions)
            fm = field_moments(g, w, u)
            z_mean = np.abs(pm["mean"] - fm["mean"]) / np.maximum(pm["se_mean"], 1e-300)
            z_var = np.abs(pm["var"] - fm["var"]) / np.maximum(pm["se_var"], 1e-300)
            rows.append({
                "t": ens.t,
                "l1": l1,
                "w1": w1,
                "w1_baseline": baselines[k],
                "particle_mean": pm["mean"],
                "particle_var": pm["var"],
                "se_mean": pm["se_mean"],
                "se_var": pm["se_var"],
                "pde_mean": fm["mean"],
                "pde_var": fm["var"],
                "z_mean": z_mean,
                "z_var": z_var,
                "pass": bool(np.all(z_mean <= sigma) and np.all(z_var <= sigma)
                             and w1 <= factor * baselines[k]),
            })
        report["modes"][label] = {"times": rows, "diffusion_min": run.diffusion_min}
    if "pde" in runs and "self" in runs:
        report["pde_vs_self_w1"] = [
            {"t": a.t, "w1": wasserstein1_samples(a.positions, b.positions)}
            for a, b in zip(runs["pde"].ensembles[1:], runs["self"].ensembles[1:])
        ]
    return report


def cmd_simulate(cfg: RunConfig) -> int:
    _prepare(cfg)
    ops = OperatorBundle(cfg.problem.grid, cfg.problem.weight, cfg.problem.coefficients)
    traj = None
    if cfg.sde["mode"] in ("pde", "both"):
        lam0 = lambda_max_for(ops)
        if cfg.h >= lam0:
            raise _Exit(CONFIG_ERROR, f"time step h = {cfg.h:.6g} is not below lambda_0 = {lam0:.6g}")
        try:
            traj = evolve(ops, cfg.u0, cfg.T, cfg.steps, cfg.resolvent)
        except ResolventError as exc:
            raise _Exit(SOLVER_FAILURE, f"resolvent failed: {exc}") from exc
    runs = _particle_runs(cfg, ops, traj)
    _write_particles(cfg, runs)
    report = _marginal_report(cfg, runs, traj) if traj is not None else {
        "modes": {k: {"moments": [moments(e.positions) for e in r.ensembles]} for k, r in runs.items()}
    }
    write_json(cfg.out / "marginals.json", report)
    write_json(cfg.out / "scorecard.json", {"command": "simulate", "pass": True})
    write_json(cfg.out / "metadata.json", _metadata(cfg, "simulate"))
    return OK


def cmd_compare(cfg: RunConfig) -> int:
    src = cfg.raw["compare.trajectory_dir"]
    directory = Path(src) if src else None
    if directory is None or not (directory / "trajectory_u.csv").is_file():
        raise _Exit(CONFIG_ERROR, f"trajectory directory {src!r} is missing or has no trajectory_u.csv")
    meta_path = directory / "metadata.json"
    if meta_path.is_file():
        prior = json.loads(meta_path.read_text()).get("config", {})
        raw = dict(cfg.raw)
        raw.update({k: v for k, v in prior.items()
                    if not k.startswith(("sde.", "compare.", "output.", "validate."))})
        cfg = build(raw)
    _prepare(cfg)
    ops = OperatorBundle(cfg.problem.grid, cfg.problem.weight, cfg.problem.coefficients)
    traj = _load_trajectory(directory, cfg)
    runs = _particle_runs(cfg, ops, traj)
    _write_particles(cfg, runs)
    report = _marginal_report(cfg, runs, traj)
    passed = all(r["pass"] for m in report["modes"].values() for r in m["times"])
    write_json(cfg.out / "marginals.json", report)
    write_json(cfg.out / "scorecard.json", {"command": "compare", "pass": passed})
    write_json(cfg.out / "metadata.json", _metadata(cfg, "compare", {"trajectory_dir": str(directory)}))
    if not passed:
        raise _Exit(BREACH, "marginal comparison outside the configured tolerance")
    return OK


# ---------------------------------------------------------------------------
# validate


def cmd_validate(cfg: RunConfig) -> int:
    trials = int(cfg.raw["validate.trials"])
    if trials < 1:
        raise _Exit(CONFIG_ERROR, "validate.trials must be at least 1; nothing to validate")
    _prepare(cfg)
    upwind = boolean(cfg.raw["validate.upwind"])
    ops = OperatorBundle(cfg.problem.grid, cfg.problem.weight, cfg.problem.coefficients, upwind=upwind)
    try:
        checks = run_suite(ops, trials, int(cfg.raw["validate.seed"]), cfg.resolvent)
    except ResolventError as exc:
        raise _Exit(SOLVER_FAILURE, f"resolvent failed: {exc}") from exc
    failed = [c.name for c in checks if not c.passed]
    write_json(cfg.out / "scorecard.json", {
        "command": "validate",
        "pass": not failed,
        "upwind": upwind,
        "trials": trials,
        "checks": [c.as_dict() for c in checks],
    })
    write_json(cfg.out / "metadata.json", _metadata(cfg, "validate", {"lambda_0": lambda_max_for(ops)}))
    if failed:
        raise _Exit(BREACH, "failed properties: " + ", ".join(failed), {"failed": failed})
    return OK


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weightedfp", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="seed for particles and validation trials")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key; repeatable")
    p.add_argument("--version", action="version", version=__version__)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.override)
    if args.out:
        overrides.append(f"output.dir={args.out}")
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            print(json.dumps({"error": "seed must be an unsigned 64-bit integer"}), file=sys.stderr)
            return CONFIG_ERROR
        overrides += [f"sde.seed={args.seed}", f"validate.seed={args.seed}"]
    try:
        cfg = build(load(args.config, overrides))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(json.dumps({"exit": CONFIG_ERROR, "error": str(exc)}), file=sys.stderr)
        return CONFIG_ERROR
    except _Exit as exc:
        print(json.dumps(_jsonable({"exit": exc.code, "error": str(exc), **exc.payload})), file=sys.stderr)
        return exc.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
