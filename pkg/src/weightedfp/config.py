"""Flat ``section.key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    Potential,
    ProblemSpec,
    build_problem,
    make_coefficients,
    mass_rho,
    normalize_probability,
)
from .resolvent import ResolventConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "experiment.name": "run",
    "potential.kind": "quadratic",
    "potential.params": "1.0",
    "domain.dim": "1",
    "domain.radius": "auto",
    "domain.cells": "256",
    "beta.kind": "linear",
    "beta.params": "0.5",
    "b.kind": "zero",
    "b.params": "",
    "D.kind": "zero",
    "D.params": "",
    "initial.kind": "gaussian",
    "initial.params": "1.0, 0.04",
    "numerics.T": "1.0",
    "numerics.steps": "128",
    "numerics.tol": "1e-10",
    "numerics.eps0": "0.1",
    "numerics.eps_ratio": "0.25",
    "numerics.eps_floor": "1e-6",
    "numerics.max_newton": "100",
    "numerics.continuation": "true",
    "sde.N": "100000",
    "sde.dt": "auto",
    "sde.seed": "0",
    "sde.bandwidth": "silverman",
    "sde.mode": "pde",
    "sde.times": "0.25, 0.5, 1.0",
    "sde.thin": "10",
    "compare.trajectory_dir": "",
    "compare.sigma": "3.0",
    "compare.w1_factor": "3.0",
    "validate.trials": "20",
    "validate.seed": "0",
    "validate.upwind": "true",
    "output.dir": "out",
    "output.resolvent_log": "false",
}


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} needs a section prefix")
        out[key] = value
    return out


def load(path: str | Path | None, overrides=()) -> dict[str, str]:
    raw = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        raw.update(parse_text(p.read_text()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        raw[k] = v
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError("unknown configuration keys: " + ", ".join(unknown))
    return raw


def floats(s: str) -> tuple[float, ...]:
    s = s.strip()
    return tuple(float(x) for x in s.split(",") if x.strip()) if s else ()


def boolean(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    raw: dict
    problem: ProblemSpec
    resolvent: ResolventConfig
    T: float
    steps: int
    u0: np.ndarray
    out: Path
    sde: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return self.T / self.steps


def build(raw: dict[str, str]) -> RunConfig:
    try:
        d = int(raw["domain.dim"])
        pot = Potential(raw["potential.kind"], floats(raw["potential.params"]), d)
        coeffs = make_coefficients(
            pot,
            raw["beta.kind"],
            floats(raw["beta.params"]),
            raw["b.kind"],
            floats(raw["b.params"]),
            raw["D.kind"],
            floats(raw["D.params"]),
        )
        R = None if raw["domain.radius"] == "auto" else float(raw["domain.radius"])
        problem = build_problem(pot, coeffs, int(raw["domain.cells"]), R)
        resolvent = ResolventConfig(
            eps0=float(raw["numerics.eps0"]),
            eps_ratio=float(raw["numerics.eps_ratio"]),
            eps_floor=float(raw["numerics.eps_floor"]),
            tol=float(raw["numerics.tol"]),
            max_newton=int(raw["numerics.max_newton"]),
            continuation=boolean(raw["numerics.continuation"]),
        )
        T = float(raw["numerics.T"])
        steps = int(raw["numerics.steps"])
        u0 = initial_field(problem, raw["initial.kind"], floats(raw["initial.params"]))
        sde = {
            "N": int(float(raw["sde.N"])),
            "dt": None if raw["sde.dt"] == "auto" else float(raw["sde.dt"]),
            "seed": int(raw["sde.seed"]),
            "bandwidth": None if raw["sde.bandwidth"] == "silverman" else float(raw["sde.bandwidth"]),
            "mode": raw["sde.mode"],
            "times": floats(raw["sde.times"]),
            "thin": int(raw["sde.thin"]),
        }
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if T <= 0 or steps < 1:
        raise ConfigError("numerics.T must be positive and numerics.steps >= 1")
    if sde["mode"] not in ("pde", "self", "both"):
        raise ConfigError(f"sde.mode must be pde, self or both, got {sde['mode']!r}")
    return RunConfig(raw, problem, resolvent, T, steps, u0, Path(raw["output.dir"]), sde)


def initial_field(problem: ProblemSpec, kind: str, params) -> np.ndarray:
    """Initial ``u0`` with unit rho-mass.

    ``gaussian``    Lebesgue density ``N(mean, var I)``, params ``(mean..., var)``
    ``stationary``  ``u0 = 1 / Z``
    ``bump``        ``max(0, 1 - |x - c|^2 / r^2)``, params ``(c..., r)``
    """
    g, w = problem.grid, problem.weight
    pts = g.cell_points()
    if kind == "stationary":
        return np.full(g.shape, 1.0 / w.Z)
    if len(params) != g.d + 1:
        raise ConfigError(f"initial.params for {kind!r} needs {g.d + 1} numbers")
    c = np.asarray(params[: g.d])
    if kind == "gaussian":
        var = params[-1]
        v = np.exp(-np.sum((pts - c) ** 2, axis=-1) / (2 * var)) / (2 * np.pi * var) ** (g.d / 2)
        u = v / w.cells
    elif kind == "bump":
        r = params[-1]
        u = np.clip(1.0 - np.sum((pts - c) ** 2, axis=-1) / r**2, 0.0, None)
    else:
        raise ConfigError(f"unknown initial.kind {kind!r}")
    if mass_rho(u, g, w) <= 0:
        raise ConfigError("initial field has no mass on the grid")
    return normalize_probability(u, g, w)
