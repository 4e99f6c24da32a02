"""Experiment runner.

    mcfd CONFIG OUTDIR

CONFIG is an INI file.  ``[run] preset`` selects one of the presets below; the
other sections override its defaults.  Unknown sections or keys, missing
mandatory keys and invalid values are rejected before any computation and
before OUTDIR is touched.  OUTDIR receives

* results.csv      preset-specific table (see README)
* diagnostics.csv  per-step solver diagnostics
* run.ini          every resolved key; ``mcfd OUTDIR/run.ini OTHER`` reruns
                   the experiment and reproduces results.csv bit for bit
* surface_*.csv    front points (mcf presets)

Failures print one JSON record on stderr and exit nonzero (2: invalid
configuration, 1: runtime failure).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .frontprop import extract_zero_level, finite_difference_value_grad, ray_seeds, two_disks_initial, write_surface
from .nonlinearity import check_domination, mcf_f
from .oracles import linear_exact, sphere_radius, zariphopoulou_value
from .regression import LocalBasisConfig
from .solver import (
    GridConfig,
    SolverConfig,
    TruncationConfig,
    backward_solve_grid,
    backward_solve_particles,
    estimate_rate,
)
from .testbeds import (
    constant_spec,
    heston_probes,
    heston_testbed,
    hjb5d_probes,
    hjb5d_testbed,
    linear_testbed,
    mcf_testbed,
)

log = logging.getLogger("mcfd")

REQUIRED = object()


class ConfigError(ValueError):
    """Schema violation detected before any computation."""


# -- value parsers --------------------------------------------------------------


def _int(s: str) -> int:
    return int(s)


def _pos_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _pos_float(s: str) -> float:
    v = _float(s)
    if v <= 0:
        raise ValueError("must be positive")
    return v


def _nonneg_float(s: str) -> float:
    v = _float(s)
    if v < 0:
        raise ValueError("must be nonnegative")
    return v


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("must be true or false")


def _scheme(s: str) -> int:
    v = int(s)
    if v not in (1, 2):
        raise ValueError("scheme must be 1 or 2")
    return v


def _list(item: Callable[[str], object]) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        return tuple(item(p) for p in parts)

    return parse


def _optional(item: Callable[[str], object]) -> Callable[[str], object]:
    def parse(s: str):
        return None if s.strip().lower() in ("", "none", "off") else item(s)

    return parse


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


# -- schemas ----------------------------------------------------------------------

Schema = dict[str, dict[str, tuple[Callable[[str], object], object]]]

_RUN = {
    "preset": (str, REQUIRED),
    "seed": (_int, 0),
    "seeds": (_pos_int, 1),
    "workers": (_pos_int, 1),
}

_PARTICLE_SOLVER = {
    "scheme": (_scheme, 2),
    "particles": (_pos_int, 100_000),
    "theta": (_nonneg_float, 0.0),
    "control_variate": (_bool, True),
    "truncation_c1": (_optional(_nonneg_float), None),
    "truncation_c2": (_optional(_nonneg_float), None),
}

PRESETS: dict[str, Schema] = {
    "linear_rate": {
        "run": _RUN,
        "model": {"c": (_nonneg_float, 0.25), "sigma": (_pos_float, 1.0), "T": (_pos_float, 1.0)},
        "solver": {"steps": (_list(_pos_int), (10, 20, 40, 80)), "scheme": (_scheme, 1),
                   "theta": (_nonneg_float, 0.0)},
        "grid": {"nodes": (_pos_int, 201), "lower": (_float, -8.0), "upper": (_float, 8.0),
                 "interp_order": (_pos_int, 3), "quad_order": (_pos_int, 8)},
    },
    "mcf_sphere": {
        "run": _RUN,
        "model": {"dim": (_pos_int, 3), "sigma": (_pos_float, 1.0), "R": (_pos_float, 0.5),
                  "cap": (_pos_float, 200.0)},
        "solver": {"steps": (_pos_int, 20), **_PARTICLE_SOLVER},
        "regression": {"cells": (_list(_pos_int), (10, 10, 10)), "tail_splits": (_int, 0)},
        "front": {"times": (_list(_pos_float), (0.1, 0.2)), "rays": (_pos_int, 64),
                  "tol": (_pos_float, 1e-3), "step": (_pos_float, 0.02)},
    },
    "mcf_two_disks": {
        "run": _RUN,
        "model": {"sigma": (_pos_float, 1.0), "T": (_pos_float, 0.25), "radius": (_pos_float, 1.0),
                  "centers": (_pos_float, 1.5), "stripe_width": (_pos_float, 1.0),
                  "box": (_list(_pos_float), (3.0, 1.6)), "cap": (_pos_float, 200.0)},
        "solver": {"steps": (_pos_int, 20), **_PARTICLE_SOLVER},
        "regression": {"cells": (_list(_pos_int), (10, 10)), "tail_splits": (_int, 0)},
        "front": {"times": (_list(_pos_float), (0.05, 0.1, 0.2)), "points": (_pos_int, 1024),
                  "tol": (_pos_float, 1e-3), "step": (_pos_float, 0.02)},
    },
    "heston2d": {
        "run": {**_RUN, "seeds": (_pos_int, 10)},
        "model": {"eta": (_pos_float, REQUIRED), "sigma": (_pos_float, 1.0), "mu": (_float, 0.15),
                  "c": (_nonneg_float, 0.2), "k": (_nonneg_float, 0.1), "m": (_pos_float, 0.3),
                  "rho": (_float, 0.0), "x0": (_float, 1.0), "y0": (_optional(_pos_float), None),
                  "T": (_pos_float, 1.0), "eps": (_pos_float, 1e-4), "M": (_pos_float, 40.0),
                  "dominate": (_bool, True)},
        "solver": {**_PARTICLE_SOLVER, "steps": (_list(_pos_int), (20,)), "particles": (_pos_int, 200_000)},
        "regression": {"cells": (_list(_pos_int), (40, 10)), "tail_splits": (_int, 0)},
        "reference": {"n_mc": (_pos_int, 100_000), "n_steps": (_pos_int, 200), "seed": (_int, 0)},
    },
    "hjb5d": {
        "run": _RUN,
        "model": {"eta": (_pos_float, REQUIRED), "kappa": (_nonneg_float, REQUIRED), "sigma": (_pos_float, 1.0),
                  "b": (_float, 0.07), "zeta": (_pos_float, 0.3), "mu1": (_float, 0.10),
                  "sigma1": (_pos_float, 0.3), "beta1": (_float, 0.5), "k1": (_nonneg_float, 0.1),
                  "m1": (_pos_float, 1.0), "c1": (_nonneg_float, 0.1), "mu2": (_float, 0.15),
                  "sigma2": (_pos_float, 1.0), "k2": (_nonneg_float, 0.1), "m2": (_pos_float, 0.3),
                  "c2": (_nonneg_float, 0.2), "T": (_pos_float, 1.0), "eps": (_pos_float, 1e-4),
                  "M": (_pos_float, 40.0), "dominate": (_bool, True)},
        "solver": {**_PARTICLE_SOLVER, "steps": (_pos_int, 10), "truncation_c1": (_optional(_nonneg_float), 0.0),
                   "truncation_c2": (_optional(_nonneg_float), 0.0)},
        "regression": {"cells": (_list(_pos_int), (4, 2, 2, 2, 2)), "tail_splits": (_int, 0)},
    },
}

#: informational section written to run.ini and ignored when read back
PROVENANCE = "provenance"


def load_config(path: str | Path) -> dict[str, dict[str, object]]:
    """Parse and validate; returns every section with defaults filled in."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case sensitive (T, M, R)
    try:
        with Path(path).open() as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if not parser.has_option("run", "preset"):
        raise ConfigError("missing [run] preset")
    preset = parser.get("run", "preset").strip()
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    schema = PRESETS[preset]
    for section in parser.sections():
        if section == PROVENANCE:
            continue
        if section not in schema:
            raise ConfigError(f"unknown section [{section}] for preset {preset}")
        for key in parser.options(section):
            if key not in schema[section]:
                raise ConfigError(f"unknown key {section}.{key} for preset {preset}")
    out: dict[str, dict[str, object]] = {}
    for section, keys in schema.items():
        out[section] = {}
        for key, (parse, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    out[section][key] = parse(raw) if key != "preset" else raw.strip()
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid {section}.{key} = {raw!r}: {exc}") from exc
            elif default is REQUIRED:
                raise ConfigError(f"missing mandatory key {section}.{key}")
            else:
                out[section][key] = default
    _cross_check(preset, out)
    return out


def _cross_check(preset: str, cfg: dict) -> None:
    solver = cfg.get("solver", {})
    c1, c2 = solver.get("truncation_c1"), solver.get("truncation_c2")
    if (c1 is None) != (c2 is None):
        raise ConfigError("truncation_c1 and truncation_c2 must be set together")
    dims = {"mcf_sphere": cfg["model"].get("dim"), "mcf_two_disks": 2, "heston2d": 2, "hjb5d": 5}
    if preset in dims and len(cfg["regression"]["cells"]) != dims[preset]:
        raise ConfigError(f"regression.cells needs {dims[preset]} entries")
    if preset == "linear_rate" and cfg["grid"]["lower"] >= cfg["grid"]["upper"]:
        raise ConfigError("grid.lower must be below grid.upper")
    if preset in ("mcf_sphere", "mcf_two_disks"):
        T = cfg["model"]["R"] ** 2 if preset == "mcf_sphere" else cfg["model"]["T"]
        for t in cfg["front"]["times"]:
            if not 0 < t < T:
                raise ConfigError(f"front time {t} outside (0, {T})")
    if preset == "mcf_sphere" and cfg["model"]["dim"] not in (2, 3):
        raise ConfigError("mcf_sphere supports dim 2 or 3")


def write_config(cfg: dict, path: Path, provenance: dict | None = None) -> None:
    lines = []
    for section, keys in cfg.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in keys.items()]
        lines.append("")
    if provenance:
        lines.append(f"[{PROVENANCE}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in provenance.items()]
        lines.append("")
    path.write_text("\n".join(lines))


def child_seeds(seed: int, count: int) -> list[int]:
    """Deterministic, well-separated child seeds of one top-level seed."""
    kids = np.random.SeedSequence(seed).spawn(count)
    return [int(k.generate_state(1, np.uint32)[0]) for k in kids]


# -- outputs ----------------------------------------------------------------------


@dataclass
class RunOutput:
    header: list[str]
    rows: list[list]
    diagnostics: list[dict]
    surfaces: dict[str, tuple[float, np.ndarray]]
    info: dict


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def _diag_rows(tag: dict, diags: list[dict]) -> list[dict]:
    return [{**tag, **d} for d in diags]


def _truncation(solver: dict):
    if solver.get("truncation_c1") is None:
        return None
    return TruncationConfig(solver["truncation_c1"], solver["truncation_c2"])


def _particle_cfg(solver: dict, T: float, steps: int, seed: int) -> SolverConfig:
    return SolverConfig(h=T / steps, T=T, scheme=solver["scheme"], backend="particles",
                        truncation=_truncation(solver), theta=solver["theta"],
                        n_particles=solver["particles"], seed=seed,
                        control_variate=solver["control_variate"])


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# -- presets ----------------------------------------------------------------------


def _linear_job(job):
    cfg, steps = job
    m, s, g = cfg["model"], cfg["solver"], cfg["grid"]
    tb = linear_testbed(m["c"], m["sigma"], m["T"])
    grid = GridConfig((g["nodes"],), (g["lower"],), (g["upper"],), g["interp_order"], g["quad_order"])
    sc = SolverConfig(h=m["T"] / steps, T=m["T"], scheme=s["scheme"], backend="grid", grid=grid,
                      theta=s["theta"])
    est = backward_solve_grid(sc, tb.F, tb.spec, tb.g, tb.grad_g)
    v = float(est.value(0, np.zeros((1, 1)))[0])
    return steps, v, int(est.warnings.get("clamped_queries", 0))


def run_linear_rate(cfg: dict) -> RunOutput:
    m = cfg["model"]
    results = _map(_linear_job, [(cfg, n) for n in cfg["solver"]["steps"]], cfg["run"]["workers"])
    # total variance rate sigma^2 + 2c, written as 1 + 2c' for the unit-diffusion reference
    c_ref = 0.5 * (m["sigma"] ** 2 - 1.0) + m["c"]
    if c_ref < 0:
        raise ValueError("reference solution needs sigma^2 + 2c >= 1")
    exact = linear_exact(linear_testbed(m["c"], m["sigma"], m["T"]).g, c_ref, 0.0, 0.0, m["T"])
    rows, hs, errs, diags = [], [], [], []
    for steps, v, clamped in results:
        h = m["T"] / steps
        err = abs(v - exact)
        rows.append([h, v, exact, err])
        hs.append(h)
        errs.append(err)
        diags.append({"steps": steps, "h": h, "clamped_queries": clamped})
    slope = estimate_rate(hs, errs) if len(hs) > 1 else float("nan")
    rows.append(["slope", slope, None, None])
    return RunOutput(["h", "v_hat", "v_exact", "abs_err"], rows, diags, {}, {"slope": slope})


def _sphere_job(job):
    cfg, run, seed = job
    m, s, fr = cfg["model"], cfg["solver"], cfg["front"]
    tb = mcf_testbed(m["dim"], m["sigma"], m["R"], m["cap"])
    sc = _particle_cfg(s, tb.T, s["steps"], seed)
    reg = LocalBasisConfig(tuple(cfg["regression"]["cells"]), tail_splits=cfg["regression"]["tail_splits"])
    res = backward_solve_particles(sc, tb.F, tb.spec, tb.g, reg, tb.x0, grad_g=tb.grad_g)
    rows, surfaces = [], {}
    for t in fr["times"]:
        i = int(round((tb.T - t) / sc.h))
        exact = sphere_radius(t, m["R"])
        ev = _layer_eval(res.estimate, i)
        lvl = extract_zero_level(ev, ray_seeds(np.zeros(m["dim"]), 0.5 * exact, fr["rays"]), tol=fr["tol"],
                                 step=fr["step"])
        rad = lvl.radii()
        mean = float(rad.mean()) if rad.size else float("nan")
        rows.append([run, seed, t, i, mean, float(rad.std()) if rad.size else float("nan"), exact,
                     abs(mean - exact) / exact, len(lvl.unresolved)])
        surfaces[f"surface_run{run}_t{t:g}.csv"] = (t, lvl.points)
    return rows, _diag_rows({"run": run, "seed": seed}, res.diagnostics), surfaces


def _layer_eval(estimate, i):
    def ev(x):
        return estimate.value(i, x), estimate.gradient(i, x)

    return ev


def run_mcf_sphere(cfg: dict) -> RunOutput:
    seeds = child_seeds(cfg["run"]["seed"], cfg["run"]["seeds"])
    out = _map(_sphere_job, [(cfg, k, s) for k, s in enumerate(seeds)], cfg["run"]["workers"])
    rows = [r for o in out for r in o[0]]
    diags = [d for o in out for d in o[1]]
    surfaces = {k: v for o in out for k, v in o[2].items()}
    header = ["run", "seed", "t", "layer", "radius_mean", "radius_std", "radius_exact", "rel_err", "unresolved"]
    return RunOutput(header, rows, diags, surfaces, {"child_seeds": tuple(seeds)})


def _disks_job(job):
    cfg, run, seed = job
    m, s, fr = cfg["model"], cfg["solver"], cfg["front"]
    g = two_disks_initial(m["radius"], m["centers"], m["stripe_width"])
    spec = constant_spec(2, m["sigma"], name="mcf")
    F = mcf_f(m["sigma"], cap=m["cap"])
    sc = _particle_cfg(s, m["T"], s["steps"], seed)
    # start points spread over the box so that every layer covers the front
    rng = np.random.default_rng(seed)
    bx, by = m["box"]
    x0 = np.column_stack([rng.uniform(-bx, bx, sc.n_particles), rng.uniform(-by, by, sc.n_particles)])
    reg = LocalBasisConfig(tuple(cfg["regression"]["cells"]), tail_splits=cfg["regression"]["tail_splits"])
    res = backward_solve_particles(sc, F, spec, g, reg, x0)
    half = fr["points"] // 2
    c = m["centers"]
    seeds0 = np.vstack([ray_seeds((-c, 0.0), 0.5 * m["radius"], half),
                        ray_seeds((c, 0.0), 0.5 * m["radius"], fr["points"] - half)])
    initial = extract_zero_level(finite_difference_value_grad(g), seeds0, tol=fr["tol"], step=fr["step"])
    rows, surfaces = [[run, seed, 0.0, s["steps"], len(initial.points), len(initial.unresolved),
                       _extent(initial.points)]], {f"surface_run{run}_t0.csv": (0.0, initial.points)}
    for t in fr["times"]:
        i = int(round((m["T"] - t) / sc.h))
        lvl = extract_zero_level(_layer_eval(res.estimate, i), initial.points, tol=fr["tol"], step=fr["step"])
        rows.append([run, seed, t, i, len(lvl.points), len(lvl.unresolved), _extent(lvl.points)])
        surfaces[f"surface_run{run}_t{t:g}.csv"] = (t, lvl.points)
    return rows, _diag_rows({"run": run, "seed": seed}, res.diagnostics), surfaces


def _extent(points: np.ndarray) -> float:
    return float(np.max(np.abs(points[:, 0]))) if len(points) else float("nan")


def run_mcf_two_disks(cfg: dict) -> RunOutput:
    seeds = child_seeds(cfg["run"]["seed"], cfg["run"]["seeds"])
    out = _map(_disks_job, [(cfg, k, s) for k, s in enumerate(seeds)], cfg["run"]["workers"])
    rows = [r for o in out for r in o[0]]
    diags = [d for o in out for d in o[1]]
    surfaces = {k: v for o in out for k, v in o[2].items()}
    header = ["run", "seed", "t", "layer", "points", "unresolved", "max_abs_x"]
    return RunOutput(header, rows, diags, surfaces, {"child_seeds": tuple(seeds)})


def _heston_tb(m: dict):
    return heston_testbed(sigma=m["sigma"], mu=m["mu"], c=m["c"], k=m["k"], m=m["m"], rho=m["rho"], eta=m["eta"],
                          x0=m["x0"], y0=m["y0"], T=m["T"], eps=m["eps"], M=m["M"], dominate=m["dominate"])


def _heston_job(job):
    cfg, steps, run, seed = job
    m, s = cfg["model"], cfg["solver"]
    tb = _heston_tb(m)
    sc = _particle_cfg(s, m["T"], steps, seed)
    reg = LocalBasisConfig(tuple(cfg["regression"]["cells"]), tail_splits=cfg["regression"]["tail_splits"])
    try:
        res = backward_solve_particles(sc, tb.F, tb.spec, tb.g, reg, tb.x0, grad_g=tb.grad_g)
    except FloatingPointError as exc:
        log.warning("heston run %d (steps=%d) diverged: %s", run, steps, exc)
        return steps, run, seed, float("nan"), []
    return steps, run, seed, res.value, _diag_rows({"steps": steps, "run": run, "seed": seed}, res.diagnostics)


def run_heston2d(cfg: dict) -> RunOutput:
    m, s = cfg["model"], cfg["solver"]
    seeds = child_seeds(cfg["run"]["seed"], cfg["run"]["seeds"])
    jobs = [(cfg, n, k, sd) for n in s["steps"] for k, sd in enumerate(seeds)]
    out = _map(_heston_job, jobs, cfg["run"]["workers"])
    rf = cfg["reference"]
    y0 = m["m"] if m["y0"] is None else m["y0"]
    ref = zariphopoulou_value(m["mu"], m["c"], m["k"], m["m"], m["rho"], m["eta"], m["x0"], y0, 0.0, m["T"],
                              n_steps=rf["n_steps"], n_mc=rf["n_mc"], seed=rf["seed"]).value
    rows, diags = [], []
    for steps in s["steps"]:
        vals = []
        for st, run, seed, v, dg in out:
            if st != steps:
                continue
            rows.append(["run", steps, m["T"] / steps, run, seed, v, ref, abs(v - ref)])
            vals.append(v)
            diags += dg
        arr = np.asarray(vals)
        mean = float(arr.mean())
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append(["mean", steps, m["T"] / steps, None, None, mean, ref, abs(mean - ref)])
        rows.append(["std", steps, m["T"] / steps, None, None, std, None, None])
    tb = _heston_tb(m)
    report = check_domination(tb.F, tb.spec, heston_probes(m["eta"], m["x0"]))
    header = ["row", "steps", "h", "run", "seed", "v_hat", "reference", "abs_err"]
    return RunOutput(header, rows, diags, {}, {"child_seeds": tuple(seeds), "reference": ref,
                                                "dominated": report.dominated,
                                                "worst_domination_violation": report.worst_violation})


def _hjb5d_tb(m: dict):
    keys = ("sigma", "b", "zeta", "mu1", "sigma1", "beta1", "k1", "m1", "c1", "mu2", "sigma2", "k2", "m2", "c2",
            "eta", "T", "eps", "M", "dominate")
    return hjb5d_testbed(m["kappa"], **{k: m[k] for k in keys})


def _hjb5d_job(job):
    cfg, run, seed = job
    m, s = cfg["model"], cfg["solver"]
    tb = _hjb5d_tb(m)
    sc = _particle_cfg(s, m["T"], s["steps"], seed)
    reg = LocalBasisConfig(tuple(cfg["regression"]["cells"]), tail_splits=cfg["regression"]["tail_splits"])
    res = backward_solve_particles(sc, tb.F, tb.spec, tb.g, reg, tb.x0, grad_g=tb.grad_g)
    truncated = sum(d["truncated"] for d in res.diagnostics)
    return run, seed, res.value, truncated, _diag_rows({"run": run, "seed": seed}, res.diagnostics)


def run_hjb5d(cfg: dict) -> RunOutput:
    m = cfg["model"]
    seeds = child_seeds(cfg["run"]["seed"], cfg["run"]["seeds"])
    out = _map(_hjb5d_job, [(cfg, k, s) for k, s in enumerate(seeds)], cfg["run"]["workers"])
    rows = [["run", run, seed, v, tr] for run, seed, v, tr, _ in out]
    diags = [d for o in out for d in o[4]]
    vals = np.array([o[2] for o in out])
    rows.append(["mean", None, None, float(vals.mean()), None])
    rows.append(["std", None, None, float(vals.std(ddof=1)) if len(vals) > 1 else 0.0, None])
    tb = _hjb5d_tb(m)
    report = check_domination(tb.F, tb.spec, hjb5d_probes(m["eta"], 1.0, m["b"]))
    return RunOutput(["row", "run", "seed", "v_hat", "truncated"], rows, diags, {},
                     {"child_seeds": tuple(seeds), "dominated": report.dominated})


RUNNERS: dict[str, Callable[[dict], RunOutput]] = {
    "linear_rate": run_linear_rate,
    "mcf_sphere": run_mcf_sphere,
    "mcf_two_disks": run_mcf_two_disks,
    "heston2d": run_heston2d,
    "hjb5d": run_hjb5d,
}


def run(config_path: str | Path, outdir: str | Path) -> RunOutput:
    """Validate, execute and write all outputs; raises ConfigError early."""
    cfg = load_config(config_path)
    preset = cfg["run"]["preset"]
    t0 = time.perf_counter()
    result = RUNNERS[preset](cfg)
    elapsed = time.perf_counter() - t0
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "results.csv", result.header, result.rows)
    if result.diagnostics:
        keys = list(dict.fromkeys(k for d in result.diagnostics for k in d))
        _write_csv(out / "diagnostics.csv", keys, [[d.get(k) for k in keys] for d in result.diagnostics])
    else:
        _write_csv(out / "diagnostics.csv", ["note"], [])
    for name, (t, pts) in result.surfaces.items():
        write_surface(out / name, t, pts)
    write_config(cfg, out / "run.ini", {"version": __version__, **result.info})
    log.info("%s finished in %.1f s", preset, elapsed)
    return result


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="mcfd", description="Monte Carlo / finite-difference experiment runner")
    ap.add_argument("config", help="INI configuration file")
    ap.add_argument("outdir", help="output directory")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args.config, args.outdir)
    except ConfigError as exc:
        print(json.dumps({"status": "error", "kind": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable record
        print(json.dumps({"status": "error", "kind": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
