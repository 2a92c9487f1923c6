"""Batch experiment driver.

    python3 -m eqselect {analyze,solve,simulate,sweep,riccati} --config cfg.json [--out DIR]
        [--seed N] [--deterministic] [--jobs N]
    python3 -m eqselect schema

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import jsonschema
import numpy as np

from . import bench, dynamics, hjb, matctrl, simulate, svg
from .errors import ConfigError, DomainError, NumericFailure

MODES = ("analyze", "solve", "simulate", "sweep", "riccati")

_num_list = {"type": "array", "items": {"type": "number"}, "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "eqselect experiment configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": list(MODES)},
        "system": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "builtin": {"enum": list(bench.PROBLEM_NAMES)},
                "params": {"type": "object", "additionalProperties": {"type": "number"}},
                "polynomial": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["drift", "penalty", "box"],
                    "properties": {
                        "drift": _num_list,
                        "penalty": _num_list,
                        "box": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                        "taper": {"type": "boolean"},
                    },
                },
                "name": {"type": "string"},
            },
            "oneOf": [{"required": ["builtin"]}, {"required": ["polynomial"]}],
        },
        "epsilons": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                     "minItems": 1},
        "nus": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_min": {"type": "integer", "minimum": 64},
                "n_max": {"type": "integer", "minimum": 64},
                "cells_per_scale": {"type": "number", "exclusiveMinimum": 0},
                "box": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "scheme": {"enum": list(hjb.SCHEMES)},
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": {"type": "number", "exclusiveMinimum": 0},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "burn_in": {"type": "number", "minimum": 0},
                "replicas": {"type": "integer", "minimum": 1},
                "x0": {"type": "number"},
                "thin": {"type": "integer", "minimum": 1},
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "control": {"enum": ["zero", "hjb_feedback", "barv", "tube", "gradient_shaping"]},
                "z": {"type": "number"},
                "trace": {"type": "boolean"},
            },
        },
        "matrix": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}, "minItems": 1},
        "kappa": {"type": "number", "exclusiveMinimum": 0},
        "theta_margin": {"type": "number", "exclusiveMinimum": 0},
        "output": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}

# what each experiment checks, recorded in the manifest
TARGETS = {
    "analyze": ["equilibrium classification and unstable traces",
                "selection sets and predicted stochastically stable set per regime",
                "local quadratic energy functions"],
    "solve": ["ergodic HJB optimal value and value function via the log transform",
              "optimal feedback and exact closed-loop stationary density"],
    "simulate": ["Monte Carlo stationary statistics: ergodic cost, control effort, masses"],
    "sweep": ["optimal value asymptotics per regime",
              "control effort scaling", "second-moment concentration scaling",
              "Gaussian limit of the scaled stationary law"],
    "riccati": ["degenerate Riccati pair and Lyapunov covariance",
                "minimal stationary stabilisation effort equals the unstable trace"],
}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {loc}: {exc.message}") from exc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def build_system(spec: dict) -> dynamics.VectorFieldSystem:
    if spec is None:
        raise ConfigError("config needs a 'system' entry for this mode")
    try:
        if "builtin" in spec:
            return bench.get_problem(spec["builtin"], **spec.get("params", {})).system
        poly = spec["polynomial"]
        return bench.polynomial_system(poly["drift"], poly["penalty"], tuple(poly["box"]),
                                       name=spec.get("name", "polynomial"), taper=poly.get("taper", False))
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc


def _tag(e: float, nu: float) -> str:
    return f"eps{e:g}_nu{nu:g}"


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return v


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else repr(f)
    if isinstance(o, np.integer):
        return int(o)
    return o


class Run:
    """Collects artifacts and warnings for the manifest."""

    def __init__(self, mode, cfg, out, seed, deterministic, jobs):
        self.mode, self.cfg, self.out, self.seed = mode, cfg, out, seed
        self.deterministic, self.jobs = deterministic, jobs
        self.files: list[str] = []
        self.warnings: list[str] = []
        os.makedirs(out, exist_ok=True)

    def path(self, name) -> str:
        self.files.append(name)
        return os.path.join(self.out, name)

    @property
    def provenance(self) -> dict:
        return {"config_hash": config_hash(self.cfg), "seed": self.seed}

    def write_json(self, name, obj) -> None:
        if isinstance(obj, dict):
            obj = {**obj, **self.provenance}
        else:
            obj = {"rows": obj, **self.provenance}
        _write_json(self.path(name), obj)

    def manifest(self, status="ok") -> None:
        _write_json(os.path.join(self.out, "manifest.json"), {
            "mode": self.mode, "config_hash": config_hash(self.cfg), "seed": self.seed,
            "status": status, "targets": TARGETS[self.mode], "files": sorted(self.files),
            "warnings": self.warnings, "config": self.cfg,
        })


def _equilibria(sys_):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        eqs = dynamics.find_equilibria(sys_)
    return eqs, [str(w.message) for w in caught]


def _zval(e):
    return float(e.z[0]) if e.dim == 1 else e.z.tolist()


def cmd_analyze(run: Run, sys_) -> None:
    eqs, msgs = _equilibria(sys_)
    run.warnings += msgs + sys_.check()
    rows = []
    for e in eqs:
        rows.append([_zval(e), e.classification, e.index, float(e.penalty_at), float(e.unstable_trace),
                     json.dumps(e.jacobian.tolist())])
    _write_csv(run.path("equilibria.csv"), ["z", "classification", "index", "penalty", "unstable_trace",
                                            "jacobian"], rows)
    reports = [dynamics.regime_report(eqs, nu) for nu in run.cfg.get("nus", [0.5, 1.0, 2.0])]
    run.write_json("regimes.json", [r.as_dict() for r in reports])
    _write_csv(run.path("regimes.csv"), ["nu", "regime", "predicted_S", "beta_limit", "J", "Js", "Jc", "Jtilde"],
               [[r.nu, r.regime, json.dumps(r.as_dict()["predicted_S"]), r.beta_limit, r.J, r.Js, r.Jc, r.Jtilde]
                for r in reports])
    forms = []
    for e in eqs:
        f = dynamics.local_energy_form(e, run.cfg.get("theta_margin", 0.1), sys=sys_, others=eqs)
        rep = f.descent
        forms.append({"z": _zval(e), "theta": f.theta, "quadratic_form": f.quadratic_form,
                      "laplacian_at_center": f.laplacian_at_center, "lyapunov_residuals": f.lyapunov_residuals,
                      "descent": {"radius": rep.radius, "violations": rep.violations, "c0": rep.c0,
                                  "min": rep.min_value, "max": rep.max_value,
                                  "linear_band_ok": rep.linear_band_ok}})
    run.write_json("energy_forms.json", forms)


def _policy(cfg) -> tuple[hjb.GridPolicy, str]:
    g = dict(cfg.get("grid", {}))
    scheme = g.pop("scheme", "auto")
    if "box" in g:
        g["box"] = tuple(g["box"])
    return hjb.GridPolicy(**g), scheme


def _eps_nu(cfg):
    if "epsilons" not in cfg or "nus" not in cfg:
        raise ConfigError("this mode needs 'epsilons' and 'nus'")
    return [float(e) for e in cfg["epsilons"]], [float(n) for n in cfg["nus"]]


def cmd_solve(run: Run, sys_) -> None:
    eps, nus = _eps_nu(run.cfg)
    policy, scheme = _policy(run.cfg)
    eqs, msgs = _equilibria(sys_)
    run.warnings += msgs
    pts = [float(e.z[0]) for e in eqs]
    tasks = [(e, nu) for nu in nus for e in eps]

    def one(t):
        e, nu = t
        sol = hjb.solve_ergodic_hjb(sys_, e, nu, policy.make(sys_, e, nu, eqs), scheme)
        return sol, hjb.closed_loop_density(sol, sys_, pts)

    results = _pool(run, one, tasks)
    for (e, nu), (sol, dens) in zip(tasks, results):
        tag = _tag(e, nu)
        hjb.export_solution(sol, sys_, run.path(f"solution_{tag}.csv"), run.path(f"solution_{tag}.json"), dens,
                            extra=run.provenance)


def _pool(run, fn, tasks):
    if run.jobs <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=run.jobs) as ex:
        return list(ex.map(fn, tasks))


def _control(sys_, kind, e, nu, eqs, policy, scheme, z):
    def pick(stable_only=False):
        cands = [q for q in eqs if q.is_stable] if stable_only else list(eqs)
        if z is None:
            if not cands:
                raise ConfigError("no suitable equilibrium for this control")
            return cands[0]
        best = min(cands, key=lambda q: abs(float(q.z[0]) - z))
        if abs(float(best.z[0]) - z) > 1e-6:
            raise ConfigError(f"no {'stable ' if stable_only else ''}equilibrium at z={z}")
        return best

    if kind == "zero":
        return simulate.zero_control()
    if kind == "hjb_feedback":
        return simulate.hjb_feedback(hjb.solve_ergodic_hjb(sys_, e, nu, policy.make(sys_, e, nu, eqs), scheme))
    if kind == "barv":
        return simulate.barv_control(sys_, pick(), e)
    if kind == "tube":
        return simulate.tube_control(sys_, pick(True), e, nu)
    return simulate.gradient_shaping_control(sys_, e, eq=pick(True))


def cmd_simulate(run: Run, sys_) -> None:
    eps, nus = _eps_nu(run.cfg)
    policy, scheme = _policy(run.cfg)
    sim = dict(run.cfg.get("sim", {}))
    kind = sim.pop("control", "hjb_feedback")
    z = sim.pop("z", None)
    trace = sim.pop("trace", False)
    eqs, msgs = _equilibria(sys_)
    run.warnings += msgs
    tasks = [(e, nu) for nu in nus for e in eps]

    def one(t):
        e, nu = t
        cfg = simulate.SimConfig(epsilon=e, nu=nu, seed=run.seed, **sim)
        ctl = _control(sys_, kind, e, nu, eqs, policy, scheme, z)
        tp = os.path.join(run.out, f"trace_{_tag(e, nu)}.bin") if trace else None
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            est = simulate.integrate(sys_, ctl, cfg, eqs, trace_path=tp)
        return est, [f"{_tag(e, nu)}: {w.message}" for w in caught]

    for (e, nu), (est, msgs) in zip(tasks, _pool(run, one, tasks)):
        run.warnings += msgs
        run.write_json(f"estimate_{_tag(e, nu)}.json", est.as_dict())
        if trace:
            run.files.append(f"trace_{_tag(e, nu)}.bin")


def _reference_slope(rep: dynamics.RegimeReport) -> float | None:
    # order of |beta - limit| in eps, upper-bound side
    if rep.regime == dynamics.SUPERCRITICAL:
        return 2 * rep.nu - 2 if rep.Jtilde > 0 else 2 * rep.nu
    if rep.regime == dynamics.CRITICAL:
        return 2.0
    return rep.nu


def cmd_sweep(run: Run, sys_) -> None:
    eps, nus = _eps_nu(run.cfg)
    eps = sorted(eps, reverse=True)
    policy, scheme = _policy(run.cfg)
    eqs, msgs = _equilibria(sys_)
    run.warnings += msgs
    pts = [float(e.z[0]) for e in eqs]
    tasks = [(e, nu) for nu in nus for e in eps]

    def one(t):
        e, nu = t
        try:
            sol = hjb.solve_ergodic_hjb(sys_, e, nu, policy.make(sys_, e, nu, eqs), scheme)
            dens = hjb.closed_loop_density(sol, sys_, pts)
            x = sol.grid.x
            dist2 = np.min((x[:, None] - np.asarray(pts)[None]) ** 2, axis=1)
            return sol, dens, dens.expect(dist2), None
        except (NumericFailure, DomainError) as exc:
            return None, None, float("nan"), f"{type(exc).__name__}: {exc}"

    results = dict(zip(tasks, _pool(run, one, tasks)))
    curves, slopes, density_series = [], [], []
    for nu in nus:
        rep = dynamics.regime_report(eqs, nu)
        rows = []
        for e in eps:
            sol, dens, d2, err = results[(e, nu)]
            if err:
                run.warnings.append(f"{_tag(e, nu)}: {err}")
                rows.append([e, float("nan"), float("nan"), float("nan"), float("nan"), float("nan"), 0]
                            + [float("nan")] * len(pts) + [err])
                continue
            rows.append([e, sol.beta, hjb.control_effort(sol, dens), hjb.mean_penalty(sol, dens, sys_), d2,
                         sol.residual_sup, sol.grid.n] + [dens.mass_near[p] for p in pts] + [""])
        _write_csv(run.path(f"beta_curve_nu{nu:g}.csv"),
                   ["epsilon", "beta", "effort", "mean_penalty", "dist2", "residual", "n"]
                   + [f"mass_{p:g}" for p in pts] + ["error"], rows)
        arr = np.array([[r[0], r[1], r[2], r[4]] for r in rows], dtype=float)
        ok = np.all(np.isfinite(arr), axis=1)
        gap = np.abs(arr[:, 1] - rep.beta_limit)
        fits = {"beta_gap": (gap, _reference_slope(rep)), "effort": (arr[:, 2], None),
                "dist2": (arr[:, 3], 2 * min(nu, 2.0))}
        for q, (vals, ref) in fits.items():
            good = ok & (vals > 0)
            k = simulate.fit_loglog(arr[good, 0], vals[good])[0] if good.sum() >= 2 else float("nan")
            slopes.append([nu, q, k, ref if ref is not None else "", rep.beta_limit])
        curves.append((nu, arr[ok, 0], arr[ok, 1], gap[ok], rep))
        # scaled density at the smallest epsilon around the first predicted point
        e_min = eps[-1]
        sol, dens, _, err = results[(e_min, nu)]
        if not err and rep.predicted_S:
            zq = rep.predicted_S[0]
            s = e_min ** nu
            y = (sol.grid.x - float(zq.z[0])) / s
            win = np.abs(y) <= 6
            density_series.append((nu, zq, y[win], dens.density[win] * s))
    _write_csv(run.path("slopes.csv"), ["nu", "quantity", "slope", "reference_slope", "beta_limit"], slopes)
    series = []
    for i, (nu, e, b, gap, rep) in enumerate(curves):
        col = svg.PALETTE[i % len(svg.PALETTE)]
        series.append(svg.Series(f"nu={nu:g} beta", e, b, color=col))
    svg.line_plot(run.path("beta_vs_eps.svg"), series, "optimal value against noise level", "epsilon", "beta",
                  logx=True, logy=True, deterministic=run.deterministic)
    series = []
    for i, (nu, e, b, gap, rep) in enumerate(curves):
        col = svg.PALETTE[i % len(svg.PALETTE)]
        good = gap > 0
        series.append(svg.Series(f"nu={nu:g} |beta-lim|", e[good], gap[good], color=col))
        ref = _reference_slope(rep)
        if ref is not None and good.any():
            e0, g0 = e[good][0], gap[good][0]
            series.append(svg.Series(f"slope {ref:g}", e[good], g0 * (e[good] / e0) ** ref, dashed=True, color=col))
    svg.line_plot(run.path("beta_gap_vs_eps.svg"), series, "distance to the regime limit", "epsilon",
                  "|beta - limit|", logx=True, logy=True, deterministic=run.deterministic)
    for nu, zq, y, rho in density_series:
        pair = matctrl.solve_degenerate_riccati(zq.jacobian)
        var = float(pair.Sigma[0, 0])
        gauss = np.exp(-0.5 * y ** 2 / var) / math.sqrt(2 * math.pi * var)
        svg.line_plot(run.path(f"density_nu{nu:g}.svg"),
                      [svg.Series("scaled stationary density", y, rho),
                       svg.Series("Gaussian reference", y, gauss, dashed=True)],
                      f"scaled law at z={float(zq.z[0]):g}, nu={nu:g}", "(x - z) / eps^nu", "density",
                      deterministic=run.deterministic)


def cmd_riccati(run: Run) -> None:
    if "matrix" not in run.cfg:
        raise ConfigError("riccati mode needs 'matrix'")
    try:
        M = matctrl.as_square(run.cfg["matrix"])
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    spec = matctrl.spectral_summary(M)
    pair = matctrl.solve_degenerate_riccati(M)
    out = {"M": M, "Q": pair.Q, "Sigma": pair.Sigma, "riccati_residual": pair.riccati_residual,
           "lyapunov_residual": pair.lyapunov_residual, "unstable_trace": spec.unstable_trace,
           "gain_effort": pair.gain_effort, "eigenvalues_real": spec.eigenvalues.real,
           "eigenvalues_imag": spec.eigenvalues.imag}
    if "kappa" in run.cfg:
        out["Q_kappa"] = matctrl.solve_riccati_kappa(M, run.cfg["kappa"])
    run.write_json("riccati.json", out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eqselect", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for m in MODES:
        p = sub.add_parser(m)
        p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--out", help="output directory (overrides config 'output')")
        p.add_argument("--seed", type=int, help="random seed (overrides config 'seed')")
        p.add_argument("--deterministic", action="store_true", help="suppress timestamps in SVG output")
        p.add_argument("--jobs", type=int, default=1, help="worker threads for independent rows")
    sub.add_parser("schema", help="print the configuration JSON schema")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        json.dump(CONFIG_SCHEMA, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return 0
    r = None
    try:
        cfg = load_config(args.config)
        if cfg.get("mode", args.command) != args.command:
            raise ConfigError(f"config mode {cfg['mode']!r} does not match subcommand {args.command!r}")
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        out = args.out or cfg.get("output") or "out"
        r = Run(args.command, cfg, out, seed, args.deterministic, args.jobs)
        if args.command == "riccati":
            cmd_riccati(r)
        else:
            sys_ = build_system(cfg.get("system"))
            {"analyze": cmd_analyze, "solve": cmd_solve, "simulate": cmd_simulate,
             "sweep": cmd_sweep}[args.command](r, sys_)
        r.manifest()
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DomainError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        if r is not None:
            r.manifest("invalid input")
        return 1
    except NumericFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if r is not None:
            r.warnings.append(str(exc))
            r.manifest("numerical failure")
        return 2


def main(argv=None) -> int:
    return run(argv)
