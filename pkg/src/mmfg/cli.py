"""Command-line front end.

    mmfg [COMMAND] --config run.toml [--seed N] [--output DIR]
    mmfg --print-defaults
    mmfg plot-data trajectories.csv [--output FILE] [--model NAME]

Exit status: 0 success, 1 invalid configuration, 2 solver failure
(non-convergence, divergence, singular coefficients), 3 I/O.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import jsonschema

from .errors import (BasisDegeneracyError, ConfigurationError, DivergenceError, MMFGError, NonConvergenceError,
                     OptimizationError, PreconditionError, SeparabilityError, SingularControlError,
                     SingularMeanError)
from .fbsde import SolverConfig, mean_field_ode_solve
from .hamiltonian import verify_necessary_conditions
from .mfg import BUNDLE_VERSION, EquilibriumBundle, export_equilibrium, fit_decoupling_fields, solve_mmmfg
from .model import MODELS, SigmaSchedule, make_model
from .nplayer import FiniteGameConfig, estimate_eps_nash, simulate_finite_game

COMMANDS = ("solve-mfg", "verify-example", "mean-field-ode", "finite-game", "nash-gap")
COLUMNS = ("t", "alpha0", "mean_x", "mean_gamma", "mean_P", "mean_Pgrave", "mean_Y", "mean_Ygrave")
ORACLE_SERIES = ("alpha0", "mean_gamma", "mean_x")
VERIFY_FROM = 0.05    # oracle comparison window for models singular at t = 0

DEFAULTS = {
    "command": "solve-mfg",
    "model": {"name": "example2", "kappa": 1.0, "sigma": 0.2, "horizon": 1.0, "x0": 0.0, "gamma0": 0.0},
    "solver": SolverConfig().to_dict(),
    "game": {"N": 20, "mc_runs": 200, "minor_shifts": [-0.5, -0.25, 0.0, 0.25, 0.5],
             "major_shifts": [-0.5, -0.25, 0.0, 0.25, 0.5], "best_response": True, "sampled_players": 5,
             "br_particles": 2000, "bundle": "bundle.json"},
    "output": {"dir": "out"},
}

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3


class CSVParseError(ConfigurationError):
    pass


# ---- config -------------------------------------------------------------------

def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(u) for u in v) + "]"
    raise TypeError(type(v))


def defaults_toml() -> str:
    lines = [f"command = {_toml_value(DEFAULTS['command'])}  # one of {', '.join(COMMANDS)}"]
    for section in ("model", "solver", "game", "output"):
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in DEFAULTS[section].items():
            lines.append(f"{k} = {_toml_value(v)}")
    lines.append("")
    return "\n".join(lines)


def merge_config(user: dict) -> dict:
    """Defaults overlaid with ``user``; unknown keys are an error."""
    cfg = copy.deepcopy(DEFAULTS)
    bad = [k for k in user if k not in cfg]
    for section, values in user.items():
        if section not in cfg:
            continue
        if section == "command":
            cfg["command"] = values
            continue
        if not isinstance(values, dict):
            bad.append(section)
            continue
        for k, v in values.items():
            if k not in cfg[section]:
                bad.append(f"{section}.{k}")
            else:
                cfg[section][k] = v
    if bad:
        raise ConfigurationError(f"unknown or malformed config keys: {sorted(bad)}")
    if cfg["command"] not in COMMANDS:
        raise ConfigurationError(f"unknown command {cfg['command']!r}; choose from {list(COMMANDS)}")
    return cfg


def _num(section, key, value, kind):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"{section}.{key} must be a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigurationError(f"{section}.{key} must be an integer, got {value!r}")
    return kind(value)


def build_model(mcfg: dict):
    name = mcfg["name"]
    if name not in MODELS:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    params = model_params(mcfg)
    kw = dict(params)
    sig = kw.pop("sigma")
    kw["sigma"] = (SigmaSchedule.constant(sig) if not isinstance(sig, list)
                   else SigmaSchedule(tuple(float(a) for a, _ in sig), tuple(float(b) for _, b in sig)))
    return make_model(name, **kw), params


def model_params(mcfg: dict) -> dict:
    sig = mcfg["sigma"]
    if isinstance(sig, (list, tuple)):
        if not sig or not all(isinstance(p, (list, tuple)) and len(p) == 2 for p in sig):
            raise ConfigurationError("model.sigma must be a number or a list of [time, value] pairs")
        sig = [[_num("model", "sigma", a, float), _num("model", "sigma", b, float)] for a, b in sig]
    else:
        sig = _num("model", "sigma", sig, float)
    out = {"sigma": sig}
    for k in ("horizon", "x0", "gamma0"):
        out[k] = _num("model", k, mcfg[k], float)
    if mcfg["name"] == "example3":
        out["kappa"] = _num("model", "kappa", mcfg["kappa"], float)
    return out


def build_solver(scfg: dict) -> SolverConfig:
    ints = {"particles", "seed", "max_iter", "degree", "steps", "outer_max_iter"}
    kw = {k: _num("solver", k, v, int if k in ints else float) for k, v in scfg.items()}
    try:
        return SolverConfig(**kw)
    except PreconditionError as e:
        raise ConfigurationError(str(e)) from None


def build_game(gcfg: dict, grid, seed: int) -> FiniteGameConfig:
    sp = gcfg["sampled_players"]
    try:
        return FiniteGameConfig(
            N=_num("game", "N", gcfg["N"], int), grid=grid, seed=seed,
            mc_runs=_num("game", "mc_runs", gcfg["mc_runs"], int),
            minor_shifts=tuple(_num("game", "minor_shifts", v, float) for v in gcfg["minor_shifts"]),
            major_shifts=tuple(_num("game", "major_shifts", v, float) for v in gcfg["major_shifts"]),
            best_response=bool(gcfg["best_response"]),
            sampled_players=None if sp in (0, None) else _num("game", "sampled_players", sp, int),
            br_particles=_num("game", "br_particles", gcfg["br_particles"], int))
    except PreconditionError as e:
        raise ConfigurationError(str(e)) from None


# ---- artifacts ------------------------------------------------------------------

def atomic_write(path: Path, text: str):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectories_csv(columns: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    rows = np.column_stack([np.asarray(columns[c], float) for c in COLUMNS])
    for row in rows:
        w.writerow(["%.17g" % v for v in row])
    return buf.getvalue()


def _schema():
    return json.loads(resources.files("mmfg").joinpath("summary.schema.json").read_text())


def summary_json(summary: dict) -> str:
    jsonschema.validate(summary, _schema())
    return json.dumps(summary, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _floats(a):
    return [float(v) for v in np.asarray(a, float).ravel()]


# ---- commands ---------------------------------------------------------------------

def _oracle_errors(model, t, alpha0, mean_gamma, alpha=None):
    o = model.oracle
    mask = t >= (VERIFY_FROM if model.name != "example1" else 0.0)
    ea0 = np.abs(alpha0[mask] - o.alpha0(t[mask]))
    # E[gamma] starts at 0, so its relative error skips that point
    gmask = mask & (t > 0)
    out = {"alpha0_max_abs_err": float(ea0.max()),
           "alpha0_max_rel_err": float((ea0 / np.abs(o.alpha0(t[mask]))).max()),
           "mean_gamma_max_rel_err": float((np.abs(mean_gamma[gmask] / o.mean_gamma(t[gmask]) - 1)).max()),
           "window_start": float(t[mask][0])}
    if alpha is not None:
        ea = np.abs(alpha[mask] - o.alpha(t[mask])[:, None, None])
        out["alpha_max_abs_err"] = float(ea.max())
    return out


def _run_solve(model, solver, timings, with_bundle, params):
    t0 = time.perf_counter()
    sol = solve_mmmfg(model, solver)
    timings["solve"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    report = verify_necessary_conditions(model, sol.fbsde)
    timings["verify"] = time.perf_counter() - t0
    conv = {"picard_residuals": _floats(sol.fbsde.residuals),
            "fixed_point_residuals": _floats(sol.fixed_point_residuals),
            "outer_iterations": sol.outer_iterations}
    bundle = None
    if with_bundle:
        t0 = time.perf_counter()
        bundle = export_equilibrium(sol, fit_decoupling_fields(sol), params)
        timings["export"] = time.perf_counter() - t0
    return sol, report, conv, bundle


def execute(cfg: dict, out: Path, source_dir: Path) -> dict:
    command = cfg["command"]
    timings = {}
    summary = {"spec_version": BUNDLE_VERSION, "command": command, "status": "ok", "config": cfg,
               "timings": timings}
    solver = build_solver(cfg["solver"])
    summary["seed"] = solver.seed
    artifacts = {}

    if command in ("solve-mfg", "verify-example", "mean-field-ode"):
        model, params = build_model(cfg["model"])
        if command == "verify-example" and model.oracle is None:
            raise ConfigurationError(f"model {model.name!r} has no closed-form equilibrium to verify against")
        if command == "mean-field-ode":
            t0 = time.perf_counter()
            tr = mean_field_ode_solve(model, solver.grid(model.horizon))
            timings["solve"] = time.perf_counter() - t0
            cols = tr.as_columns()
            summary["convergence"] = {"shooting_residual": float(tr.shooting_residual)}
            if model.oracle is not None:
                summary["checks"] = _oracle_errors(model, tr.t, tr.alpha0, tr.mean_gamma)
        else:
            sol, report, conv, bundle = _run_solve(model, solver, timings, command == "solve-mfg", params)
            cols = sol.fbsde.means()
            summary["convergence"] = conv
            checks = {"necessary_conditions": report.to_dict()}
            if command == "verify-example":
                checks.update(_oracle_errors(model, cols["t"], cols["alpha0"], cols["mean_gamma"], sol.fbsde.alpha))
            summary["checks"] = checks
            if bundle is not None:
                artifacts["bundle.json"] = bundle.to_json() + "\n"
        artifacts["trajectories.csv"] = trajectories_csv(cols)
    else:
        bpath = Path(cfg["game"]["bundle"])
        if not bpath.is_absolute():
            bpath = source_dir / bpath
        try:
            text = bpath.read_text()
        except FileNotFoundError:
            raise ConfigurationError(f"game.bundle: no bundle at {bpath}") from None
        try:
            bundle = EquilibriumBundle.from_json(text)
        except (json.JSONDecodeError, KeyError, PreconditionError) as e:
            raise ConfigurationError(f"game.bundle: unreadable bundle ({e})") from None
        model, _ = build_model({**DEFAULTS["model"], **bundle.model["params"], "name": bundle.model["name"]})
        game = build_game(cfg["game"], bundle.grid, solver.seed)
        t0 = time.perf_counter()
        base = simulate_finite_game(model, bundle, game)
        timings["simulate"] = time.perf_counter() - t0
        cols = {"t": bundle.grid.times, "alpha0": bundle.alpha0[:, 0], **base.means}
        artifacts["trajectories.csv"] = trajectories_csv(cols)
        results = {"J0_hat": base.J0_hat(), "Ji_hat_mean": float(base.J_hat().mean()), "N": game.N,
                   "mc_runs": game.mc_runs}
        if command == "nash-gap":
            t0 = time.perf_counter()
            rep = estimate_eps_nash(model, bundle, game)
            timings["nash_gap"] = time.perf_counter() - t0
            summary["eps"] = {k: getattr(rep, k) for k in ("eps_major", "eps_major_se", "eps_minor_max",
                                                          "eps_minor_max_se")}
            results["cost_increase"] = rep.cost_increase
            results["flow_gap"] = rep.flow_gap
            artifacts["nash_gap.json"] = rep.to_json() + "\n"
            artifacts["per_run.csv"] = rep.to_csv()
        else:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["run", "player", "cost"])
            for r in range(game.mc_runs):
                w.writerow([r, 0, "%.17g" % base.J0[r]])
                for i in range(game.N):
                    w.writerow([r, i + 1, "%.17g" % base.J[r, i]])
            artifacts["per_run.csv"] = buf.getvalue()
        summary["results"] = results

    text = summary_json(summary)
    for name, content in artifacts.items():
        atomic_write(out / name, content)
    atomic_write(out / "summary.json", text)
    return summary


# ---- plot data ----------------------------------------------------------------------

def read_trajectories(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError(f"{path}: line 1: missing header") from None
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise CSVParseError(f"{path}: line 1: missing columns {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CSVParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise CSVParseError(f"{path}: line {lineno}: non-numeric field") from None
    return header, rows


def plot_data(path: Path, model=None) -> str:
    """Long format ``t,series,value``; oracle series are appended when ``model`` has one."""
    header, rows = read_trajectories(path)
    series = [c for c in header if c != "t"]
    oracle = model.oracle if model is not None else None
    extra = list(ORACLE_SERIES) if oracle is not None else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "series", "value"])
    ti = header.index("t")
    for row in rows:
        t = row[ti]
        for s in series:
            w.writerow(["%.17g" % t, s, "%.17g" % row[header.index(s)]])
        for s in extra:
            w.writerow(["%.17g" % t, f"{s}_oracle", "%.17g" % float(getattr(oracle, s)(np.array([t]))[0])])
    return buf.getvalue()


def _plot_model(args, path: Path):
    if args.model:
        return make_model(args.model)
    summ = path.parent / "summary.json"
    if summ.exists():
        try:
            mcfg = json.loads(summ.read_text())["config"]["model"]
            return build_model(mcfg)[0]
        except (KeyError, json.JSONDecodeError, MMFGError):
            return None
    return None


# ---- entry point ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1), not argparse's exit 2
    def error(self, message):
        raise ConfigurationError(message)


def _parser():
    p = _Parser(prog="mmfg", description="Major/minor mean field game solver.")
    p.add_argument("command", nargs="?", choices=COMMANDS + ("plot-data",),
                   help="overrides the config's command")
    p.add_argument("input", nargs="?", help="trajectories.csv for plot-data, otherwise a model name")
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int, help="overrides solver.seed")
    p.add_argument("--output", type=Path, help="output directory (file for plot-data)")
    p.add_argument("--model", help="model whose oracle series plot-data appends")
    p.add_argument("--print-defaults", action="store_true", help="print the default configuration and exit")
    return p


def _fail(code, exc, out=None, cfg=None):
    err = {"type": type(exc).__name__, "message": str(exc)}
    residuals = getattr(exc, "residuals", None)
    if residuals:
        err["residuals"] = _floats(residuals)
    sys.stderr.write(json.dumps({"error": err, "exit_code": code}) + "\n")
    if out is not None and cfg is not None and out.is_dir():
        summary = {"spec_version": BUNDLE_VERSION, "command": cfg["command"], "status": "failed",
                   "seed": int(cfg["solver"]["seed"]) if isinstance(cfg["solver"]["seed"], int)
                   and cfg["solver"]["seed"] >= 0 else 0,
                   "config": cfg, "timings": {}, "error": err}
        try:
            atomic_write(out / "summary.json", summary_json(summary))
        except (OSError, jsonschema.ValidationError):
            pass
    return code


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except ConfigurationError as e:
        return _fail(EXIT_CONFIG, e)
    if args.print_defaults:
        sys.stdout.write(defaults_toml())
        return EXIT_OK
    if args.command == "plot-data":
        if not args.input:
            return _fail(EXIT_CONFIG, ConfigurationError("plot-data needs an input trajectories.csv"))
        src = Path(args.input)
        dst = args.output or src.with_name("plot_data.csv")
        try:
            atomic_write(dst, plot_data(src, _plot_model(args, src)))
        except CSVParseError as e:
            return _fail(EXIT_CONFIG, e)
        except OSError as e:
            return _fail(EXIT_IO, e)
        return EXIT_OK

    cfg = out = None
    try:
        user = {}
        source_dir = Path.cwd()
        if args.config is not None:
            with open(args.config, "rb") as fh:
                user = tomllib.load(fh)
            source_dir = args.config.resolve().parent
        if args.command:
            user["command"] = args.command
        if args.input:
            user.setdefault("model", {})["name"] = args.input
        cfg = merge_config(user)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigurationError("--seed must be nonnegative")
            cfg["solver"]["seed"] = args.seed
        if args.output is not None:
            cfg["output"]["dir"] = str(args.output)
        out = Path(cfg["output"]["dir"])
        if not out.is_absolute() and args.output is None:
            out = source_dir / out
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")
        execute(cfg, out, source_dir)
        return EXIT_OK
    except (ConfigurationError, PreconditionError, tomllib.TOMLDecodeError) as e:
        return _fail(EXIT_CONFIG, e, out, cfg)
    except (NonConvergenceError, DivergenceError, SingularMeanError, SingularControlError, OptimizationError,
            BasisDegeneracyError, SeparabilityError) as e:
        return _fail(EXIT_SOLVER, e, out, cfg)
    except OSError as e:
        return _fail(EXIT_IO, e, out, cfg)


if __name__ == "__main__":
    sys.exit(main())
