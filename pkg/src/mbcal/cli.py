"""Command line interface: ``mbcal {simulate,calibrate,crossval,sweep,synth,sensitivity}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver failure
(the best iterate is still written).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import estimator as est
from . import mlcp
from . import synth
from . import timeseries as ts
from .config import ConfigError, RunConfig, format_params, load_config, read_params

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4
DATA_ERRORS = (ts.ParseError, ts.NonuniformSampling, ts.CutoffAboveNyquist, OSError)
SOLVER_ERRORS = (dyn.StepFailed, est.NoProgress, np.linalg.LinAlgError, mlcp.RayTermination,
                 mlcp.IterationLimit, mlcp.SingularPivot)


class DataError(ValueError):
    pass


@dataclass
class Prepared:
    t: np.ndarray
    y: np.ndarray
    u: np.ndarray | None


def prepare_data(cfg: RunConfig, path: str | Path, n_controls: int) -> Prepared:
    """Load, unwrap, low-pass and decimate a recording to the configured step."""
    try:
        series = ts.load_timeseries(path)
        if cfg.unwrap:
            series = ts.unwrap(series)
        series = ts.preprocess(series, cfg.h, cfg.cutoff_hz)
    except DATA_ERRORS as exc:
        raise DataError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    n_u = series.u.shape[1]
    if n_controls == 0:
        u = None
    elif n_u == 0:
        u = np.zeros((len(series), n_controls))
    elif n_u == n_controls:
        u = series.u
    else:
        raise DataError(f"expected {n_controls} control columns, found {n_u}")
    return Prepared(series.t, series.y, u)


def _problem(cfg: RunConfig, data: Prepared, params: dict | None = None):
    model = cfg.build(params)
    if data.y.shape[1] != model.n_obs:
        raise DataError(f"model observes {model.n_obs} angles, data has {data.y.shape[1]}")
    fixed = cfg.fixed_params(model.defaults)
    fixed.update(params or {})
    problem = est.CalibrationProblem(model, data.y, cfg.h, data.u, cfg.kappa, fixed, cfg.window)
    return model, problem


def run_calibration(cfg: RunConfig, data: Prepared, start: dict | None = None, log=None):
    """Joint state and parameter estimation; returns ``(result, problem)``."""
    model, problem = _problem(cfg, data)
    space = cfg.param_space(model, start)
    states = ts.init_states(data.y, model, cfg.h)
    cb = (lambda rec: print(rec.line(), file=log)) if log is not None else None
    result = est.calibrate(problem, states, space, cfg.eps_g, cfg.eps_delta, cfg.max_iter, cb)
    return result, problem


def _write_iterations(path: Path, report: est.LMReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "cost", "alpha", "rho", "grad_norm", "step_norm"])
        for r in report.log:
            w.writerow([r.iteration, repr(r.cost), repr(r.alpha), repr(r.rho), repr(r.grad_norm), repr(r.step_norm)])


def _costs_text(result: est.CalibrationResult) -> str:
    res, rep = result.residual, result.report
    rows = [
        ("status", rep.status), ("iterations", rep.iterations), ("n_steps", res.n_steps),
        ("initial_cost", repr(rep.initial_cost)), ("cost", repr(res.cost())), ("mse", repr(res.mse())),
        ("impulse_cost", repr(res.impulse_cost())), ("observation_cost", repr(res.observation_cost())),
        ("observation_mse", repr(res.observation_mse())),
    ]
    return "".join(f"{k} = {v}\n" for k, v in rows)


def _std_dict(sens: est.Sensitivity, space: est.ParamSpace) -> dict:
    """Per-parameter deviation; a quaternion gets the largest of its three tangent entries."""
    out: dict = {}
    for owner, s in zip(space.owner(), sens.std):
        out[owner] = max(out.get(owner, 0.0), float(s))
    return out


def cmd_calibrate(cfg: RunConfig, args) -> int:
    data = prepare_data(cfg, args.data, cfg.build().n_controls)
    start = read_params(args.params) if args.params else None
    result, problem = run_calibration(cfg, data, start, log=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    std = {}
    try:
        sens = est.sensitivity(problem, result.decision)
        std = _std_dict(sens, result.decision.params)
    except SOLVER_ERRORS as exc:
        print(f"sensitivity failed: {exc}", file=sys.stderr)
    (out / "estimates.txt").write_text(format_params(result.params, std), encoding="utf-8")
    (out / "costs.txt").write_text(_costs_text(result), encoding="utf-8")
    _write_iterations(out / "iterations.csv", result.report)
    sys.stdout.write(_costs_text(result))
    return EXIT_SOLVER if result.report.status == "no_progress" else EXIT_OK


def cmd_sensitivity(cfg: RunConfig, args) -> int:
    data = prepare_data(cfg, args.data, cfg.build().n_controls)
    start = read_params(args.params) if args.params else None
    result, problem = run_calibration(cfg, data, start, log=sys.stderr)
    sens = est.sensitivity(problem, result.decision)
    lines = [f"{k} = {float(v)!r}" for k, v in _std_dict(sens, result.decision.params).items()]
    lines.append("singular_values = " + " ".join(repr(float(s)) for s in sens.singular_values))
    lines.append(f"rank_deficient = {sens.rank_deficient}")
    for j in range(sens.null_directions.shape[1]):
        lines.append(f"null_direction_{j} = " + " ".join(repr(float(x)) for x in sens.null_directions[:, j]))
    text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    return EXIT_SOLVER if result.report.status == "no_progress" else EXIT_OK


def cmd_crossval(cfg: RunConfig, args) -> int:
    params = read_params(args.params) if args.params else dict(cfg.free)
    data = prepare_data(cfg, args.data, cfg.build(params).n_controls)
    model, problem = _problem(cfg, data, params)
    states = ts.init_states(data.y, model, cfg.h)
    score = est.cross_validate(problem, params, states, cfg.eps_g, cfg.eps_delta, cfg.max_iter)
    _emit(f"cv_mse = {score!r}\n", args.out)
    return EXIT_OK


def simulate_series(cfg: RunConfig, data: Prepared, params: dict) -> np.ndarray:
    """Open-loop rollout from the first two samples; returns predicted angles ``(n, n_obs)``."""
    model = cfg.build(params)
    full = model.params(**cfg.fixed_params(model.defaults))
    full.update(params)
    state = ts.init_states(data.y[:2], model, cfg.h)[0]
    controls = data.u[:-1] if data.u is not None else [None] * (len(data.t) - 1)
    traj = dyn.simulate(model, state, full, controls, cfg.h)
    return np.asarray(model.observe(traj))


def cmd_simulate(cfg: RunConfig, args) -> int:
    params = read_params(args.params) if args.params else dict(cfg.free)
    data = prepare_data(cfg, args.data, cfg.build(params).n_controls)
    pred = simulate_series(cfg, data, params)
    err = np.angle(np.exp(1j * (pred - data.y)))
    mse = float(np.mean(np.sum(err * err, axis=1)))
    names = [f"theta{j + 1}" for j in range(pred.shape[1])]
    rows = [[data.t[k], *pred[k]] for k in range(len(data.t))]
    _write_csv(args.out, ["t", *names], rows)
    print(f"observation_mse = {mse!r}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    s = cfg.synth
    if args.scenario is not None:
        s = replace(s, scenario=args.scenario)
    if args.seed is not None:
        s = replace(s, seed=args.seed)
    truth = dict(cfg.fixed)
    truth.update(cfg.truth)
    model = cfg.build(truth)
    full = model.params(**truth)
    try:
        series = synth.generate_synthetic(model, full, s.scenario, s.duration, s.h_gen, s.sample_dt,
                                          s.noise_sd, s.seed, counts_per_rev=s.counts_per_rev)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not args.out:
        raise ConfigError("synth needs --out")
    ts.save_timeseries(args.out, series)
    meta = (f"generator = Philox\nseed = {s.seed}\nscenario = {s.scenario}\nh_gen = {s.h_gen!r}\n"
            f"sample_dt = {s.sample_dt!r}\nnoise_sd = {s.noise_sd!r}\ncounts_per_rev = {s.counts_per_rev}\n")
    Path(str(args.out) + ".meta").write_text(meta + format_params({k: full[k] for k in truth}), encoding="utf-8")
    return EXIT_OK


def _sweep_point(cfg: RunConfig, data_path: str, value: float):
    """One grid point; returns a row dict (runs in a worker process)."""
    if cfg.sweep_param == "kappa":
        cfg = replace(cfg, kappa=value)
    elif cfg.sweep_param == "h":
        cfg = replace(cfg, h=value)
    else:
        cfg = replace(cfg, eps_compliance=value)
    row = {"param": cfg.sweep_param, "value": value}
    try:
        data = prepare_data(cfg, data_path, cfg.build().n_controls)
        result, _ = run_calibration(cfg, data)
    except (DataError, *SOLVER_ERRORS) as exc:
        row.update(status=f"error: {exc}")
        return row
    res = result.residual
    row.update(status=result.report.status, iterations=result.report.iterations, cost=res.cost(), mse=res.mse(),
               observation_mse=res.observation_mse())
    for k, v in result.params.items():
        arr = np.atleast_1d(np.asarray(v, dtype=float))
        if arr.size == 1:
            row[k] = float(arr[0])
        else:
            row.update({f"{k}[{i}]": float(x) for i, x in enumerate(arr)})
    return row


def threads() -> int:
    raw = os.environ.get("MBCAL_THREADS", "")
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"MBCAL_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def cmd_sweep(cfg: RunConfig, args) -> int:
    if args.param is not None:
        cfg = replace(cfg, sweep_param=args.param)
    grid = cfg.sweep_grid
    if args.grid is not None:
        try:
            grid = tuple(float(x) for x in args.grid.split(","))
        except ValueError:
            raise ConfigError(f"bad --grid {args.grid!r}") from None
    if not grid:
        raise ConfigError("sweep needs a grid")
    RunConfig.__post_init__(cfg)
    workers = min(threads(), len(grid))
    if workers == 1:
        rows = [_sweep_point(cfg, args.data, v) for v in grid]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, [cfg] * len(grid), [args.data] * len(grid), grid))
    head = ["param", "value", "status", "iterations", "cost", "mse", "observation_mse"]
    extra = sorted({k for r in rows for k in r} - set(head))
    fmt = lambda v: repr(v) if isinstance(v, float) else ("" if v is None else str(v))
    _write_csv(args.out, head + extra, [[fmt(r.get(k)) for k in head + extra] for r in rows], raw=True)
    failed = any(str(r["status"]).startswith("error") or r["status"] == "no_progress" for r in rows)
    return EXIT_SOLVER if failed else EXIT_OK


def _write_csv(path, header, rows, raw: bool = False) -> None:
    fh = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row if raw else [repr(float(x)) for x in row])
    finally:
        if path:
            fh.close()


def _emit(text: str, path) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


COMMANDS = {
    "simulate": cmd_simulate, "calibrate": cmd_calibrate, "crossval": cmd_crossval,
    "sweep": cmd_sweep, "synth": cmd_synth, "sensitivity": cmd_sensitivity,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbcal", description="Multibody model calibration from joint-angle recordings.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--data", help="CSV recording with t, theta*, u* columns")
        p.add_argument("--out", help="output file (directory for calibrate)")
        p.add_argument("--h", type=float, help="time step of the estimation model")
        p.add_argument("--kappa", type=float, help="weight of impulse residuals")
        p.add_argument("--eps-compliance", type=float, dest="eps_compliance", help="compliance of every joint")
        p.add_argument("--max-iter", type=int, dest="max_iter", help="Levenberg-Marquardt iteration limit")
        p.add_argument("--seed", type=int, help="noise seed for synth")
        p.add_argument("--scenario", help="synth scenario: release, pulse or custom")
        p.add_argument("--params", help="parameter file from a previous calibration")
        if name == "sweep":
            p.add_argument("--param", choices=("kappa", "h", "eps"), help="swept setting")
            p.add_argument("--grid", help="comma separated grid values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(h=args.h, kappa=args.kappa, eps_compliance=args.eps_compliance,
                                 max_iter=args.max_iter)
        if args.command != "synth" and not args.data:
            raise ConfigError(f"{args.command} needs --data")
        if args.command in ("calibrate", "sweep") and not args.out:
            raise ConfigError(f"{args.command} needs --out")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SOLVER_ERRORS as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
