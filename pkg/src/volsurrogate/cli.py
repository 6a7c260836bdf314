"""Command-line pipeline: gen, train, eval, bench, sensitivity, solve.

Every command takes its settings from built-in defaults, overridden by an
optional JSON config file (``--config``), overridden by explicit flags, and
is deterministic given the same settings and seeds; wall-clock measurements
are written to separate ``*_timing.json`` files so the data artifacts stay
byte-reproducible. On failure a single machine-readable JSON line is printed
to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from .exceptions import ButterflyArbitrageError, ConvergenceError, ParameterError
from .fdsolver import GridSpec, PdeProblem, solve
from .gpr import DEFAULT_NOISE_LEVEL_GRID, GprSurrogate, predict_joint
from .varswap import VarSwapInputs, fair_strike
from .volsurface import (
    SurfaceParams,
    SviSlice,
    local_variance_grid,
    term_factor,
    total_variance_slice,
)

#: One-at-a-time sweep baselines.
VARSWAP_BASELINE = {"a_prime": 0.01, "b": 0.15, "rho": -0.1, "m": 0.2, "sigma": 0.2,
                    "r": 0.03}
AMPUT_BASELINE = {"a_prime": 0.01, "b": 0.15, "rho": 0.2, "m": 0.2, "sigma": 0.5,
                  "lambda": 0.5, "K": 1.0, "r": 0.03}
SURFACE_BASELINE = {"a_prime": 0.01, "b": 0.15, "rho": 0.2, "m": 0.2, "sigma": 0.5,
                    "lambda": 0.0}

SURFACE_FACTORS = ("a_prime", "b", "rho", "m", "sigma", "lambda")

#: Log-moneyness window for skew sweeps.
K_WINDOW = (-1.0, 1.0)

#: Fraction of final time levels excluded from the gamma heatmap export; the
#: payoff kink makes gamma diverge at expiry.
HEATMAP_TIME_CUTOFF = 0.02

DEFAULT_COUNTS = {"varswap": (2000, 2000), "amput": (5000, 2000)}
DEFAULT_SEED = 20240601


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_grid(text: str) -> GridSpec:
    try:
        n_s, _, n_t = text.lower().partition("x")
        return GridSpec(n_s=int(n_s), n_t=int(n_t or n_s))
    except ValueError as exc:
        raise ValueError(f"--grid expects NxN, got {text!r}") from exc


class _Settings:
    """Flag > config-file > default resolution."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = {}
        if getattr(args, "config", None):
            with open(args.config) as fh:
                self.config = json.load(fh)

    def get(self, name: str, default=None):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        return self.config.get(name, default)


def _out_dir(settings: _Settings) -> Path:
    out = Path(settings.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grid_from(settings: _Settings, default: str = "500x500") -> GridSpec:
    return _parse_grid(settings.get("grid", default))


# --------------------------------------------------------------------- gen
def cmd_gen(settings: _Settings) -> dict:
    mode = settings.get("mode")
    if mode not in ds.FACTORS:
        raise ValueError(f"--mode must be varswap or amput, got {mode!r}")
    out = _out_dir(settings)
    train_default, test_default = DEFAULT_COUNTS[mode]
    train_count = int(settings.get("train_count", train_default))
    test_count = int(settings.get("test_count", test_default))
    seed = int(settings.get("seed", DEFAULT_SEED))
    jobs = int(settings.get("jobs", 1))
    grid = _grid_from(settings)
    results = {}
    for split, count, split_seed in (
        ("train", train_count, seed),
        ("test", test_count, seed + 1),
    ):
        path = out / f"{mode}_{split}.csv"
        results[split] = ds.generate(
            mode, split, count, split_seed, path, grid=grid, n_jobs=jobs
        )
    manifest = {
        "format": "volsurrogate-gen-manifest-v1",
        "mode": mode,
        "grid": f"{grid.n_s}x{grid.n_t}",
        "seed": seed,
        "splits": {
            split: {
                "path": Path(res.path).name,
                "count": res.count,
                "seed": res.seed,
                "n_drawn": res.n_drawn,
                "n_dropped": res.n_dropped,
                "drop_reasons": res.drop_reasons,
            }
            for split, res in results.items()
        },
    }
    _write_json(out / f"{mode}_gen_manifest.json", manifest)
    _write_json(
        out / f"{mode}_gen_timing.json",
        {split: res.runtime_seconds for split, res in results.items()},
    )
    return {"train": results["train"].path, "test": results["test"].path}


# ------------------------------------------------------------------- train
def cmd_train(settings: _Settings) -> dict:
    mode = settings.get("mode")
    if mode not in ds.FACTORS:
        raise ValueError(f"--mode must be varswap or amput, got {mode!r}")
    out = _out_dir(settings)
    train_path = Path(settings.get("train", out / f"{mode}_train.csv"))
    data = ds.read_dataset(train_path)
    noise_grid = [0.0] if mode == "varswap" else DEFAULT_NOISE_LEVEL_GRID
    model = GprSurrogate(noise_level_grid=noise_grid)

    started = time.perf_counter()
    model.fit(data.x, data.y if data.y.shape[1] > 1 else data.y[:, 0])
    fit_seconds = time.perf_counter() - started

    lg = model.length_scale_grid_
    sg = model.noise_level_grid_
    manifest_targets = {}
    written = []
    for idx, target in enumerate(data.target_names):
        single = model.extract_target(idx)
        model_path = out / f"{mode}_{target}_model.bin"
        single.save(model_path)
        written.append(str(model_path))

        grid_vals = model.lml_grid_[:, :, idx]
        i_max, j_max = np.unravel_index(int(np.argmax(grid_vals)), grid_vals.shape)
        rows = []
        for i, scale in enumerate(lg):
            for j, noise in enumerate(sg):
                rows.append(
                    (scale, noise, grid_vals[i, j], 1.0 if (i, j) == (i_max, j_max) else 0.0)
                )
        _write_csv(
            out / f"{mode}_{target}_lml_grid.csv",
            ["length_scale", "noise_level", "lml", "is_max"],
            rows,
        )
        manifest_targets[target] = {
            "model": model_path.name,
            "length_scale": float(model.length_scale_[idx]),
            "noise_level": float(model.noise_level_[idx]),
            "lml": float(model.lml_[idx]),
            "jitter_used": float(model.jitter_used_[idx]),
            "grid_argmax": [int(i_max), int(j_max)],
        }
    _write_json(
        out / f"{mode}_train_manifest.json",
        {
            "format": "volsurrogate-train-manifest-v1",
            "mode": mode,
            "train_file": train_path.name,
            "n_train": int(data.x.shape[0]),
            "targets": manifest_targets,
        },
    )
    _write_json(out / f"{mode}_train_timing.json", {"fit_seconds": fit_seconds})
    return {"models": written}


def _load_models(mode: str, settings: _Settings, out: Path) -> dict:
    models_dir = Path(settings.get("models", out))
    return {
        target: GprSurrogate.load(models_dir / f"{mode}_{target}_model.bin")
        for target in ds.TARGETS[mode]
    }


# -------------------------------------------------------------------- eval
def cmd_eval(settings: _Settings) -> dict:
    mode = settings.get("mode")
    if mode not in ds.FACTORS:
        raise ValueError(f"--mode must be varswap or amput, got {mode!r}")
    out = _out_dir(settings)
    test_path = Path(settings.get("test", out / f"{mode}_test.csv"))
    data = ds.read_dataset(test_path)
    models = _load_models(mode, settings, out)
    report = ds.evaluate(
        models,
        data,
        config={
            "test_file": test_path.name,
            "models": {t: f"{mode}_{t}_model.bin" for t in ds.TARGETS[mode]},
        },
    )
    for idx, target in enumerate(data.target_names):
        _write_csv(
            out / f"{mode}_{target}_scatter.csv",
            ["truth", "prediction"],
            zip(data.y[:, idx], report.predictions[target]),
        )
    _write_json(out / f"{mode}_eval_report.json", report.to_json_dict())
    return {"err": report.err}


# ------------------------------------------------------------------- bench
def cmd_bench(settings: _Settings) -> dict:
    """Wall-clock comparison: trained-surrogate batch valuation vs solving
    the PDE per record. The PDE total is extrapolated from a fixed time
    budget: run solves until the budget elapses, then scale by the record
    count. Strike-range violations of the no-arbitrage check are clamped
    here; timing does not require uncontaminated ground truth."""
    mode = settings.get("mode", "amput")
    if mode != "amput":
        raise ValueError("bench compares against the PDE solver; only --mode amput")
    out = _out_dir(settings)
    test_path = Path(settings.get("test", out / f"{mode}_test.csv"))
    data = ds.read_dataset(test_path)
    models = _load_models(mode, settings, out)
    budget = float(settings.get("budget_seconds", 60.0))
    grids = [g for g in str(settings.get("grids", "200x200,500x500,1000x1000")).split(",") if g]

    ordered = [models[t] for t in ds.TARGETS[mode]]
    started = time.perf_counter()
    predict_joint(ordered, data.x)
    gpr_seconds = time.perf_counter() - started

    n_records = data.x.shape[0]
    bench_grids = {}
    for grid_text in grids:
        template = _parse_grid(grid_text)
        solved = 0
        elapsed = 0.0
        for x in data.x:
            a_prime, b, rho, m, sigma, lam, strike, rate = x
            t0 = time.perf_counter()
            params = SurfaceParams(SviSlice(a_prime, b, rho, m, sigma), lam)
            grid = dataclasses.replace(template, s_max=3.0 * max(strike, 1.0))
            variance = local_variance_grid(
                params, 1.0, rate, grid.s_axis[1:-1], grid.t_axis(1.0),
                on_violation="clamp",
            )
            solve(PdeProblem("put", "american", strike, rate, variance), grid)
            elapsed += time.perf_counter() - t0
            solved += 1
            if elapsed >= budget:
                break
        estimated = elapsed / solved * n_records
        bench_grids[grid_text] = {
            "solves_timed": solved,
            "seconds_elapsed": elapsed,
            "estimated_total_seconds": estimated,
            "speedup_vs_gpr": estimated / gpr_seconds,
        }
    payload = {
        "format": "volsurrogate-bench-v1",
        "mode": mode,
        "n_records": n_records,
        "n_targets": len(ordered),
        "gpr_seconds": gpr_seconds,
        "grids": bench_grids,
    }
    _write_json(out / f"{mode}_bench.json", payload)
    return payload


# ------------------------------------------------------------- sensitivity
def _sweep_values(lo: float, hi: float, points: int) -> np.ndarray:
    # midpoints keep open-interval parameters (sigma > 0) strictly inside
    return lo + (np.arange(points) + 0.5) / points * (hi - lo)


def _amput_valuation(overrides: dict, grid_template: GridSpec):
    p = AMPUT_BASELINE | overrides
    params = SurfaceParams(
        SviSlice(p["a_prime"], p["b"], p["rho"], p["m"], p["sigma"]), p["lambda"]
    )
    grid = dataclasses.replace(grid_template, s_max=3.0 * max(p["K"], 1.0))
    variance = local_variance_grid(
        params, 1.0, p["r"], grid.s_axis[1:-1], grid.t_axis(1.0), on_violation="clamp"
    )
    problem = PdeProblem("put", "american", p["K"], p["r"], variance)
    sol = solve(problem, grid, spot=1.0)
    return sol.value, sol.delta, sol.gamma, sol.theta


def cmd_sensitivity(settings: _Settings) -> dict:
    mode = settings.get("mode")
    out = _out_dir(settings)
    points = int(settings.get("points", 50))
    factors_arg = settings.get("factors")

    if mode == "surface":
        all_factors = SURFACE_FACTORS
        ranges = ds.default_ranges("amput").train
        baseline = SURFACE_BASELINE
    elif mode == "varswap":
        all_factors = ds.FACTORS["varswap"]
        ranges = ds.default_ranges("varswap").train
        baseline = VARSWAP_BASELINE
    elif mode == "amput":
        all_factors = ds.FACTORS["amput"]
        ranges = ds.default_ranges("amput").train
        baseline = AMPUT_BASELINE
    else:
        raise ValueError(f"--mode must be surface, varswap or amput, got {mode!r}")

    for name, value in baseline.items():
        if name in ranges:
            lo, hi = ranges[name]
            if not lo <= value <= hi:
                raise ValueError(f"baseline {name}={value} outside range [{lo}, {hi}]")

    if factors_arg is None:
        factors = list(all_factors)
    else:
        factors = [f for f in str(factors_arg).split(",") if f]
        unknown = set(factors) - set(all_factors)
        if unknown:
            raise ValueError(f"unknown factors for mode {mode}: {sorted(unknown)}")

    written = []
    for factor in factors:
        lo, hi = ranges[factor]
        path = out / f"{mode}_sensitivity_{factor}.csv"
        if mode == "surface":
            curve_values = _sweep_values(lo, hi, 5)
            rows = []
            if factor == "lambda":
                maturities = np.linspace(0.0, 1.0, points)
                for lam in curve_values:
                    smile = SviSlice(*(SURFACE_BASELINE[k] for k in
                                       ("a_prime", "b", "rho", "m", "sigma")))
                    w_atm = total_variance_slice(0.0, smile) * term_factor(maturities, lam)
                    rows.extend(zip([lam] * points, maturities, w_atm))
                _write_csv(path, ["lambda", "T", "w_atm"], rows)
            else:
                ks = np.linspace(*K_WINDOW, points)
                for value in curve_values:
                    p = SURFACE_BASELINE | {factor: value}
                    smile = SviSlice(p["a_prime"], p["b"], p["rho"], p["m"], p["sigma"])
                    w = total_variance_slice(ks, smile)
                    rows.extend(zip([value] * points, ks, w))
                _write_csv(path, [factor, "k", "w"], rows)
        elif mode == "varswap":
            rows = []
            for value in _sweep_values(lo, hi, points):
                p = VARSWAP_BASELINE | {factor: value}
                smile = SviSlice(p["a_prime"], p["b"], p["rho"], p["m"], p["sigma"])
                rows.append((value, fair_strike(VarSwapInputs(smile, rate=p["r"]))))
            _write_csv(path, [factor, "k_var"], rows)
        else:
            grid_template = _grid_from(settings)
            rows = []
            for value in _sweep_values(lo, hi, points):
                rows.append((value,) + _amput_valuation({factor: value}, grid_template))
            _write_csv(path, [factor, "V", "delta", "gamma", "theta"], rows)
        written.append(str(path))
    return {"files": written}


# ------------------------------------------------------------------- solve
def cmd_solve(settings: _Settings) -> dict:
    """Price one option and export the t=0 slices, a gamma heatmap (the
    final fraction of time levels near expiry is excluded, where gamma
    diverges at the payoff kink) and a summary."""
    out = _out_dir(settings)
    kind = settings.get("kind", "put")
    style = settings.get("style", "american")
    strike = float(settings.get("strike", 1.0))
    rate = float(settings.get("rate", 0.03))
    spot = float(settings.get("spot", 1.0))
    grid = dataclasses.replace(
        _grid_from(settings), s_max=3.0 * max(strike, spot)
    )
    surface = settings.get("surface")
    if surface is not None:
        vals = [float(v) for v in str(surface).split(",")]
        if len(vals) != 6:
            raise ValueError("--surface expects a_prime,b,rho,m,sigma,lambda")
        params = SurfaceParams(SviSlice(*vals[:5]), vals[5])
        variance = local_variance_grid(
            params, spot, rate, grid.s_axis[1:-1], grid.t_axis(1.0),
            on_violation="clamp",
        )
    else:
        variance = float(settings.get("flat_variance", 0.03))

    problem = PdeProblem(kind, style, strike, rate, variance)
    sol = solve(problem, grid, spot=spot)

    s = sol.s_values
    h = s[1] - s[0]
    level0, level1 = sol.values[0], sol.values[1]
    dt = sol.t_values[1] - sol.t_values[0]
    interior = slice(1, -1)
    delta = (level0[2:] - level0[:-2]) / (2 * h)
    gamma = (level0[2:] - 2 * level0[1:-1] + level0[:-2]) / h**2
    theta = (level1[interior] - level0[interior]) / dt
    _write_csv(
        out / "solve_slices.csv",
        ["S", "V", "delta", "gamma", "theta"],
        zip(s[interior], level0[interior], delta, gamma, theta),
    )

    t_max = (1.0 - HEATMAP_TIME_CUTOFF) * problem.maturity
    rows = []
    for k_level, t in enumerate(sol.t_values):
        if t > t_max:
            break
        level = sol.values[k_level]
        g_row = (level[2:] - 2 * level[1:-1] + level[:-2]) / h**2
        rows.extend(zip([t] * (s.size - 2), s[interior], g_row))
    _write_csv(out / "solve_gamma_heatmap.csv", ["t", "S", "gamma"], rows)

    summary = {
        "kind": kind,
        "style": style,
        "strike": strike,
        "rate": rate,
        "spot": spot,
        "grid": f"{grid.n_s}x{grid.n_t}",
        "value": sol.value,
        "delta": sol.delta,
        "gamma": sol.gamma,
        "theta": sol.theta,
    }
    _write_json(out / "solve_summary.json", summary)
    return summary


# ---------------------------------------------------------------- pipeline
def cmd_pipeline(settings: _Settings) -> dict:
    """gen -> train -> eval (-> bench for amput) from one config."""
    outcome = {"gen": cmd_gen(settings), "train": cmd_train(settings),
               "eval": cmd_eval(settings)}
    if settings.get("mode") == "amput":
        outcome["bench"] = cmd_bench(settings)
    return outcome


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volsurrogate",
        description="Volatility-surface pricing engine with a GPR surrogate",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--out", help="output directory (default: .)")
        p.add_argument("--mode", help="varswap or amput")

    p = sub.add_parser("gen", help="generate ground-truth train/test datasets")
    common(p)
    p.add_argument("--train-count", type=int, dest="train_count")
    p.add_argument("--test-count", type=int, dest="test_count")
    p.add_argument("--seed", type=int, help="train seed; test uses seed+1")
    p.add_argument("--grid", help="PDE grid NxN (amput)")
    p.add_argument("--jobs", type=int, help="parallel pricing workers")

    p = sub.add_parser("train", help="fit one GPR model per valuation target")
    common(p)
    p.add_argument("--train", help="training dataset CSV")

    p = sub.add_parser("eval", help="score trained models on a test dataset")
    common(p)
    p.add_argument("--test", help="test dataset CSV")
    p.add_argument("--models", help="directory holding the model files")

    p = sub.add_parser("bench", help="surrogate vs PDE-solver timing")
    common(p)
    p.add_argument("--test", help="test dataset CSV")
    p.add_argument("--models", help="directory holding the model files")
    p.add_argument("--grids", help="comma list of PDE grids (default 200x200,500x500,1000x1000)")
    p.add_argument("--budget-seconds", type=float, dest="budget_seconds",
                   help="PDE timing budget per grid (default 60)")

    p = sub.add_parser("sensitivity", help="one-at-a-time sweeps around the baselines")
    common(p)
    p.add_argument("--factors", help="comma list; empty string for none")
    p.add_argument("--points", type=int, help="sweep points per factor (default 50)")
    p.add_argument("--grid", help="PDE grid NxN (amput mode)")

    p = sub.add_parser("solve", help="price one option and export slices/heatmap")
    common(p)
    p.add_argument("--kind", choices=["put", "call"])
    p.add_argument("--style", choices=["american", "european"])
    p.add_argument("--strike", type=float)
    p.add_argument("--rate", type=float)
    p.add_argument("--spot", type=float)
    p.add_argument("--grid", help="PDE grid NxN")
    p.add_argument("--flat-variance", type=float, dest="flat_variance")
    p.add_argument("--surface", help="a_prime,b,rho,m,sigma,lambda")

    p = sub.add_parser("pipeline", help="gen -> train -> eval (-> bench) from one config")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", help="PDE grid NxN (amput)")
    p.add_argument("--jobs", type=int)
    p.add_argument("--train-count", type=int, dest="train_count")
    p.add_argument("--test-count", type=int, dest="test_count")
    p.add_argument("--budget-seconds", type=float, dest="budget_seconds")
    p.add_argument("--grids")

    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sensitivity": cmd_sensitivity,
    "solve": cmd_solve,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        result = _COMMANDS[args.command](_Settings(args))
    except (ParameterError, ButterflyArbitrageError, ConvergenceError, ValueError,
            OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
