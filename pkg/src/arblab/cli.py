"""Command-line front end.

Subcommands: inspect, simulate, estimate-u, solve-pde, strategy, backtest,
fichera, conditions.  Machine-readable JSON goes to stdout (sorted keys, no
timestamps, byte-reproducible for a fixed seed/config); logs and timing to
stderr; CSV only to files.

Seed precedence: --seed flag > config file > ARBLAB_SEED env var > 0.
Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import exitmc, models, pde, strategy as strat_mod
from .errors import NumericalError, ValidationError
from .models import ModelSpec
from .pde import GridSpec, PdeSolution
from .sde import SimConfig, simulate_auxiliary, simulate_market, simulate_weights

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "model": models.MODEL_SCHEMA,
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "scheme": {"type": "string",
                           "enum": ["euler", "full_truncation_euler"]},
                "hit_epsilon": {"type": "number", "exclusiveMinimum": 0},
                "record_stride": {"type": "integer", "minimum": 1},
            },
        },
        "mc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "paths": {"type": "integer", "minimum": 1},
                "method": {"type": "string",
                           "enum": ["exit", "deflated", "deflator", "all"]},
            },
        },
        "pde": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lower": {"type": "array", "items": {"type": "number"}},
                "upper": {"type": "array", "items": {"type": "number"}},
                "points_per_axis": {"type": "integer", "minimum": 16},
                "d_tau": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "backtest": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"type": "string"},
                "c": {"type": "number"},
                "p": {"type": "number"},
                "v0": {"type": "number", "exclusiveMinimum": 0},
                "arb_tol": {"type": "number", "minimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "csv": {"type": "string"},
                "json": {"type": "string"},
            },
        },
    },
}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(payload: dict, out_path: str = None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2, default=_jsonify)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _jsonify(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    import jsonschema

    with open(path) as fh:
        cfg = json.load(fh)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"config file invalid: {exc.message}") from exc
    return cfg


def _resolve_seed(args, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in cfg:
        return cfg["seed"]
    env = os.environ.get("ARBLAB_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ValidationError(f"ARBLAB_SEED is not an integer: {env!r}") from exc
    return 0


def _resolve_model(args, cfg: dict) -> ModelSpec:
    mcfg = dict(cfg.get("model", {}))
    if getattr(args, "model", None):
        mcfg["name"] = args.model
    if getattr(args, "zeta", None) is not None:
        mcfg["zeta"] = args.zeta
    if getattr(args, "n", None) is not None:
        mcfg["n"] = args.n
    if "name" not in mcfg:
        raise ValidationError("no model selected: pass --model or a config file")
    return models.from_config(mcfg)


def _resolve_x0(args, model: ModelSpec) -> np.ndarray:
    raw = getattr(args, "x0", None)
    if raw is None:
        return np.ones(model.n)
    vals = [float(v) for v in str(raw).split(",")]
    if len(vals) == 1 and model.n > 1:
        vals = vals * model.n
    return np.asarray(vals)


def _sim_config(args, cfg: dict, T: float, seed: int, *, scheme=None,
                record_stride=None) -> SimConfig:
    sim = cfg.get("sim", {})
    dt = getattr(args, "dt", None) or sim.get("dt")
    eps = getattr(args, "hit_epsilon", None) or sim.get("hit_epsilon")
    stride = record_stride if record_stride is not None else \
        (getattr(args, "record_stride", None) or sim.get("record_stride"))
    sch = scheme or getattr(args, "scheme", None) or sim.get("scheme")
    return SimConfig.for_horizon(
        T, dt=dt, seed=seed, scheme=sch or "euler",
        hit_epsilon=eps, record_stride=stride,
    )


def _default_scheme(model: ModelSpec) -> str:
    # square-root style coefficients want the positivity-preserving scheme
    return "full_truncation_euler" if model.name == "volstab" else "euler"


def _grid(args, cfg: dict, model: ModelSpec, x0, T: float) -> GridSpec:
    pcfg = cfg.get("pde", {})
    lower = getattr(args, "lower", None) or pcfg.get("lower")
    upper = getattr(args, "upper", None) or pcfg.get("upper")
    points = getattr(args, "points", None) or pcfg.get("points_per_axis")
    d_tau = getattr(args, "d_tau", None) or pcfg.get("d_tau")
    base = GridSpec.default_box(x0, T, points_per_axis=points, d_tau=d_tau)
    if lower is not None or upper is not None:
        lo = [float(v) for v in str(lower).split(",")] if isinstance(lower, str) else lower
        hi = [float(v) for v in str(upper).split(",")] if isinstance(upper, str) else upper
        lo = list(base.lower) if lo is None else (lo * model.n if len(lo) == 1 else lo)
        hi = list(base.upper) if hi is None else (hi * model.n if len(hi) == 1 else hi)
        base = GridSpec(n=model.n, lower=tuple(lo), upper=tuple(hi),
                        points_per_axis=base.points_per_axis,
                        d_tau=base.d_tau, horizon=T)
    return base


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_inspect(args, cfg, seed):
    model = _resolve_model(args, cfg)
    x0 = _resolve_x0(args, model)
    co = models.coefficients(model, x0)
    terms = models.deflator_terms(model, x0)
    rng_pts = np.random.default_rng(seed).uniform(0.2, 5.0, size=(256, model.n))
    validation = models.validate_model(model, rng_pts)
    payload = {
        "model": model.name,
        "n": model.n,
        "params": model.params,
        "x0": x0,
        "frak_b": co.frak_b,
        "frak_a": co.frak_a,
        "theta": co.theta,
        "H": terms["H"],
        "k": terms["k"],
        "g": terms["g"],
        "validation": validation,
    }
    _emit(payload, args.out)
    return 0


def _cmd_simulate(args, cfg, seed):
    model = _resolve_model(args, cfg)
    x0 = _resolve_x0(args, model)
    scfg = _sim_config(args, cfg, args.T, seed,
                       scheme=args.scheme or _default_scheme(model),
                       record_stride=args.record_stride)
    runner = {"market": simulate_market, "auxiliary": simulate_auxiliary,
              "weights": simulate_weights}[args.process]
    t0 = time.time()
    batch = runner(model, x0, args.T, args.paths, scfg, workers=args.workers)
    _log(f"simulated {args.paths} {args.process} paths in {time.time() - t0:.2f}s")
    csv_path = args.csv or cfg.get("output", {}).get("csv")
    if csv_path:
        batch.to_csv(csv_path)
        _log(f"paths written to {csv_path}")
    payload = {
        "process": args.process,
        "model": model.name,
        "n_paths": batch.n_paths,
        "horizon": args.T,
        "dt": scfg.dt,
        "n_steps": scfg.n_steps,
        "seed": seed,
        "hit_epsilon": batch.hit_epsilon,
        "hit_fraction": batch.hit_fraction(),
        "clamped_fraction": float(batch.clamped.mean()),
        "terminal_mean": batch.terminal.mean(axis=0),
        "initial_state": batch.states[0, 0],
    }
    _emit(payload, args.out)
    return 0


def _cmd_estimate_u(args, cfg, seed):
    model = _resolve_model(args, cfg)
    x0 = _resolve_x0(args, model)
    method = args.method or cfg.get("mc", {}).get("method", "all")
    paths = args.paths or cfg.get("mc", {}).get("paths", 10000)
    scfg = _sim_config(args, cfg, args.T, seed,
                       scheme=args.scheme or _default_scheme(model))
    t0 = time.time()
    if method == "all":
        payload = exitmc.estimate_all(model, x0, args.T, paths, scfg,
                                      workers=args.workers)
    else:
        fn = {"exit": exitmc.estimate_exit_probability,
              "deflated": exitmc.estimate_deflated_value,
              "deflator": exitmc.estimate_deflator_expectation}[method]
        payload = fn(model, x0, args.T, paths, scfg, workers=args.workers).to_dict()
    _log(f"estimate-u ({method}) done in {time.time() - t0:.2f}s")
    _emit(payload, args.out)
    return 0


def _cmd_solve_pde(args, cfg, seed):
    model = _resolve_model(args, cfg)
    x0 = _resolve_x0(args, model)
    t0 = time.time()
    if args.equation == "weights":
        eps = 1e-4
        grid = GridSpec(n=1, lower=(eps,), upper=(1 - eps,),
                        points_per_axis=args.points or 513,
                        d_tau=args.d_tau or args.T / 50.0, horizon=args.T)
        sol = pde.solve_weight_equation(model, grid)
        query_x = [float(x0[0] / x0.sum())]
    else:
        grid = _grid(args, cfg, model, x0, args.T)
        sol = pde.solve_min_solution(model, grid)
        query_x = x0
    _log(f"solve-pde ({args.equation}) done in {time.time() - t0:.2f}s")
    if args.export:
        sol.export(args.export + ".csv", args.export + ".json")
        _log(f"solution exported to {args.export}.csv/.json")
    payload = {
        "equation": args.equation,
        "model": model.name,
        "grid": sol.grid.to_dict(),
        "kind": sol.kind,
        "value_at_x0": sol.value_at(args.T, np.asarray(query_x)),
        "query_point": list(query_x),
        "max_clip": sol.max_clip,
        "diagnostic": pde.proposition2_diagnostic(sol),
    }
    _emit(payload, args.out)
    return 0


def _load_solution(prefix: str) -> PdeSolution:
    return PdeSolution.load(prefix + ".csv", prefix + ".json")


def _cmd_strategy(args, cfg, seed):
    model = _resolve_model(args, cfg)
    x0 = _resolve_x0(args, model)
    kind = args.kind
    if kind in ("optimal", "fgp"):
        if args.solution:
            sol = _load_solution(args.solution)
        elif kind == "optimal":
            sol = pde.solve_min_solution(model, _grid(args, cfg, model, x0, args.T))
        else:
            eps = 1e-4
            grid = GridSpec(n=1, lower=(eps,), upper=(1 - eps,),
                            points_per_axis=args.points or 513,
                            d_tau=args.d_tau or args.T / 50.0, horizon=args.T)
            sol = pde.solve_weight_equation(model, grid)
        if kind == "optimal":
            w = strat_mod.optimal_weights(sol, args.tau, x0)
        else:
            mu = x0 / x0.sum()
            w = strat_mod.fgp_weights(sol, args.tau, mu)
    else:
        mu = x0 / x0.sum()
        w = strat_mod.classical_weights(kind, mu, {"c": args.c, "p": args.p})
    payload = {
        "kind": kind,
        "model": model.name,
        "pi": w.pi,
        "cash": w.cash,
    }
    _emit(payload, args.out)
    return 0


def _cmd_backtest(args, cfg, seed):
    model = _resolve_model(args, cfg)
    x0 = _resolve_x0(args, model)
    bcfg = cfg.get("backtest", {})
    kind = args.strategy or bcfg.get("strategy", "market")
    scfg = _sim_config(args, cfg, args.T, seed,
                       scheme=args.scheme or _default_scheme(model),
                       record_stride=args.record_stride or 10)
    sol = None
    if kind == "optimal":
        if args.solution:
            sol = _load_solution(args.solution)
        else:
            sol = pde.solve_min_solution(model, _grid(args, cfg, model, x0, args.T))
        strategy = strat_mod.replicating_strategy(sol, args.T)
        v0 = args.v0 or float(sol.value_at(args.T, x0) * x0.sum())
    else:
        params = {}
        if args.c or bcfg.get("c"):
            params["c"] = args.c or bcfg.get("c")
        if args.p or bcfg.get("p"):
            params["p"] = args.p or bcfg.get("p")
        strategy = strat_mod.classical_strategy(kind, **params)
        v0 = args.v0 or bcfg.get("v0") or float(x0.sum())
    t0 = time.time()
    report = strat_mod.backtest(
        model, strategy, v0, args.T, args.paths, scfg,
        sol=sol if args.check_replication else None,
        arb_tol=args.arb_tol, x0=x0,
    )
    _log(f"backtest ({kind}) done in {time.time() - t0:.2f}s")
    csv_path = args.csv or cfg.get("output", {}).get("csv")
    if csv_path:
        report.to_csv(csv_path)
        _log(f"per-path wealth written to {csv_path}")
    payload = {"strategy": kind, "model": model.name, "v0": v0, "seed": seed,
               **report.to_dict()}
    _emit(payload, args.out)
    return 0


def _cmd_fichera(args, cfg, seed):
    model = _resolve_model(args, cfg)
    face = args.face
    if not (1 <= face <= model.n):
        raise ValidationError(f"--face must be in 1..{model.n}")
    rng_pts = np.random.default_rng(seed).uniform(0.2, 5.0, size=(args.samples, model.n))
    rng_pts[:, face - 1] = 0.0
    drifts = models.fichera_drifts(model, rng_pts)
    f = drifts["f"][:, face - 1]
    f_hat = drifts["f_hat"][:, face - 1]
    payload = {
        "model": model.name,
        "face": face,
        "n_samples": args.samples,
        "f_min": float(f.min()),
        "f_max": float(f.max()),
        "f_hat_min": float(f_hat.min()),
        "f_hat_max": float(f_hat.max()),
        "sign_pattern_f_positive": bool(np.all(f > 0)),
        "sign_pattern_f_hat_negative": bool(np.all(f_hat < 0)),
    }
    _emit(payload, args.out)
    return 0


def _cmd_conditions(args, cfg, seed):
    model = _resolve_model(args, cfg)
    pts = np.random.default_rng(seed).uniform(0.2, 5.0, size=(args.samples, model.n))
    report = models.check_arbitrage_conditions(model, pts, args.T)
    _emit(report.to_dict(), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arblab",
        description="Optimal-arbitrage laboratory: estimate u(T) three ways, "
                    "solve the minimal-solution PDE, synthesize and backtest "
                    "the replicating strategy.",
        epilog="Flag values override config-file values; the config file "
               "overrides the ARBLAB_SEED environment variable.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seedful=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--model", help="bessel3 | volstab | constant-coefficient name")
        p.add_argument("--zeta", type=float, help="volatility-stabilized exponent")
        p.add_argument("--n", type=int, help="number of assets")
        p.add_argument("--x0", help="comma-separated initial state (default all ones)")
        p.add_argument("--seed", type=int, help="base seed (highest precedence)")
        p.add_argument("--workers", type=int, default=1, help="worker-count hint")
        p.add_argument("--out", help="write stdout JSON to this file instead")

    p = sub.add_parser("inspect", help="model summary and validation report")
    common(p)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("simulate", help="simulate paths and optionally dump CSV")
    common(p)
    p.add_argument("--process", choices=["market", "auxiliary", "weights"],
                   default="market")
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--dt", type=float)
    p.add_argument("--scheme", choices=["euler", "full_truncation_euler"])
    p.add_argument("--hit-epsilon", dest="hit_epsilon", type=float)
    p.add_argument("--record-stride", dest="record_stride", type=int)
    p.add_argument("--csv", help="path dump (gzip when ending in .gz)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate-u", help="Monte Carlo estimators of u(T)")
    common(p)
    p.add_argument("--method", choices=["exit", "deflated", "deflator", "all"])
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--paths", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--scheme", choices=["euler", "full_truncation_euler"])
    p.add_argument("--hit-epsilon", dest="hit_epsilon", type=float)
    p.set_defaults(func=_cmd_estimate_u)

    p = sub.add_parser("solve-pde", help="minimal-solution PDE / weight equation")
    common(p)
    p.add_argument("--equation", choices=["orthant", "weights"], default="orthant")
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--points", type=int)
    p.add_argument("--d-tau", dest="d_tau", type=float)
    p.add_argument("--lower", help="comma-separated inner truncation")
    p.add_argument("--upper", help="comma-separated outer truncation")
    p.add_argument("--export", help="prefix for .csv/.json solution export")
    p.set_defaults(func=_cmd_solve_pde)

    p = sub.add_parser("strategy", help="portfolio weights at a point")
    common(p)
    p.add_argument("--kind", required=True,
                   choices=["optimal", "fgp", "market", "entropy", "ew_blend",
                            "diversity_p"])
    p.add_argument("--T", type=float, default=1.0, help="PDE horizon when solving")
    p.add_argument("--tau", type=float, default=1.0, help="remaining horizon")
    p.add_argument("--c", type=float, help="entropy / blend parameter")
    p.add_argument("--p", type=float, help="diversity exponent in (0,1)")
    p.add_argument("--points", type=int)
    p.add_argument("--d-tau", dest="d_tau", type=float)
    p.add_argument("--lower")
    p.add_argument("--upper")
    p.add_argument("--solution", help="prefix of an exported solution to load")
    p.set_defaults(func=_cmd_strategy)

    p = sub.add_parser("backtest", help="pathwise wealth vs the market")
    common(p)
    p.add_argument("--strategy", choices=["optimal", "market", "entropy",
                                          "ew_blend", "diversity_p"])
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--dt", type=float)
    p.add_argument("--scheme", choices=["euler", "full_truncation_euler"])
    p.add_argument("--hit-epsilon", dest="hit_epsilon", type=float)
    p.add_argument("--record-stride", dest="record_stride", type=int)
    p.add_argument("--v0", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--arb-tol", dest="arb_tol", type=float, default=0.0)
    p.add_argument("--check-replication", action="store_true")
    p.add_argument("--solution", help="prefix of an exported solution to load")
    p.add_argument("--points", type=int)
    p.add_argument("--d-tau", dest="d_tau", type=float)
    p.add_argument("--lower")
    p.add_argument("--upper")
    p.add_argument("--csv", help="per-path wealth CSV")
    p.set_defaults(func=_cmd_backtest)

    p = sub.add_parser("fichera", help="boundary drift signs on a face")
    common(p)
    p.add_argument("--face", type=int, required=True, help="1-based face index")
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(func=_cmd_fichera)

    p = sub.add_parser("conditions", help="sampled arbitrage-condition report")
    common(p)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--samples", type=int, default=256)
    p.set_defaults(func=_cmd_conditions)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        seed = _resolve_seed(args, cfg)
        return args.func(args, cfg, seed)
    except ValidationError as exc:
        _log(f"validation error: {exc}")
        return 2
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return 3
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
