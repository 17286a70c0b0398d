"""Command line entry point: ``grumpc <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .estimation import (Normalization, TrainConfig, TrajectoryPairConfig, estimate_lambda,
                         generate_excitation, normalize_dataset, read_episode_csv, train_gru,
                         write_episode_csv)
from .gru import (InvariantBox, deltaiss_certificate, gate_bounds, load_gru,
                  random_certified_gru, save_gru)
from .harness import run_closed_loop, steady_state_errors
from .mpc import (DesignConditionError, FhocpSpec, _as_weight, check_weights,
                  min_simulation_horizon, simulation_horizon_bound)
from .observer import load_observer, save_observer, tune_observer
from .plants import make_plant

log = logging.getLogger("grumpc")


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def _weight_arg(text: str):
    return json.loads(text)


def cmd_random_model(args) -> int:
    p = random_certified_gru(args.n_x, args.n_u, args.n_y, args.seed, rate=args.rate)
    save_gru(p, args.out)
    _print({"out": str(args.out), "lambda": deltaiss_certificate(p).lam})
    return 0


def cmd_certify(args) -> int:
    p = load_gru(args.model)
    cert = deltaiss_certificate(p, InvariantBox(args.x_check))
    _print(cert.to_dict())
    return 0 if cert.certified else 1


def cmd_tune_observer(args) -> int:
    p = load_gru(args.model)
    design = tune_observer(p, InvariantBox(args.x_check))
    if args.out:
        save_observer(design, args.out)
    _print({"lambda_o": design.lambda_o, "kappa_o_upper": design.kappa_upper,
            "kappa_o_lower": design.kappa_lower,
            "lambda_open_loop": deltaiss_certificate(p, InvariantBox(args.x_check)).lam})
    return 0


def cmd_estimate_lambda(args) -> int:
    p = load_gru(args.model)
    cfg = TrajectoryPairConfig(n_pairs=args.pairs, T=args.horizon, mu=args.mu, seed=args.seed,
                               x_check=args.x_check)
    t0 = time.perf_counter()
    lam_hat = estimate_lambda(p, cfg)
    _print({"lambda_hat": lam_hat, "mu": args.mu if args.mu else math.sqrt(p.n_x),
            "pairs": args.pairs, "T": args.horizon, "seed": args.seed,
            "lambda_certificate": deltaiss_certificate(p, InvariantBox(args.x_check)).lam,
            "seconds": time.perf_counter() - t0})
    return 0


def _design_report(mu: float, lam: float, Q, S, M=None) -> dict:
    ok, margin = check_weights(Q, S)
    report = {"mu": mu, "lambda": lam, "weights_ok": ok, "weight_margin": margin}
    if ok and 0.0 < lam < 1.0:
        report["horizon_bound"] = simulation_horizon_bound(mu, lam, Q, S)
        report["min_M"] = min_simulation_horizon(mu, lam, Q, S)
        if M is not None:
            report["M"] = M
            report["M_ok"] = M > report["horizon_bound"]
    return report


def cmd_design_mpc(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        exp = prepare_experiment(cfg)
        report = dict(exp["design"])
        report["spec"] = exp["spec"].to_dict()
        _print(report)
        return 0
    if args.lam is None or (args.mu is None and args.n_x is None):
        raise SystemExit("design-mpc needs --config or --lam with --mu or --n-x")
    n_x = args.n_x or 1
    mu = args.mu if args.mu is not None else math.sqrt(args.n_x)
    Q, S = _as_weight(args.Q, n_x), _as_weight(args.S, n_x)
    report = _design_report(mu, args.lam, Q, S, args.M)
    _print(report)
    return 0 if report["weights_ok"] and report.get("M_ok", True) else 1


def cmd_generate_data(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.plant == "gru-echo":
        if not args.model:
            raise SystemExit("gru-echo data needs --model")
        plant = make_plant("gru-echo", load_gru(args.model))
    else:
        plant = make_plant("surrogate")
    files = []
    for e in range(args.episodes):
        u = generate_excitation(args.kind, args.length, plant.n_u, seed=[args.seed, e],
                                min_hold=args.min_hold, max_hold=args.max_hold)
        x = plant.initial_state()
        ys = []
        for k in range(args.length):
            ys.append(plant.measure(x))
            x = plant.step(x, u[k])
        path = out / f"episode_{e:03d}.csv"
        write_episode_csv(path, u, np.array(ys))
        files.append(str(path))
    _print({"files": files})
    return 0


def cmd_train(args) -> int:
    raw = []
    for path in args.data:
        _, u, y = read_episode_csv(path)
        raw.append((u, y))
    dataset = normalize_dataset(raw)
    cfg = TrainConfig(learning_rate=args.learning_rate, epochs=args.epochs,
                      truncation=args.truncation, washout=args.washout, penalty=args.penalty,
                      lambda_target=args.lambda_target, optimizer=args.optimizer)
    t0 = time.perf_counter()
    p, report = train_gru(dataset, args.n_x, cfg, seed=args.seed)
    save_gru(p, args.out)
    if args.normalization_out:
        dataset.scaling.save(args.normalization_out)
    summary = report.to_dict()
    summary["seconds"] = time.perf_counter() - t0
    if args.report_out:
        Path(args.report_out).write_text(json.dumps(summary, indent=2))
    _print(summary)
    if report.diverged:
        return 1
    if args.max_relative_mse is not None and not report.relative_mse < args.max_relative_mse:
        log.error("relative MSE %.3g is not below %.3g", report.relative_mse, args.max_relative_mse)
        return 1
    if args.require_certified and not report.certified:
        log.error("trained model is not certified")
        return 1
    return 0


def _output_span(p, box, scaling: Normalization | None) -> np.ndarray:
    """Width of the output range per channel in model units.

    With a normalization the training range maps to ``[-1, 1]``; otherwise the
    range of equilibrium outputs ``|y - b_o| < phi_r * sum|U_o|`` is used.
    """
    if scaling is not None:
        return np.full(p.n_y, 2.0)
    _, _, phi_r = gate_bounds(p, box)
    return 2.0 * phi_r * np.abs(p.U_o).sum(axis=1)


def prepare_experiment(cfg: ExperimentConfig) -> dict:
    """Load the model, observer and normalization and build the validated controller spec."""
    p = load_gru(cfg.model.weights)
    box = InvariantBox(cfg.model.x_check)
    scaling = Normalization.load(cfg.model.normalization) if cfg.model.normalization else None
    cert = deltaiss_certificate(p, box)
    if cfg.observer_gains is not None:
        design = load_observer(cfg.observer_gains, p, box)
    else:
        design = tune_observer(p, box)

    mc = cfg.mpc
    mu = math.sqrt(p.n_x)
    lam_hat = None
    if mc.lam == "certificate":
        lam, source = cert.lam, "certificate"
    elif mc.lam == "empirical":
        lam_hat = estimate_lambda(p, TrajectoryPairConfig(n_pairs=mc.empirical_pairs,
                                                          T=mc.empirical_T, mu=mu,
                                                          seed=cfg.seed, x_check=box.x_check))
        lam, source = lam_hat, "empirical"
    else:
        lam, source = float(mc.lam), "given"
    Q, R, S = _as_weight(mc.Q, p.n_x), _as_weight(mc.R, p.n_u), _as_weight(mc.S, p.n_x)
    design_report = _design_report(mu, lam, Q, S)
    if not design_report["weights_ok"]:
        raise DesignConditionError("terminal-weight condition",
                                   f"margin {design_report['weight_margin']:.6g}")
    M = design_report["min_M"] if mc.M == "auto" else int(mc.M)
    design_report.update(M=M, M_ok=M > design_report["horizon_bound"], lambda_source=source,
                         lambda_certificate=cert.lam, lambda_empirical=lam_hat)
    spec = FhocpSpec.build(p.n_x, p.n_u, Q=Q, R=R, S=S, N=mc.N, M=M, u_min=mc.u_min,
                           u_max=mc.u_max, mu=mu, lam=lam, lam_source=source)

    reference = []
    for k, v in cfg.reference:
        v = np.atleast_1d(np.asarray(v, dtype=np.float64))
        if cfg.reference_units == "raw":
            if scaling is None:
                raise ValueError("raw-unit references need a normalization file")
            v = scaling.normalize_outputs(v)
        reference.append((k, v))
    plant = make_plant(cfg.plant_kind, params=p, scaling=scaling, **cfg.plant_options)
    return {"params": p, "box": box, "scaling": scaling, "certificate": cert,
            "observer": design, "spec": spec, "design": design_report,
            "reference": reference, "plant": plant,
            "output_span": _output_span(p, box, scaling)}


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    exp = prepare_experiment(cfg)
    p = exp["params"]
    x0 = x_hat0 = None
    if cfg.plant_kind == "gru-echo":
        x0 = x_hat0 = np.zeros(p.n_x)
    t0 = time.perf_counter()
    trace = run_closed_loop(exp["plant"], p, exp["observer"], exp["spec"], exp["reference"],
                            noise_sigma=cfg.noise_sigma, steps=cfg.steps, seed=cfg.seed,
                            x0=x0, x_hat0=x_hat0, box=exp["box"], tol_opt=cfg.mpc.tol_opt,
                            max_iter=cfg.mpc.max_iter)
    elapsed = time.perf_counter() - t0
    trace.to_csv(args.trace)
    span = exp["output_span"]
    levels = steady_state_errors(trace, cfg.settle_window)
    for lv in levels:
        lv["relative_error"] = (np.asarray(lv["error"]) / span).tolist()
    worst = max(max(lv["relative_error"]) for lv in levels)
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "certificate": exp["certificate"].to_dict(),
        "observer": exp["observer"].to_dict(),
        "design": exp["design"],
        "spec": exp["spec"].to_dict(),
        "output_span": span.tolist(),
        "steady_state": levels,
        "worst_relative_steady_error": worst,
        "targets": [{"step": k, **t.to_dict()} for k, t in trace.targets],
        "solver": {"status_counts": {s: trace.status.count(s) for s in sorted(set(trace.status))},
                   "max_solve_time": float(trace.solve_time.max()),
                   "mean_solve_time": float(trace.solve_time.mean())},
        "seconds": elapsed,
        "trace": str(args.trace),
    }
    if args.manifest:
        Path(args.manifest).write_text(json.dumps(manifest, indent=2))
    if args.plot:
        from .plotting import plot_trace
        plot_trace(trace, args.plot, (float(np.min(exp["spec"].u_min)),
                                      float(np.max(exp["spec"].u_max))))
    _print({"steady_state": levels, "worst_relative_steady_error": worst,
            "lambda_source": exp["design"]["lambda_source"], "M": exp["spec"].M})
    if args.max_steady_error is not None and not worst < args.max_steady_error:
        log.error("steady-state error %.3g of span exceeds %.3g", worst, args.max_steady_error)
        return 1
    return 0


def cmd_plot(args) -> int:
    from .harness import ClosedLoopTrace
    from .plotting import plot_trace
    plot_trace(ClosedLoopTrace.from_csv(args.trace), args.out, title=args.title)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grumpc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("random-model", help="random model with a prescribed certified rate")
    s.add_argument("--n-x", type=int, required=True)
    s.add_argument("--n-u", type=int, default=1)
    s.add_argument("--n-y", type=int, default=1)
    s.add_argument("--rate", type=float, default=0.95)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_random_model)

    s = sub.add_parser("certify", help="incremental-stability certificate of a model")
    s.add_argument("model")
    s.add_argument("--x-check", type=float, default=1.0)
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("tune-observer", help="optimal observer gains")
    s.add_argument("model")
    s.add_argument("--out")
    s.add_argument("--x-check", type=float, default=1.0)
    s.set_defaults(func=cmd_tune_observer)

    s = sub.add_parser("estimate-lambda", help="empirical contraction rate from trajectory pairs")
    s.add_argument("model")
    s.add_argument("--pairs", type=int, default=10000)
    s.add_argument("--horizon", type=int, default=300)
    s.add_argument("--mu", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--x-check", type=float, default=1.0)
    s.set_defaults(func=cmd_estimate_lambda)

    s = sub.add_parser("design-mpc", help="check terminal weights and the minimum simulation horizon")
    s.add_argument("--config")
    s.add_argument("--mu", type=float)
    s.add_argument("--n-x", type=int)
    s.add_argument("--lam", type=float)
    s.add_argument("--Q", type=_weight_arg, default=1.0, help="scalar, JSON list or JSON matrix")
    s.add_argument("--S", type=_weight_arg, default=2.0)
    s.add_argument("--M", type=int)
    s.set_defaults(func=cmd_design_mpc)

    s = sub.add_parser("generate-data", help="excite a plant and write episode CSV files")
    s.add_argument("--plant", choices=("surrogate", "gru-echo"), default="surrogate")
    s.add_argument("--model")
    s.add_argument("--episodes", type=int, default=10)
    s.add_argument("--length", type=int, default=600)
    s.add_argument("--kind", choices=("random-steps", "multisine"), default="random-steps")
    s.add_argument("--min-hold", type=int, default=5)
    s.add_argument("--max-hold", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_generate_data)

    s = sub.add_parser("train", help="fit a model to episode CSV files")
    s.add_argument("data", nargs="+")
    s.add_argument("--n-x", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--normalization-out")
    s.add_argument("--report-out")
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--learning-rate", type=float, default=1e-2)
    s.add_argument("--truncation", type=int, default=50)
    s.add_argument("--washout", type=int, default=20)
    s.add_argument("--penalty", type=float, default=0.0)
    s.add_argument("--lambda-target", type=float, default=0.99)
    s.add_argument("--optimizer", choices=("lbfgs", "momentum", "adam"), default="lbfgs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-relative-mse", type=float)
    s.add_argument("--require-certified", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="closed-loop run from an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--manifest")
    s.add_argument("--plot")
    s.add_argument("--max-steady-error", type=float,
                   help="fail unless every level settles within this fraction of the output span")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("plot", help="SVG figure from a trace CSV")
    s.add_argument("trace")
    s.add_argument("--out", required=True)
    s.add_argument("--title")
    s.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
