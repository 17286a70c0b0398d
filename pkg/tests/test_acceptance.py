"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS`` or ``FAIL`` line with the measured numbers
before asserting, so ``pytest -v`` output doubles as a run report.
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from grumpc.diff import fd_check, grad_wrt_inputs, grad_wrt_weights, rollout
from grumpc.estimation import TrajectoryPairConfig, estimate_lambda
from grumpc.gru import GruParams, deltaiss_certificate, gate_bounds, gru_output, gru_step, simulate
from grumpc.gru import random_gru
from grumpc.harness import run_closed_loop
from grumpc.mpc import (FhocpSpec, find_equilibrium, min_simulation_horizon, mpc_step,
                        simulation_horizon_bound, solve_fhocp)
from grumpc.observer import observer_step, tune_observer
from grumpc.plants import GruEchoPlant

from conftest import ACCEPTANCE_LINES
from helpers import certified_gru, tiny_observer_gru
from test_mpc import grid_optimum
from test_observer import kappa_o_batch

ROOT = Path(__file__).resolve().parents[1]

# relative slack for comparisons of a floating-point rollout against an exact bound
FP_REL = 1e-12
FP_ABS = 1e-15


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def soundness_models():
    rng = np.random.default_rng(2024)
    return [certified_gru(n_x, rng=rng, lam_max=rate)
            for n_x, rate in [(1, 0.9), (2, 0.95), (3, 0.99), (5, 0.97), (7, 0.995), (7, 0.9)]]


def steady_output(p, u, steps=3000):
    return gru_output(p, simulate(p, np.zeros(p.n_x), np.full((steps, p.n_u), u))[-1])


def test_c1_certificate_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, violations = 0.0, 0
    models = soundness_models()
    for p in models:
        cert = deltaiss_certificate(p)
        x = rng.uniform(-1, 1, (1000, p.n_x))
        xp = rng.uniform(-1, 1, (1000, p.n_x))
        d0 = np.linalg.norm(x - xp, axis=1)
        for k in range(1, 101):
            u = rng.uniform(-1, 1, (1000, p.n_u))
            x, xp = gru_step(p, x, u), gru_step(p, xp, u)
            bound = cert.mu * cert.lam ** k * d0
            dk = np.linalg.norm(x - xp, axis=1)
            violations += int(np.sum(dk > bound * (1 + FP_REL) + FP_ABS))
            worst = max(worst, float(np.max(dk / bound)))
    elapsed = time.perf_counter() - t0
    report(1, violations == 0 and elapsed < 60 and len(models) >= 5,
           f"{len(models)} models, 1000 pairs x 100 steps, violations={violations}, "
           f"max distance/bound={worst:.4f}, {elapsed:.1f}s")


def test_c2_empirical_rate_below_certificate():
    rows = []
    for p in soundness_models():
        lam_hat = estimate_lambda(p, TrajectoryPairConfig(n_pairs=10_000, T=300, seed=0))
        rows.append((p.n_x, lam_hat, deltaiss_certificate(p).lam))
    ok = all(h <= c for _, h, c in rows)
    report(2, ok, "; ".join(f"n_x={n} lam_hat={h:.4f} <= lam={c:.4f}" for n, h, c in rows))


def test_c3_simulation_horizon_spot_checks():
    I = np.eye(7)
    mu = math.sqrt(7)
    b1 = simulation_horizon_bound(mu, 0.997, I, 2 * I)
    b2 = simulation_horizon_bound(mu, 0.9, I, 2 * I)
    # by hand: (min eig S - max eig Q) / (mu^2 max eig S) = (2 - 1) / (7 * 2)
    e1 = math.log(1 / 14) / (2 * math.log(0.997)) - 1
    e2 = math.log(1 / 14) / (2 * math.log(0.9)) - 1
    m1 = min_simulation_horizon(mu, 0.997, I, 2 * I)
    m2 = min_simulation_horizon(mu, 0.9, I, 2 * I)
    ok = abs(b1 - e1) < 1e-9 and abs(b2 - e2) < 1e-9 and m1 == 439 and m2 == 12
    report(3, ok, f"lam=0.997: bound={b1:.4f} M={m1} (published 440, within 1); "
                  f"lam=0.9: bound={b2:.4f} M={m2} (published 15 does not follow from the formula)")


def test_c4_observer_tuning():
    rng = np.random.default_rng(4)
    dominated = beaten = 0
    n_models = 20
    for i in range(n_models):
        n_x = int(rng.integers(1, 8))
        n_y = int(rng.integers(1, 3))
        p = certified_gru(n_x, 1, n_y, rng=rng, lam_max=float(rng.uniform(0.8, 0.99)))
        d = tune_observer(p)
        cert = deltaiss_certificate(p)
        dominated += d.lambda_o <= cert.lam
        scale = 2 * max(np.abs(p.U_z).max(), np.abs(p.U_f).max()) / np.abs(p.U_o).max()
        Lz = rng.uniform(-scale, scale, (10_000, n_x, n_y))
        Lf = rng.uniform(-scale, scale, (10_000, n_x, n_y))
        sz = cert.sigma_z
        best = np.maximum(kappa_o_batch(p, Lz, Lf, sz), kappa_o_batch(p, Lz, Lf, 1 - sz)).min()
        beaten += d.lambda_o <= best
    tiny = tiny_observer_gru()
    d = tune_observer(tiny)
    grid = np.arange(-2000, 2001) * 1e-3
    Lz, Lf = (g.reshape(-1, 1, 1) for g in np.meshgrid(grid, grid, indexing="ij"))
    sz = deltaiss_certificate(tiny).sigma_z
    grid_best = np.maximum(kappa_o_batch(tiny, Lz, Lf, sz), kappa_o_batch(tiny, Lz, Lf, 1 - sz)).min()
    gap = abs(d.lambda_o - grid_best)
    ok = dominated == n_models and beaten == n_models and gap <= 1e-3
    report(4, ok, f"{dominated}/{n_models} dominate open loop, {beaten}/{n_models} beat 1e4 "
                  f"random gains, tiny instance lambda_o={d.lambda_o:.6f} vs grid {grid_best:.6f}")


def test_c5_observer_contraction():
    rng = np.random.default_rng(5)
    violations, worst, runs = 0, 0.0, 0
    for n_x in (2, 4, 7):
        p = certified_gru(n_x, rng=rng)
        d = tune_observer(p)
        x = rng.uniform(-1, 1, (1000, n_x))
        xh = rng.uniform(-1, 1, (1000, n_x))
        for _ in range(50):
            u = rng.uniform(-1, 1, (1000, 1))
            err = np.abs(x - xh).max(axis=1)
            x, xh = gru_step(p, x, u), observer_step(p, d.gains, xh, u, gru_output(p, x))
            new = np.abs(x - xh).max(axis=1)
            violations += int(np.sum(new > d.lambda_o * err * (1 + FP_REL) + FP_ABS))
            live = err > 1e-9  # below this the ratio is rounding noise
            if live.any():
                worst = max(worst, float(np.max(new[live] / err[live] / d.lambda_o)))
        runs += 1000
    report(5, violations == 0, f"{runs} runs x 50 steps, violations={violations}, "
                               f"max ratio/lambda_o={worst:.4f} (errors above 1e-9)")


def test_c6_nominal_closed_loop():
    tol = 1e-8
    p = certified_gru(4, rng=6, lam_max=0.9)
    cert = deltaiss_certificate(p)
    I = np.eye(4)
    M = min_simulation_horizon(cert.mu, cert.lam, I, 2 * I)
    spec = FhocpSpec.build(4, 1, Q=1.0, R=0.25, S=2.0, N=10, M=M, mu=cert.mu, lam=cert.lam)
    levels = [steady_output(p, u) for u in (-0.4, 0.2, 0.6)]
    ref = [(0, levels[0]), (70, levels[1]), (140, levels[2])]
    x0 = np.full(4, 0.3)
    trace = run_closed_loop(GruEchoPlant(p), p, tune_observer(p), spec, ref, steps=200,
                            x0=x0, x_hat0=x0, tol_opt=tol)
    _, _, phi_r = gate_bounds(p)
    span = 2 * phi_r * np.abs(p.U_o).sum()
    worst_decrease = -np.inf
    terminal = []
    for (start, target), stop in zip(trace.targets, [70, 140, 200]):
        d = trace.x[start:stop] - target.x_bar
        stage = np.einsum("ti,ij,tj->t", d, spec.Q, d)
        slack = np.diff(trace.cost[start:stop]) + stage[:-1]
        worst_decrease = max(worst_decrease, float(slack.max()))
        terminal.append(float(abs(trace.y[stop - 1] - target.y_bar).max() / span))
    ok = worst_decrease <= 10 * tol and max(terminal) <= 1e-3
    report(6, ok, f"3 levels, 200 steps, M={M}, max(dJ + stage)={worst_decrease:.3g} "
                  f"(allowed {10 * tol:g}), terminal errors/span="
                  + ", ".join(f"{e:.2g}" for e in terminal))


def test_c7_gradient_correctness():
    rng = np.random.default_rng(7)
    errors = []
    for i in range(50):
        n_x, n_u = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        T = int(rng.integers(1, 30))
        p = random_gru(n_x, n_u, 1, rng, scale=float(rng.uniform(0.3, 1.0)))
        x0 = rng.uniform(-1, 1, n_x)
        u = rng.uniform(-1, 1, (T, n_u))
        target = rng.standard_normal((T + 1, 1))
        if i % 2:
            W = rng.uniform(0.5, 2, (T + 1, n_x))
            _, tape = rollout(p, x0, u)
            g = grad_wrt_inputs(tape, 2 * W * tape.states)
            f = lambda v: float(np.sum(W * rollout(p, x0, v)[0] ** 2))
            errors.append(fd_check(f, u, g))
        else:
            _, tape = rollout(p, x0, u)
            g = grad_wrt_weights(tape, output_grads=2 * (gru_output(p, tape.states) - target))

            def f(v):
                q = GruParams.unflatten(v, n_x, n_u, 1)
                return float(np.sum((gru_output(q, simulate(q, x0, u)) - target) ** 2))
            errors.append(fd_check(f, p.flatten(), g.flatten()))
    worst = max(errors)
    report(7, worst < 1e-5, f"50 instances (inputs and weights), max relative error={worst:.2e}")


def test_c8_two_step_grid():
    rng = np.random.default_rng(8)
    gaps = []
    for _ in range(5):
        p = certified_gru(2, rng=rng, lam_max=0.8)
        cert = deltaiss_certificate(p)
        M = min_simulation_horizon(cert.mu, cert.lam, np.eye(2), 2 * np.eye(2))
        spec = FhocpSpec.build(2, 1, Q=1.0, R=0.25, S=2.0, N=2, M=M, mu=cert.mu, lam=cert.lam)
        spec = spec.with_target(find_equilibrium(p, steady_output(p, rng.uniform(-0.5, 0.5))))
        x0 = rng.uniform(-1, 1, 2)
        gaps.append(solve_fhocp(p, spec, x0).cost - grid_optimum(p, spec, x0))
    ok = all(abs(g) <= 1e-3 for g in gaps)
    report(8, ok, "solver minus grid cost: " + ", ".join(f"{g:.2e}" for g in gaps))


def test_c9_step_time():
    p = certified_gru(7, rng=9, lam_max=0.9)
    cert = deltaiss_certificate(p)
    I = np.eye(7)
    bound = simulation_horizon_bound(cert.mu, cert.lam, I, 2 * I)
    spec = FhocpSpec.build(7, 1, Q=1.0, R=0.25, S=2.0, N=20, M=20, mu=cert.mu, lam=cert.lam)
    spec = spec.with_target(find_equilibrium(p, steady_output(p, 0.5)))
    x = np.random.default_rng(9).uniform(-1, 1, 7)
    times, sol = [], None
    for _ in range(30):
        t0 = time.perf_counter()
        u, sol = mpc_step(p, spec, x, previous=sol)
        times.append(time.perf_counter() - t0)
        x = gru_step(p, x, u)
    ok = bound < 20 and max(times) < 1.0
    report(9, ok, f"n_x=7 N=M=20 (bound {bound:.2f}), max step {max(times) * 1e3:.0f} ms, "
                  f"mean {np.mean(times) * 1e3:.0f} ms over 30 steps")


def test_c10_surrogate_pipeline(tmp_path):
    env = dict(os.environ)
    env["PATH"] = str(Path(sys.executable).parent) + os.pathsep + env.get("PATH", "")
    t0 = time.perf_counter()
    proc = subprocess.run(["bash", str(ROOT / "scripts" / "surrogate_pipeline.sh"), str(tmp_path)],
                          env=env, capture_output=True, text=True, timeout=1200)
    elapsed = time.perf_counter() - t0
    detail = f"exit {proc.returncode} after {elapsed:.0f}s"
    ok = proc.returncode == 0
    if ok:
        student = json.loads((tmp_path / "student_report.json").read_text())
        model = json.loads((tmp_path / "model_report.json").read_text())
        man = json.loads((tmp_path / "manifest.json").read_text())
        worst = man["worst_relative_steady_error"]
        ok = (student["relative_mse"] < 1e-4 and model["certified"] and worst < 0.01
              and man["design"]["M_ok"] and (tmp_path / "trace.svg").exists())
        detail += (f", self-identification relative MSE={student['relative_mse']:.2e}, "
                   f"plant model lambda={model['lambda']:.5f}, M={man['spec']['M']}, "
                   f"worst steady error/span={worst:.4f}")
    else:
        detail += ": " + proc.stderr.strip().splitlines()[-1] if proc.stderr.strip() else ""
    report(10, ok, detail)
