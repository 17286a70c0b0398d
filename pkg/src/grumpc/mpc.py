"""Stabilizing NMPC with a simulated-tail terminal cost.

The finite-horizon problem penalizes ``N`` stage costs and, as terminal
cost, the ``S``-weighted deviation of ``M + 1`` further states obtained by
holding the equilibrium input.  Closed-loop stability follows when the
largest singular value of ``Q`` is below the smallest of ``S`` and ``M``
exceeds an explicit bound depending on the contraction constants
``(mu, lambda)`` of the model.

Inputs are the only decision variables once the dynamics are substituted
(single shooting), and the input set is a box, so each problem is solved by
L-BFGS-B from a few starting sequences.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .diff import _backward, _run, step_jacobians
from .gru import GruParams, InvariantBox, _check_vector, _forward, gate_bounds, simulate


class EquilibriumError(RuntimeError):
    pass


class EquilibriumNotConverged(EquilibriumError):
    pass


class AssumptionViolation(EquilibriumError):
    """The target output has no equilibrium strictly inside the state and input sets."""


class DesignConditionError(ValueError):
    def __init__(self, condition: str, message: str):
        super().__init__(f"{condition}: {message}")
        self.condition = condition


TERMINAL_WEIGHT = "terminal-weight condition"
SIMULATION_HORIZON = "simulation-horizon condition"


@dataclass(frozen=True, eq=False)
class EquilibriumTriple:
    x_bar: np.ndarray
    u_bar: np.ndarray
    y_bar: np.ndarray
    state_residual: float = 0.0
    output_residual: float = 0.0

    def to_dict(self) -> dict:
        return {"x_bar": self.x_bar.tolist(), "u_bar": self.u_bar.tolist(),
                "y_bar": self.y_bar.tolist(), "state_residual": self.state_residual,
                "output_residual": self.output_residual}


def _residual(p: GruParams, x, u, y_bar):
    return np.concatenate([x - _forward(p, x, u)[0], x @ p.U_o.T + p.b_o - y_bar])


def _converged(F, n: int, tol: float) -> bool:
    return np.max(np.abs(F[:n])) <= tol and np.max(np.abs(F[n:])) <= tol


def _settled_starts(p: GruParams, y_bar, u_lo, u_hi, per_axis: int = 21, tries: int = 5):
    """Constant-input grid points ranked by how close their settled output is to ``y_bar``."""
    per_axis = max(3, int(round(per_axis ** (1.0 / p.n_u))))
    axes = [np.linspace(lo, hi, per_axis + 2)[1:-1] for lo, hi in zip(u_lo, u_hi)]
    U = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p.n_u)
    X = simulate(p, np.zeros((len(U), p.n_x)), np.broadcast_to(U, (300,) + U.shape))[-1]
    gap = np.abs(X @ p.U_o.T + p.b_o - y_bar).max(axis=1)
    return [(X[i], U[i].copy()) for i in np.argsort(gap, kind="stable")[:tries]]


def _newton(p: GruParams, x, u, y_bar, tol_eq: float, max_iter: int):
    n = p.n_x
    F = _residual(p, x, u, y_bar)
    for _ in range(max_iter):
        if _converged(F, n, tol_eq):
            break
        A, B = step_jacobians(p, x, u)
        J = np.block([[np.eye(n) - A, -B], [p.U_o, np.zeros((p.n_y, p.n_u))]])
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -F, rcond=None)[0]
        norm0 = np.linalg.norm(F)
        alpha = 1.0
        while True:
            x_new, u_new = x + alpha * step[:n], u + alpha * step[n:]
            F_new = _residual(p, x_new, u_new, y_bar)
            if np.linalg.norm(F_new) < (1.0 - 1e-4 * alpha) * norm0 or alpha < 1e-8:
                break
            alpha *= 0.5
        x, u, F = x_new, u_new, F_new
    return x, u, F


def find_equilibrium(p: GruParams, y_bar, guess=None, tol_eq: float = 1e-10,
                     box: InvariantBox = InvariantBox(), u_bounds=(-1.0, 1.0),
                     max_iter: int = 100) -> EquilibriumTriple:
    """Damped Newton solve of ``x = phi(x, u)``, ``U_o x + b_o = y_bar`` for a square model."""
    if p.n_u != p.n_y:
        raise ValueError("equilibrium search needs as many inputs as outputs")
    y_bar = _check_vector(y_bar, p.n_y, "target output")
    u_lo, u_hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (p.n_u,)) for b in u_bounds)

    # at an equilibrium x = r, so every state entry is bounded by phi_r < 1
    _, _, phi_r = gate_bounds(p, box)
    reach = phi_r * np.abs(p.U_o).sum(axis=1)
    if np.any(np.abs(y_bar - p.b_o) >= reach):
        raise AssumptionViolation(
            f"target {y_bar.tolist()} lies outside the output image of the equilibrium set")

    if guess is not None:
        starts = [(_check_vector(guess[0], p.n_x, "state guess").copy(),
                   _check_vector(guess[1], p.n_u, "input guess").copy())]
    else:
        starts = _settled_starts(p, y_bar, u_lo, u_hi)
    for x, u in starts:
        x, u, F = _newton(p, x, u, y_bar, tol_eq, max_iter)
        if _converged(F, p.n_x, tol_eq):
            break
    else:
        raise EquilibriumNotConverged(
            f"Newton iteration stalled with residual {np.max(np.abs(F)):.3g}")

    n = p.n_x
    if not np.max(np.abs(x)) < box.x_check:
        raise AssumptionViolation("equilibrium state is not interior to the state box")
    if not (np.all(u > u_lo) and np.all(u < u_hi)):
        raise AssumptionViolation(
            f"equilibrium input {u.tolist()} is not interior to the input bounds")
    return EquilibriumTriple(x, u, x @ p.U_o.T + p.b_o,
                             float(np.max(np.abs(F[:n]))), float(np.max(np.abs(F[n:]))))


def _check_pd(M, name: str) -> np.ndarray:
    M = np.array(M, dtype=np.float64, ndmin=2)
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(M, M.T, rtol=1e-12, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if not np.all(np.linalg.eigvalsh(M) > 0):
        raise ValueError(f"{name} must be positive definite")
    return M


def _extreme_singular_values(M) -> tuple[float, float]:
    eig = np.linalg.eigvalsh(M)
    return float(eig[0]), float(eig[-1])


def check_weights(Q, S) -> tuple[bool, float]:
    """Whether the largest singular value of ``Q`` is strictly below the smallest of ``S``."""
    Q = _check_pd(Q, "Q")
    S = _check_pd(S, "S")
    margin = _extreme_singular_values(S)[0] - _extreme_singular_values(Q)[1]
    return margin > 0, margin


def simulation_horizon_bound(mu: float, lam: float, Q, S) -> float:
    """Real lower bound that the simulation horizon must strictly exceed."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"contraction rate must lie in (0, 1), got {lam}")
    ok, margin = check_weights(Q, S)
    if not ok:
        raise DesignConditionError(TERMINAL_WEIGHT, f"margin {margin:.6g} is not positive")
    s_max = _extreme_singular_values(np.asarray(S, dtype=np.float64))[1]
    ratio = margin / (mu ** 2 * s_max)
    return 0.5 * math.log(ratio) / math.log(lam) - 1.0


def min_simulation_horizon(mu: float, lam: float, Q, S) -> int:
    """Smallest nonnegative integer strictly above :func:`simulation_horizon_bound`."""
    return max(0, math.floor(simulation_horizon_bound(mu, lam, Q, S)) + 1)


def _as_weight(value, n: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr) * np.eye(n)
    if arr.ndim == 1:
        return np.diag(arr)
    return arr


@dataclass(frozen=True, eq=False)
class FhocpSpec:
    """Weights, horizons, input box, target and the contraction constants used to validate them.

    ``lam_source`` records where ``lam`` came from (``"certificate"`` or ``"empirical"``).
    """

    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    N: int
    M: int
    u_min: np.ndarray
    u_max: np.ndarray
    mu: float
    lam: float
    target: EquilibriumTriple | None = None
    lam_source: str = "certificate"

    def __post_init__(self):
        Q = _check_pd(self.Q, "Q")
        R = _check_pd(self.R, "R")
        S = _check_pd(self.S, "S")
        if Q.shape != S.shape:
            raise ValueError("Q and S must have the same size")
        u_min = np.array(self.u_min, dtype=np.float64, ndmin=1)
        u_max = np.array(self.u_max, dtype=np.float64, ndmin=1)
        if u_min.shape != (R.shape[0],) or u_max.shape != (R.shape[0],):
            u_min = np.broadcast_to(u_min, (R.shape[0],)).copy()
            u_max = np.broadcast_to(u_max, (R.shape[0],)).copy()
        if np.any(u_min < -1.0) or np.any(u_max > 1.0) or np.any(u_min >= u_max):
            raise ValueError("input bounds must be nonempty and contained in [-1, 1]")
        if int(self.N) < 1 or int(self.M) < 0:
            raise ValueError("need N >= 1 and M >= 0")
        for name, val in (("Q", Q), ("R", R), ("S", S), ("u_min", u_min), ("u_max", u_max)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "M", int(self.M))

        ok, margin = check_weights(Q, S)
        if not ok:
            raise DesignConditionError(
                TERMINAL_WEIGHT,
                f"largest singular value of Q must be below the smallest of S (margin {margin:.6g})")
        if not 0.0 < self.lam < 1.0:
            raise DesignConditionError(
                SIMULATION_HORIZON, f"contraction rate {self.lam} is not in (0, 1)")
        bound = simulation_horizon_bound(self.mu, self.lam, Q, S)
        if not self.M > bound:
            raise DesignConditionError(
                SIMULATION_HORIZON, f"M = {self.M} does not exceed the bound {bound:.6g}")

    @property
    def n_u(self) -> int:
        return self.R.shape[0]

    def with_target(self, target: EquilibriumTriple) -> "FhocpSpec":
        return replace(self, target=target)

    @classmethod
    def build(cls, n_x: int, n_u: int, *, Q=1.0, R=1.0, S=2.0, N: int, M: int,
              u_min=-1.0, u_max=1.0, mu: float, lam: float, target=None,
              lam_source: str = "certificate") -> "FhocpSpec":
        """Accepts scalar, diagonal-vector or full-matrix weights."""
        return cls(_as_weight(Q, n_x), _as_weight(R, n_u), _as_weight(S, n_x), N, M,
                   np.broadcast_to(np.asarray(u_min, dtype=np.float64), (n_u,)).copy(),
                   np.broadcast_to(np.asarray(u_max, dtype=np.float64), (n_u,)).copy(),
                   mu, lam, target, lam_source)

    def to_dict(self) -> dict:
        return {
            "Q": self.Q.tolist(), "R": self.R.tolist(), "S": self.S.tolist(),
            "N": self.N, "M": self.M, "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(), "mu": self.mu, "lambda": self.lam,
            "lambda_source": self.lam_source,
            "target": None if self.target is None else self.target.to_dict(),
        }


@dataclass(frozen=True)
class CostBreakdown:
    state: np.ndarray
    input: np.ndarray
    terminal: np.ndarray


@dataclass(frozen=True, eq=False)
class FhocpSolution:
    inputs: np.ndarray
    states: np.ndarray
    cost: float
    iterations: int = 0
    evaluations: int = 0
    pg_norm: float = 0.0
    wall_time: float = 0.0
    status: str = "converged"
    start: str = "warm"
    diagnostics: dict = field(default_factory=dict)


def _require_target(spec: FhocpSpec) -> EquilibriumTriple:
    if spec.target is None:
        raise ValueError("FHOCP specification has no target equilibrium")
    return spec.target


def fhocp_cost(p: GruParams, spec: FhocpSpec, x_hat, u_seq) -> tuple[float, CostBreakdown]:
    """Stage costs over the prediction horizon plus the simulated-tail terminal cost."""
    tgt = _require_target(spec)
    x_hat = _check_vector(x_hat, p.n_x, "state estimate")
    u_seq = _check_vector(u_seq, p.n_u, "input sequence")
    if u_seq.shape != (spec.N, p.n_u):
        raise ValueError(f"input sequence has shape {u_seq.shape}, expected {(spec.N, p.n_u)}")
    tape = _run(p, x_hat, _full_inputs(spec, u_seq), spec.N)
    dx = tape.states - tgt.x_bar
    du = u_seq - tgt.u_bar
    stage_x = np.einsum("ti,ij,tj->t", dx[:spec.N], spec.Q, dx[:spec.N])
    stage_u = np.einsum("ti,ij,tj->t", du, spec.R, du)
    terminal = np.einsum("ti,ij,tj->t", dx[spec.N:], spec.S, dx[spec.N:])
    total = float(stage_x.sum() + stage_u.sum() + terminal.sum())
    return total, CostBreakdown(stage_x, stage_u, terminal)


def _full_inputs(spec: FhocpSpec, u_seq: np.ndarray) -> np.ndarray:
    if spec.M == 0:
        return u_seq
    tail = np.broadcast_to(spec.target.u_bar, (spec.M, u_seq.shape[1]))
    return np.concatenate([u_seq, tail], axis=0)


class _Objective:
    """Single-shooting cost and gradient in the flattened input sequence."""

    def __init__(self, p: GruParams, spec: FhocpSpec, x_hat: np.ndarray):
        self.p, self.spec, self.x_hat = p, spec, x_hat
        tgt = spec.target
        self.x_bar, self.u_bar = tgt.x_bar, tgt.u_bar
        N = spec.N
        # stacked per-step state weights: Q for the stage, S for the tail
        self.W = np.concatenate([np.broadcast_to(spec.Q, (N,) + spec.Q.shape),
                                 np.broadcast_to(spec.S, (spec.M + 1,) + spec.S.shape)])
        self.tail = np.broadcast_to(self.u_bar, (spec.M, p.n_u))
        self.calls = 0

    def __call__(self, v: np.ndarray):
        self.calls += 1
        N, n_u = self.spec.N, self.p.n_u
        u = v.reshape(N, n_u)
        inputs = np.concatenate([u, self.tail], axis=0) if self.spec.M else u
        tape = _run(self.p, self.x_hat, inputs, N)
        dx = tape.states - self.x_bar
        Wdx = np.einsum("tij,tj->ti", self.W, dx)
        du = u - self.u_bar
        Rdu = du @ self.spec.R
        J = float(np.sum(dx * Wdx) + np.sum(du * Rdu))
        _, g_in, _ = _backward(tape, 2.0 * Wdx, want_weights=False)
        grad = g_in[:N] + 2.0 * Rdu
        return J, grad.ravel()


def _projected_gradient_norm(v, g, lo, hi) -> float:
    return float(np.max(np.abs(np.clip(v - g, lo, hi) - v), initial=0.0))


def solve_fhocp(p: GruParams, spec: FhocpSpec, x_hat, warm_start=None, previous_input=None,
                tol_opt: float = 1e-8, max_iter: int = 500, n_starts: int = 3) -> FhocpSolution:
    """Solve the finite-horizon problem from up to three starting sequences.

    Starts are the warm start (``u_bar`` repeated if absent), ``u_bar``
    repeated, and ``previous_input`` repeated.  The lowest cost wins; near
    ties go to the sequence closest to the warm start.
    """
    tgt = _require_target(spec)
    x_hat = _check_vector(x_hat, p.n_x, "state estimate")
    N, n_u = spec.N, p.n_u
    lo = np.tile(spec.u_min, N)
    hi = np.tile(spec.u_max, N)
    ubar_seq = np.tile(tgt.u_bar, N)
    if warm_start is None:
        warm = ubar_seq.copy()
    else:
        warm = _check_vector(warm_start, n_u, "warm start")
        if warm.shape != (N, n_u):
            raise ValueError(f"warm start has shape {warm.shape}, expected {(N, n_u)}")
        warm = warm.ravel()
    candidates = [("warm", np.clip(warm, lo, hi)), ("u_bar", np.clip(ubar_seq, lo, hi))]
    if previous_input is not None:
        prev = _check_vector(previous_input, n_u, "previous input")
        candidates.append(("previous", np.clip(np.tile(prev, N), lo, hi)))
    starts = []
    for name, v0 in candidates[:max(1, n_starts)]:
        if not any(np.array_equal(v0, s) for _, s in starts):
            starts.append((name, v0))

    t0 = time.perf_counter()
    obj = _Objective(p, spec, x_hat)
    results = []
    for name, v0 in starts:
        f0, g0 = obj(v0)
        best_v, best_f, best_g = v0, f0, g0
        nit, status = 0, "converged"
        if _projected_gradient_norm(v0, g0, lo, hi) > tol_opt:
            res = minimize(obj, v0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                           options={"maxiter": max_iter, "gtol": tol_opt, "ftol": 1e-15,
                                    "maxcor": 20})
            nit = int(res.nit)
            v = np.clip(res.x, lo, hi)
            if res.fun <= best_f:
                best_v, best_f, best_g = v, float(res.fun), res.jac
            if res.status == 1:
                status = "max-iter"
            elif _projected_gradient_norm(best_v, best_g, lo, hi) > tol_opt:
                status = "stalled"
        pg = _projected_gradient_norm(best_v, best_g, lo, hi)
        results.append((best_f, float(np.linalg.norm(best_v - warm)), name, best_v, pg, nit, status))

    best_cost = min(r[0] for r in results)
    tie = 1e-12 * max(1.0, abs(best_cost))
    cost, _, name, v, pg, nit, status = min(
        (r for r in results if r[0] <= best_cost + tie), key=lambda r: r[1])
    u = v.reshape(N, n_u)
    states = _run(p, x_hat, _full_inputs(spec, u), N).states
    wall = time.perf_counter() - t0
    return FhocpSolution(
        inputs=u, states=states, cost=float(cost), iterations=sum(r[5] for r in results),
        evaluations=obj.calls, pg_norm=pg, wall_time=wall, status=status, start=name,
        diagnostics={"start_costs": {r[2]: r[0] for r in results}},
    )


def shifted_warm_start(previous: FhocpSolution, u_bar) -> np.ndarray:
    """Previous optimum shifted by one step and padded with the equilibrium input."""
    return np.concatenate([previous.inputs[1:], np.asarray(u_bar, dtype=np.float64)[None, :]])


def mpc_step(p: GruParams, spec: FhocpSpec, x_hat, previous: FhocpSolution | None = None,
             **solver_options) -> tuple[np.ndarray, FhocpSolution]:
    """Receding-horizon control: solve warm-started and return the first optimal input."""
    tgt = _require_target(spec)
    if previous is None or previous.inputs.shape != (spec.N, p.n_u):
        warm, prev_u = None, None
    else:
        warm = np.clip(shifted_warm_start(previous, tgt.u_bar), spec.u_min, spec.u_max)
        prev_u = previous.inputs[0]
    sol = solve_fhocp(p, spec, x_hat, warm_start=warm, previous_input=prev_u, **solver_options)
    return sol.inputs[0].copy(), sol
