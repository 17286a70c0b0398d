"""Closed-loop simulation: plant, observer and receding-horizon controller.

Each step measures the plant, computes the control from the current state
estimate, advances the plant and then feeds ``(u_k, y_k)`` to the observer.
Only the target equilibrium is recomputed when the reference changes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .gru import GruParams, InvariantBox, _check_vector
from .mpc import EquilibriumError, FhocpSpec, find_equilibrium, mpc_step
from .observer import ObserverDesign, observer_step
from .plants import GruEchoPlant, PlantInterface, add_measurement_noise

log = logging.getLogger(__name__)


class ClosedLoopError(RuntimeError):
    pass


def _schedule(reference, n_y: int) -> list[tuple[int, np.ndarray]]:
    """Sorted ``(start_step, value)`` pairs; a bare value means a constant reference."""
    if isinstance(reference, (int, float, np.ndarray)) or (
            isinstance(reference, (list, tuple)) and reference
            and not isinstance(reference[0], (list, tuple))):
        reference = [(0, reference)]
    pairs = sorted(((int(k), _check_vector(np.atleast_1d(v), n_y, "reference value"))
                    for k, v in reference), key=lambda kv: kv[0])
    if not pairs or pairs[0][0] > 0:
        raise ValueError("reference schedule must start at step 0")
    return pairs


def reference_at(schedule, k: int) -> np.ndarray:
    value = schedule[0][1]
    for start, v in schedule:
        if start > k:
            break
        value = v
    return value


@dataclass
class ClosedLoopTrace:
    """Per-step log of a closed-loop run; every array is indexed by step."""

    k: np.ndarray
    y: np.ndarray
    y_ref: np.ndarray
    u: np.ndarray
    x: np.ndarray
    x_hat: np.ndarray
    est_error: np.ndarray
    cost: np.ndarray
    solve_time: np.ndarray
    status: list = field(default_factory=list)
    targets: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.k)
        for name in ("y", "y_ref", "u", "x", "x_hat", "est_error", "cost", "solve_time"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"trace column {name} has the wrong length")
        if n and np.any(np.diff(self.k) <= 0):
            raise ValueError("trace steps must increase")
        if not self.status:
            self.status = ["converged"] * n

    def __len__(self) -> int:
        return len(self.k)

    def _columns(self):
        groups = [("y", self.y), ("y_ref", self.y_ref), ("u", self.u), ("x", self.x),
                  ("x_hat", self.x_hat)]
        header = ["k"]
        for name, arr in groups:
            header += [f"{name}_{i + 1}" for i in range(arr.shape[1])]
        header += ["est_error", "cost", "solve_time", "status"]
        return header, groups

    def to_csv(self, path) -> None:
        header, groups = self._columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = [str(int(self.k[i]))]
                for _, arr in groups:
                    row += [f"{v:.17g}" for v in arr[i]]
                row += [f"{self.est_error[i]:.17g}", f"{self.cost[i]:.17g}",
                        f"{self.solve_time[i]:.17g}", self.status[i]]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "ClosedLoopTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        col = {name: i for i, name in enumerate(header)}

        def block(prefix):
            idx = [i for name, i in col.items() if name.rsplit("_", 1)[0] == prefix
                   and name.rsplit("_", 1)[-1].isdigit()]
            return np.array([[float(r[i]) for i in idx] for r in body]).reshape(len(body), len(idx))

        scalar = lambda name: np.array([float(r[col[name]]) for r in body])
        return cls(k=np.array([int(r[0]) for r in body]), y=block("y"), y_ref=block("y_ref"),
                   u=block("u"), x=block("x"), x_hat=block("x_hat"),
                   est_error=scalar("est_error"), cost=scalar("cost"),
                   solve_time=scalar("solve_time"), status=[r[col["status"]] for r in body])


def run_closed_loop(plant: PlantInterface, p: GruParams, design: ObserverDesign, spec: FhocpSpec,
                    reference, noise_sigma: float = 0.0, steps: int = 200, seed=0, x0=None,
                    x_hat0=None, box: InvariantBox = InvariantBox(), tol_opt: float = 1e-8,
                    max_iter: int = 500, tol_eq: float = 1e-10) -> ClosedLoopTrace:
    """Simulate the feedback loop for ``steps`` samples.

    ``reference`` is a constant output or a list of ``(start_step, value)``
    pairs in model output units.  Solver iteration limits are logged in the
    trace status column rather than raised.
    """
    if plant.n_u != p.n_u or plant.n_y != p.n_y:
        raise ValueError("plant and model dimensions differ")
    schedule = _schedule(reference, p.n_y)
    rng = np.random.default_rng(seed)
    x = plant.initial_state() if x0 is None else np.array(x0, dtype=np.float64)
    x_hat = np.zeros(p.n_x) if x_hat0 is None else _check_vector(x_hat0, p.n_x, "initial estimate")
    if not box.contains(x_hat):
        raise ValueError("initial estimate lies outside the state box")
    echo = isinstance(plant, GruEchoPlant)

    rec = {name: [] for name in ("y", "y_ref", "u", "x", "x_hat", "err", "cost", "time", "status")}
    targets = []
    current_ref, target, spec_k, sol = None, None, None, None
    for k in range(steps):
        ref = reference_at(schedule, k)
        if current_ref is None or not np.array_equal(ref, current_ref):
            guess = None if target is None else (target.x_bar, target.u_bar)
            try:
                try:
                    target = find_equilibrium(p, ref, guess, tol_eq=tol_eq, box=box,
                                              u_bounds=(spec.u_min, spec.u_max))
                except EquilibriumError:
                    if guess is None:
                        raise
                    target = find_equilibrium(p, ref, None, tol_eq=tol_eq, box=box,
                                              u_bounds=(spec.u_min, spec.u_max))
            except EquilibriumError as exc:
                raise ClosedLoopError(f"step {k}: no equilibrium for reference "
                                      f"{ref.tolist()}: {exc}") from exc
            spec_k = spec.with_target(target)
            current_ref = ref
            targets.append((k, target))

        y = add_measurement_noise(plant.measure(x), noise_sigma, rng)
        u, sol = mpc_step(p, spec_k, x_hat, previous=sol, tol_opt=tol_opt, max_iter=max_iter)
        if sol.status != "converged":
            log.info("step %d: solver %s", k, sol.status)

        rec["y"].append(y)
        rec["y_ref"].append(ref)
        rec["u"].append(u)
        rec["x"].append(np.array(x, dtype=np.float64))
        rec["x_hat"].append(x_hat)
        rec["err"].append(float(np.max(np.abs(x - x_hat))) if echo else np.nan)
        rec["cost"].append(sol.cost)
        rec["time"].append(sol.wall_time)
        rec["status"].append(sol.status)

        x = plant.step(x, u)
        x_hat = observer_step(p, design.gains, x_hat, u, y)

    return ClosedLoopTrace(
        k=np.arange(steps), y=np.array(rec["y"]).reshape(steps, p.n_y),
        y_ref=np.array(rec["y_ref"]).reshape(steps, p.n_y),
        u=np.array(rec["u"]).reshape(steps, p.n_u),
        x=np.array(rec["x"]).reshape(steps, -1), x_hat=np.array(rec["x_hat"]).reshape(steps, p.n_x),
        est_error=np.array(rec["err"]), cost=np.array(rec["cost"]),
        solve_time=np.array(rec["time"]), status=rec["status"], targets=targets,
    )


def steady_state_errors(trace: ClosedLoopTrace, window: int = 20) -> list[dict]:
    """Mean absolute output error over the last ``window`` steps of each reference level."""
    if window < 1:
        raise ValueError("window must be positive")
    changes = [0] + [i for i in range(1, len(trace)) if not np.array_equal(trace.y_ref[i],
                                                                         trace.y_ref[i - 1])]
    bounds = changes + [len(trace)]
    out = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        seg = slice(max(start, stop - window), stop)
        err = np.abs(trace.y[seg] - trace.y_ref[seg]).mean(axis=0)
        out.append({"start": int(trace.k[start]), "stop": int(trace.k[stop - 1]),
                    "reference": trace.y_ref[start].tolist(), "error": err.tolist(),
                    "settled_steps": stop - start})
    return out
