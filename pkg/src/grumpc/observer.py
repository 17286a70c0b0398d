"""Luenberger-like GRU state observer with certified convergence rate.

The observer copies the model and corrects the update and forget gates with
the output innovation ``y - y_hat`` through gains ``L_z`` and ``L_f``.  Its
error contracts in the infinity norm at rate ``lambda_o``, the larger of
``kappa_o`` at the two ends of the update-gate range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gru import (GruParams, InvariantBox, _check_gate_value, _check_vector, _forward,
                  _kappa, gate_bounds, inf_norm)
from .lp import l1_row_fit


class ObserverInfeasible(RuntimeError):
    """No observer gains certify a contraction rate below one."""


@dataclass(frozen=True, eq=False)
class ObserverGains:
    L_z: np.ndarray
    L_f: np.ndarray

    def __post_init__(self):
        for name in ("L_z", "L_f"):
            arr = np.array(getattr(self, name), dtype=np.float64, ndmin=2)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.L_z.shape != self.L_f.shape:
            raise ValueError("L_z and L_f must have the same shape")
        object.__setattr__(self, "_L_zf", np.concatenate([self.L_z, self.L_f], axis=0))

    @classmethod
    def zeros(cls, p: GruParams) -> "ObserverGains":
        return cls(np.zeros((p.n_x, p.n_y)), np.zeros((p.n_x, p.n_y)))

    def check(self, p: GruParams) -> None:
        if self.L_z.shape != (p.n_x, p.n_y):
            raise ValueError(f"gains have shape {self.L_z.shape}, model needs {(p.n_x, p.n_y)}")


@dataclass(frozen=True)
class ObserverDesign:
    gains: ObserverGains
    lambda_o: float
    kappa_upper: float
    kappa_lower: float

    def to_dict(self) -> dict:
        return {
            "L_z": self.gains.L_z.tolist(),
            "L_f": self.gains.L_f.tolist(),
            "lambda_o": self.lambda_o,
            "kappa_o_upper": self.kappa_upper,
            "kappa_o_lower": self.kappa_lower,
        }


def observer_step(p: GruParams, gains: ObserverGains, x_hat, u, y) -> np.ndarray:
    """Next state estimate given the applied input and the measured output."""
    gains.check(p)
    x_hat = _check_vector(x_hat, p.n_x, "state estimate")
    u = _check_vector(u, p.n_u, "input")
    y = _check_vector(y, p.n_y, "output")
    innovation = y - (x_hat @ p.U_o.T + p.b_o)
    return _forward(p, x_hat, u, zf_offset=innovation @ gains._L_zf.T)[0]


def _error_norms(p: GruParams, gains: ObserverGains) -> tuple[float, float]:
    return inf_norm(p.U_f - gains.L_f @ p.U_o), inf_norm(p.U_z - gains.L_z @ p.U_o)


def _endpoints(p: GruParams, norm_f: float, norm_z: float, box: InvariantBox):
    sigma_f, sigma_z, phi_r = gate_bounds(p, box)
    norm_r = inf_norm(p.U_r)
    upper = _kappa(sigma_z, norm_f, norm_r, norm_z, sigma_f, phi_r, box.x_check)
    lower = _kappa(1.0 - sigma_z, norm_f, norm_r, norm_z, sigma_f, phi_r, box.x_check)
    return upper, lower


def kappa_o(p: GruParams, gains: ObserverGains, box: InvariantBox, z: float) -> float:
    """Per-step contraction coefficient of the estimation error at gate value ``z``."""
    z = _check_gate_value(z)
    gains.check(p)
    sigma_f, _, phi_r = gate_bounds(p, box)
    norm_f, norm_z = _error_norms(p, gains)
    return _kappa(z, norm_f, inf_norm(p.U_r), norm_z, sigma_f, phi_r, box.x_check)


def certify_observer(p: GruParams, gains: ObserverGains,
                     box: InvariantBox = InvariantBox()) -> float | None:
    """Certified contraction rate of the estimation error, or ``None`` if it is not below one."""
    gains.check(p)
    lam = max(_endpoints(p, *_error_norms(p, gains), box))
    return lam if lam < 1.0 else None


def tune_observer(p: GruParams, box: InvariantBox = InvariantBox()) -> ObserverDesign:
    """Gains with the smallest certified worst-case convergence rate.

    Both endpoint values of ``kappa_o`` grow with ``||U_f - L_f U_o||_inf`` and
    ``||U_z - L_z U_o||_inf``, and row ``i`` of each product depends only on
    row ``i`` of the gain, so every gain row is an independent l1 fit.
    """
    L_z = np.vstack([l1_row_fit(row, p.U_o) for row in p.U_z])
    L_f = np.vstack([l1_row_fit(row, p.U_o) for row in p.U_f])
    gains = ObserverGains(L_z, L_f)
    upper, lower = _endpoints(p, *_error_norms(p, gains), box)
    lam = max(upper, lower)
    if not lam < 1.0:
        raise ObserverInfeasible(f"best achievable observer rate is {lam:.6g} >= 1")
    return ObserverDesign(gains=gains, lambda_o=lam, kappa_upper=upper, kappa_lower=lower)


def save_observer(design: ObserverDesign, path) -> None:
    Path(path).write_text(json.dumps(design.to_dict(), indent=2))


def load_observer(path, p: GruParams | None = None, box: InvariantBox = InvariantBox()) -> ObserverDesign:
    """Read a stored design; with a model at hand the rate is re-certified rather than trusted."""
    data = json.loads(Path(path).read_text())
    gains = ObserverGains(data["L_z"], data["L_f"])
    if p is None:
        return ObserverDesign(gains, float(data["lambda_o"]),
                              float(data.get("kappa_o_upper", np.nan)),
                              float(data.get("kappa_o_lower", np.nan)))
    gains.check(p)
    upper, lower = _endpoints(p, *_error_norms(p, gains), box)
    lam = max(upper, lower)
    if not lam < 1.0:
        raise ObserverInfeasible(f"stored gains give rate {lam:.6g} >= 1 for this model")
    return ObserverDesign(gains, lam, upper, lower)
