"""Single-layer GRU state-space model and its incremental-stability certificate.

The model reads

    x+ = z * x + (1 - z) * r
    y  = U_o x + b_o

with update gate ``z = sigmoid(W_z u + U_z x + b_z)``, forget gate
``f = sigmoid(W_f u + U_f x + b_f)`` and squashed input
``r = tanh(W_r u + U_r (f * x) + b_r)``.  Inputs are assumed unity bounded
and the state box ``||x||_inf <= x_check`` (``x_check >= 1``) is invariant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

WEIGHT_NAMES = (
    "W_z", "U_z", "b_z",
    "W_f", "U_f", "b_f",
    "W_r", "U_r", "b_r",
    "U_o", "b_o",
)


def _shape_of(name: str, n_x: int, n_u: int, n_y: int) -> tuple[int, ...]:
    if name.startswith("W_"):
        return (n_x, n_u)
    if name == "U_o":
        return (n_y, n_x)
    if name == "b_o":
        return (n_y,)
    if name.startswith("U_"):
        return (n_x, n_x)
    return (n_x,)


@dataclass(frozen=True, eq=False)
class GruParams:
    """Weight set of a single-layer GRU with affine output map.

    Arrays are copied to read-only float64 on construction.  Instances are
    also used as containers for weight gradients, which share the layout.
    """

    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_f: np.ndarray
    U_f: np.ndarray
    b_f: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    U_o: np.ndarray
    b_o: np.ndarray
    _W_zf: np.ndarray = field(init=False, repr=False)
    _U_zf: np.ndarray = field(init=False, repr=False)
    _b_zf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in WEIGHT_NAMES:
            arr = np.array(getattr(self, name), dtype=np.float64)
            if name.startswith("b_"):
                arr = np.atleast_1d(arr)
            else:
                arr = np.atleast_2d(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n_x = self.U_z.shape[0]
        n_u = self.W_z.shape[1]
        n_y = self.U_o.shape[0]
        for name in WEIGHT_NAMES:
            expected = _shape_of(name, n_x, n_u, n_y)
            actual = getattr(self, name).shape
            if actual != expected:
                raise ValueError(f"{name} has shape {actual}, expected {expected}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")
        # stacked update/forget gate weights, evaluated with one product
        for attr, parts in (("_W_zf", ("W_z", "W_f")),
                            ("_U_zf", ("U_z", "U_f")),
                            ("_b_zf", ("b_z", "b_f"))):
            stacked = np.concatenate([getattr(self, k) for k in parts], axis=0)
            stacked.setflags(write=False)
            object.__setattr__(self, attr, stacked)

    @property
    def n_x(self) -> int:
        return self.U_z.shape[0]

    @property
    def n_u(self) -> int:
        return self.W_z.shape[1]

    @property
    def n_y(self) -> int:
        return self.U_o.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n_x, self.n_u, self.n_y

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEIGHT_NAMES}

    def replace(self, **changes) -> "GruParams":
        arrays = self.arrays()
        arrays.update(changes)
        return GruParams(**arrays)

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in WEIGHT_NAMES])

    @classmethod
    def unflatten(cls, vec, n_x: int, n_u: int, n_y: int) -> "GruParams":
        vec = np.asarray(vec, dtype=np.float64)
        arrays, pos = {}, 0
        for name in WEIGHT_NAMES:
            shape = _shape_of(name, n_x, n_u, n_y)
            size = math.prod(shape)
            arrays[name] = vec[pos:pos + size].reshape(shape)
            pos += size
        if pos != vec.size:
            raise ValueError(f"vector has {vec.size} entries, expected {pos}")
        return cls(**arrays)

    @classmethod
    def zeros(cls, n_x: int, n_u: int, n_y: int) -> "GruParams":
        return cls(**{n: np.zeros(_shape_of(n, n_x, n_u, n_y)) for n in WEIGHT_NAMES})

    def scaled(self, factor: float) -> "GruParams":
        return GruParams(**{n: factor * a for n, a in self.arrays().items()})

    def __add__(self, other: "GruParams") -> "GruParams":
        return GruParams(**{n: a + getattr(other, n) for n, a in self.arrays().items()})


def random_gru(n_x: int, n_u: int, n_y: int, rng=None, scale: float = 0.5,
               output_scale: float = 1.0) -> GruParams:
    """Gaussian weights with standard deviation ``scale`` (``output_scale`` for U_o, b_o)."""
    rng = np.random.default_rng(rng)
    arrays = {}
    for name in WEIGHT_NAMES:
        std = output_scale if name in ("U_o", "b_o") else scale
        arrays[name] = std * rng.standard_normal(_shape_of(name, n_x, n_u, n_y))
    return GruParams(**arrays)


@dataclass(frozen=True)
class InvariantBox:
    """State box ``{x : ||x||_inf <= x_check}``; invariant for any ``x_check >= 1``."""

    x_check: float = 1.0

    def __post_init__(self):
        if not (self.x_check >= 1.0 and math.isfinite(self.x_check)):
            raise ValueError(f"x_check must be finite and >= 1, got {self.x_check}")

    def contains(self, x, atol: float = 0.0) -> bool:
        return bool(np.max(np.abs(x)) <= self.x_check + atol)


@dataclass(frozen=True)
class DeltaIssCertificate:
    mu: float
    lam: float
    sigma_f: float
    sigma_z: float
    phi_r: float
    x_check: float
    certified: bool

    def to_dict(self) -> dict:
        return {
            "mu": self.mu, "lambda": self.lam, "sigma_f": self.sigma_f,
            "sigma_z": self.sigma_z, "phi_r": self.phi_r,
            "x_check": self.x_check, "certified": self.certified,
        }


def _check_vector(v, size: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1:] != (size,):
        raise ValueError(f"{what} has trailing dimension {v.shape[-1:]}, expected ({size},)")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} contains non-finite entries")
    return v


def _forward(p: GruParams, x, u, zf_offset=None):
    """One step on (possibly batched) arrays; returns next state and intermediates.

    ``zf_offset`` is added last to the stacked update/forget pre-activations,
    so that a zero offset reproduces the plain model bit for bit.
    """
    n = p.n_x
    a_zf = u @ p._W_zf.T + x @ p._U_zf.T + p._b_zf
    if zf_offset is not None:
        a_zf = a_zf + zf_offset
    zf = expit(a_zf)
    z = zf[..., :n]
    f = zf[..., n:]
    h = f * x
    a_r = u @ p.W_r.T + h @ p.U_r.T + p.b_r
    r = np.tanh(a_r)
    x_next = z * x + (1.0 - z) * r
    return x_next, (a_zf, z, f, a_r, r)


def gru_step(p: GruParams, x, u) -> np.ndarray:
    """Advance the GRU state by one step.  Accepts batched ``(B, n)`` arrays."""
    x = _check_vector(x, p.n_x, "state")
    u = _check_vector(u, p.n_u, "input")
    return _forward(p, x, u)[0]


def gru_gates(p: GruParams, x, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Update gate, forget gate and squashed input at ``(x, u)``."""
    x = _check_vector(x, p.n_x, "state")
    u = _check_vector(u, p.n_u, "input")
    _, (_, z, f, _, r) = _forward(p, x, u)
    return z, f, r


def gru_output(p: GruParams, x) -> np.ndarray:
    x = _check_vector(x, p.n_x, "state")
    return x @ p.U_o.T + p.b_o


def simulate(p: GruParams, x0, inputs) -> np.ndarray:
    """States ``x_0 .. x_T`` for an input sequence of shape ``(T, ..., n_u)``."""
    x = _check_vector(x0, p.n_x, "state")
    inputs = _check_vector(inputs, p.n_u, "input")
    batch = np.broadcast_shapes(x.shape[:-1], inputs.shape[1:-1])
    x = np.broadcast_to(x, batch + (p.n_x,))
    states = [x]
    for u in inputs:
        x = _forward(p, x, u)[0]
        states.append(x)
    return np.stack(states)


def inf_norm(A) -> float:
    """Induced infinity norm (maximum absolute row sum)."""
    A = np.atleast_2d(A)
    return float(np.max(np.sum(np.abs(A), axis=1)))


def gate_bounds(p: GruParams, box: InvariantBox = InvariantBox()) -> tuple[float, float, float]:
    """Worst-case gate magnitudes ``(sigma_f, sigma_z, phi_r)`` over the state and input boxes.

    Each is the activation evaluated at the infinity norm of ``[W  U*x_check  b]``.
    """
    xc = box.x_check

    def arg(W, U, b):
        return float(np.max(np.abs(W).sum(axis=1) + xc * np.abs(U).sum(axis=1) + np.abs(b)))

    sigma_f = float(expit(arg(p.W_f, p.U_f, p.b_f)))
    sigma_z = float(expit(arg(p.W_z, p.U_z, p.b_z)))
    phi_r = math.tanh(arg(p.W_r, p.U_r, p.b_r))
    return sigma_f, sigma_z, phi_r


def _kappa(z: float, norm_f: float, norm_r: float, norm_z: float,
           sigma_f: float, phi_r: float, x_check: float) -> float:
    return (z + (1.0 - z) * (0.25 * x_check * norm_f + sigma_f) * norm_r
            + 0.25 * (phi_r + x_check) * norm_z)


def _check_gate_value(z: float) -> float:
    z = float(z)
    if not 0.0 < z < 1.0:
        raise ValueError(f"gate value must lie in (0, 1), got {z}")
    return z


def kappa_x(p: GruParams, box: InvariantBox, z: float) -> float:
    """Per-step contraction coefficient of the state difference, affine in the gate value ``z``."""
    z = _check_gate_value(z)
    sigma_f, _, phi_r = gate_bounds(p, box)
    return _kappa(z, inf_norm(p.U_f), inf_norm(p.U_r), inf_norm(p.U_z),
                  sigma_f, phi_r, box.x_check)


def deltaiss_certificate(p: GruParams, box: InvariantBox = InvariantBox()) -> DeltaIssCertificate:
    """Conservative exponential incremental-ISS constants ``(mu, lambda)``.

    ``mu = sqrt(n_x)`` and ``lambda`` is the larger of ``kappa_x`` at the two
    ends of the update-gate range ``[1 - sigma_z, sigma_z]``; since ``kappa_x``
    is affine in the gate value the endpoints carry the maximum.
    """
    sigma_f, sigma_z, phi_r = gate_bounds(p, box)
    norms = inf_norm(p.U_f), inf_norm(p.U_r), inf_norm(p.U_z)
    lam = max(_kappa(sigma_z, *norms, sigma_f, phi_r, box.x_check),
              _kappa(1.0 - sigma_z, *norms, sigma_f, phi_r, box.x_check))
    return DeltaIssCertificate(
        mu=math.sqrt(p.n_x), lam=lam, sigma_f=sigma_f, sigma_z=sigma_z,
        phi_r=phi_r, x_check=box.x_check, certified=lam < 1.0,
    )


def random_certified_gru(n_x: int, n_u: int = 1, n_y: int = 1, rng=None, rate: float = 0.95,
                         w_scale: float = 0.8, b_scale: float = 0.4,
                         box: InvariantBox = InvariantBox()) -> GruParams:
    """Random model whose certified rate is at most ``rate`` and close to it.

    Input rows are scaled to l1 norm ``w_scale`` at most and the recurrent
    matrices share one factor found by bisection (the rate grows with it).
    """
    # the rate is never below the update-gate bound, which is at least 1/2
    if not 0.5 < rate < 1.0:
        raise ValueError("rate must lie in (0.5, 1)")
    rng = np.random.default_rng(rng)
    base = random_gru(n_x, n_u, n_y, rng, scale=1.0)

    def rows_unit(A):
        return A / max(1.0, np.abs(A).sum(axis=1).max())

    W = {k: w_scale * rows_unit(getattr(base, k)) for k in ("W_z", "W_f", "W_r")}
    b = {k: b_scale * getattr(base, k) for k in ("b_z", "b_f", "b_r")}
    U = {k: getattr(base, k) / np.abs(getattr(base, k)).sum(axis=1).max()
         for k in ("U_z", "U_f", "U_r")}

    def build(t, shrink):
        return base.replace(W_z=shrink * W["W_z"], b_z=shrink * b["b_z"], W_f=W["W_f"],
                            b_f=b["b_f"], W_r=W["W_r"], b_r=b["b_r"],
                            **{k: t * v for k, v in U.items()})

    # the update-gate bound alone sets the rate when U = 0; shrink it until it fits
    shrink = 1.0
    while deltaiss_certificate(build(0.0, shrink), box).lam > rate:
        shrink *= 0.7
    lo, hi = 0.0, 8.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if deltaiss_certificate(build(mid, shrink), box).lam <= rate:
            lo = mid
        else:
            hi = mid
    return build(lo, shrink)


def sample_invariant_box(box: InvariantBox, n: int, seed, n_x: int) -> np.ndarray:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    return rng.uniform(-box.x_check, box.x_check, size=(n, n_x))


def sample_input_box(n_u: int, n: int, seed) -> np.ndarray:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(n, n_u))


def gru_to_dict(p: GruParams) -> dict:
    out = {"n_x": p.n_x, "n_u": p.n_u, "n_y": p.n_y}
    out.update({name: getattr(p, name).tolist() for name in WEIGHT_NAMES})
    return out


def gru_from_dict(data: dict) -> GruParams:
    try:
        n_x, n_u, n_y = int(data["n_x"]), int(data["n_u"]), int(data["n_y"])
        raw = {name: data[name] for name in WEIGHT_NAMES}
    except KeyError as exc:
        raise ValueError(f"weight document is missing field {exc.args[0]!r}") from None
    arrays = {}
    for name, value in raw.items():
        arr = np.asarray(value, dtype=np.float64)
        expected = _shape_of(name, n_x, n_u, n_y)
        if arr.shape != expected:
            raise ValueError(f"{name} has shape {arr.shape}, declared dims imply {expected}")
        arrays[name] = arr
    return GruParams(**arrays)


def save_gru(p: GruParams, path) -> None:
    Path(path).write_text(json.dumps(gru_to_dict(p), indent=2))


def load_gru(path) -> GruParams:
    return gru_from_dict(json.loads(Path(path).read_text()))
