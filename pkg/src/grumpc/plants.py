"""Plants for closed-loop runs.

A plant exposes ``step(state, u)`` and ``measure(state)`` on inputs in
``[-1, 1]``.  Two kinds ship with the package: the GRU model itself
(nominal setting) and a two-state stirred-tank reactor used as a
nonlinear benchmark.  Anything with the same methods can be plugged in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .estimation import Normalization
from .gru import GruParams, _check_vector, gru_output, gru_step


@runtime_checkable
class PlantInterface(Protocol):
    n_state: int
    n_u: int
    n_y: int

    def step(self, state: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def measure(self, state: np.ndarray) -> np.ndarray: ...

    def initial_state(self) -> np.ndarray: ...


@dataclass(frozen=True)
class GruEchoPlant:
    """The model used as its own plant."""

    params: GruParams

    @property
    def n_state(self) -> int:
        return self.params.n_x

    @property
    def n_u(self) -> int:
        return self.params.n_u

    @property
    def n_y(self) -> int:
        return self.params.n_y

    def step(self, state, u):
        return gru_step(self.params, state, u)

    def measure(self, state):
        return gru_output(self.params, state)

    def initial_state(self):
        return np.zeros(self.n_state)


@dataclass(frozen=True)
class SurrogatePlant:
    """Isothermal reactor with the series/parallel scheme A -> B -> C, 2A -> D.

    States are the concentrations ``(c_A, c_B)`` in mol/l, the input sets the
    dilution rate ``D = d_mid + d_half * u`` in 1/h and the output is ``c_B``.
    Over ``D`` in ``[5, 40]`` the steady-state output rises monotonically from
    about 0.38 to about 1.16 mol/l.  Each sample integrates ``substeps``
    classical Runge-Kutta steps over ``dt`` hours.
    """

    k1: float = 50.0
    k2: float = 100.0
    k3: float = 10.0
    c_feed: float = 10.0
    d_mid: float = 22.5
    d_half: float = 17.5
    dt: float = 0.002
    substeps: int = 4

    n_state: int = 2
    n_u: int = 1
    n_y: int = 1

    def rhs(self, c, u):
        D = self.d_mid + self.d_half * u[0]
        ca, cb = c
        return np.array([
            -self.k1 * ca - self.k3 * ca * ca + D * (self.c_feed - ca),
            self.k1 * ca - self.k2 * cb - D * cb,
        ])

    def step(self, state, u):
        c = _check_vector(state, 2, "reactor state").copy()
        u = _check_vector(u, 1, "input")
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            k1 = self.rhs(c, u)
            k2 = self.rhs(c + 0.5 * h * k1, u)
            k3 = self.rhs(c + 0.5 * h * k2, u)
            k4 = self.rhs(c + h * k3, u)
            c = c + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return c

    def measure(self, state):
        return np.array([_check_vector(state, 2, "reactor state")[1]])

    def steady_state(self, u) -> np.ndarray:
        """Closed-form equilibrium for a constant input."""
        D = self.d_mid + self.d_half * float(np.asarray(u).reshape(-1)[0])
        b = self.k1 + D
        ca = (-b + np.sqrt(b * b + 4.0 * self.k3 * D * self.c_feed)) / (2.0 * self.k3)
        return np.array([ca, self.k1 * ca / (self.k2 + D)])

    def initial_state(self):
        return self.steady_state([0.0])


@dataclass(frozen=True)
class ScaledPlant:
    """Presents a plant in the normalized units of an identified model.

    Model inputs are mapped to raw plant inputs and raw measurements to
    normalized outputs through the stored affine scaling.
    """

    plant: PlantInterface
    scaling: Normalization

    @property
    def n_state(self) -> int:
        return self.plant.n_state

    @property
    def n_u(self) -> int:
        return self.plant.n_u

    @property
    def n_y(self) -> int:
        return self.plant.n_y

    def step(self, state, u):
        raw = self.scaling.denormalize_inputs(np.asarray(u, dtype=np.float64))
        return self.plant.step(state, np.clip(raw, -1.0, 1.0))

    def measure(self, state):
        return self.scaling.normalize_outputs(self.plant.measure(state))

    def initial_state(self):
        return self.plant.initial_state()


def make_plant(kind: str, params: GruParams | None = None, scaling: Normalization | None = None,
               **options) -> PlantInterface:
    """Build a plant by name: ``"gru-echo"`` needs ``params``; ``"surrogate"`` takes reactor options."""
    if kind == "gru-echo":
        if params is None:
            raise ValueError("gru-echo plant needs model parameters")
        return GruEchoPlant(params)
    if kind == "surrogate":
        plant = SurrogatePlant(**options)
        return plant if scaling is None else ScaledPlant(plant, scaling)
    raise ValueError(f"unknown plant kind {kind!r}")


def add_measurement_noise(y, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("noise level must be nonnegative")
    y = np.asarray(y, dtype=np.float64)
    if sigma == 0:
        return y.copy()
    return y + sigma * rng.standard_normal(y.shape)
