"""Certified GRU models, observers and stabilizing predictive control."""

__version__ = "0.1.0"

from .gru import (DeltaIssCertificate, GruParams, InvariantBox, deltaiss_certificate,  # noqa: E402
                  gate_bounds, gru_output, gru_step, kappa_x, load_gru, random_certified_gru,
                  random_gru, sample_input_box, sample_invariant_box, save_gru, simulate)
from .mpc import (FhocpSpec, check_weights, find_equilibrium, fhocp_cost,  # noqa: E402
                  min_simulation_horizon, mpc_step, solve_fhocp)
from .observer import (ObserverDesign, ObserverGains, certify_observer, kappa_o,  # noqa: E402
                       observer_step, tune_observer)
