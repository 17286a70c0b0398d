"""Shared generators for test models."""

from grumpc.gru import GruParams, InvariantBox, random_certified_gru


def certified_gru(n_x, n_u=1, n_y=1, rng=None, lam_max=0.95, box=InvariantBox()):
    return random_certified_gru(n_x, n_u, n_y, rng, rate=lam_max, box=box)


def tiny_observer_gru():
    """One-state model with hand-checkable observer coefficients."""
    return GruParams(
        W_z=[[0.0]], U_z=[[0.2]], b_z=[0.0],
        W_f=[[0.0]], U_f=[[0.1]], b_f=[0.0],
        W_r=[[0.0]], U_r=[[0.3]], b_r=[0.0],
        U_o=[[1.0]], b_o=[0.0],
    )
