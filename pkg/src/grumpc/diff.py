"""Reverse-mode differentiation of GRU rollouts.

Adjoints are hand derived from the step equations, using
``sigmoid' = s (1 - s)`` and ``tanh' = 1 - t**2``.  All routines accept a
leading batch dimension on states and inputs; weight gradients are summed
over it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gru import GruParams, _check_vector, _forward


@dataclass(frozen=True, eq=False)
class RolloutTape:
    """Forward intermediates of a rollout, indexed by step.

    ``states`` holds ``x_0 .. x_T``; the gate arrays hold step ``k``'s values
    for ``k < T``.  Only the first ``n_free`` inputs are decision inputs, the
    rest form the constant tail.
    """

    params: GruParams
    inputs: np.ndarray
    states: np.ndarray
    a_zf: np.ndarray
    z: np.ndarray
    f: np.ndarray
    a_r: np.ndarray
    r: np.ndarray
    n_free: int

    @property
    def length(self) -> int:
        return self.inputs.shape[0]

    def replay(self) -> np.ndarray:
        return _run(self.params, self.states[0], self.inputs, self.n_free).states


def _run(p: GruParams, x0, inputs, n_free) -> RolloutTape:
    T = inputs.shape[0]
    batch = np.broadcast_shapes(x0.shape[:-1], inputs.shape[1:-1])
    n = p.n_x
    states = np.empty((T + 1,) + batch + (n,))
    a_zf = np.empty((T,) + batch + (2 * n,))
    z = np.empty((T,) + batch + (n,))
    f = np.empty_like(z)
    a_r = np.empty_like(z)
    r = np.empty_like(z)
    x = np.broadcast_to(x0, batch + (n,))
    states[0] = x
    for k in range(T):
        x, (a_zf[k], z[k], f[k], a_r[k], r[k]) = _forward(p, x, inputs[k])
        states[k + 1] = x
    return RolloutTape(p, inputs, states, a_zf, z, f, a_r, r, n_free)


def rollout(p: GruParams, x0, u_seq, u_bar=None, M: int = 0):
    """Simulate ``N`` free inputs followed by ``M`` steps of constant ``u_bar``.

    Returns the ``N + M + 1`` states and the tape for the backward passes.
    """
    x0 = _check_vector(x0, p.n_x, "initial state")
    u_seq = _check_vector(u_seq, p.n_u, "input sequence")
    if u_seq.ndim < 2:
        raise ValueError("input sequence must be indexed by time first")
    N = u_seq.shape[0]
    if N < 1:
        raise ValueError("rollout needs at least one free input")
    if M < 0:
        raise ValueError("tail length must be nonnegative")
    if M > 0:
        u_bar = _check_vector(u_bar, p.n_u, "tail input")
        tail = np.broadcast_to(u_bar, (M,) + u_seq.shape[1:])
        inputs = np.concatenate([u_seq, tail], axis=0)
    else:
        inputs = u_seq
    tape = _run(p, x0, np.ascontiguousarray(inputs), N)
    return tape.states, tape


def _backward(tape: RolloutTape, state_grads, want_weights: bool):
    p = tape.params
    n = p.n_x
    T = tape.length
    xs, us = tape.states, tape.inputs
    input_grads = np.zeros(us.shape)
    if want_weights:
        g_W_zf = np.zeros_like(p._W_zf)
        g_U_zf = np.zeros_like(p._U_zf)
        g_b_zf = np.zeros_like(p._b_zf)
        g_W_r = np.zeros_like(p.W_r)
        g_U_r = np.zeros_like(p.U_r)
        g_b_r = np.zeros_like(p.b_r)
    adj = np.array(state_grads[T], dtype=np.float64)
    ga_zf = np.empty(adj.shape[:-1] + (2 * n,))
    for k in range(T - 1, -1, -1):
        x, z, f, r = xs[k], tape.z[k], tape.f[k], tape.r[k]
        gr = adj * (1.0 - z)
        ga_r = gr * (1.0 - r * r)
        gh = ga_r @ p.U_r
        ga_zf[..., :n] = adj * (x - r) * z * (1.0 - z)
        ga_zf[..., n:] = gh * x * f * (1.0 - f)
        input_grads[k] = ga_r @ p.W_r + ga_zf @ p._W_zf
        if want_weights:
            u2 = us[k].reshape(-1, p.n_u)
            x2 = x.reshape(-1, n)
            zf2 = ga_zf.reshape(-1, 2 * n)
            r2 = ga_r.reshape(-1, n)
            g_W_zf += zf2.T @ u2
            g_U_zf += zf2.T @ x2
            g_b_zf += zf2.sum(axis=0)
            g_W_r += r2.T @ u2
            g_U_r += r2.T @ (f * x).reshape(-1, n)
            g_b_r += r2.sum(axis=0)
        adj = adj * z + gh * f + ga_zf @ p._U_zf + state_grads[k]
    weights = None
    if want_weights:
        weights = dict(
            W_z=g_W_zf[:n], W_f=g_W_zf[n:], U_z=g_U_zf[:n], U_f=g_U_zf[n:],
            b_z=g_b_zf[:n], b_f=g_b_zf[n:], W_r=g_W_r, U_r=g_U_r, b_r=g_b_r,
        )
    return adj, input_grads, weights


def _check_state_grads(tape: RolloutTape, state_grads) -> np.ndarray:
    state_grads = np.asarray(state_grads, dtype=np.float64)
    if state_grads.shape != tape.states.shape:
        raise ValueError(f"state gradients have shape {state_grads.shape}, "
                         f"expected {tape.states.shape}")
    return state_grads


def grad_wrt_inputs(tape: RolloutTape, state_grads, input_grads=None) -> np.ndarray:
    """Gradient with respect to the free inputs of a scalar cost.

    ``state_grads[k]`` is the partial derivative of the cost with respect to
    ``x_k``; ``input_grads`` optionally adds direct partials on the free inputs.
    Tail steps propagate adjoints but own no gradient slots.
    """
    state_grads = _check_state_grads(tape, state_grads)
    _, grads, _ = _backward(tape, state_grads, want_weights=False)
    grads = grads[:tape.n_free]
    if input_grads is not None:
        input_grads = np.asarray(input_grads, dtype=np.float64)
        if input_grads.shape != grads.shape:
            raise ValueError(f"input gradients have shape {input_grads.shape}, expected {grads.shape}")
        grads = grads + input_grads
    return grads


def grad_wrt_weights(tape: RolloutTape, state_grads=None, output_grads=None) -> GruParams:
    """Gradient with respect to every weight array, accumulated over time and batch.

    ``output_grads[k]`` is the partial derivative of the loss with respect to
    ``y_k = U_o x_k + b_o``; ``state_grads`` adds direct partials on the states.
    """
    p = tape.params
    total = np.zeros(tape.states.shape)
    if state_grads is not None:
        total += _check_state_grads(tape, state_grads)
    g_U_o = np.zeros_like(p.U_o)
    g_b_o = np.zeros_like(p.b_o)
    if output_grads is not None:
        output_grads = np.asarray(output_grads, dtype=np.float64)
        expected = tape.states.shape[:-1] + (p.n_y,)
        if output_grads.shape != expected:
            raise ValueError(f"output gradients have shape {output_grads.shape}, expected {expected}")
        total += output_grads @ p.U_o
        g2 = output_grads.reshape(-1, p.n_y)
        g_U_o = g2.T @ tape.states.reshape(-1, p.n_x)
        g_b_o = g2.sum(axis=0)
    _, _, weights = _backward(tape, total, want_weights=True)
    return GruParams(U_o=g_U_o, b_o=g_b_o, **weights)


def step_jacobians(p: GruParams, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of one GRU step with respect to state and input at a single point."""
    x = _check_vector(x, p.n_x, "state")
    u = _check_vector(u, p.n_u, "input")
    _, (_, z, f, _, r) = _forward(p, x, u)
    dz = z * (1.0 - z)
    df = f * (1.0 - f)
    dr = 1.0 - r * r
    dh_dx = np.diag(f) + (x * df)[:, None] * p.U_f
    dr_dx = dr[:, None] * (p.U_r @ dh_dx)
    A = np.diag(z) + ((x - r) * dz)[:, None] * p.U_z + (1.0 - z)[:, None] * dr_dx
    dr_du = dr[:, None] * (p.W_r + p.U_r @ ((x * df)[:, None] * p.W_f))
    B = ((x - r) * dz)[:, None] * p.W_z + (1.0 - z)[:, None] * dr_du
    return A, B


def fd_gradient(fun, point, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    point = np.array(point, dtype=np.float64)
    grad = np.empty_like(point)
    flat, gflat = point.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fun(point)
        flat[i] = orig - step
        f_minus = fun(point)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def fd_check(fun, point, grad, step: float = 1e-6) -> float:
    """Largest gradient discrepancy against central differences, relative to the gradient scale.

    ``grad`` is an array or a callable evaluated at ``point``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if callable(grad):
        grad = grad(np.array(point, dtype=np.float64))
    grad = np.asarray(grad, dtype=np.float64)
    numeric = fd_gradient(fun, point, step)
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(grad), initial=0.0), 1e-12)
    return float(np.max(np.abs(numeric - grad), initial=0.0) / scale)
