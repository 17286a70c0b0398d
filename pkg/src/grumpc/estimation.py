"""Empirical contraction rates, identification data and GRU training."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .diff import _backward, _run
from .gru import GruParams, InvariantBox, _forward, deltaiss_certificate, random_gru

log = logging.getLogger(__name__)

_CHUNK = 1000


@dataclass(frozen=True)
class TrajectoryPairConfig:
    """Sampling plan for the empirical contraction rate.

    ``noise_floor`` drops state differences whose 2-norm is below it: two
    trajectories that have merged to rounding level carry no rate information.
    """

    n_pairs: int = 10_000
    T: int = 300
    mu: float | None = None
    seed: int = 0
    x_check: float = 1.0
    noise_floor: float = 1e-12

    def __post_init__(self):
        if self.n_pairs < 1 or self.T < 1:
            raise ValueError("need n_pairs >= 1 and T >= 1")


def _pair_chunk(p: GruParams, cfg: TrajectoryPairConfig, index: int, mu: float) -> float:
    rng = np.random.default_rng([cfg.seed, index])
    xc = cfg.x_check
    x_a = rng.uniform(-xc, xc, size=(_CHUNK, p.n_x))
    x_b = rng.uniform(-xc, xc, size=(_CHUNK, p.n_x))
    inputs = rng.uniform(-1.0, 1.0, size=(cfg.T, _CHUNK, p.n_u))
    count = min(_CHUNK, cfg.n_pairs - index * _CHUNK)
    x_a, x_b, inputs = x_a[:count], x_b[:count], inputs[:, :count]

    d0 = np.linalg.norm(x_a - x_b, axis=1)
    valid = d0 > 0
    if not np.any(valid):
        return -np.inf
    X = np.concatenate([x_a[valid], x_b[valid]])
    U = np.concatenate([inputs[:, valid], inputs[:, valid]], axis=1)
    m = int(valid.sum())
    log_ref = np.log(mu * d0[valid])
    best = -np.inf
    for k in range(1, cfg.T + 1):
        X = _forward(p, X, U[k - 1])[0]
        dk = np.linalg.norm(X[:m] - X[m:], axis=1)
        keep = dk > cfg.noise_floor
        if np.any(keep):
            best = max(best, float(np.max((np.log(dk[keep]) - log_ref[keep]) / k)))
    return best


def estimate_lambda(p: GruParams, cfg: TrajectoryPairConfig = TrajectoryPairConfig()) -> float:
    """Smallest rate for which the exponential bound holds, with ``mu`` fixed, on sampled pairs.

    Each pair starts from two random states in the box and is driven by one
    shared random input sequence, so the input term of the bound vanishes.
    The estimate is the maximum over pairs and steps ``k`` of
    ``(|dx_k| / (mu |dx_0|)) ** (1 / k)``.  Pairs are drawn in fixed chunks
    with their own seeds, so a larger ``n_pairs`` only adds pairs.
    """
    mu = math.sqrt(p.n_x) if cfg.mu is None else float(cfg.mu)
    n_chunks = -(-cfg.n_pairs // _CHUNK)
    best = max(_pair_chunk(p, cfg, i, mu) for i in range(n_chunks))
    if not np.isfinite(best):
        raise ValueError("no trajectory pair with distinct initial states")
    return math.exp(best)


def generate_excitation(kind: str, length: int, channels: int = 1, seed=None, *,
                        frequencies=None, n_tones: int = 12, min_hold: int = 5,
                        max_hold: int = 60, amplitude: float = 1.0) -> np.ndarray:
    """Input sequence of shape ``(length, channels)`` with every entry in ``[-amplitude, amplitude]``.

    ``multisine`` sums unit sinusoids at ``frequencies`` (cycles per sample)
    with random phases, rescaled to the amplitude.  ``random-steps`` holds
    uniformly drawn levels for a random number of samples in
    ``[min_hold, max_hold]``.
    """
    if length < 1:
        raise ValueError("length must be positive")
    if not 0.0 < amplitude <= 1.0:
        raise ValueError("amplitude must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    out = np.empty((length, channels))
    if kind == "multisine":
        if frequencies is None:
            bins = np.unique(np.geomspace(1, max(2, length // 8), n_tones).astype(int))
            frequencies = bins / length
        freqs = np.asarray(frequencies, dtype=np.float64)
        for c in range(channels):
            phases = rng.uniform(0.0, 2.0 * np.pi, size=freqs.size)
            s = np.sin(2.0 * np.pi * freqs[None, :] * t[:, None] + phases).sum(axis=1)
            peak = np.max(np.abs(s))
            out[:, c] = amplitude * s / peak if peak > 0 else 0.0
    elif kind == "random-steps":
        if min_hold < 1 or max_hold < min_hold:
            raise ValueError("need 1 <= min_hold <= max_hold")
        for c in range(channels):
            pos = 0
            while pos < length:
                hold = int(rng.integers(min_hold, max_hold + 1))
                out[pos:pos + hold, c] = rng.uniform(-amplitude, amplitude)
                pos += hold
    else:
        raise ValueError(f"unknown excitation kind {kind!r}")
    return out


@dataclass(frozen=True, eq=False)
class Normalization:
    """Per-channel affine maps, ``raw = offset + scale * normalized``."""

    u_offset: np.ndarray
    u_scale: np.ndarray
    y_offset: np.ndarray
    y_scale: np.ndarray

    def normalize_inputs(self, u):
        return (np.asarray(u, dtype=np.float64) - self.u_offset) / self.u_scale

    def denormalize_inputs(self, u):
        return self.u_offset + self.u_scale * np.asarray(u, dtype=np.float64)

    def normalize_outputs(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_offset) / self.y_scale

    def denormalize_outputs(self, y):
        return self.y_offset + self.y_scale * np.asarray(y, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"u_offset": self.u_offset.tolist(), "u_scale": self.u_scale.tolist(),
                "y_offset": self.y_offset.tolist(), "y_scale": self.y_scale.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Normalization":
        data = json.loads(Path(path).read_text())
        return cls(*(np.asarray(data[k], dtype=np.float64)
                     for k in ("u_offset", "u_scale", "y_offset", "y_scale")))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Normalized ``(inputs, outputs)`` episodes and the scaling that produced them."""

    episodes: list
    scaling: Normalization

    @property
    def n_u(self) -> int:
        return self.scaling.u_offset.size

    @property
    def n_y(self) -> int:
        return self.scaling.y_offset.size


def _channel_affine(blocks, what: str):
    data = np.concatenate(blocks, axis=0)
    lo, hi = data.min(axis=0), data.max(axis=0)
    offset = 0.5 * (lo + hi)
    scale = 0.5 * (hi - lo)
    flat = scale <= 0
    if np.any(flat):
        warnings.warn(f"{what} channels {np.flatnonzero(flat).tolist()} are constant; "
                      "using unit scale", UserWarning, stacklevel=3)
        scale = np.where(flat, 1.0, scale)
    return offset, scale


def normalize_dataset(raw_episodes) -> Dataset:
    """Map the observed range of every input and output channel onto ``[-1, 1]``."""
    raw_episodes = [(np.atleast_2d(np.asarray(u, dtype=np.float64).T).T,
                     np.atleast_2d(np.asarray(y, dtype=np.float64).T).T)
                    for u, y in raw_episodes]
    if not raw_episodes:
        raise ValueError("no episodes to normalize")
    u_off, u_sc = _channel_affine([u for u, _ in raw_episodes], "input")
    y_off, y_sc = _channel_affine([y for _, y in raw_episodes], "output")
    episodes = [((u - u_off) / u_sc, (y - y_off) / y_sc) for u, y in raw_episodes]
    return Dataset(episodes, Normalization(u_off, u_sc, y_off, y_sc))


def write_episode_csv(path, u, y, t=None) -> None:
    u = np.atleast_2d(np.asarray(u, dtype=np.float64).T).T
    y = np.atleast_2d(np.asarray(y, dtype=np.float64).T).T
    t = np.arange(u.shape[0], dtype=np.float64) if t is None else np.asarray(t, dtype=np.float64)
    header = ",".join(["t"] + [f"u_{i + 1}" for i in range(u.shape[1])]
                      + [f"y_{i + 1}" for i in range(y.shape[1])])
    np.savetxt(path, np.column_stack([t, u, y]), delimiter=",", header=header,
               comments="", fmt="%.17g")


def read_episode_csv(path):
    """Return ``(t, u, y)`` from a dataset file with ``t, u_1.., y_1..`` columns."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    u_cols = [i for i, name in enumerate(header) if name.startswith("u_")]
    y_cols = [i for i, name in enumerate(header) if name.startswith("y_")]
    if header[0] != "t" or not u_cols or not y_cols:
        raise ValueError(f"{path}: expected columns t, u_1.., y_1..")
    return data[:, 0], data[:, u_cols], data[:, y_cols]


def certificate_gradient(p: GruParams, box: InvariantBox = InvariantBox()):
    """Certificate rate and a subgradient of it with respect to the weights.

    Norms are differentiated through their maximizing rows and the maximum of
    the two endpoints through the active one.
    """
    xc = box.x_check
    zero = {k: np.zeros_like(v) for k, v in p.arrays().items()}

    def norm_and_grad(U):
        rows = np.abs(U).sum(axis=1)
        i = int(np.argmax(rows))
        g = np.zeros_like(U)
        g[i] = np.sign(U[i])
        return float(rows[i]), g

    def gate_and_grad(W, U, b):
        rows = np.abs(W).sum(axis=1) + xc * np.abs(U).sum(axis=1) + np.abs(b)
        i = int(np.argmax(rows))
        gW, gU, gb = np.zeros_like(W), np.zeros_like(U), np.zeros_like(b)
        gW[i], gU[i], gb[i] = np.sign(W[i]), xc * np.sign(U[i]), np.sign(b[i])
        return float(rows[i]), gW, gU, gb

    n_f, g_nf = norm_and_grad(p.U_f)
    n_r, g_nr = norm_and_grad(p.U_r)
    n_z, g_nz = norm_and_grad(p.U_z)
    s_f, gWf, gUf, gbf = gate_and_grad(p.W_f, p.U_f, p.b_f)
    s_z, gWz, gUz, gbz = gate_and_grad(p.W_z, p.U_z, p.b_z)
    s_r, gWr, gUr, gbr = gate_and_grad(p.W_r, p.U_r, p.b_r)
    sig_f, sig_z, phi_r = float(expit(s_f)), float(expit(s_z)), math.tanh(s_r)

    A = 0.25 * xc * n_f + sig_f
    C = 0.25 * (phi_r + xc)

    def kappa(z):
        return z + (1.0 - z) * A * n_r + C * n_z

    hi, lo = kappa(sig_z), kappa(1.0 - sig_z)
    z_star, dz_dsig = (sig_z, 1.0) if hi >= lo else (1.0 - sig_z, -1.0)
    lam = max(hi, lo)

    d_A = (1.0 - z_star) * n_r
    d_sig_z = (1.0 - A * n_r) * dz_dsig * sig_z * (1.0 - sig_z)
    d_sig_f = d_A * sig_f * (1.0 - sig_f)
    d_phi = 0.25 * n_z * (1.0 - phi_r ** 2)

    grad = zero
    grad["U_f"] = d_A * 0.25 * xc * g_nf + d_sig_f * gUf
    grad["W_f"] = d_sig_f * gWf
    grad["b_f"] = d_sig_f * gbf
    grad["U_r"] = (1.0 - z_star) * A * g_nr + d_phi * gUr
    grad["W_r"] = d_phi * gWr
    grad["b_r"] = d_phi * gbr
    grad["U_z"] = C * g_nz + d_sig_z * gUz
    grad["W_z"] = d_sig_z * gWz
    grad["b_z"] = d_sig_z * gbz
    return lam, GruParams(**grad)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``optimizer`` is ``"momentum"`` or ``"adam"`` (first order on truncated
    backpropagation windows of ``truncation`` steps) or ``"lbfgs"`` (full
    backpropagation through each episode, ``epochs`` iterations).
    """

    learning_rate: float = 1e-2
    epochs: int = 500
    truncation: int = 50
    washout: int = 20
    penalty: float = 0.0
    lambda_target: float = 0.99
    momentum: float = 0.9
    optimizer: str = "lbfgs"
    init_scale: float = 0.3
    x_check: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.truncation < 1:
            raise ValueError("learning rate, epochs and truncation must be positive")
        if self.washout < 0 or self.penalty < 0:
            raise ValueError("washout and penalty must be nonnegative")
        if not 0.0 < self.lambda_target < 1.0:
            raise ValueError("lambda_target must lie in (0, 1)")
        if self.optimizer not in ("momentum", "adam", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    mse: float = float("nan")
    relative_mse: float = float("nan")
    lam: float = float("nan")
    certified: bool = False
    diverged: bool = False
    epochs_run: int = 0

    def to_dict(self) -> dict:
        return {"mse": self.mse, "relative_mse": self.relative_mse, "lambda": self.lam,
                "certified": self.certified, "diverged": self.diverged,
                "epochs_run": self.epochs_run,
                "final_loss": self.losses[-1] if self.losses else None}


def _batches(dataset: Dataset):
    """Episodes grouped by length and stacked along a batch axis: ``(T, B, n)``."""
    groups: dict[int, list] = {}
    for u, y in dataset.episodes:
        groups.setdefault(u.shape[0], []).append((u, y))
    for eps in groups.values():
        yield (np.stack([u for u, _ in eps], axis=1), np.stack([y for _, y in eps], axis=1))


def simulation_mse(p: GruParams, dataset: Dataset, washout: int = 0) -> float:
    """Mean squared free-run output error from a zero initial state, after the washout."""
    err, count = 0.0, 0
    for u, y in _batches(dataset):
        states = _run(p, np.zeros(p.n_x), u[:-1], u.shape[0] - 1).states
        resid = states[washout:] @ p.U_o.T + p.b_o - y[washout:]
        err += float(np.sum(resid ** 2))
        count += resid.size
    return err / count


def _output_variance(dataset: Dataset, washout: int) -> float:
    ys = np.concatenate([y[washout:] for _, y in dataset.episodes])
    return float(np.mean(np.var(ys, axis=0)))


def _weight_grad(tape, output_grads) -> GruParams:
    p = tape.params
    total = output_grads @ p.U_o
    g2 = output_grads.reshape(-1, p.n_y)
    _, _, weights = _backward(tape, total, want_weights=True)
    return GruParams(U_o=g2.T @ tape.states.reshape(-1, p.n_x), b_o=g2.sum(axis=0), **weights)


def _loss_grad(p: GruParams, dataset: Dataset, washout: int, window: int | None):
    """Loss over full free runs from a zero state.

    With ``window`` set, the gradient is stopped at window boundaries
    (truncated backpropagation); otherwise it is exact.
    """
    count = sum(y[washout:].size for _, y in dataset.episodes)
    loss = 0.0
    grad = None
    for u, y in _batches(dataset):
        T = u.shape[0] - 1
        x0 = np.zeros((u.shape[1], p.n_x))
        if window is None:
            segments = [(0, T, x0)]
        else:
            states = _run(p, x0, u[:-1], T).states
            segments = [(s, min(s + window, T), states[s]) for s in range(0, T, window)]
        for s, e, xs in segments:
            tape = _run(p, xs, u[s:e], e - s)
            resid = tape.states @ p.U_o.T + p.b_o - y[s:e + 1]
            idx = np.arange(s, e + 1)
            resid[(idx < washout) | ((idx == s) & (s > 0))] = 0.0
            loss += float(np.sum(resid ** 2)) / count
            g = _weight_grad(tape, 2.0 * resid / count)
            grad = g if grad is None else grad + g
    return loss, grad


def _penalty(p: GruParams, cfg: TrainConfig, box: InvariantBox):
    if cfg.penalty == 0:
        return 0.0, None
    lam, g = certificate_gradient(p, box)
    excess = max(0.0, lam - cfg.lambda_target)
    if excess == 0:
        return 0.0, None
    return cfg.penalty * excess ** 2, g.scaled(2.0 * cfg.penalty * excess)


def train_gru(dataset: Dataset, n_x: int, cfg: TrainConfig = TrainConfig(), seed=0,
              init: GruParams | None = None):
    """Fit a GRU to normalized episodes by free-run simulation error.

    The loss adds ``penalty * max(0, lambda - lambda_target)**2`` on the
    certificate rate.  Returns the model and a :class:`TrainReport`; on a
    non-finite loss the last finite iterate is returned with ``diverged`` set.
    """
    box = InvariantBox(cfg.x_check)
    n_u, n_y = dataset.n_u, dataset.n_y
    rng = np.random.default_rng(seed)
    p = init if init is not None else random_gru(n_x, n_u, n_y, rng, scale=cfg.init_scale,
                                                  output_scale=cfg.init_scale)
    report = TrainReport()

    def objective(q: GruParams, exact: bool):
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                loss, grad = _loss_grad(q, dataset, cfg.washout, None if exact else cfg.truncation)
            except ValueError:  # non-finite gradient arrays
                return np.inf, None
        pen, pen_grad = _penalty(q, cfg, box)
        if pen_grad is not None:
            grad = grad + pen_grad
        return loss + pen, grad

    if cfg.optimizer == "lbfgs":
        best = {"p": p}

        def fun(v):
            q = GruParams.unflatten(v, n_x, n_u, n_y)
            loss, grad = objective(q, exact=True)
            if not np.isfinite(loss):
                return np.inf, np.zeros_like(v)
            best["p"] = q
            report.losses.append(loss)
            return loss, grad.flatten()

        # the penalty has kinks (row maxima, endpoint maximum) where line
        # searches fail; restarting with fresh curvature memory gets past them
        v = p.flatten()
        try:
            while report.epochs_run < cfg.epochs:
                res = minimize(fun, v, jac=True, method="L-BFGS-B",
                               options={"maxiter": cfg.epochs - report.epochs_run,
                                        "maxfun": 2 * cfg.epochs, "ftol": 0.0, "gtol": 1e-12})
                report.epochs_run += int(res.nit)
                progress = np.max(np.abs(res.x - v))
                v = res.x
                if res.status == 1 or res.nit < 3 or progress < 1e-12:
                    break
            p = GruParams.unflatten(v, n_x, n_u, n_y)
        except ValueError:
            p = best["p"]
            report.diverged = True
    else:
        flat = p.flatten()
        vel = np.zeros_like(flat)
        m2 = np.zeros_like(flat)
        beta2, eps = 0.999, 1e-8
        for epoch in range(1, cfg.epochs + 1):
            loss, grad = objective(p, exact=False)
            if grad is None or not np.isfinite(loss):
                report.diverged = True
                break
            g = grad.flatten()
            if not np.all(np.isfinite(g)):
                report.diverged = True
                break
            report.losses.append(loss)
            if cfg.optimizer == "adam":
                vel = cfg.momentum * vel + (1 - cfg.momentum) * g
                m2 = beta2 * m2 + (1 - beta2) * g * g
                step = cfg.learning_rate * (vel / (1 - cfg.momentum ** epoch)) / (
                    np.sqrt(m2 / (1 - beta2 ** epoch)) + eps)
            else:
                vel = cfg.momentum * vel + g
                step = cfg.learning_rate * vel
            candidate = flat - step
            if not np.all(np.isfinite(candidate)):
                report.diverged = True
                break
            flat = candidate
            p = GruParams.unflatten(flat, n_x, n_u, n_y)
            report.epochs_run = epoch
            if epoch % 100 == 0:
                log.info("epoch %d loss %.6g", epoch, loss)

    report.mse = simulation_mse(p, dataset, cfg.washout)
    report.relative_mse = report.mse / max(_output_variance(dataset, cfg.washout), 1e-300)
    cert = deltaiss_certificate(p, box)
    report.lam, report.certified = cert.lam, cert.certified
    if not cert.certified:
        log.warning("trained model is not certified: lambda = %.4f", cert.lam)
    return p, report
