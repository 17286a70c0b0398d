import math

import numpy as np
import pytest
from scipy.optimize import linprog

from grumpc.gru import (GruParams, InvariantBox, deltaiss_certificate, gru_output, gru_step,
                        kappa_x, random_gru)
from grumpc.observer import (ObserverGains, ObserverInfeasible, certify_observer, kappa_o,
                             load_observer, observer_step, save_observer, tune_observer)

from helpers import certified_gru, tiny_observer_gru


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def kappa_o_batch(p, L_z, L_f, z, x_check=1.0):
    """Observer coefficient for a stack of gain candidates ``L_z, L_f`` of shape (K, n_x, n_y)."""
    rows = lambda A: np.abs(A).sum(axis=-1).max(axis=-1)
    arg = lambda W, U, b: np.max(np.abs(W).sum(1) + x_check * np.abs(U).sum(1) + np.abs(b))
    sf = sig(arg(p.W_f, p.U_f, p.b_f))
    pr = math.tanh(arg(p.W_r, p.U_r, p.b_r))
    a = rows(p.U_f - L_f @ p.U_o)
    b = rows(p.U_z - L_z @ p.U_o)
    return z + (1 - z) * (0.25 * x_check * a + sf) * rows(p.U_r) + 0.25 * (pr + x_check) * b


def test_zero_gains_reduce_to_model():
    rng = np.random.default_rng(0)
    p = random_gru(3, 2, 2, rng)
    g = ObserverGains.zeros(p)
    for _ in range(5):
        x, u, y = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 2), rng.standard_normal(2)
        np.testing.assert_array_equal(observer_step(p, g, x, u, y), gru_step(p, x, u))
    for z in (0.2, 0.5, 0.8):
        assert kappa_o(p, g, InvariantBox(), z) == kappa_x(p, InvariantBox(), z)


def test_zero_innovation_reduces_to_model():
    rng = np.random.default_rng(1)
    p = random_gru(3, 1, 2, rng)
    g = ObserverGains(rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
    x, u = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 1)
    np.testing.assert_array_equal(observer_step(p, g, x, u, gru_output(p, x)), gru_step(p, x, u))


def test_exact_initialization_keeps_zero_error():
    p = certified_gru(4, rng=2)
    design = tune_observer(p)
    rng = np.random.default_rng(3)
    x = x_hat = rng.uniform(-1, 1, 4)
    for _ in range(100):
        u = rng.uniform(-1, 1, 1)
        y = gru_output(p, x)
        x, x_hat = gru_step(p, x, u), observer_step(p, design.gains, x_hat, u, y)
        assert np.array_equal(x, x_hat)


def test_exact_cancellation_term():
    p = tiny_observer_gru()
    g = ObserverGains([[0.2]], [[0.0]])
    # only the U_z term differs from the zero-gain value
    diff = kappa_o(p, ObserverGains.zeros(p), InvariantBox(), 0.4) - kappa_o(p, g, InvariantBox(), 0.4)
    assert diff == pytest.approx(0.25 * (math.tanh(0.3) + 1.0) * 0.2, abs=1e-15)


def test_tiny_instance_hand_values():
    p = tiny_observer_gru()
    g = ObserverGains([[0.2]], [[0.1]])
    sz = sig(0.2)
    upper = sz + (1 - sz) * sig(0.1) * 0.3
    lower = (1 - sz) + sz * sig(0.1) * 0.3
    assert kappa_o(p, g, InvariantBox(), sz) == pytest.approx(upper, abs=1e-15)
    assert kappa_o(p, g, InvariantBox(), 1 - sz) == pytest.approx(lower, abs=1e-15)
    assert upper == pytest.approx(0.6207, abs=1e-4)
    assert lower == pytest.approx(0.5368, abs=1e-4)
    assert certify_observer(p, g) == pytest.approx(upper, abs=1e-15)


def test_kappa_o_rejects_bad_gate_value():
    p = tiny_observer_gru()
    with pytest.raises(ValueError):
        kappa_o(p, ObserverGains.zeros(p), InvariantBox(), 1.0)
    with pytest.raises(ValueError):
        ObserverGains.zeros(p).check(random_gru(2, 1, 1))


def test_certify_open_loop():
    p = certified_gru(5, rng=4, lam_max=0.9)
    assert certify_observer(p, ObserverGains.zeros(p)) == deltaiss_certificate(p).lam
    q = random_gru(4, 1, 1, np.random.default_rng(0), scale=2.0)
    assert certify_observer(q, ObserverGains.zeros(q)) is None


def test_tune_without_coupling():
    p = certified_gru(3, rng=5).replace(U_z=np.zeros((3, 3)), U_f=np.zeros((3, 3)))
    d = tune_observer(p)
    assert np.all(d.gains.L_z == 0) and np.all(d.gains.L_f == 0)
    assert d.lambda_o == deltaiss_certificate(p).lam


def test_tune_single_state_matches_grid():
    p = tiny_observer_gru()
    d = tune_observer(p)
    assert d.gains.L_z[0, 0] == pytest.approx(0.2, abs=1e-12)
    assert d.gains.L_f[0, 0] == pytest.approx(0.1, abs=1e-12)
    grid = np.arange(-2000, 2001) * 1e-3
    Lz, Lf = np.meshgrid(grid, grid, indexing="ij")
    Lz, Lf = Lz.reshape(-1, 1, 1), Lf.reshape(-1, 1, 1)
    sz = sig(0.2)
    vals = np.maximum(kappa_o_batch(p, Lz, Lf, sz), kappa_o_batch(p, Lz, Lf, 1 - sz))
    assert d.lambda_o <= vals.min() + 1e-12
    assert d.lambda_o == pytest.approx(vals.min(), abs=1e-3)
    assert d.lambda_o == pytest.approx(sz + (1 - sz) * sig(0.1) * 0.3, abs=1e-12)


def test_tune_beats_random_candidates():
    rng = np.random.default_rng(6)
    p = certified_gru(3, rng=rng)
    d = tune_observer(p)
    sz = deltaiss_certificate(p).sigma_z
    scale = np.abs(p.U_z).max() / np.abs(p.U_o).min() * 2
    Lz = rng.uniform(-scale, scale, (10_000, 3, 1))
    Lf = rng.uniform(-scale, scale, (10_000, 3, 1))
    vals = np.maximum(kappa_o_batch(p, Lz, Lf, sz), kappa_o_batch(p, Lz, Lf, 1 - sz))
    assert d.lambda_o <= vals.min()
    assert d.lambda_o == certify_observer(p, d.gains)
    assert d.lambda_o == max(d.kappa_upper, d.kappa_lower)


def min_inf_norm(target, U_o):
    """min_L ||target - L U_o||_inf as one epigraph LP (independent of the row split)."""
    n_x, n_y = target.shape[0], U_o.shape[0]
    nL = n_x * n_y
    nE = n_x * target.shape[1]
    # variables: L (free), E >= |target - L U_o| entrywise, t >= row sums of E
    c = np.zeros(nL + nE + 1)
    c[-1] = 1.0
    A, b = [], []
    for i in range(n_x):
        for j in range(target.shape[1]):
            row = np.zeros(nL + nE + 1)
            row[i * n_y:(i + 1) * n_y] = -U_o[:, j]
            row[nL + i * target.shape[1] + j] = -1.0
            A.append(row.copy()), b.append(-target[i, j])
            row[i * n_y:(i + 1) * n_y] = U_o[:, j]
            A.append(row), b.append(target[i, j])
        row = np.zeros(nL + nE + 1)
        row[nL + i * target.shape[1]:nL + (i + 1) * target.shape[1]] = 1.0
        row[-1] = -1.0
        A.append(row), b.append(0.0)
    bounds = [(None, None)] * nL + [(0, None)] * (nE + 1)
    return linprog(c, A_ub=np.array(A), b_ub=np.array(b), bounds=bounds, method="highs").fun


def test_decomposition_matches_monolithic_program():
    rng = np.random.default_rng(7)
    for n_y in (1, 2):
        p = certified_gru(4, 2, n_y, rng=rng)
        d = tune_observer(p)
        a = min_inf_norm(np.asarray(p.U_f), np.asarray(p.U_o))
        b = min_inf_norm(np.asarray(p.U_z), np.asarray(p.U_o))
        cert = deltaiss_certificate(p)
        norm_r = np.abs(p.U_r).sum(1).max()
        k = lambda z: (z + (1 - z) * (0.25 * a + cert.sigma_f) * norm_r
                       + 0.25 * (cert.phi_r + 1) * b)
        assert d.lambda_o == pytest.approx(max(k(cert.sigma_z), k(1 - cert.sigma_z)), abs=1e-9)


def test_open_loop_dominance():
    rng = np.random.default_rng(8)
    for _ in range(10):
        p = certified_gru(int(rng.integers(1, 6)), 1, int(rng.integers(1, 3)), rng=rng)
        assert tune_observer(p).lambda_o <= deltaiss_certificate(p).lam


def test_infeasible_model_raises():
    p = random_gru(4, 1, 1, np.random.default_rng(0), scale=3.0)
    with pytest.raises(ObserverInfeasible):
        tune_observer(p)


def test_error_contracts_every_step():
    rng = np.random.default_rng(9)
    for n_x in (2, 5):
        p = certified_gru(n_x, rng=rng)
        d = tune_observer(p)
        n = 200
        x = rng.uniform(-1, 1, (n, n_x))
        xh = rng.uniform(-1, 1, (n, n_x))
        e0 = np.linalg.norm(x - xh, axis=1)
        for k in range(50):
            u = rng.uniform(-1, 1, (n, 1))
            y = gru_output(p, x)
            err = np.abs(x - xh).max(axis=1)
            x, xh = gru_step(p, x, u), observer_step(p, d.gains, xh, u, y)
            assert np.all(np.abs(xh) <= 1.0)
            assert np.all(np.abs(x - xh).max(axis=1) <= d.lambda_o * err * (1 + 1e-12) + 1e-15)
            ek = np.linalg.norm(x - xh, axis=1)
            assert np.all(ek <= math.sqrt(n_x) * d.lambda_o ** (k + 1) * e0 * (1 + 1e-12) + 1e-15)


def test_design_file_round_trip(tmp_path):
    p = certified_gru(3, rng=10)
    d = tune_observer(p)
    save_observer(d, tmp_path / "obs.json")
    e = load_observer(tmp_path / "obs.json", p)
    np.testing.assert_array_equal(e.gains.L_z, d.gains.L_z)
    assert e.lambda_o == d.lambda_o
    assert load_observer(tmp_path / "obs.json").lambda_o == d.lambda_o
    with pytest.raises(ObserverInfeasible):
        load_observer(tmp_path / "obs.json", p.replace(U_r=10 * p.U_r))
