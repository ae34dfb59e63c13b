import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from scipy.special import beta, gamma

from fbmle.estimators import (DegenerateInformation, QProcess, compute_Q, estimate_arrays,
                              filter_arrays, fit_kb_relation, implied_driver, kb_constant,
                              kb_kernel, kb_lambda, kb_objects, kb_omega, loglikelihood,
                              mle_kb, mle_w_form, mle_z_form, noise_innovation, nodal_q,
                              q_linear_via_A)
from fbmle.discrete_est import classical_discrete_mle
from fbmle.fbm_engine import FbmPath, TimeGrid, sample_exact_array, sample_volterra
from fbmle.frac_ops import kappa
from fbmle.mc_harness import q_over_sqrt_t
from fbmle.sde_lab import euler_array, euler_solve, get_drift, lemma3, linear, prop2


def _path(H, theta=-1.0, drift=None, n=500, dt=0.1, seed=1):
    fb = sample_volterra(H, TimeGrid(n, dt), seed)
    return euler_solve(theta, drift or linear(), fb)


def test_handcrafted_z_form():
    g = TimeGrid(2, 1.0)
    q = QProcess(0.3, g, np.zeros(3), np.array([0.0, 1.0, 0.0]), np.array([1.0, 2.0]))
    r = mle_z_form(q)
    assert r.theta_hat == pytest.approx(-0.2, abs=1e-15)
    assert r.information == 5.0 and r.numerator == -1.0


def test_handcrafted_w_form():
    # theta_hat - theta = int Q dW / int Q^2 dt in the dX = theta b dt + dB convention
    g = TimeGrid(2, 1.0)
    q = QProcess(0.3, g, np.zeros(3), np.zeros(3), np.array([1.0, 1.0]))
    r = mle_w_form(q, np.array([0.2, -0.1]), 0.0)
    assert r.theta_hat == pytest.approx(0.05, abs=1e-15)


@pytest.mark.parametrize("drift", ["linear", "lemma3", "prop2"])
def test_brownian_case_is_classical(drift):
    d = get_drift(drift)
    p = _path(0.5, drift=d)
    q = compute_Q(p)
    assert np.array_equal(q.Q, d.b(p.X))
    assert np.max(np.abs(q.Z - p.X)) < 1e-12
    assert q.regime == "half"
    assert mle_z_form(q).theta_hat == pytest.approx(classical_discrete_mle(p.X, 0.1, d), abs=1e-12)


def test_constant_drift_beta_oracle():
    H = 0.25
    g = TimeGrid(400, 1 / 400)
    one = get_drift("linear").__class__("one", lambda x: np.ones_like(x))
    Q = nodal_q(H, g, np.zeros(401), one)
    # kappa t^{H-1/2} I^{1/2-H}[s^{1/2-H}](t) = kappa Gamma(3/2-H)/Gamma(2-2H) t^{1/2-H}
    ref = kappa(H) * beta(1.25, 0.25) / gamma(0.25)
    assert ref == pytest.approx(kappa(H) * gamma(1.25) / gamma(1.5), rel=1e-14)
    assert Q[-1] == pytest.approx(ref, rel=1e-5)
    assert Q[100] == pytest.approx(ref * 0.25**0.25, rel=1e-4)  # O(dt^2) away from s = 1


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_theta_hat_is_ratio(H):
    r = mle_z_form(compute_Q(_path(H)))
    assert r.theta_hat == pytest.approx(r.numerator / r.information, rel=1e-14)
    assert r.profile_theta[-1] == pytest.approx(r.theta_hat, rel=1e-14)
    assert np.all(np.diff(r.profile_info) >= 0)


@pytest.mark.parametrize("H", [0.3, 0.7])
@pytest.mark.parametrize("scheme", ["innovation", "quadrature"])
def test_w_and_z_forms_agree_on_implied_driver(H, scheme):
    q = compute_Q(_path(H, drift=prop2()), scheme=scheme)
    dW = implied_driver(q, -1.0)
    assert abs(mle_w_form(q, dW, -1.0).theta_hat - mle_z_form(q).theta_hat) <= 1e-10


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_innovation_of_exact_noise_is_white(H):
    g = TimeGrid(256, 0.1)
    B = sample_exact_array(H, g, 5, reps=4000)
    w = noise_innovation(H, g, B)
    assert abs(w.var() / g.dt - 1) < 0.02
    c = np.mean(w[:, 1:] * w[:, :-1]) / g.dt
    assert abs(c) < 0.01


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_w_form_with_stored_driver(H):
    # the Volterra driver differs from the model innovation only by synthesis error
    g = TimeGrid(2000, 0.05)
    fb = sample_volterra(H, g, 3)
    p = euler_solve(-1.0, linear(), fb)
    q = compute_Q(p)
    assert abs(mle_w_form(q, fb.driver, -1.0).theta_hat - mle_z_form(q).theta_hat) < 0.1


def test_kb_constants_brownian():
    assert kb_constant(0.5) == 1.0 and kb_lambda(0.5) == 1.0
    t = np.linspace(0, 5, 11)
    assert np.array_equal(kb_omega(0.5, t), t)
    assert kb_kernel(0.5, 3.0, 1.2) == 1.0


def test_kb_lambda_oracle():
    with mpmath.workdps(30):
        ref = 0.5 * mpmath.gamma(2.5) * mpmath.gamma(0.75) / mpmath.gamma(1.25)
    assert kb_lambda(0.25) == pytest.approx(float(ref), rel=1e-14)


def test_kb_brownian_objects():
    p = _path(0.5)
    kb = kb_objects(p)
    assert np.max(np.abs(kb.Z_kb - p.X)) < 1e-12
    assert np.max(np.abs(kb.Q_kb_cell - p.X[:-1])) < 1e-12
    assert np.max(np.abs(kb.Q_kb[1:] - p.X[1:])) < 1e-7  # finite-difference stencil
    assert mle_kb(kb).theta_hat == pytest.approx(classical_discrete_mle(p.X, 0.1, linear()), abs=1e-12)


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_kb_omega_increasing_and_estimate_agrees(H):
    p = _path(H, n=1000, dt=0.1)
    kb = kb_objects(p)
    assert np.all(np.diff(kb.omega) > 0)
    tk = mle_kb(kb).theta_hat
    tz = mle_z_form(compute_Q(p, scheme="quadrature")).theta_hat
    assert abs(tk - tz) <= 1e-2


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_kb_single_constant_relation(H):
    p = _path(H, n=1000, dt=0.1)
    kb = kb_objects(p)
    Q = nodal_q(H, p.grid, p.X, linear())
    C, res = fit_kb_relation(Q, kb.Q_kb, p.grid.t, H)
    assert res <= 0.01 and C > 0


def test_degenerate_information():
    g = TimeGrid(100, 0.1)
    p = euler_solve(0.0, linear(), FbmPath(0.3, g, np.zeros(101)))
    with pytest.raises(DegenerateInformation):
        mle_z_form(compute_Q(p))


@given(st.integers(0, 10**6), st.sampled_from([0.3, 0.5, 0.7]), st.floats(-2, 2))
def test_loglikelihood_maximized_at_estimate(seed, H, theta_true):
    p = _path(H, theta=theta_true, n=100, dt=0.1, seed=seed)
    q = compute_Q(p)
    dW = implied_driver(q, theta_true)
    th = mle_w_form(q, dW, theta_true).theta_hat
    assert loglikelihood(0.0, q, dW, theta_true) == 0.0
    f = lambda x: loglikelihood(x, q, dW, theta_true)
    assert f(th) >= f(theta_true) - 1e-12
    assert f(th) >= max(f(th - 1e-3), f(th + 1e-3))
    info = float(np.sum(q.q_cell**2) * q.grid.dt)
    # the quadratic's vertex
    assert (f(th + 1) - f(th - 1)) / 2 == pytest.approx(0.0, abs=1e-9 * max(1, info))


@pytest.mark.parametrize("H,theta", [(0.3, 0.0), (0.7, -1.0)])
def test_A_representation(H, theta):
    p = _path(H, theta=theta, n=4096, dt=100 / 4096)
    q = compute_Q(p, scheme="quadrature")
    A = q_linear_via_A(q)
    rel = np.linalg.norm(A[1:] - q.Q[1:]) / np.linalg.norm(q.Q[1:])
    assert rel <= 0.02


def test_A_representation_needs_quadrature_z():
    with pytest.raises(ValueError):
        q_linear_via_A(compute_Q(_path(0.3)))


def test_information_growth():
    g = TimeGrid(2000, 0.1)
    B = sample_exact_array(0.7, g, 9, reps=100)
    X = euler_array(-1.0, lemma3(), B, g.dt)
    _, q = filter_arrays(0.7, g, X, lemma3())
    I = np.cumsum(q**2, axis=-1) * g.dt
    assert np.all(np.diff(I, axis=-1) >= 0)
    assert np.all(I[:, 1999] > I[:, 499])


def test_q_sup_bound():
    g = TimeGrid(2000, 0.1)
    B = sample_exact_array(0.3, g, 10, reps=100)
    Q = nodal_q(0.3, g, B, linear())
    t = g.t[1:]
    c = np.max(np.abs(Q[:, 1:]) / t**0.6, axis=1)
    # a single c serves every path on [t_1, 200]; no path is wildly off the pack
    assert np.all(np.isfinite(Q))
    assert np.max(c) < 10 * np.median(c)


def test_q_scaling_law():
    # theta = 0 and b linear: Q_t / sqrt(t) has the same law at t and 4t
    a = q_over_sqrt_t(0.3, linear(), 10.0, 256, 0, 3000)
    b = q_over_sqrt_t(0.3, linear(), 40.0, 256, 1, 3000)
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_batch_estimate_matches_single():
    g = TimeGrid(300, 0.1)
    B = sample_exact_array(0.3, g, 2, reps=3)
    X = euler_array(-1.0, linear(), B, g.dt)
    dZ, q = filter_arrays(0.3, g, X, linear())
    batch = estimate_arrays(dZ, q, g.dt)
    from fbmle.sde_lab import SdePath
    for r in range(3):
        fb = FbmPath(0.3, g, B[r])
        one = mle_z_form(compute_Q(SdePath(-1.0, linear(), fb, X[r]))).theta_hat
        assert batch[r] == pytest.approx(one, rel=1e-12)


def test_result_json_and_profile(tmp_path):
    r = mle_z_form(compute_Q(_path(0.3)), seed=4)
    d = json.loads(r.to_json())
    assert {"method", "H", "theta_hat", "information", "numerator", "n", "dt", "T", "seed"} <= set(d)
    assert d["seed"] == 4 and d["method"] == "z-form"
    r.profile_csv(tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "t,theta_hat_t,I_t" and len(rows) == 501
