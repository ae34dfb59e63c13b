import numpy as np
import pytest
from hypothesis import given, strategies as st

from fbmle.fbm_engine import FbmPath, TimeGrid, sample_exact, sample_exact_array, sample_volterra
from fbmle.sde_lab import (DivergenceError, custom, drift_registry_list, euler_array, euler_solve,
                           fou_exact, fou_exact_array, get_drift, gronwall_check, lemma3, linear,
                           prop2)


@pytest.mark.parametrize("name", ["linear", "prop2"])
def test_lipschitz_and_growth_spot_checks(name):
    assert get_drift(name).spot_check()["ok"]


def test_lemma3_growth_and_asymptote():
    d = lemma3(C=1, c=1, alpha=0.5)
    assert d.spot_check()["growth"] <= d.growth
    x = np.array([-1e6, 1e6])
    assert np.allclose((d.b(x) - 1) / x, 1.0, atol=1e-5)
    assert np.isinf(d.lipschitz)  # Hoelder only at the origin


def test_lemma3_parameter_domain():
    with pytest.raises(ValueError):
        lemma3(c=0)
    with pytest.raises(ValueError):
        lemma3(alpha=1.0)


def test_prop2_derivatives():
    d = prop2()
    x = np.linspace(-30, 30, 2001)
    h = 1e-5
    assert np.allclose((d.b(x + h) - d.b(x - h)) / (2 * h), d.db(x), atol=1e-8)
    assert np.allclose((d.db(x + h) - d.db(x - h)) / (2 * h), d.d2b(x), atol=1e-8)
    assert d.db(x).min() >= 0.5 and d.db(x).max() <= 1.5
    assert np.isfinite(d.b(np.array([1e300, -1e300]))).all()


def test_registry_classes():
    reg = {d["name"]: d for d in drift_registry_list()}
    assert set(reg["linear"]["condition_class"]) == {"C gamma=0", "C'"}
    assert reg["lemma3"]["condition_class"] == ("C gamma=0",)
    assert reg["prop2"]["condition_class"] == ("C gamma=1-beta",)
    with pytest.raises(ValueError):
        get_drift("nope")


def test_custom_drift():
    d = custom(np.sin, 1.0, 1.0)
    assert d.spot_check()["ok"] and d.family == "custom"
    assert not custom(lambda x: 3 * x, 1.0, 1.0).spot_check()["ok"]


@given(st.sampled_from(["linear", "lemma3", "prop2"]), st.integers(0, 1000))
def test_zero_theta_gives_noise(name, seed):
    fb = sample_exact(0.3, TimeGrid(50, 0.1), seed)[0]
    assert np.array_equal(euler_solve(0.0, get_drift(name), fb).X, fb.values)


def test_brownian_case_is_classical_ou_euler():
    g = TimeGrid(500, 0.01)
    fb = sample_volterra(0.5, g, 2)
    X = euler_solve(-1.0, linear(), fb).X
    ref = np.zeros(501)
    for i in range(500):
        ref[i + 1] = ref[i] - ref[i] * g.dt + fb.driver[i]
    assert np.allclose(X, ref, atol=1e-12)


def test_euler_converges_to_exact_at_first_order():
    H, theta = 0.7, -0.5
    fine = sample_exact_array(H, TimeGrid(4096, 10 / 4096), 7)[0]
    gaps, dts = [], []
    for step in (16, 8, 4, 2):
        n = 4096 // step
        g = TimeGrid(n, 10 / n)
        B = fine[::step]
        gaps.append(np.max(np.abs(euler_array(theta, linear(), B, g.dt) - fou_exact_array(theta, B, g.dt))))
        dts.append(g.dt)
    order = np.polyfit(np.log(dts), np.log(gaps), 1)[0]
    assert order >= 0.9


def test_fou_exact_zero_theta():
    fb = sample_exact(0.3, TimeGrid(40, 0.1), 1)[0]
    assert np.array_equal(fou_exact(0.0, fb).X, fb.values)


def test_fou_exact_needs_linear():
    fb = sample_exact(0.3, TimeGrid(40, 0.1), 1)[0]
    with pytest.raises(ValueError):
        fou_exact(-1.0, fb, prop2())


def test_fou_exact_matches_ou_recursion():
    # H = 1/2: exact OU transition on a fine driver, compared at coarse nodes
    rng = np.random.default_rng(3)
    theta, sub, n = -1.0, 64, 200
    dt = 0.05
    h = dt / sub
    dW = rng.standard_normal(n * sub) * np.sqrt(h)
    W = np.concatenate([[0], np.cumsum(dW)])
    X = np.zeros(n * sub + 1)
    e = np.exp(theta * h)
    for i in range(n * sub):
        # int over a sub-step with the integrand at the midpoint
        X[i + 1] = e * X[i] + np.exp(theta * h / 2) * dW[i]
    fb = FbmPath(0.5, TimeGrid(n * sub, h), W)
    assert np.max(np.abs(fou_exact(theta, fb).X - X)) < 5e-3


def test_stationary_variance_plateau():
    g = TimeGrid(400, 0.1)
    B = sample_exact_array(0.7, g, 4, reps=2000)
    X = fou_exact_array(-1.0, B, g.dt)
    v20, v40 = X[:, 200].var(), X[:, 400].var()
    assert abs(v40 / v20 - 1) < 0.1


def test_gronwall_zero_theta():
    fb = sample_exact(0.3, TimeGrid(100, 0.05), 3)[0]
    rep = gronwall_check(euler_solve(0.0, linear(), fb))
    assert rep["pass"] and rep["rhs"] == pytest.approx(np.abs(fb.values).max())


def test_gronwall_linear_many_seeds():
    g = TimeGrid(500, 0.01)
    B = sample_exact_array(0.7, g, 8, reps=100)
    for r in range(100):
        p = euler_solve(1.0, linear(), FbmPath(0.7, g, B[r]))
        assert gronwall_check(p)["pass"]


def test_gronwall_understated_constant_fails():
    g = TimeGrid(100, 0.01)
    fb = sample_exact(0.5, g, 1)[0]
    bad = custom(lambda x: 10 * np.asarray(x, float), 10.0, 1.0)  # true growth constant is 10
    assert not gronwall_check(euler_solve(1.0, bad, fb))["pass"]


@given(st.sampled_from(["linear", "lemma3", "prop2"]), st.sampled_from([0.3, 0.5, 0.7]),
       st.integers(0, 10**6), st.sampled_from([-1.0, 0.5]))
def test_gronwall_property(name, H, seed, theta):
    fb = sample_exact(H, TimeGrid(200, 0.02), seed)[0]
    assert gronwall_check(euler_solve(theta, get_drift(name), fb))["pass"]


def test_divergence_error_names_step():
    fb = sample_exact(0.5, TimeGrid(100, 0.1), 0)[0]
    with pytest.raises(DivergenceError) as e:
        euler_solve(1e4, linear(), fb)
    assert e.value.step >= 1 and "step" in str(e.value)


def test_sign_symmetry():
    g = TimeGrid(100, 0.1)
    B = sample_exact_array(0.3, g, 12, reps=10_000)
    XT = euler_array(-1.0, prop2().__class__("odd", np.tanh), B, g.dt)[:, -1]
    assert abs(XT.mean()) <= 3 * XT.std() / np.sqrt(len(XT))
