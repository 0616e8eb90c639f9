import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_calib import dcm
from fewshot_calib.classifier import ClassifierHead, cross_entropy, logits, logits_backward, probabilities
from fewshot_calib.errors import ContractViolation

from helpers import numeric_grad, rel_error


def test_two_point_support():
    f = np.array([[1.0, 2.0], [3.0, 4.0]])
    state = dcm.fit(f)
    np.testing.assert_array_equal(state.mu, [2.0, 3.0])
    np.testing.assert_array_equal(state.sigma, [1.0, 1.0])
    np.testing.assert_array_equal(dcm.calibrate(f, state), [[-1.0, -1.0], [1.0, 1.0]])


def test_constant_dimension_is_floored():
    f = np.array([[1.0, 5.0], [3.0, 5.0]])
    state = dcm.fit(f, epsilon=1e-6)
    assert state.sigma[1] == 1e-6
    np.testing.assert_array_equal(dcm.calibrate(f, state)[:, 1], [0.0, 0.0])


def test_unfitted_state_rejected():
    with pytest.raises(ContractViolation):
        dcm.calibrate(np.ones((1, 2)), dcm.DcmState())


@pytest.mark.parametrize("seed", range(20))
def test_support_is_standardized(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(int(rng.integers(2, 30)), 6)) * rng.uniform(0.1, 10, 6) + rng.normal(0, 50, 6)
    z = dcm.calibrate(f, dcm.fit(f))
    assert np.all(np.abs(z.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(z.std(axis=0) - 1.0) < 1e-6)


@given(
    st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 2**31 - 1)
)
@settings(max_examples=50, deadline=None)
def test_affine_invariance(a, b, seed):
    f = np.random.default_rng(seed).normal(size=(8, 3))
    z1 = dcm.calibrate(f, dcm.fit(f))
    z2 = dcm.calibrate(a * f + b, dcm.fit(a * f + b))
    np.testing.assert_allclose(z2, z1, rtol=1e-6, atol=1e-6)


def test_calibration_matches_scalar_loop():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(5, 3))
    s = rng.uniform(0.5, 2, 3)
    out = dcm.calibrate(f, dcm.fit(f, scale=s))
    for k in range(3):
        col = [row[k] for row in f]
        mu = sum(col) / len(col)
        sd = (sum((v - mu) ** 2 for v in col) / len(col)) ** 0.5
        for i in range(5):
            assert out[i, k] == pytest.approx((f[i, k] - mu) / sd * s[k], abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_scale_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(6, 4))
    upstream = rng.normal(size=(6, 4))
    state = dcm.fit(f, scale=rng.uniform(0.5, 2, 4))

    def loss():
        return float(np.sum(dcm.calibrate(f, state) * upstream))

    analytic = dcm.scale_gradient(upstream, dcm.normalize(f, state))
    assert rel_error(analytic, numeric_grad(loss, state.scale)) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_passthrough_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(6, 4))
    upstream = rng.normal(size=(6, 4))
    state = dcm.fit(f, scale=rng.uniform(0.5, 2, 4))
    x = f.copy()

    def loss():
        return float(np.sum(dcm.calibrate(x, state) * upstream))

    analytic = dcm.stats_gradient_passthrough(upstream, state)
    assert rel_error(analytic, numeric_grad(loss, x)) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_full_stats_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, 4))
    upstream = rng.normal(size=(7, 4))
    s = rng.uniform(0.5, 2, 4)

    def loss():
        return float(np.sum(dcm.calibrate(x, dcm.fit(x, scale=s)) * upstream))

    analytic = dcm.stats_gradient_full(upstream, x, dcm.fit(x, scale=s))
    assert rel_error(analytic, numeric_grad(loss, x)) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_one_shot_scale_gradient_is_proportional_to_closed_form(seed):
    # 1-shot 2-way, dot head, prototypes are the calibrated support points themselves
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(2, 3))
    s = rng.uniform(0.5, 2, 3)
    labels = np.array([0, 1])
    head = ClassifierHead(10.0, "dot")
    n = dcm.normalize(f, dcm.fit(f))

    def loss():
        g = n * s
        return -np.log(probabilities(logits(g[:1], g, head))[0, 0])

    g = n * s
    p = probabilities(logits(g[:1], g, head))[0]
    closed = n[0] * ((p[0] - 1.0) * n[0] + p[1] * n[1])

    grad_logits = cross_entropy(p[None, :], labels[:1]).grad_logits
    d_f, d_w, _ = logits_backward(g[:1], g, head, grad_logits)
    upstream = d_w.copy()
    upstream[0] += d_f[0]
    production = dcm.scale_gradient(upstream, n)

    np.testing.assert_allclose(production, 2.0 * s * closed, rtol=1e-10, atol=1e-14)
    assert rel_error(production, numeric_grad(loss, s)) < 1e-4


def test_scale_gradient_single_feature_is_elementwise_product():
    g, n = np.array([[1.0, -2.0, 3.0]]), np.array([[0.5, 0.5, -1.0]])
    np.testing.assert_array_equal(dcm.scale_gradient(g, n), [0.5, -1.0, -3.0])
    np.testing.assert_array_equal(dcm.scale_gradient(np.zeros((1, 3)), n), np.zeros(3))


def test_passthrough_cancels_when_scale_equals_sigma():
    f = np.random.default_rng(0).normal(size=(4, 3))
    state = dcm.fit(f)
    state.scale = state.sigma.copy()
    g = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_allclose(dcm.stats_gradient_passthrough(g, state), g, rtol=1e-15)


def test_calibrate_is_affine_for_fixed_state():
    rng = np.random.default_rng(2)
    state = dcm.fit(rng.normal(size=(5, 3)), scale=rng.uniform(0.5, 2, 3))
    f1, f2 = rng.normal(size=3), rng.normal(size=3)
    a = 0.3
    np.testing.assert_allclose(
        dcm.calibrate(a * f1 + (1 - a) * f2, state),
        a * dcm.calibrate(f1, state) + (1 - a) * dcm.calibrate(f2, state),
        atol=1e-12,
    )


def test_mean_maps_to_zero_and_zero_scale_annihilates():
    f = np.random.default_rng(4).normal(size=(5, 3))
    state = dcm.fit(f, scale=np.array([3.0, -1.0, 7.0]))
    np.testing.assert_allclose(dcm.calibrate(state.mu, state), 0.0, atol=1e-15)
    state.scale = np.zeros(3)
    assert np.all(dcm.calibrate(f, state) == 0)


def test_single_feature_gives_epsilon_sigma():
    mu, sigma = dcm.fit_stats(np.array([[1.0, -2.0]]))
    np.testing.assert_array_equal(mu, [1.0, -2.0])
    np.testing.assert_array_equal(sigma, [1e-6, 1e-6])
