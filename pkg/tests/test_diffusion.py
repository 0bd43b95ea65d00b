import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddspo_lab.diffusion import (NoiseSchedule, ancestral_step, build_linear_schedule, default_schedule,
                                 forward_diffuse, gaussian_bayes_mse, gaussian_optimal_eps, posterior_std,
                                 predict_x0_from_eps, sample, sample_conditions)
from oracles import gaussian_chain


def test_single_step_schedule():
    s = build_linear_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.betas, [0.1])
    np.testing.assert_allclose(s.alphas_bar, [0.9])


def test_four_step_cumulative_product():
    s = build_linear_schedule(4, 0.1, 0.4)
    np.testing.assert_allclose(s.betas, [0.1, 0.2, 0.3, 0.4], atol=1e-15)
    np.testing.assert_allclose(s.alphas_bar, [0.9, 0.72, 0.504, 0.3024], atol=1e-12)


def test_constant_schedule():
    np.testing.assert_allclose(build_linear_schedule(2, 0.5, 0.5).alphas_bar, [0.5, 0.25])


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.1, 1.0), (5, 0.3, 0.2), (5, -0.1, 0.2)])
def test_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        build_linear_schedule(*args)


@given(T=st.integers(1, 300), lo=st.floats(1e-5, 0.5), span=st.floats(0, 0.49))
def test_schedule_invariants(T, lo, span):
    s = build_linear_schedule(T, lo, lo + span)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all((s.alphas_bar > 0) & (s.alphas_bar < 1))
    assert np.all(np.diff(s.alphas_bar) < 0)
    prev = np.concatenate([[1.0], s.alphas_bar[:-1]])
    np.testing.assert_allclose(s.alphas_bar, prev * (1 - s.betas), rtol=1e-13)
    assert s.alpha_bar(0) == 1.0


def test_schedule_arrays_are_read_only():
    s = default_schedule()
    with pytest.raises(ValueError):
        s.betas[0] = 0.5


def test_schedule_json_round_trip():
    s = build_linear_schedule(37, 2e-4, 0.03)
    d = s.to_dict()
    assert d == {"T": 37, "beta_start": 2e-4, "beta_end": 0.03}
    r = NoiseSchedule.from_dict(d)
    np.testing.assert_array_equal(r.alphas_bar, s.alphas_bar)


def _sched_with_abar(abar):
    # T=1 schedule with beta = 1 - abar
    return build_linear_schedule(1, 1 - abar, 1 - abar)


def test_forward_diffuse_worked_example():
    s = _sched_with_abar(0.72)
    out = forward_diffuse(s, [1.0, 0.0], 1, [0.5, -0.5])
    np.testing.assert_allclose(out, [1.113103, -0.264575], atol=1e-6)


def test_forward_diffuse_identity_at_zero_noise():
    x0 = np.array([0.3, -1.2])
    np.testing.assert_array_equal(forward_diffuse(default_schedule(), x0, 0, [5.0, 5.0]), x0)


def test_forward_diffuse_zero_signal():
    s = default_schedule()
    e = np.array([0.7, -0.2])
    np.testing.assert_allclose(forward_diffuse(s, [0.0, 0.0], 40, e), np.sqrt(1 - s.alpha_bar(40)) * e)


def test_forward_diffuse_rejects_bad_step():
    with pytest.raises(ValueError):
        forward_diffuse(default_schedule(), [0.0, 0.0], 101, [0.0, 0.0])


def test_predict_x0_inverts_worked_example():
    s = _sched_with_abar(0.72)
    np.testing.assert_allclose(predict_x0_from_eps(s, [1.113103, -0.264575], 1, [0.5, -0.5]), [1, 0], atol=1e-6)


def test_predict_x0_zero_eps_rescales():
    s = default_schedule()
    x = np.array([0.4, 0.9])
    np.testing.assert_allclose(predict_x0_from_eps(s, x, 10, [0, 0]), x / np.sqrt(s.alpha_bar(10)))


@given(seed=st.integers(0, 2**31), t=st.integers(1, 100))
def test_posterior_mean_inverts_forward(seed, t):
    rng = np.random.default_rng(seed)
    s = default_schedule()
    x0, eps = rng.standard_normal((8, 2)) * 3, rng.standard_normal((8, 2))
    back = predict_x0_from_eps(s, forward_diffuse(s, x0, t, eps), t, eps)
    np.testing.assert_allclose(back, x0, atol=1e-9)


@pytest.mark.parametrize("t", [1, 30, 100])
def test_forward_marginal_variance(t):
    s = default_schedule()
    rng = np.random.default_rng(t)
    v = 0.5
    x0 = np.sqrt(v) * rng.standard_normal((10_000, 2))
    out = forward_diffuse(s, x0, t, rng.standard_normal((10_000, 2)))
    expected = s.alpha_bar(t) * v + 1 - s.alpha_bar(t)
    # standard error of a Gaussian sample variance
    se = expected * np.sqrt(2 / (10_000 - 1))
    assert np.all(np.abs(out.var(axis=0, ddof=1) - expected) < 3 * se)


def test_single_step_inversion_with_true_noise():
    s = build_linear_schedule(1, 0.3, 0.3)
    x0, eps = np.array([1.5, -0.5]), np.array([0.2, 0.9])
    x1 = forward_diffuse(s, x0, 1, eps)
    out = ancestral_step(s, lambda x, t, c: eps, x1, 1, 0, np.array([3.0, 3.0]))
    np.testing.assert_allclose(out, x0, atol=1e-12)


def test_tiny_beta_zero_eps_step_is_identity():
    s = build_linear_schedule(2, 1e-12, 1e-12)
    x = np.array([0.4, -2.0])
    np.testing.assert_allclose(ancestral_step(s, lambda x, t, c: np.zeros(2), x, 2, 0, np.zeros(2)), x,
                               atol=1e-10)


def test_posterior_std_final_step_is_zero():
    s = default_schedule()
    assert posterior_std(s, 1) == 0.0
    assert posterior_std(s, 50) > 0


def test_sample_is_deterministic_and_seed_sensitive():
    s = default_schedule()
    f = gaussian_optimal_eps(s, [2.0, 0.0], 0.1)
    a, b, c = sample(s, f, 0, 50, 7), sample(s, f, 0, 50, 7), sample(s, f, 0, 50, 8)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_sample_zero_count_returns_empty():
    out = sample(default_schedule(), lambda x, t, c: np.zeros_like(x), 0, 0, 1)
    assert out.shape == (0, 2)


def test_gaussian_chain_matches_exact_recursion():
    m, sd = gaussian_chain.chain_moments(2.0, 0.1)
    np.testing.assert_allclose([m, sd], [1.998303951376256, 0.08764498696490344], rtol=1e-12)
    s = default_schedule()
    pts = sample(s, gaussian_optimal_eps(s, [2.0, 0.0], 0.1), 0, 20_000, 3)
    # Monte Carlo agrees with the exact Gaussian law of the chain
    assert abs(pts[:, 0].mean() - m) < 4 * sd / np.sqrt(20_000)
    assert abs(pts.std(axis=0) / sd - 1).max() < 4 * np.sqrt(1 / (2 * 20_000))


def test_sample_conditions_shapes():
    s = default_schedule()
    pts, labs = sample_conditions(s, lambda x, t, c: np.zeros_like(x), [0, 1, 2], 4, 0)
    assert pts.shape == (12, 2)
    np.testing.assert_array_equal(labs, np.repeat([0, 1, 2], 4))


def test_bayes_mse_oracle():
    s = default_schedule()
    a = s.alphas_bar
    expected = 2 * np.mean(a * 0.01 / (a * 0.01 + 1 - a))
    assert gaussian_bayes_mse(s, 0.1, 2) == pytest.approx(expected, rel=1e-12)
