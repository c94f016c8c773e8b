import numpy as np
import pytest

from volterra_control import (
    ConfigurationError,
    ControlProcess,
    InfoMode,
    PerformanceSpec,
    RegistrationError,
    TimeGrid,
    UtilitySpec,
    registry_get,
)


def test_registry_unknown_name():
    with pytest.raises(ConfigurationError):
        registry_get("mystery_model")


def test_constant_model_has_zero_time_partials():
    m = registry_get("constant", dict(b0=0.05, sigma0=0.2))
    t, s, x, v = 0.7, 0.3, 1.2, 0.8
    assert m.drift(t, s, x, v) == pytest.approx(0.05 * v * x)
    assert m.drift_dt(t, s, x, v) == 0.0
    assert m.diffusion_dt(t, s, x, v) == 0.0
    assert m.time_invariant_kernels
    assert not m.x_independent


def test_exp_kernel_analytic_time_partial():
    m = registry_get("exp_kernel_linear", dict(b0=0.05, sigma0=0.2, decay_b=1.0))
    t, s, x, v = 0.9, 0.4, 1.1, 0.7
    want = -0.05 * np.exp(-(t - s)) * v * x
    assert m.drift_dt(t, s, x, v) == pytest.approx(want, rel=1e-12)
    # finite difference agreement at a random sample
    h = 1e-6
    fd = (m.drift(t + h, s, x, v) - m.drift(t - h, s, x, v)) / (2 * h)
    assert m.drift_dt(t, s, x, v) == pytest.approx(fd, rel=1e-6)


def test_x_independent_flag():
    m = registry_get("x_independent_linear", dict(b0=0.1, sigma0=0.3))
    assert m.x_independent
    assert m.drift_dx(0.5, 0.2, 1.0, 1.0) == 0.0
    assert m.diffusion_dx(0.5, 0.2, 1.0, 1.0) == 0.0
    # x argument is ignored entirely
    assert m.drift(0.5, 0.2, None, 1.0) == pytest.approx(m.drift(0.5, 0.2, 99.0, 1.0))


def test_self_test_catches_wrong_partial():
    with pytest.raises(RegistrationError, match="drift_dt"):
        registry_get("custom", dict(
            initial_curve=lambda t: 1.0 + 0.0 * np.asarray(t, dtype=float),
            drift=lambda t, s, x, v: np.exp(-(t - s)) * v,
            diffusion=lambda t, s, x, v: 0.0 * v,
            jump=lambda t, s, x, v, z: 0.0 * z,
            drift_dt=lambda t, s, x, v: +np.exp(-(t - s)) * v,  # sign error
            x_independent=True,
        ))


def test_self_test_catches_false_x_independent_flag():
    with pytest.raises(RegistrationError, match="x-independent"):
        registry_get("custom", dict(
            initial_curve=lambda t: 1.0 + 0.0 * np.asarray(t, dtype=float),
            drift=lambda t, s, x, v: v * x,
            diffusion=lambda t, s, x, v: 0.0 * v,
            jump=lambda t, s, x, v, z: 0.0 * z,
            drift_dx=lambda t, s, x, v: v + 0.0 * np.asarray(x, dtype=float),
            x_independent=True,
        ))


def test_missing_partials_filled_by_finite_difference():
    m = registry_get("custom", dict(
        initial_curve=lambda t: np.sin(np.asarray(t, dtype=float)),
        drift=lambda t, s, x, v: np.sin(t) * x * v,
        diffusion=lambda t, s, x, v: 0.1 * x + 0.0 * v,
        jump=lambda t, s, x, v, z: 0.0 * z,
    ))
    assert m.drift_dt(0.3, 0.1, 1.0, 1.0) == pytest.approx(np.cos(0.3), rel=1e-4)
    assert m.drift_dx(0.3, 0.1, 1.0, 0.5) == pytest.approx(0.5 * np.sin(0.3), rel=1e-4)
    assert m.drift_dtdx(0.3, 0.1, 1.0, 0.5) == pytest.approx(0.5 * np.cos(0.3), rel=1e-3)
    assert m.initial_slope(0.4) == pytest.approx(np.cos(0.4), rel=1e-6)


def test_performance_spec_validates_terminal_prime():
    PerformanceSpec.terminal_only(lambda x: x ** 2, lambda x: 2.0 * np.asarray(x, dtype=float),
                                  domain=(-2, 2))
    with pytest.raises(RegistrationError):
        PerformanceSpec.terminal_only(lambda x: x ** 2, lambda x: 3.0 * np.asarray(x, dtype=float),
                                      domain=(-2, 2))


def test_log_utility_inverse_is_reciprocal():
    u = UtilitySpec.log()
    ys = np.geomspace(0.01, 100.0, 13)
    assert np.allclose(u.u_prime_inverse(ys), 1.0 / ys, rtol=0.0, atol=0.0)


def test_power_utility_round_trip():
    u = UtilitySpec.power(0.5)
    xs = np.geomspace(1e-2, 1e2, 17)
    assert np.allclose(u.u_prime_inverse(u.u_prime(xs)), xs, rtol=1e-12)
    with pytest.raises(ConfigurationError):
        UtilitySpec.power(1.5)
    with pytest.raises(ConfigurationError):
        UtilitySpec.power(0.0)


def test_utility_rejects_non_concave():
    with pytest.raises(RegistrationError):
        UtilitySpec(name="bad", u=lambda x: x ** 2,
                    u_prime=lambda x: 2.0 * np.asarray(x, dtype=float),
                    u_prime_inverse=lambda y: np.asarray(y, dtype=float) / 2.0)


def test_control_bounds_enforced():
    with pytest.raises(ConfigurationError):
        ControlProcess.constant(5.0, bounds=(-1.0, 1.0))
    c = ControlProcess.deterministic(np.linspace(0.0, 0.9, 8), bounds=(0.0, 1.0))
    assert c.at(3) == pytest.approx(np.linspace(0.0, 0.9, 8)[3])
    grid_vals = c.open_loop_grid(8, 5)
    assert grid_vals.shape == (8, 5)
    with pytest.raises(ConfigurationError):
        c.open_loop_grid(9, 5)


def test_control_perturbation_and_shift():
    c = ControlProcess.constant(1.0, bounds=(-10, 10))
    beta = np.zeros(4)
    beta[1:3] = 1.0
    p = c.perturbed(beta, 0.5)
    assert np.allclose(p.open_loop_grid(4, 2)[:, 0], [1.0, 1.5, 1.5, 1.0])
    s = c.shifted(-0.25)
    assert s.at(0) == pytest.approx(0.75)


def test_per_path_control_validation():
    vals = np.full((4, 3), 0.5)
    c = ControlProcess.per_path(vals, bounds=(0.0, 1.0))
    assert np.allclose(c.at(2), 0.5)
    with pytest.raises(ConfigurationError):
        ControlProcess.per_path(np.full((4, 3), 2.0), bounds=(0.0, 1.0))


def test_info_mode_lags():
    g = TimeGrid(1.0, 10)
    assert InfoMode.full().lag_steps(g) == 0
    delayed = InfoMode.delayed(0.2)
    assert delayed.lag_steps(g) == 2
    assert delayed.observable_node(5, g) == 3
    assert delayed.observable_node(1, g) == 0
    with pytest.raises(ConfigurationError):
        InfoMode.delayed(2.0).lag_steps(g)
    with pytest.raises(ConfigurationError):
        InfoMode.delayed(-0.1)
