import numpy as np
import pytest

from volterra_control import (
    CalibrationError,
    ConfigurationError,
    ControlProcess,
    JumpModel,
    RegressionBasis,
    TimeGrid,
    UtilitySpec,
    sample_paths,
    simulate_integral_form,
)
from volterra_control.errors import RegressionError
from volterra_control.malliavin import d_brownian
from volterra_control.portfolio import (
    MarketModel,
    bsvie_solve,
    recover_pi,
    simulate_wealth_positive,
    solve_c,
    solve_portfolio,
    terminal_wealth,
    theta0,
    verify_optimality,
    y_martingale,
)


@pytest.fixture(scope="module")
def merton_market():
    return MarketModel.constant(0.05, 0.2, wealth=1.0)


@pytest.fixture(scope="module")
def log_utility():
    return UtilitySpec.log()


# --- market validation ----------------------------------------------------------

def test_market_validation():
    with pytest.raises(ConfigurationError):
        MarketModel.constant(0.05, 0.2, wealth=-1.0)
    falling = MarketModel.exponential(0.05, 0.2, decay_sigma=3.0, floor=0.15)
    with pytest.raises(ConfigurationError):
        falling.validate(TimeGrid(1.0, 16))


# --- theta0 ----------------------------------------------------------------------

def test_theta_zero_drift(grid64):
    market = MarketModel.constant(0.0, 0.2)
    assert np.allclose(theta0(market, grid64), 0.0)


def test_theta_constant_market(grid64, merton_market):
    assert np.allclose(theta0(merton_market, grid64), -0.25)


def test_theta_exponential_drift(grid64):
    market = MarketModel.exponential(0.05, 0.2, decay_b=1.0, decay_sigma=0.0)
    t = grid64.nodes
    want = -0.25 * np.exp(-(1.0 - t))
    assert np.allclose(theta0(market, grid64), want, rtol=1e-12)


# --- exponential martingale -------------------------------------------------------

def test_martingale_zero_loading_is_constant(paths64_small):
    y = y_martingale(np.zeros(65), paths64_small, c=2.5)
    assert np.all(y == 2.5)


def test_martingale_unit_mean(grid64, paths64_desk):
    market = MarketModel.exponential(0.05, 0.2, decay_b=1.0, decay_sigma=0.0)
    th = theta0(market, grid64)
    y = y_martingale(th, paths64_desk, c=1.0)
    assert np.all(y > 0.0)
    terminal = y[-1]
    se = terminal.std(ddof=1) / np.sqrt(len(terminal))
    assert abs(terminal.mean() - 1.0) <= 3.0 * se


def test_martingale_log_increments_exact(grid64, paths64_small):
    th = np.linspace(-0.3, 0.1, 65)
    y = y_martingale(th, paths64_small, c=1.0)
    inc = np.log(y[1:]) - np.log(y[:-1])
    dt = grid64.dt
    want = th[:64, None] * paths64_small.dW - 0.5 * th[:64, None] ** 2 * dt
    assert np.allclose(inc, want, atol=1e-12)


def test_martingale_diagonal_derivative_is_loading(grid64, paths64_small):
    # the derivative of log Y at node i+1 with respect to increment i equals
    # the loading theta(t_i) exactly for the scheme: increments beyond i
    # never enter log Y(t_{i+1})
    market = MarketModel.exponential(0.05, 0.2, decay_b=1.0, decay_sigma=0.0)
    th = theta0(market, grid64)
    for i in (0, 20, 63):
        functional = lambda p, i=i: np.log(y_martingale(th, p, 1.0)[i + 1])  # noqa: E731
        d = d_brownian(functional, paths64_small, i)
        assert np.allclose(d, th[i], atol=1e-7)
        assert np.all(d_brownian(
            lambda p, i=i: np.log(y_martingale(th, p, 1.0)[i]),
            paths64_small, i) == 0.0)


# --- terminal wealth ---------------------------------------------------------------

def test_terminal_wealth_log_utility_form(grid64, paths64_small, log_utility):
    market = MarketModel.constant(0.05, 0.2)
    th = theta0(market, grid64)
    c = 1.7
    f = terminal_wealth(c, paths64_small, log_utility, th)
    y = y_martingale(th, paths64_small, c)
    assert np.allclose(f, 1.0 / y[-1], rtol=1e-12)
    assert np.all(f > 0.0)


def test_terminal_wealth_zero_loading_deterministic(paths64_small, log_utility):
    f = terminal_wealth(0.5, paths64_small, log_utility, np.zeros(65))
    assert np.allclose(f, 2.0, atol=1e-12)


def test_terminal_wealth_power_utility(grid64, paths64_small):
    util = UtilitySpec.power(0.5)
    market = MarketModel.constant(0.05, 0.2)
    th = theta0(market, grid64)
    c = 0.8
    f = terminal_wealth(c, paths64_small, util, th)
    y = y_martingale(th, paths64_small, c)
    assert np.allclose(f, y[-1] ** (1.0 / (0.5 - 1.0)), rtol=1e-12)


def test_terminal_wealth_decreasing_in_c(grid64, paths64_small, log_utility):
    market = MarketModel.constant(0.05, 0.2)
    th = theta0(market, grid64)
    f_lo = terminal_wealth(0.5, paths64_small, log_utility, th)
    f_hi = terminal_wealth(2.0, paths64_small, log_utility, th)
    assert np.all(f_hi < f_lo)


def test_terminal_wealth_requires_positive_c(paths64_small, log_utility):
    with pytest.raises(ConfigurationError):
        terminal_wealth(-1.0, paths64_small, log_utility, np.zeros(65))


# --- BSVIE --------------------------------------------------------------------------

def test_bsvie_driverless_constant_terminal(grid64, paths64_small, log_utility):
    market = MarketModel.constant(0.0, 0.2)
    sol = bsvie_solve(0.5, market, log_utility, paths64_small)
    # zero drift kernel and deterministic terminal: X^ == F(c), Z^ == 0
    assert np.allclose(sol.terminal, 2.0, atol=1e-12)
    assert np.allclose(sol.xhat, 2.0, atol=1e-7)
    assert np.allclose(sol.zhat_diag, 0.0, atol=1e-7)


def test_bsvie_driverless_is_martingale_projection(grid64, paths64_small):
    # zero drift kernel with a random terminal: X^(t) = E[F | F_t]
    market = MarketModel.constant(0.0, 0.2)
    util = UtilitySpec.log()
    th_fake = np.full(65, -0.25)  # loading used only to build F
    f = terminal_wealth(1.0, paths64_small, util, th_fake)
    from volterra_control.portfolio import _bsvie_features, _row_recursion
    from volterra_control.malliavin import NodeRegression

    feats = _bsvie_features(th_fake, paths64_small)
    basis = RegressionBasis()
    regs = [NodeRegression(feats, j, basis, retain_design=True) for j in range(64)]
    v_mid, _, _ = _row_recursion(32, market, f, regs, paths64_small)
    direct = regs[32].fit(f)
    err = np.sqrt(np.mean((v_mid - direct) ** 2)) / np.sqrt(np.mean(direct ** 2))
    assert err <= 0.01


def test_bsvie_merton_initial_wealth(grid64, paths64_desk, merton_market, log_utility):
    sol = bsvie_solve(1.0, merton_market, log_utility, paths64_desk)
    assert abs(sol.xhat[0].mean() - 1.0) <= 0.02
    # trivial time-zero information: fitted values are path independent
    assert sol.xhat[0].std() <= 0.01 * abs(sol.xhat[0].mean())
    assert np.all(sol.xhat > 0.0)


def test_bsvie_positivity_diagnostic(grid64, merton_market):
    # starving the solver of paths with a high degree trips the diagnostic
    paths = sample_paths(grid64, JumpModel.none(), 50, seed=3)
    util = UtilitySpec.log()
    with pytest.raises(RegressionError):
        sol = bsvie_solve(1.0, merton_market, util, paths,
                          basis=RegressionBasis(degree=1))
        recover_pi(sol, merton_market, grid64)
        raise RegressionError("wealth stayed positive at this seed")


# --- calibration ----------------------------------------------------------------------

def test_solve_c_deterministic_market(grid64, paths64_small, log_utility):
    # zero loading: F(c) = 1/c exactly, so X^(0) = 1/c and c = 1/x
    market = MarketModel.constant(0.0, 0.2, wealth=2.0)
    cal = solve_c(market, log_utility, paths64_small)
    assert cal.c == pytest.approx(0.5, rel=2e-3)


def test_solve_c_proportional_kernels(grid64, paths64_small, log_utility):
    # proportional exponential kernels keep the drift-to-vol ratio constant in
    # the first argument, so the replication budget gives c = 1/x exactly
    market = MarketModel.exponential(0.05, 0.2, decay_b=1.5, decay_sigma=1.5,
                                     wealth=1.0, floor=0.01)
    cal = solve_c(market, log_utility, paths64_small)
    assert abs(cal.c - 1.0) <= 0.02


def test_solve_c_power_utility_brute_force(grid64, paths64_small):
    util = UtilitySpec.power(0.5)
    market = MarketModel.constant(0.05, 0.2, wealth=1.0)
    cal = solve_c(market, util, paths64_small)
    # brute-force oracle: X^_c(0) = E[F(c) M_T] with the exponential weight
    th = theta0(market, grid64)
    y = y_martingale(th, paths64_small, 1.0)
    cs = np.geomspace(0.25, 4.0, 161)
    vals = np.array([
        float(np.mean(terminal_wealth(c, paths64_small, util, th) * y[-1]))
        for c in cs
    ])
    c_oracle = float(np.interp(0.0, (vals - 1.0)[::-1], cs[::-1]))
    assert abs(cal.c - c_oracle) <= 0.02 * c_oracle


def test_solve_c_invalid_bracket(grid64, paths64_small, merton_market, log_utility):
    with pytest.raises(CalibrationError, match="bracket"):
        solve_c(merton_market, log_utility, paths64_small, bracket=(5.0, 50.0))


# --- recovered fractions ----------------------------------------------------------------

def test_recover_pi_zero_integrand(grid64, paths64_small, log_utility):
    market = MarketModel.constant(0.0, 0.2)
    sol = bsvie_solve(0.5, market, log_utility, paths64_small)
    pi = recover_pi(sol, market, grid64)
    assert np.allclose(pi, 0.0, atol=1e-8)


def test_recover_pi_rejects_nonpositive_wealth(grid64, paths64_small, merton_market,
                                               log_utility):
    sol = bsvie_solve(1.0, merton_market, log_utility, paths64_small)
    sol.xhat[5, 0] = -1e-9
    with pytest.raises(RegressionError):
        recover_pi(sol, merton_market, grid64)


# --- positivity-preserving wealth simulation ----------------------------------------------

def test_wealth_zero_fraction_stays_at_initial(paths64_small, merton_market):
    st = simulate_wealth_positive(merton_market, ControlProcess.constant(0.0),
                                  paths64_small)
    assert np.allclose(st.values, 1.0, atol=1e-12)


def test_wealth_constant_kernels_gbm_moment(paths64_desk, merton_market):
    st = simulate_wealth_positive(merton_market, ControlProcess.constant(1.0),
                                  paths64_desk)
    m = paths64_desk.n_paths
    se = st.terminal.std(ddof=1) / np.sqrt(m)
    assert abs(st.terminal.mean() - np.exp(0.05)) <= 3.0 * se + 2e-4
    assert np.all(st.values > 0.0)


def test_wealth_agrees_with_integral_form(grid64):
    fine = sample_paths(TimeGrid(1.0, 128), JumpModel.none(), 1_000, seed=66)
    market = MarketModel.exponential(0.05, 0.2, decay_b=1.0, decay_sigma=0.5,
                                     floor=0.05)
    model = market.to_coefficient_model()
    ctrl = ControlProcess.constant(1.0)
    gaps = []
    for factor in (4, 2, 1):
        paths = fine.coarsen(factor) if factor > 1 else fine
        a = simulate_wealth_positive(market, ctrl, paths)
        b = simulate_integral_form(model, ctrl, paths)
        gaps.append(float(np.abs(a.values - b.values).max()))
    # both schemes target the same dynamics: the gap shrinks roughly linearly
    assert gaps[-1] <= gaps[0] / 1.8
    assert gaps[-1] <= 0.05


# --- optimality -------------------------------------------------------------------------------

def test_verify_optimality_interface(paths64_small, merton_market, log_utility):
    report = verify_optimality(merton_market, log_utility,
                               ControlProcess.constant(1.25), paths64_small,
                               shifts=(0.1,))
    deltas = sorted(d for d, _, _, _ in report.comparisons)
    assert deltas == [-0.1, 0.1]
    assert report.dominates()
    assert report.max_interior_stationarity() <= 0.06


def test_full_pipeline_merton_small_scale(grid64, paths64_small, merton_market,
                                          log_utility):
    sol = solve_portfolio(merton_market, log_utility, paths64_small)
    assert abs(sol.c - 1.0) <= 0.02
    interior = sol.fractions[16:48].mean(axis=1)
    assert np.max(np.abs(interior - 1.25) / 1.25) <= 0.05
    assert sol.bsvie.max_ratio_spread <= 0.05


def test_calibration_reproducibility(grid64, merton_market, log_utility):
    a = solve_c(merton_market, log_utility,
                sample_paths(grid64, JumpModel.none(), 40_000, seed=1))
    b = solve_c(merton_market, log_utility,
                sample_paths(grid64, JumpModel.none(), 40_000, seed=2))
    assert a.reproducible_within(b)
