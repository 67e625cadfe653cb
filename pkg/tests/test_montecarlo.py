import numpy as np
import pytest

from drbsde import (BlackScholesConfig, ConfigurationError, CoxIntensity, DriverSpec, MCConfig, MCProblem,
                    PreconditionError, RegressionBasis, RegressionError, apply_cox_default, black_scholes_example,
                    lsmc_solve_drbsde, simulate_paths, solve_drbsde, solve_penalized)
from drbsde.montecarlo import black_scholes_call, sample_tree_batch, survival_probability, tree_batch
from helpers import banded_problem


def survival_fraction(batch):
    s = float(np.isinf(batch.default_step).mean())
    return s, np.sqrt(s * (1 - s) / batch.n_paths)


# ---------------------------------------------------------------------------
# paths


def test_same_seed_same_batch():
    cfg = MCConfig(10, 0.1)
    a = simulate_paths(cfg, 5000, 42)
    b = simulate_paths(cfg, 5000, 42)
    assert np.array_equal(a.brownian, b.brownian)
    assert not np.array_equal(a.brownian, simulate_paths(cfg, 5000, 43).brownian)


def test_batch_independent_of_threads_and_size():
    cfg = MCConfig(6, 0.2)
    one = simulate_paths(cfg, 20_000, 9, threads=1)
    four = simulate_paths(cfg, 20_000, 9, threads=4)
    assert np.array_equal(one.brownian, four.brownian)
    # path p does not depend on how many paths follow it
    assert np.array_equal(simulate_paths(cfg, 9000, 9).brownian, one.brownian[:9000])


def test_terminal_moments():
    cfg = MCConfig(10, 0.1)
    BT = simulate_paths(cfg, 100_000, 5).B[:, -1]
    n = BT.size
    assert abs(BT.mean()) <= 5 * np.sqrt(1.0 / n)
    # variance of the sample variance of a Gaussian is 2 sigma^4 / n
    assert abs(BT.var() - 1.0) <= 5 * np.sqrt(2.0 / n)


def test_two_point_increments():
    cfg = MCConfig(4, 0.25, "two-point")
    b = simulate_paths(cfg, 1000, 1)
    assert set(np.unique(b.brownian)) == {-0.5, 0.5}


def test_skewed_two_point_is_centred():
    cfg = MCConfig(4, 0.25, "two-point", up_prob=0.3)
    assert abs(0.3 * cfg.moves[1] + 0.7 * cfg.moves[0]) < 1e-15


@pytest.mark.parametrize("kwargs", [dict(n_steps=0, dt=0.1), dict(n_steps=2, dt=-1.0), dict(n_steps=2, dt=0.1, increments="cauchy"),
                                    dict(n_steps=2, dt=0.1, increments="two-point", up_prob=0.0)])
def test_bad_config(kwargs):
    with pytest.raises(ConfigurationError):
        MCConfig(**kwargs)


def test_bad_seed_and_size():
    with pytest.raises(ConfigurationError):
        simulate_paths(MCConfig(2, 0.5), 10, -1)
    with pytest.raises(ConfigurationError):
        simulate_paths(MCConfig(2, 0.5), 0, 1)


# ---------------------------------------------------------------------------
# default times


def test_zero_intensity_never_defaults():
    b = apply_cox_default(simulate_paths(MCConfig(10, 0.1), 2000, 3), CoxIntensity(0.0))
    assert np.all(np.isinf(b.default_step))


def test_unit_intensity_survival():
    b = apply_cox_default(simulate_paths(MCConfig(20, 0.05), 100_000, 11), CoxIntensity(1.0))
    s, se = survival_fraction(b)
    assert abs(s - np.exp(-1.0)) <= 5 * se


def test_state_dependent_intensity_matches_pathwise_survival():
    lam = CoxIntensity(lambda t, x: 0.5 * (1 + np.tanh(x)))
    b = simulate_paths(MCConfig(20, 0.05), 100_000, 12)
    b.state = b.B
    s, se = survival_fraction(apply_cox_default(b, lam))
    assert abs(s - survival_probability(b, lam).mean()) <= 5 * se


def test_negative_intensity_rejected():
    b = simulate_paths(MCConfig(4, 0.25), 100, 1)
    b.state = b.B
    with pytest.raises(ConfigurationError):
        apply_cox_default(b, CoxIntensity(lambda t, x: x))


def test_defaults_identical_across_threads():
    lam = CoxIntensity(0.7)
    a = apply_cox_default(simulate_paths(MCConfig(8, 0.125), 30_000, 4), lam, threads=1)
    b = apply_cox_default(simulate_paths(MCConfig(8, 0.125), 30_000, 4, threads=3), lam, threads=3)
    assert np.array_equal(a.default_step, b.default_step)


# ---------------------------------------------------------------------------
# regression


def test_polynomial_fit_recovers_cubic():
    x = np.linspace(-2, 2, 200)
    R = np.stack([1 + x - x ** 3, x * x], axis=1)
    fit = RegressionBasis("polynomial", 3, ridge=0.0).fit(x, None, np.ones_like(x), R)
    np.testing.assert_allclose(fit, R, atol=1e-10)


def test_rank_deficient_design_without_ridge():
    x = np.zeros(50)
    with pytest.raises(RegressionError):
        RegressionBasis("polynomial", 2, ridge=0.0).fit(x, None, np.ones(50), np.ones((50, 1)))


def test_indicator_needs_groups():
    with pytest.raises(PreconditionError):
        RegressionBasis("indicator").fit(np.zeros(4), None, np.ones(4), np.ones((4, 1)))


def test_group_means():
    g = np.array([0, 0, 1, 1, 1])
    fit = RegressionBasis("indicator").fit(np.zeros(5), g, np.ones(5), np.arange(5.0)[:, None])
    np.testing.assert_allclose(fit[:, 0], [0.5, 0.5, 3, 3, 3])


@pytest.mark.parametrize("kwargs", [dict(kind="spline"), dict(degree=-1), dict(bins=0), dict(ridge=-1.0)])
def test_bad_basis(kwargs):
    with pytest.raises(ConfigurationError):
        RegressionBasis(**kwargs)


# ---------------------------------------------------------------------------
# regression scheme


def test_martingale_terminal_value_is_zero():
    b = simulate_paths(MCConfig(10, 0.1), 50_000, 21)
    b.state = b.B
    est = lsmc_solve_drbsde(b, MCProblem(zeta=lambda t, x: x))
    assert abs(est.value) <= 4 * est.std_error
    assert est.std_error == pytest.approx(np.sqrt(1.0 / 50_000), rel=0.2)


def test_exact_tree_mode():
    prob, _ = banded_problem(3, 3, driver=DriverSpec.linear(0.2, 0.1, 0.3))
    est = lsmc_solve_drbsde(tree_batch(prob.measure), prob, RegressionBasis("indicator"))
    assert abs(est.value - solve_drbsde(prob).Y0) <= 1e-9


def test_exact_tree_mode_penalized():
    prob, _ = banded_problem(1, 4)
    est = lsmc_solve_drbsde(tree_batch(prob.measure), prob, RegressionBasis("indicator"), penalty=50.0)
    assert abs(est.value - solve_penalized(prob, 50.0).Y0) <= 1e-9


@pytest.mark.parametrize("seed", [0, 1])
def test_sampled_tree_within_three_errors(seed):
    prob, _ = banded_problem(seed, 3)
    exact = solve_drbsde(prob).Y0
    est = lsmc_solve_drbsde(sample_tree_batch(prob.measure, 40_000, 100 + seed), prob, RegressionBasis("indicator"))
    assert est.within(exact, 3.0), (est.value, exact, est.std_error)


def test_penalized_estimates_approach_reflected():
    b = apply_cox_default(simulate_paths(MCConfig(10, 0.1), 20_000, 8), CoxIntensity(0.5))
    b.state = b.B
    prob = MCProblem(zeta=lambda t, x: 0.2 * x, lower=lambda t, x: 0.3 * x - 0.1, upper=lambda t, x: 0.3 * x + 0.2,
                     xi_survival=lambda t, x: 0.3 * x)
    refl = lsmc_solve_drbsde(b, prob).value
    gaps = [abs(lsmc_solve_drbsde(b, prob, penalty=n).value - refl) for n in (1.0, 10.0, 100.0, 1000.0)]
    assert all(g2 < g1 for g1, g2 in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_estimate_identical_across_threads():
    prob, _ = banded_problem(2, 3)
    a = lsmc_solve_drbsde(sample_tree_batch(prob.measure, 20_000, 5, threads=1), prob, RegressionBasis("indicator"))
    b = lsmc_solve_drbsde(sample_tree_batch(prob.measure, 20_000, 5, threads=4), prob, RegressionBasis("indicator"))
    assert a.value == b.value and a.std_error == b.std_error


def test_basis_sensitivity():
    b = apply_cox_default(simulate_paths(MCConfig(10, 0.1), 20_000, 31), CoxIntensity(0.5))
    b.state = b.B
    prob = MCProblem(zeta=lambda t, x: np.maximum(x, 0.0), lower=lambda t, x: 0.2 * x - 0.1,
                     upper=lambda t, x: 0.2 * x + 1.0, xi_survival=lambda t, x: 0.1 * x)
    bases = [RegressionBasis("polynomial", d) for d in (1, 2, 3, 4)] + [RegressionBasis("piecewise", bins=16)]
    ests = [lsmc_solve_drbsde(b, prob, basis) for basis in bases]
    values = np.array([e.value for e in ests])
    print("basis sensitivity:", ", ".join(f"{e.value:.5f}" for e in ests))
    # the richer bases agree within a few standard errors
    assert np.ptp(values[1:]) <= 3 * ests[-1].std_error


def test_bad_penalty_rejected():
    b = simulate_paths(MCConfig(2, 0.5), 100, 1)
    b.state = b.B
    with pytest.raises(ConfigurationError):
        lsmc_solve_drbsde(b, MCProblem(zeta=lambda t, x: x), penalty=-1.0)


# ---------------------------------------------------------------------------
# Black-Scholes


def test_closed_form_price():
    assert black_scholes_call(100, 100, 1.0, 0.05, 0.2) == pytest.approx(10.4506, abs=5e-5)
    assert black_scholes_call(100, 0, 1.0, 0.05, 0.2) == 100.0


def test_call_matches_closed_form():
    est = black_scholes_example(BlackScholesConfig(), 20_000, 3)
    assert est.within(10.4506, 3.0), (est.value, est.std_error)


def test_step_volatility_uses_integrated_variance():
    sig = lambda t: 0.2 * (1 + 0.5 * (np.asarray(t) > 0.5))  # noqa: E731
    ref = black_scholes_call(100, 100, 1.0, 0.05, sig)
    assert ref == pytest.approx(black_scholes_call(100, 100, 1.0, 0.05, np.sqrt(0.5 * 0.04 + 0.5 * 0.09)), abs=1e-6)
    est = black_scholes_example(BlackScholesConfig(sigma=sig, n_steps=50), 20_000, 4)
    assert est.within(ref, 3.0), (est.value, ref, est.std_error)


def test_zero_strike_is_spot():
    est = black_scholes_example(BlackScholesConfig(K=0.0), 20_000, 5)
    assert est.within(100.0, 3.0), (est.value, est.std_error)


def test_volatility_floor():
    with pytest.raises(ConfigurationError):
        black_scholes_example(BlackScholesConfig(sigma=1e-5), 100, 1)


def test_default_lowers_the_price():
    plain = black_scholes_example(BlackScholesConfig(), 20_000, 6)
    risky = black_scholes_example(BlackScholesConfig(intensity=0.2), 20_000, 6)
    assert risky.value < plain.value - 3 * plain.std_error
