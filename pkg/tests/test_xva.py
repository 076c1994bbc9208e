import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from deep_xva.bsde import SolverConfig, TrainedBsde, ValuePaths, evaluate, rollout, train
from deep_xva.market import MarketModel, PathBatch, build_time_grid, simulate
from deep_xva.neural import forward, init_network
from deep_xva.oracles import bs_delta, constant_exposure_dva
from deep_xva.xva import (NO_COLLATERAL, ClaimSolution, CollateralSpec, Curve, SingularDiffusion, XvaRates,
                          a_posteriori_bound, adjustment_from_values, adjustment_mc, aggregate_portfolio,
                          call_claim, clean_claim_problem, collateral, cva_dva_integrand, exposure_profile,
                          forward_claim, portfolio_paths, sensitivities, solve_xva, xva_driver, xva_paths,
                          xva_problem, xva_solution_from_bytes, xva_solution_to_bytes)

BASKET_RATES = XvaRates(r=0.01, intensity_bank=0.01, intensity_counterparty=0.10,
                        recovery_bank=0.4, recovery_counterparty=0.3)
FUNDING_RATES = XvaRates(r=0.02, funding_lending=0.04, funding_borrowing=0.04)
THRESHOLD_5 = CollateralSpec(5.0, 5.0, enabled=True)


def zero_nets(N, d=1, hidden=(3,)):
    nets = init_network((d, *hidden, d), 0, stack=N)
    for a in nets.arrays():
        a[...] = 0.0
    return nets


def frozen_claim(claim, rates, N, xi, d=1):
    """A claim 'solution' with zero controls: its value grows deterministically from xi."""
    grid = build_time_grid(1.0, N)
    trained = TrainedBsde(grid, xi, zero_nets(N, d), best_iteration=0)
    return ClaimSolution(claim, clean_claim_problem(claim, rates, dim=d), trained, rates)


# -- rates -------------------------------------------------------------------

def test_curve_piecewise_values_and_integral():
    c = Curve((0.0, 0.5), (0.02, 0.04))
    assert c(0.25) == 0.02 and c(0.75) == 0.04
    assert c.integral(1.0) == pytest.approx(0.5 * 0.02 + 0.5 * 0.04)
    assert np.allclose(c.integral(np.array([0.0, 0.25])), [0.0, 0.005])


@pytest.mark.parametrize("times, values", [((0.5,), (0.1,)), ((0.0, 0.0), (0.1, 0.2)), ((0.0,), (0.1, 0.2))])
def test_curve_rejects_bad_knots(times, values):
    with pytest.raises(ValueError):
        Curve(times, values)


def test_rates_default_to_risk_free_and_validate():
    rates = XvaRates(0.03)
    assert rates.funding_lending(0.5) == 0.03 and rates.collateral_borrowing(0.1) == 0.03
    assert rates.intensity_bank(0.2) == 0.0
    with pytest.raises(ValueError):
        XvaRates(0.01, recovery_bank=1.5)
    with pytest.raises(ValueError):
        XvaRates(0.01, intensity_counterparty=-0.1)
    assert XvaRates.from_dict(BASKET_RATES.to_dict()) == BASKET_RATES


# -- collateral --------------------------------------------------------------

@pytest.mark.parametrize("v, c", [(0.0, 0.0), (10.0, 5.0), (-10.0, -5.0), (5.0, 0.0), (-5.0, 0.0)])
def test_collateral_thresholds(v, c):
    assert collateral(THRESHOLD_5, v) == c


def test_collateral_disabled_is_zero():
    assert np.array_equal(collateral(NO_COLLATERAL, np.array([-50.0, 0.0, 50.0])), np.zeros(3))


def test_collateral_rejects_negative_thresholds():
    with pytest.raises(ValueError):
        CollateralSpec(-1.0, 0.0, True)


@given(st.floats(-1e3, 1e3), st.floats(0, 50), st.floats(0, 50))
def test_collateral_shrinks_exposure(v, h_r, h_p):
    spec = CollateralSpec(h_r, h_p, enabled=True)
    left = v - float(collateral(spec, v))
    assert abs(left) <= abs(v) + 1e-9
    assert -h_p - 1e-9 <= left <= h_r + 1e-9


# -- integrands and drivers --------------------------------------------------

def test_integrand_vanishes_when_fully_collateralized():
    for kind in ("cva", "dva"):
        assert cva_dva_integrand(BASKET_RATES, kind, 0.3, 12.0, 12.0) == 0.0


def test_cva_vanishes_for_positive_exposure():
    assert cva_dva_integrand(BASKET_RATES, "cva", 0.5, 20.0, 3.0) == 0.0


def test_dva_hand_value():
    value = cva_dva_integrand(BASKET_RATES, "dva", 1.0, 157.99, 0.0)
    assert value == pytest.approx(0.6 * np.exp(-0.12) * 157.99 * 0.01, rel=1e-12)
    assert value == pytest.approx(0.8407, abs=1e-4)


@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(0, 1))
def test_integrands_are_nonnegative(v, c, t):
    for kind in ("cva", "dva"):
        assert cva_dva_integrand(BASKET_RATES, kind, t, v, c) >= 0.0


def test_full_collateral_limit_kills_both_integrands():
    spec = CollateralSpec(0.0, 0.0, enabled=True)
    v = np.linspace(-30, 30, 13)
    for kind in ("cva", "dva"):
        assert np.all(cva_dva_integrand(BASKET_RATES, kind, 0.5, v, collateral(spec, v)) == 0.0)


def test_driver_zero_case():
    assert xva_driver(XvaRates(0.02), 0.3, 0.0, 0.0, 0.0) == 0.0


def test_driver_basket_hand_value():
    assert xva_driver(BASKET_RATES, 0.0, 157.99, 0.0, 0.0) == pytest.approx(0.94794, abs=1e-9)


def test_driver_funding_hand_value():
    assert xva_driver(FUNDING_RATES, 0.0, 1.9801, 0.0, 0.0) == pytest.approx(0.039602, abs=1e-9)
    # borrowing side and the -r x term
    assert xva_driver(FUNDING_RATES, 0.0, 1.0, 0.0, 3.0) == pytest.approx(-0.02 * 2.0 - 0.02 * 3.0)


def test_recursion_with_zero_controls_solves_the_scalar_equation():
    """Zero controls and a deterministic portfolio: the xVA recursion is Euler for x' = -f(t, V(t), x)."""
    rates = XvaRates(r=0.02, funding_lending=0.05, funding_borrowing=0.03, intensity_bank=0.02,
                     intensity_counterparty=0.05, recovery_bank=0.4, recovery_counterparty=0.3)
    model = MarketModel.uncorrelated(100.0, 0.02, 0.0)
    v0, x0 = 1.9801, 0.5
    exact = solve_ivp(lambda t, x: -xva_driver(rates, t, v0 * np.exp(0.02 * t), 0.0, x), (0.0, 1.0), [x0],
                      rtol=1e-12, atol=1e-12).y[0, -1]
    errors = []
    for N in (50, 100, 200):
        claims = [frozen_claim(forward_claim(100.0), XvaRates(0.02), N, v0)]
        problem = xva_problem(claims, rates, NO_COLLATERAL, dim=1)
        paths = simulate(model, build_time_grid(1.0, N), 3, seed=1)
        values = rollout(problem, paths, x0, zero_nets(N)).values
        assert np.allclose(values, values[0])
        errors.append(abs(values[0, -1] - exact))
    assert errors[0] < 1e-3
    assert errors[1] <= 0.6 * errors[0] and errors[2] <= 0.6 * errors[1]


# -- portfolio aggregation ---------------------------------------------------

def _values(grid, fill, count=4):
    return ValuePaths(grid, np.full((count, grid.steps + 1), fill), np.full((count, grid.steps, 1), fill))


def test_aggregate_single_is_identity_and_sums():
    grid = build_time_grid(1.0, 3)
    one = _values(grid, 2.0)
    assert np.array_equal(aggregate_portfolio([one]).values, one.values)
    assert np.array_equal(aggregate_portfolio([one, one, one]).values, 3 * one.values)


def test_aggregate_rejects_mismatch_and_empty():
    with pytest.raises(ValueError):
        aggregate_portfolio([_values(build_time_grid(1.0, 3), 1.0), _values(build_time_grid(1.0, 4), 1.0)])
    with pytest.raises(ValueError):
        aggregate_portfolio([])


def test_identical_claims_sharing_a_solution_scale_linearly():
    model = MarketModel.uncorrelated(100.0, 0.01, 0.25)
    sol = frozen_claim(call_claim(100.0), XvaRates(0.01), 5, 10.0)
    sol.trained.nets.biases[-1][...] = 3.0
    paths = simulate(model, sol.trained.grid, 8, seed=3)
    single = portfolio_paths([sol], paths)
    triple = portfolio_paths([sol, sol, sol], paths)
    assert np.allclose(triple.values, 3 * single.values, rtol=1e-14)


def test_claim_and_its_negation_cancel():
    model = MarketModel.uncorrelated(100.0, 0.0, 0.25)
    rates = XvaRates(0.0)
    grid = build_time_grid(1.0, 20)
    cfg = SolverConfig(iterations=800, seed=4, xi_init="pilot", scheme="euler")
    claim = forward_claim(100.0)
    neg = claim.scaled(-1.0, "short")
    p, q = clean_claim_problem(claim, rates, model), clean_claim_problem(neg, rates, model)
    long = ClaimSolution(claim, p, train(p, model, grid, cfg))
    short = ClaimSolution(neg, q, train(q, model, grid, cfg))
    paths = simulate(model, grid, 1000, seed=8, scheme="euler")
    exact = paths.states[:, :, 0] - 100.0
    e_long = np.sqrt(np.mean((evaluate(long.trained, p, paths).values - exact) ** 2))
    e_short = np.sqrt(np.mean((evaluate(short.trained, q, paths).values + exact) ** 2))
    total = np.sqrt(np.mean(portfolio_paths([long, short], paths).values ** 2))
    assert total <= 2 * (e_long + e_short)
    assert total < 1.0


# -- Monte Carlo adjustments -------------------------------------------------

def test_adjustment_zero_without_default_risk():
    model = MarketModel.uncorrelated(100.0, 0.01, 0.25)
    sol = frozen_claim(call_claim(100.0), XvaRates(0.01), 10, 10.0)
    rates = XvaRates(0.01)
    for kind in ("cva", "dva", "bilateral"):
        est, se = adjustment_mc([sol], model, rates, NO_COLLATERAL, kind, sol.trained.grid, 64, seed=1)
        assert est == 0.0 and se == 0.0


def test_adjustment_requires_trained_claims_and_paths():
    model = MarketModel.uncorrelated(100.0, 0.01, 0.25)
    sol = frozen_claim(call_claim(100.0), XvaRates(0.01), 10, 10.0)
    sol.trained.best_iteration = -1
    with pytest.raises(RuntimeError):
        adjustment_mc([sol], model, BASKET_RATES, NO_COLLATERAL, "dva", sol.trained.grid, 64, seed=1)
    sol.trained.best_iteration = 0
    with pytest.raises(ValueError):
        adjustment_mc([sol], model, BASKET_RATES, NO_COLLATERAL, "dva", sol.trained.grid, 1, seed=1)


def test_constant_exposure_quadrature_is_first_order():
    exact = constant_exposure_dva(10.0, 0.4, 0.01, BASKET_RATES.r_tilde(0.0), 1.0)
    errs = []
    for N in (10, 20, 40, 80):
        grid = build_time_grid(1.0, N)
        est, se = adjustment_from_values(np.full((3, N + 1), 10.0), grid, BASKET_RATES, NO_COLLATERAL, "dva")
        assert se == pytest.approx(0.0, abs=1e-12)
        errs.append(est - exact)
    assert all(e > 0 for e in errs)                   # left rectangles overestimate a decreasing integrand
    assert np.allclose(np.array(errs[:-1]) / np.array(errs[1:]), 2.0, rtol=0.02)


def test_signs_of_cva_and_dva_estimates():
    grid = build_time_grid(1.0, 10)
    values = np.random.default_rng(0).normal(scale=10.0, size=(200, 11))
    for kind in ("cva", "dva"):
        assert adjustment_from_values(values, grid, BASKET_RATES, NO_COLLATERAL, kind)[0] >= 0.0
    cva = adjustment_from_values(values, grid, BASKET_RATES, NO_COLLATERAL, "cva")[0]
    dva = adjustment_from_values(values, grid, BASKET_RATES, NO_COLLATERAL, "dva")[0]
    both = adjustment_from_values(values, grid, BASKET_RATES, NO_COLLATERAL, "bilateral")[0]
    assert both == pytest.approx(dva - cva, abs=1e-12)


# -- recursive xVA ---------------------------------------------------------------

def test_zero_portfolio_gives_zero_adjustment():
    model = MarketModel.uncorrelated(100.0, 0.01, 0.25)
    grid = build_time_grid(1.0, 10)
    sol = solve_xva([], model, XvaRates(0.01), NO_COLLATERAL, grid,
                    SolverConfig(iterations=50, batch_size=32, hidden=(4,)), P=64)
    assert abs(sol.adjustment) < 1e-12
    assert sol.trained.validation_loss < 1e-8


def test_solve_xva_rejects_unknown_training_mode():
    model = MarketModel.uncorrelated(100.0, 0.01, 0.25)
    with pytest.raises(ValueError):
        solve_xva([], model, XvaRates(0.01), NO_COLLATERAL, build_time_grid(1.0, 4),
                  SolverConfig(iterations=5), P=8, training="online")


def test_xva_solution_round_trip():
    model = MarketModel.uncorrelated(100.0, 0.02, 0.25)
    grid = build_time_grid(1.0, 8)
    claims = [frozen_claim(forward_claim(100.0), XvaRates(0.02), 8, 1.98)]
    sol = solve_xva(claims, model, FUNDING_RATES, THRESHOLD_5, grid,
                    SolverConfig(iterations=30, batch_size=16, hidden=(5,), seed=2), P=32, training="fixed")
    back = xva_solution_from_bytes(xva_solution_to_bytes(sol), claims, dim=1)
    assert back.adjustment == sol.adjustment and back.spec == THRESHOLD_5 and back.rates == FUNDING_RATES
    paths = simulate(model, grid, 20, seed=9)
    assert np.array_equal(xva_paths(back, paths).values, xva_paths(sol, paths).values)


# -- exposures ---------------------------------------------------------------

def test_deterministic_positive_exposure():
    grid = build_time_grid(1.0, 4)
    prof = exposure_profile(_values(grid, 3.5), XvaRates(0.0))
    assert np.array_equal(prof.depe, np.full(5, 3.5)) and np.array_equal(prof.dene, np.zeros(5))
    assert np.array_equal(prof.depe_se, np.zeros(5))


def test_exposure_discounting_and_signs():
    grid = build_time_grid(1.0, 2)
    vp = ValuePaths(grid, np.array([[1.0, 2.0, -4.0], [-1.0, -2.0, 4.0]]), np.zeros((2, 2, 1)))
    prof = exposure_profile(vp, XvaRates(0.1))
    disc = np.exp(-0.1 * grid.nodes)
    assert np.allclose(prof.depe, disc * np.array([0.5, 1.0, 2.0]))
    assert np.allclose(prof.dene, -disc * np.array([0.5, 1.0, 2.0]))


# -- sensitivities -----------------------------------------------------------

def test_zero_controls_give_zero_delta():
    model = MarketModel.uncorrelated(100.0, 0.01, 0.25)
    sol = frozen_claim(call_claim(100.0), XvaRates(0.01), 6, 10.0)
    paths = simulate(model, sol.trained.grid, 5, seed=1)
    sens = sensitivities(sol, paths, model, gamma=True)
    assert not sens.delta.any() and not sens.gamma.any()


def test_zero_price_is_singular():
    model = MarketModel.uncorrelated(100.0, 0.01, 0.25)
    sol = frozen_claim(call_claim(100.0), XvaRates(0.01), 2, 10.0)
    grid = sol.trained.grid
    paths = PathBatch(grid, np.zeros((1, 3, 1)), np.zeros((1, 2, 1)), seed=0)
    with pytest.raises(SingularDiffusion):
        sensitivities(sol, paths, model)


def test_gamma_matches_finite_differences_of_delta():
    model = MarketModel.uncorrelated(100.0, 0.01, 0.25)
    sol = frozen_claim(call_claim(100.0), XvaRates(0.01), 3, 10.0)
    nets = sol.trained.nets
    rng = np.random.default_rng(5)
    nets.weights[0][...] = rng.uniform(0.5, 1.0, size=nets.weights[0].shape)
    nets.weights[1][...] = rng.uniform(0.5, 1.0, size=nets.weights[1].shape)
    nets.biases[0][...] = 1.0                     # hidden units stay active near S = 100
    nets.shift[...], nets.scale[...] = 100.0, 20.0
    paths = simulate(model, sol.trained.grid, 4, seed=2)
    sens = sensitivities(sol, paths, model, gamma=True)
    h = 1e-4
    for n in range(3):
        s = paths.states[:, n, :]

        def delta(x):
            return forward(nets[n], x)[0][:, 0] / (0.25 * x[:, 0])

        fd = (delta(s + h) - delta(s - h)) / (2 * h)
        assert np.allclose(sens.gamma[:, n, 0, 0], fd, rtol=1e-6)


@pytest.fixture(scope="module")
def trained_call():
    model = MarketModel.uncorrelated(100.0, 0.01, 0.25)
    rates = XvaRates(0.01)
    problem = clean_claim_problem(call_claim(100.0), rates, model)
    trained = train(problem, model, build_time_grid(1.0, 50), SolverConfig(iterations=2000, seed=3, xi_init="pilot"))
    return model, ClaimSolution(call_claim(100.0), problem, trained, rates)


def test_call_delta_at_inception(trained_call):
    model, sol = trained_call
    paths = simulate(model, sol.trained.grid, 16, seed=4)
    delta0 = sensitivities(sol, paths, model).delta[:, 0, 0]
    assert np.allclose(delta0, delta0[0])
    assert delta0[0] == pytest.approx(bs_delta(100, 100, 0.01, 0.25, 1.0), abs=0.02)


def test_call_mean_discounted_value_is_flat(trained_call):
    """With the driver -r y the recursion keeps E[Y_n] = xi (1 + r dt)^n whatever the controls."""
    model, sol = trained_call
    grid = sol.trained.grid
    paths = simulate(model, grid, 4096, seed=5)
    values = evaluate(sol.trained, sol.problem, paths).values
    growth = (1 + 0.01 * grid.dt) ** np.arange(grid.steps + 1)
    se = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
    assert np.all(np.abs(values.mean(axis=0) - sol.trained.xi * growth) <= 4 * se + 1e-9)
    prof = exposure_profile(evaluate(sol.trained, sol.problem, paths), sol.rates)
    assert np.all(prof.depe >= 0) and np.all(prof.dene <= 0)


def test_forward_delta_is_one():
    model = MarketModel.uncorrelated(100.0, 0.0, 0.25)
    rates = XvaRates(0.0)
    problem = clean_claim_problem(forward_claim(100.0), rates, model)
    grid = build_time_grid(1.0, 20)
    trained = train(problem, model, grid, SolverConfig(iterations=1000, seed=6, xi_init="pilot"))
    paths = simulate(model, grid, 500, seed=7)
    delta = sensitivities(ClaimSolution(forward_claim(100.0), problem, trained, rates), paths, model).delta
    assert np.mean(np.abs(delta - 1.0)) <= 0.05


# -- a posteriori bound ------------------------------------------------------

def test_bound_examples():
    assert a_posteriori_bound([0.0002, 0.0002], 0.01, 1.0) == pytest.approx(0.10198, abs=1e-5)
    assert a_posteriori_bound([0.0], 1e-12) == pytest.approx(1e-6)
    assert a_posteriori_bound([0.0], 0.0) == 0.0


@settings(max_examples=30)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.5), st.floats(1e-3, 0.5))
def test_bound_is_monotone(loss, dt, bump_loss, bump_dt):
    base = a_posteriori_bound([loss], dt, 2.0)
    assert a_posteriori_bound([loss + bump_loss], dt, 2.0) >= base
    assert a_posteriori_bound([loss], dt + bump_dt, 2.0) > base


def test_bound_rejects_negative_loss():
    with pytest.raises(ValueError):
        a_posteriori_bound([-1.0], 0.1)
