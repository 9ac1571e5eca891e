import numpy as np
import pytest

from MicrogridModel_module import (GridLimits, Horizon, InvariantViolation, LengthMismatch, PiecewiseSocBdc,
                                   PriceProfile, RgUnit, UserSpec, soc_trajectory)
from RgForecast_module import RgForecastResult
from Scheduling_module import (Infeasible, bdc_cost, qp_interior_point, schedule_frame, schedule_residuals,
                               solve_all_individual, solve_individual, solve_social, trading_cost)

BUY = [1.0, 1.0, 10.0]


@pytest.fixture
def toy(make_model, battery, passive):
    """One passive load of 1 kW and an empty battery that may shift 0.5 kWh into the peak."""
    store = battery(e0=0.0, e_min=0.0, e_max=1.0, p_max=0.5, kappa=1.0, c_d=0.0)
    users = [UserSpec.active("1", store), passive("2")]
    return make_model(users, {"1": np.zeros(3), "2": np.ones(3)}, BUY)


def test_trading_cost():
    assert trading_cost([2, 4], [1, 1], [1, 0], [0, 3], 0.5) == pytest.approx(-0.5)


def test_trading_cost_length_mismatch():
    with pytest.raises(LengthMismatch):
        trading_cost([1, 1, 1], [1, 1, 1], [1, 1], [0, 0, 0], 1.0)


def test_trading_cost_rejects_negative_power():
    with pytest.raises(InvariantViolation):
        trading_cost([1, 1], [1, 1], [-1, 0], [0, 0], 1.0)


def test_piecewise_bdc_cost():
    bdc = PiecewiseSocBdc(((0.0, 1.0), (0.5, 3.0)))
    cost = bdc_cost(bdc, [1, 1, 1], [0, 0, 0], [2.0, 6.0, 8.0], 10.0, 1.0)
    assert cost == pytest.approx(7.0)


def test_social_matches_hand_optimum(toy):
    out = solve_social(toy, None)
    assert out.social_cost == pytest.approx(7.5, abs=1e-6)
    assert out.trading_cost == pytest.approx(7.5, abs=1e-6)
    assert out.bdc_costs == {"1": pytest.approx(0.0)}
    np.testing.assert_allclose(out.decision.discharge["1"][2], 0.5, atol=1e-6)
    residuals = schedule_residuals(toy, None, out)
    assert max(residuals.values()) <= 1e-6


def test_social_beats_every_grid_point(toy):
    # charge a at t0, b at t1, discharge min(a + b, 0.5) at t2
    grid = np.linspace(0, 0.5, 11)
    best = min(a + 1 + b + 1 + 10 * (1 - min(a + b, 0.5)) for a in grid for b in grid)
    assert solve_social(toy, None).social_cost <= best + 1e-6


def test_individual_costs(toy):
    outcomes = solve_all_individual(toy, None)
    assert outcomes["2"].ideal_selfish_cost == pytest.approx(12.0)
    # buy 0.5 kWh at 1, sell it back at 0.8 * 10
    assert outcomes["1"].ideal_selfish_cost == pytest.approx(-3.5, abs=1e-6)


def test_interior_point_backend_agrees(toy):
    user = toy.user("1")
    highs = solve_individual(user, toy.demand("1"), toy.prices, toy.grid, None, toy.horizon)
    ip = solve_individual(user, toy.demand("1"), toy.prices, toy.grid, None, toy.horizon,
                          backend="interior-point")
    assert ip.ideal_selfish_cost == pytest.approx(highs.ideal_selfish_cost, abs=1e-5)


def test_interior_point_needs_sell_below_buy(battery):
    user = UserSpec.active("1", battery())
    prices = PriceProfile(buy=np.ones(2), sell=np.full(2, 2.0))
    with pytest.raises(InvariantViolation):
        solve_individual(user, np.ones(2), prices, GridLimits(10.0), None, Horizon(2, 1.0),
                         backend="interior-point")


def test_unknown_backend(toy):
    with pytest.raises(InvariantViolation):
        solve_individual(toy.user("1"), toy.demand("1"), toy.prices, toy.grid, None, toy.horizon, backend="cplex")


def test_demand_above_grid_rating_is_infeasible(make_model, passive):
    model = make_model([passive("1")], {"1": np.array([5.0, 1.0])}, [1, 1], p_g_max=1.0)
    with pytest.raises(Infeasible):
        solve_social(model, None)
    with pytest.raises(Infeasible):
        solve_all_individual(model, None)


def test_battery_covers_what_the_grid_cannot(make_model, battery, passive):
    store = battery(e0=2.0, e_min=0.0, e_max=2.0, p_max=2.0)
    model = make_model([UserSpec.active("1", store), passive("2")], {"1": np.zeros(2), "2": np.array([3.0, 1.0])},
                       [1, 1], p_g_max=1.0)
    out = solve_social(model, None)
    assert out.decision.discharge["1"][0] == pytest.approx(2.0, abs=1e-6)


def test_terminal_soc_is_restored(make_model, battery, passive):
    store = battery(e0=1.0, e_min=0.0, e_max=1.0, p_max=1.0)
    model = make_model([UserSpec.active("1", store), passive("2")], {"1": np.zeros(3), "2": np.ones(3)}, BUY,
                       terminal_soc=True)
    out = solve_social(model, None)
    assert out.soc["1"][-1] >= store.e0 - 1e-6


def test_rg_owner_needs_forecast(shipped_model):
    with pytest.raises(InvariantViolation):
        solve_social(shipped_model, RgForecastResult({}))


def test_shipped_schedule_is_feasible(shipped_model):
    rg = RgForecastResult({u.id: np.full(24, 0.5 * u.rg.size) for u in shipped_model.rg_users})
    out = solve_social(shipped_model, rg)
    assert max(schedule_residuals(shipped_model, rg, out).values()) <= 1e-6
    individual = solve_all_individual(shipped_model, rg)
    # cooperation never costs more than everyone trading alone
    assert out.social_cost <= sum(o.ideal_selfish_cost for o in individual.values()) + 1e-6
    frame = schedule_frame(out)
    assert {"grid_buy", "grid_sell", "1_soc"} <= set(frame.columns)
    for uid in ("1", "3", "4"):
        desd = shipped_model.user(uid).desd
        np.testing.assert_allclose(out.soc[uid],
                                   soc_trajectory(desd, out.decision.discharge[uid], out.decision.charge[uid], 1.0))


def test_piecewise_bdc_schedule_converges(make_model, battery, passive):
    bdc = PiecewiseSocBdc(((0.0, 0.1), (0.5, 0.3)))
    store = battery(e0=1.0, e_min=0.0, e_max=2.0, p_max=1.0, bdc=bdc)
    model = make_model([UserSpec.active("1", store), passive("2")], {"1": np.zeros(3), "2": np.ones(3)}, BUY)
    out = solve_social(model, None)
    assert 1 <= out.linearizations <= 20
    recomputed = bdc_cost(bdc, out.decision.discharge["1"], out.decision.charge["1"], out.soc["1"], 2.0, 1.0)
    assert out.bdc_costs["1"] == pytest.approx(recomputed)


def test_qp_interior_point_bounded_minimum():
    res = qp_interior_point(np.eye(2), [-2.0, -0.5], np.vstack([np.eye(2), -np.eye(2)]), [1.0, 1.0, 1.0, 1.0])
    np.testing.assert_allclose(res.x, [1.0, 0.5], atol=1e-6)
    assert res.objective == pytest.approx(0.5 * 1.25 - 2.25, abs=1e-6)


def test_qp_interior_point_linear_program():
    # min -x - y on the unit simplex corner x + y <= 1, x, y >= 0
    G = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    res = qp_interior_point(np.zeros((2, 2)), [-1.0, -1.0], G, [1.0, 0.0, 0.0])
    assert res.objective == pytest.approx(-1.0, abs=1e-6)


def test_random_schedules_are_feasible_and_beat_trading_alone():
    from ExperimentManager import ExperimentManager

    for seed in range(50):
        model, rg = ExperimentManager.random_instance(seed)
        out = solve_social(model, rg)
        residuals = schedule_residuals(model, rg, out)
        assert residuals["balance"] <= 1e-6
        assert residuals["soc"] <= 1e-6
        assert residuals["rating"] <= 1e-6
        assert np.max(out.decision.grid_buy * out.decision.grid_sell) <= 1e-6
        for uid in out.decision.discharge:
            if model.user(uid).desd.bdc.unit_cost(np.zeros(1))[0] > 0:
                assert np.max(out.decision.discharge[uid] * out.decision.charge[uid]) <= 1e-6

        individual = solve_all_individual(model, rg)
        D = sum(o.ideal_selfish_cost for o in individual.values())
        assert D >= out.social_cost - 1e-6


@pytest.mark.parametrize("alpha", [0.5, 3.0])
def test_costs_scale_with_prices(alpha):
    from ExperimentManager import ExperimentManager

    model, rg = ExperimentManager.random_instance(11, r=4)
    base = solve_social(model, rg).social_cost
    scaled = model.scaled(alpha)
    assert solve_social(scaled, rg).social_cost == pytest.approx(alpha * base, rel=1e-6, abs=1e-6)
    scaled_individual = solve_all_individual(scaled, rg)
    for uid, outcome in solve_all_individual(model, rg).items():
        D = scaled_individual[uid].ideal_selfish_cost
        assert D == pytest.approx(alpha * outcome.ideal_selfish_cost, rel=1e-6, abs=1e-6)


def test_individual_problem_needs_forecast_for_rg_owner(shipped_model):
    with pytest.raises(InvariantViolation):
        solve_all_individual(shipped_model, RgForecastResult({}))
    user = shipped_model.user("1")
    with pytest.raises(InvariantViolation):
        solve_individual(user, shipped_model.demand("1"), shipped_model.prices, shipped_model.grid, None,
                         shipped_model.horizon)


def test_surplus_generation_earns_money(make_model, battery):
    user = UserSpec.active("1", battery(c_d=0.1), rg=RgUnit("pv", 3.0))
    model = make_model([user], {"1": np.ones(3)}, BUY)
    outcome = solve_all_individual(model, RgForecastResult({"1": np.full(3, 2.0)}))["1"]
    assert outcome.ideal_selfish_cost < 0


def test_lossy_battery_does_not_cycle_on_flat_prices(make_model, battery, passive):
    store = battery(e0=1.0, e_min=0.0, e_max=2.0, p_max=1.0, kappa=0.9, c_d=0.0)
    model = make_model([UserSpec.active("1", store), passive("2")], {"1": np.ones(4), "2": np.ones(4)},
                       [5.0, 5.0, 5.0, 5.0])
    out = solve_social(model, None)
    assert np.max(out.decision.charge["1"]) <= 1e-6
    alone = solve_all_individual(model, None)["1"]
    assert np.max(alone.decision.charge) <= 1e-6


def _rebuilt_cost(model, grid, net_battery):
    """Social cost with netted grid exchange and netted battery power."""
    dt = model.horizon.dt
    cost = trading_cost(model.prices.buy, model.prices.sell, np.maximum(grid, 0), np.maximum(-grid, 0), dt)
    for user in model.active_users:
        p = net_battery[user.id]
        dis, chg = np.maximum(p, 0), np.maximum(-p, 0)
        soc = soc_trajectory(user.desd, dis, chg, dt)
        cost += bdc_cost(user.desd.bdc, dis, chg, soc, user.desd.e_max, dt)
    return cost


def _feasible(model, grid, net_battery, tol=1e-7):
    if np.max(np.abs(grid)) > model.grid.p_g_max + tol:
        return False
    for user in model.active_users:
        d = user.desd
        p = net_battery[user.id]
        if np.max(np.abs(p)) > d.p_max + tol:
            return False
        soc = soc_trajectory(d, np.maximum(p, 0), np.maximum(-p, 0), model.horizon.dt)
        if np.min(soc) < d.e_min - tol or np.max(soc) > d.e_max + tol:
            return False
    return True


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_no_single_coordinate_move_improves_social_schedule(seed):
    from ExperimentManager import ExperimentManager

    model, rg = ExperimentManager.random_instance(seed, r=3)
    out = solve_social(model, rg)
    d = out.decision
    grid = d.grid_buy - d.grid_sell
    net_battery = {uid: d.discharge[uid] - d.charge[uid] for uid in d.discharge}
    base = _rebuilt_cost(model, grid, net_battery)
    assert base == pytest.approx(out.social_cost, abs=1e-5)
    moves = 0
    for uid in net_battery:
        for t in range(model.horizon.steps):
            for delta in (1e-3, -1e-3):
                moved = dict(net_battery)
                moved[uid] = net_battery[uid].copy()
                moved[uid][t] += delta
                moved_grid = grid.copy()
                moved_grid[t] -= delta  # grid keeps the balance
                if not _feasible(model, moved_grid, moved):
                    continue
                moves += 1
                assert _rebuilt_cost(model, moved_grid, moved) >= base - 1e-5, (uid, t, delta)
    assert moves > 0 or not net_battery
