import numpy as np
import pytest

import Bargaining_module
from Bargaining_module import (BargainingFailed, NegativeGamma, RegionPredicate, ZeroIdealCost,
                               adjusted_allocation, allocate, dishonest_benefit, estimate_region_probabilities,
                               estimate_region_probability, gamma_solo_bound, ideal_allocation, ideal_discount,
                               manipulation_interval, manipulation_lattice, region_counts, region_lattice,
                               resilience_report, selfish_cost, success_lattice)

D_W1 = np.array([-61.33, 481.18, 101.48, -23.34])
J_W1 = 438.68
D_W2 = np.array([164.92, 481.18, 382.19, 158.04])
J_W2 = 1152.87
EPS_W1 = ideal_discount(D_W1, J_W1)


def test_selfish_cost():
    assert selfish_cost(-61.33, 0.0) == -61.33
    assert selfish_cost(-61.33, 0.5) == pytest.approx(-91.995)
    assert selfish_cost(481.18, 0.1233) == pytest.approx(421.85, abs=1e-2)
    np.testing.assert_allclose(selfish_cost(D_W1, np.zeros(4)), D_W1)


def test_negative_gamma_is_rejected():
    with pytest.raises(NegativeGamma):
        selfish_cost(10.0, -0.1)
    with pytest.raises(NegativeGamma):
        adjusted_allocation(D_W1, [0, -1, 0, 0], J_W1)


@pytest.mark.parametrize("D, J_soc, expected, eps", [
    (D_W1, J_W1, [-76.16, 466.36, 86.65, -38.16], 14.83),
    (D_W2, J_W2, [156.55, 472.81, 373.82, 149.67], 8.37),
])
def test_ideal_allocation_table(D, J_soc, expected, eps):
    result = ideal_allocation(D, J_soc)
    np.testing.assert_allclose(result.J, expected, atol=1e-2)
    assert result.epsilon == pytest.approx(eps, abs=1e-2)
    assert result.success
    assert result.J.sum() == pytest.approx(J_soc)
    assert result.ideal_epsilon == result.epsilon


def test_single_player_gets_the_social_cost():
    result = allocate([50.0], 42.0)
    assert result.J.tolist() == [42.0]
    assert result.epsilon == pytest.approx(8.0)


def test_adjusted_allocation_failure_and_success():
    failed = adjusted_allocation(D_W1, [0, 0.2, 0, 0], J_W1)
    assert not failed.success
    ok = adjusted_allocation(D_W1, [0, 0.1, 0, 0], J_W1)
    assert ok.success
    assert ok.epsilon == pytest.approx((59.31 - 48.118) / 4, abs=1e-6)


def test_all_honest_keeps_ideal_discount():
    result = adjusted_allocation(D_W1, np.zeros(4), J_W1)
    assert result.epsilon == pytest.approx(EPS_W1)
    np.testing.assert_allclose(result.J, result.ideal_J)


def test_adjusted_allocation_agrees_with_allocate():
    rng = np.random.default_rng(7)
    for _ in range(500):
        r = int(rng.integers(1, 8))
        D = rng.uniform(-100, 500, size=r)
        J_soc = D.sum() - rng.uniform(0, 100)
        gamma = rng.uniform(0, 1, size=r) * (rng.random(r) < 0.6)
        direct = allocate(selfish_cost(D, gamma), J_soc)
        via_reduction = adjusted_allocation(D, gamma, J_soc)
        np.testing.assert_allclose(direct.J, via_reduction.J, atol=1e-9)
        assert direct.epsilon == pytest.approx(via_reduction.epsilon, abs=1e-9)
        assert direct.success == via_reduction.success
        assert via_reduction.J.sum() == pytest.approx(J_soc)
        if via_reduction.success:
            gains = via_reduction.ideal_J - via_reduction.J
            assert gains.sum() == pytest.approx(0.0, abs=1e-8)


def test_epsilon_decreases_with_gamma():
    previous = EPS_W1
    for g in np.linspace(0, 1, 21):
        eps = adjusted_allocation(D_W1, [0, 0, g, 0], J_W1).epsilon
        assert eps <= previous + 1e-12
        previous = eps


def test_solo_bounds():
    bounds = [gamma_solo_bound(D_W1, EPS_W1, i) for i in range(4)]
    np.testing.assert_allclose(bounds, [0.9671, 0.1233, 0.5845, 2.541], atol=1e-3)


def test_zero_ideal_cost_has_no_bound():
    D = np.array([0.0, 10.0])
    with pytest.raises(ZeroIdealCost):
        gamma_solo_bound(D, 1.0, 0)
    report = resilience_report(D, [0.3, 0.0], 8.0)
    assert report.users["1"].solo_bound is None
    assert report.users["1"].interval is None


def test_manipulation_interval():
    interval = manipulation_interval(D_W1, EPS_W1, [30.0 / 481.18, 0.0, 0.0], 0)
    assert interval.lower == pytest.approx(30 / (3 * 61.33), abs=1e-4)
    assert interval.upper == pytest.approx((59.31 - 30) / 61.33, abs=1e-4)
    assert interval.contains(0.3)
    assert not interval.contains(0.1)


def test_lone_dishonest_user_interval():
    interval = manipulation_interval(D_W1, EPS_W1, np.zeros(4), 2)
    assert interval.lower == 0.0
    assert interval.upper == pytest.approx(gamma_solo_bound(D_W1, EPS_W1, 2))


def test_surplus_used_up_by_others():
    interval = manipulation_interval(D_W1, EPS_W1, [59.31 / 61.33, 0.0, 0.0], 1)
    assert interval.upper == pytest.approx(0.0, abs=1e-9)
    assert interval.empty
    assert manipulation_interval([20.0], 5.0, [], 0).empty


def test_interval_matches_direct_evaluation():
    gamma_others = np.array([0.0, 30.0 / 481.18, 0.0, 0.0])
    interval = manipulation_interval(D_W1, EPS_W1, gamma_others, 0)
    for g in np.arange(0.0, 1.0, 1e-3):
        gamma = gamma_others.copy()
        gamma[0] = g
        r_tot = float(np.sum(gamma * np.abs(D_W1)))
        succeeds = EPS_W1 - r_tot / 4 >= -1e-9
        profits = g * abs(D_W1[0]) - r_tot / 4 > 0
        assert interval.contains(g) == (succeeds and profits), g


def test_dishonest_benefit():
    gamma = [0, 0.05, 0.05, 0]
    assert dishonest_benefit(D_W1, gamma, 1, EPS_W1) == pytest.approx(16.78, abs=1e-2)
    assert dishonest_benefit(D_W1, gamma, 2, EPS_W1) == pytest.approx(-2.21, abs=1e-2)
    # single cheat keeps three quarters of its reduction
    assert dishonest_benefit(D_W1, [0, 0, 0.4, 0], 2, EPS_W1) == pytest.approx(0.4 * 101.48 * 3 / 4)
    with pytest.raises(BargainingFailed):
        dishonest_benefit(D_W1, [0, 0.2, 0, 0], 1, EPS_W1)


def test_resilience_report():
    report = resilience_report(D_W1, [0, 0.05, 0.05, 0], J_W1)
    assert report.success
    assert report.r_tot == pytest.approx(0.05 * 481.18 + 0.05 * 101.48)
    assert report.r_eps0 == pytest.approx(59.31)
    assert report.max_single_gain == pytest.approx(EPS_W1)
    assert report.average_gain_bound == pytest.approx(EPS_W1 / 2)
    assert report.users["2"].profits and not report.users["3"].profits
    doc = report.as_dict()
    assert not doc["users"]["1"]["interval"]["empty"]


def test_failed_report_has_no_gains():
    report = resilience_report(D_W1, [0, 0.2, 0, 0], J_W1)
    assert not report.success
    assert all(u.gain is None for u in report.users.values())


def test_region_probabilities_honest_first_user():
    est = estimate_region_probabilities(D_W1, EPS_W1, {0}, 1_000_000, seed=5)
    assert est[RegionPredicate.ALL_DISHONEST_PROFIT].probability == pytest.approx(0.0018, abs=5e-4)
    assert est[RegionPredicate.BARGAINING_FAILS].probability == pytest.approx(0.9763, abs=2e-3)
    assert est[RegionPredicate.SUCCEEDS_BUT_SOME_LOSE].probability == pytest.approx(0.0219, abs=2e-3)
    assert sum(e.probability for e in est.values()) == pytest.approx(1.0)


def test_region_failure_honest_second_user():
    est = estimate_region_probability(D_W1, EPS_W1, {1}, "bargaining-fails", 1_000_000, seed=6)
    assert est.probability == pytest.approx(0.814, abs=3e-3)
    assert est.stderr < 1e-3


def test_region_counts_do_not_depend_on_workers(monkeypatch):
    monkeypatch.setattr(Bargaining_module, "MC_BLOCK", 1000)
    single = region_counts(D_W1, EPS_W1, {0}, 10_500, seed=9, workers=1)
    pooled = region_counts(D_W1, EPS_W1, {0}, 10_500, seed=9, workers=4)
    np.testing.assert_array_equal(single, pooled)
    assert single.sum() == 10_500


def test_everyone_honest_always_succeeds():
    est = estimate_region_probabilities(D_W1, EPS_W1, {0, 1, 2, 3}, 100)
    assert est[RegionPredicate.BARGAINING_FAILS].probability == 0.0


def test_region_lattice_matches_pointwise_success():
    frame = region_lattice(D_W1, EPS_W1, {0}, step=0.25)
    assert len(frame) == 5 ** 3
    assert (frame["gamma_1"] == 0).all()
    gammas = frame[[f"gamma_{k}" for k in range(1, 5)]].to_numpy()
    expected = EPS_W1 - gammas @ np.abs(D_W1) / 4 >= -1e-9
    np.testing.assert_array_equal(frame["success"].to_numpy(), expected)
    assert list(success_lattice(D_W1, EPS_W1, {0}, step=0.25).columns)[-1] == "success"
    assert manipulation_lattice(D_W1, EPS_W1, {0}, step=0.25)["success"].all()


@pytest.mark.slow
@pytest.mark.parametrize("honest, profit, fails, middle", [
    ({0}, 0.0018, 0.9763, 0.0219),
    ({1}, 0.0144, 0.814, 0.172),
])
def test_region_probabilities_ten_million(honest, profit, fails, middle):
    est = estimate_region_probabilities(D_W1, EPS_W1, honest, 10_000_000, seed=0, workers=4)
    assert est[RegionPredicate.ALL_DISHONEST_PROFIT].probability == pytest.approx(profit, abs=5e-4)
    assert est[RegionPredicate.BARGAINING_FAILS].probability == pytest.approx(fails, abs=2e-3)
    assert est[RegionPredicate.SUCCEEDS_BUT_SOME_LOSE].probability == pytest.approx(middle, abs=2e-3)
