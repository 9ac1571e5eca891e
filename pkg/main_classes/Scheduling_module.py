# ==============================================================================
# PROJECT INFORMATION
# ==============================================================================
# Project Title: GridBargain
# Version: v1.0.0
# Description: Cooperative microgrid scheduling and bargaining cost allocation
# 
# AUTHORS
# ==============================================================================
# GridBargain contributors
# 
# LICENSE
# ==============================================================================
# This project is licensed under the GPL 3.0 License. 
# For more details, see the LICENSE file in the project root.
# 
# DATE
# ==============================================================================
# Date of Creation: 19/10/2026
# 
# ==============================================================================
# NOTES
# ==============================================================================
# Centralized solvers for the cooperative (social) schedule and for each user
# acting alone. With a constant BDC both are linear programs solved by HiGHS;
# a SOC-dependent BDC is handled by successive linearization around the
# previous SOC path.
# ==============================================================================

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import linprog

from MicrogridModel_module import FEAS_TOL, GridBargainError, InvariantViolation, LengthMismatch, soc_trajectory

logger = logging.getLogger(__name__)

MAX_LINEARIZATIONS = 20
LINEARIZATION_TOL = 1e-4  # cents


class Infeasible(GridBargainError):
    pass


class SolverStall(GridBargainError):
    pass


############## Cost functions ##############


def forecast_for(user, rg):
    """Forecast of an RG owner; None for users without RG."""
    if user.rg is None:
        return None
    profile = rg.get(user.id) if rg is not None else None
    if profile is None:
        raise InvariantViolation(f"rg[{user.id}]", "missing RG forecast for an RG owner")
    return profile


def _series(name, values, steps=None):
    arr = np.asarray(values, dtype=float).reshape(-1)
    if steps is not None and arr.size != steps:
        raise LengthMismatch(f"{name} has length {arr.size}, expected {steps}")
    return arr


def trading_cost(p_buy, p_sell, buy, sell, dt):
    p_buy = _series("p_buy", p_buy)
    steps = p_buy.size
    p_sell = _series("p_sell", p_sell, steps)
    buy = _series("buy", buy, steps)
    sell = _series("sell", sell, steps)
    if np.any(buy < -FEAS_TOL) or np.any(sell < -FEAS_TOL):
        raise InvariantViolation("grid power", "buy and sell series must be >= 0")
    return float(np.sum(p_buy * buy - p_sell * sell) * dt)


def bdc_cost(bdc, discharge, charge, soc, capacity, dt):
    """Degradation cost of a DESD; unit cost looked up on the post-step SOC path."""
    discharge = _series("discharge", discharge)
    steps = discharge.size
    charge = _series("charge", charge, steps)
    soc = _series("soc", soc, steps)
    if np.any(discharge < -FEAS_TOL) or np.any(charge < -FEAS_TOL):
        raise InvariantViolation("battery power", "charge and discharge series must be >= 0")
    unit = bdc.unit_cost(soc / capacity)
    return float(np.sum(unit * (discharge + charge)) * dt)


############## Outcomes ##############


@dataclass(eq=False)
class SocialDecision:
    grid_buy: np.ndarray
    grid_sell: np.ndarray
    discharge: dict = field(default_factory=dict)  # user id -> P+
    charge: dict = field(default_factory=dict)  # user id -> P-

    def battery_output(self, user_id):
        return self.discharge[user_id] - self.charge[user_id]


@dataclass(eq=False)
class SocialScheduleOutcome:
    decision: SocialDecision
    trading_cost: float
    bdc_costs: dict
    social_cost: float
    soc: dict = field(default_factory=dict)
    linearizations: int = 1

    def soc_range(self, user_id, capacity):
        path = self.soc[user_id]
        return float(path.min() / capacity), float(path.max() / capacity)


@dataclass(eq=False)
class IndividualDecision:
    grid_buy: np.ndarray
    grid_sell: np.ndarray
    discharge: np.ndarray = None
    charge: np.ndarray = None


@dataclass(eq=False)
class IndividualOutcome:
    user_id: str
    decision: IndividualDecision
    ideal_selfish_cost: float
    trading_cost: float = 0.0
    bdc_cost: float = 0.0
    soc: np.ndarray = None


############## LP assembly ##############


def _soc_rows(desd, steps, dt, terminal_soc):
    lower_tri = np.tril(np.ones((steps, steps)))
    a_dis = dt / desd.kappa * lower_tri
    a_chg = -dt * desd.kappa * lower_tri
    # E0 - drain <= E_max and drain <= E0 - E_min, drain = a_dis P+ + a_chg P-
    rows = np.vstack([np.hstack([-a_dis, -a_chg]), np.hstack([a_dis, a_chg])])
    rhs_lo = np.full(steps, desd.e0 - desd.e_min)
    if terminal_soc:
        rhs_lo[-1] = min(rhs_lo[-1], 0.0)
    return rows, np.concatenate([np.full(steps, desd.e_max - desd.e0), rhs_lo])


def _linprog(c, a_ub, b_ub, a_eq, b_eq, bounds, what):
    zero = np.zeros_like(c)
    phase1 = linprog(zero, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if phase1.status == 2:
        raise Infeasible(f"{what}: no schedule meets balance, ratings and SOC bounds")
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status == 2:
        raise Infeasible(f"{what}: {res.message}")
    if res.status != 0:
        raise SolverStall(f"{what}: {res.message}")
    return res.x


def _solve_schedule_lp(net_load, desds, unit_costs, p_buy, p_sell, p_g_max, dt, terminal_soc, what):
    """Grid exchange plus one battery per entry of desds; returns (G+, G-, [(P+, P-)])."""
    steps = net_load.size
    n_bat = len(desds)
    n_var = 2 * steps + 2 * steps * n_bat
    eye = np.eye(steps)

    c = np.concatenate([dt * p_buy, -dt * p_sell] + [np.tile(dt * uc, 2) for uc in unit_costs])
    a_eq = np.hstack([eye, -eye] + [np.hstack([eye, -eye])] * n_bat)
    bounds = [(0.0, p_g_max)] * (2 * steps)
    a_ub = b_ub = None
    if n_bat:
        a_ub = np.zeros((2 * steps * n_bat, n_var))
        b_ub = np.zeros(2 * steps * n_bat)
        for k, desd in enumerate(desds):
            rows, rhs = _soc_rows(desd, steps, dt, terminal_soc)
            col = 2 * steps * (k + 1)
            a_ub[2 * steps * k: 2 * steps * (k + 1), col: col + 2 * steps] = rows
            b_ub[2 * steps * k: 2 * steps * (k + 1)] = rhs
            bounds += [(0.0, desd.p_max)] * (2 * steps)

    x = np.clip(_linprog(c, a_ub, b_ub, a_eq, net_load, bounds, what), 0.0, None)
    g_buy, g_sell = x[:steps].copy(), x[steps: 2 * steps].copy()
    # net simultaneous buy/sell where selling is cheaper than buying
    overlap = np.where(p_sell < p_buy, np.minimum(g_buy, g_sell), 0.0)
    g_buy -= overlap
    g_sell -= overlap
    batteries = []
    for k in range(n_bat):
        col = 2 * steps * (k + 1)
        batteries.append((x[col: col + steps], x[col + steps: col + 2 * steps]))
    return g_buy, g_sell, batteries


def _linearized_schedule(net_load, desds, prices, p_g_max, horizon, terminal_soc, what):
    """Successive linearization of SOC-dependent unit BDC; exact in one pass for constant BDC."""
    dt = horizon.dt
    steps = horizon.steps
    unit_costs = [d.bdc.unit_cost(np.full(steps, d.e0 / d.e_max)) for d in desds]
    best = None
    previous = None
    for iteration in range(1, MAX_LINEARIZATIONS + 1):
        g_buy, g_sell, batteries = _solve_schedule_lp(net_load, desds, unit_costs, prices.buy, prices.sell,
                                                      p_g_max, dt, terminal_soc, what)
        socs = [soc_trajectory(d, dis, chg, dt) for d, (dis, chg) in zip(desds, batteries)]
        bdc = [bdc_cost(d.bdc, dis, chg, soc, d.e_max, dt) for d, (dis, chg), soc in zip(desds, batteries, socs)]
        total = trading_cost(prices.buy, prices.sell, g_buy, g_sell, dt) + sum(bdc)
        if best is None or total < best[0]:
            best = (total, g_buy, g_sell, batteries, socs, bdc, iteration)
        if all(d.bdc.is_constant for d in desds):
            break
        if previous is not None and abs(total - previous) < LINEARIZATION_TOL:
            break
        previous = total
        unit_costs = [d.bdc.unit_cost(soc / d.e_max) for d, soc in zip(desds, socs)]
    else:
        logger.warning("%s: SOC-dependent BDC linearization stopped after %d passes", what, MAX_LINEARIZATIONS)
    return best


############## Solvers ##############


def solve_social(model, rg):
    """Cooperative day-ahead schedule minimizing the microgrid bill."""
    horizon = model.horizon
    net_load = np.zeros(horizon.steps)
    for user in model.users:
        net_load += model.net_load(user.id, forecast_for(user, rg))

    active = model.active_users
    desds = [u.desd for u in active]
    total, g_buy, g_sell, batteries, socs, bdc, passes = _linearized_schedule(
        net_load, desds, model.prices, model.grid.p_g_max, horizon, model.terminal_soc, "social problem")

    decision = SocialDecision(grid_buy=g_buy, grid_sell=g_sell,
                              discharge={u.id: b[0] for u, b in zip(active, batteries)},
                              charge={u.id: b[1] for u, b in zip(active, batteries)})
    c_p = trading_cost(model.prices.buy, model.prices.sell, g_buy, g_sell, horizon.dt)
    bdc_costs = {u.id: cost for u, cost in zip(active, bdc)}
    outcome = SocialScheduleOutcome(decision=decision, trading_cost=c_p, bdc_costs=bdc_costs,
                                    social_cost=c_p + sum(bdc_costs.values()),
                                    soc={u.id: s for u, s in zip(active, socs)}, linearizations=passes)
    logger.debug("social cost %.6f cents (trading %.6f)", outcome.social_cost, c_p)
    return outcome


def solve_individual(user, demand, prices, grid_limits, rg_profile, horizon, terminal_soc=False,
                     backend="highs"):
    """Minimum bill of one user trading with the grid alone (negative = profit)."""
    demand = _series(f"demand[{user.id}]", demand, horizon.steps)
    if user.rg is not None and rg_profile is None:
        raise InvariantViolation(f"rg[{user.id}]", "missing RG forecast for an RG owner")
    dt = horizon.dt
    if not user.is_active:
        if np.any(demand > grid_limits.p_g_max + FEAS_TOL):
            raise Infeasible(f"user {user.id}: demand exceeds the grid rating")
        zero = np.zeros(horizon.steps)
        cost = float(np.sum(prices.buy * demand) * dt)
        return IndividualOutcome(user.id, IndividualDecision(grid_buy=demand.copy(), grid_sell=zero),
                                 ideal_selfish_cost=cost, trading_cost=cost)

    net_load = demand.copy()
    if rg_profile is not None:
        net_load -= _series(f"rg[{user.id}]", rg_profile, horizon.steps)
    desd = user.desd
    what = f"individual problem of {user.id}"
    if backend == "interior-point":
        g_buy, g_sell, dis, chg = _individual_interior_point(net_load, desd, prices, grid_limits.p_g_max,
                                                             horizon, terminal_soc, what)
        soc = soc_trajectory(desd, dis, chg, dt)
        c_b = bdc_cost(desd.bdc, dis, chg, soc, desd.e_max, dt)
    elif backend == "highs":
        _, g_buy, g_sell, batteries, socs, bdc, _ = _linearized_schedule(
            net_load, [desd], prices, grid_limits.p_g_max, horizon, terminal_soc, what)
        (dis, chg), soc, c_b = batteries[0], socs[0], bdc[0]
    else:
        raise InvariantViolation("backend", f"unknown scheduling backend {backend!r}")

    c_p = trading_cost(prices.buy, prices.sell, g_buy, g_sell, dt)
    decision = IndividualDecision(grid_buy=g_buy, grid_sell=g_sell, discharge=dis, charge=chg)
    return IndividualOutcome(user.id, decision, ideal_selfish_cost=c_p + c_b, trading_cost=c_p,
                             bdc_cost=c_b, soc=soc)


def solve_all_individual(model, rg, backend="highs"):
    outcomes = {}
    for user in model.users:
        profile = forecast_for(user, rg)
        outcomes[user.id] = solve_individual(user, model.demand(user.id), model.prices, model.grid, profile,
                                             model.horizon, model.terminal_soc, backend)
    return outcomes


############## Dense interior point ##############


@dataclass
class QpResult:
    x: np.ndarray
    objective: float
    iterations: int


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def qp_interior_point(Q, c, G, h, tol=1e-8, max_iter=100, accept_tol=1e-6):
    """Mehrotra predictor-corrector for min 1/2 x'Qx + c'x subject to Gx <= h.

    Q must be positive semidefinite and the rows of G must bound every
    direction in which Q is flat. Residuals are measured relative to the
    size of the terms they balance. When the iterate stops improving (or
    max_iter is reached) the best iterate is returned if its error is below
    accept_tol; otherwise SolverStall is raised.
    """
    Q = np.asarray(Q, dtype=float)
    c = np.asarray(c, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    n, m = c.size, h.size

    x = np.zeros(n)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(m)
    reg = 1e-12 * np.eye(n)
    best = (np.inf, x)
    stalled = 0

    for iteration in range(1, max_iter + 1):
        Qx, Gx, Gz = Q @ x, G @ x, G.T @ z
        r_d = Qx + c + Gz
        r_p = Gx + s - h
        mu = float(s @ z) / m
        objective = float(0.5 * x @ Qx + c @ x)
        error = max(np.max(np.abs(r_p)) / (1.0 + max(np.max(np.abs(h)), np.max(np.abs(Gx)))),
                    np.max(np.abs(r_d)) / (1.0 + max(np.max(np.abs(c)), np.max(np.abs(Qx)), np.max(np.abs(Gz)))),
                    mu / (1.0 + abs(objective)))
        if not np.isfinite(error):
            break
        if error <= tol:
            return QpResult(x=x, objective=objective, iterations=iteration - 1)
        # no new best for a few steps: roundoff floor reached
        stalled = stalled + 1 if error >= best[0] else 0
        if error < best[0]:
            best = (error, x)
        if stalled >= 5:
            break

        w = z / s
        kkt = Q + G.T @ (w[:, None] * G) + reg

        def direction(r_c):
            rhs = -r_d - G.T @ (w * r_p - r_c / s)
            try:
                dx = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                dx = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            dz = w * (G @ dx + r_p) - r_c / s
            ds = (-r_c - s * dz) / z
            return dx, ds, dz

        # predictor
        dx_a, ds_a, dz_a = direction(s * z)
        alpha_a = min(_max_step(s, ds_a), _max_step(z, dz_a))
        mu_aff = float((s + alpha_a * ds_a) @ (z + alpha_a * dz_a)) / m
        sigma = (mu_aff / mu) ** 3

        # corrector
        dx, ds, dz = direction(s * z + ds_a * dz_a - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x = x + alpha * dx
        s = np.maximum(s + alpha * ds, 1e-300)
        z = np.maximum(z + alpha * dz, 1e-300)

    error, x = best
    if error <= accept_tol:
        logger.debug("interior point stopped at relative error %.3e", error)
        return QpResult(x=x, objective=float(0.5 * x @ Q @ x + c @ x), iterations=max_iter)
    raise SolverStall(f"interior point stalled at relative error {error:.3e} after {max_iter} iterations")


def _individual_interior_point(net_load, desd, prices, p_g_max, horizon, terminal_soc, what):
    """Same individual LP with the grid exchange eliminated into an epigraph term.

    Variables are (P+, P-, y) with y(t) >= p_b*g(t) and y(t) >= p_s*g(t),
    g = net_load - P+ + P-. Needs p_s <= p_b so the epigraph is exact.
    """
    if np.any(prices.sell > prices.buy):
        raise InvariantViolation("prices", "interior-point backend needs p_sell <= p_buy")
    steps, dt = horizon.steps, horizon.dt
    eye = np.eye(steps)
    zero = np.zeros((steps, steps))
    uc = desd.bdc.unit_cost(np.full(steps, desd.e0 / desd.e_max))
    c = np.concatenate([dt * uc, dt * uc, dt * np.ones(steps)])

    soc_rows, soc_rhs = _soc_rows(desd, steps, dt, terminal_soc)
    rows = [
        np.hstack([-prices.buy[:, None] * eye, prices.buy[:, None] * eye, -eye]),
        np.hstack([-prices.sell[:, None] * eye, prices.sell[:, None] * eye, -eye]),
        np.hstack([-eye, eye, zero]),  # g <= Gmax
        np.hstack([eye, -eye, zero]),  # -g <= Gmax
        np.hstack([soc_rows, np.zeros((2 * steps, steps))]),
        np.hstack([-eye, zero, zero]),
        np.hstack([zero, -eye, zero]),
        np.hstack([eye, zero, zero]),
        np.hstack([zero, eye, zero]),
    ]
    rhs = [
        -prices.buy * net_load,
        -prices.sell * net_load,
        p_g_max - net_load,
        p_g_max + net_load,
        soc_rhs,
        np.zeros(steps),
        np.zeros(steps),
        np.full(steps, desd.p_max),
        np.full(steps, desd.p_max),
    ]
    result = qp_interior_point(np.zeros((3 * steps, 3 * steps)), c, np.vstack(rows), np.concatenate(rhs))
    dis = np.clip(result.x[:steps], 0.0, desd.p_max)
    chg = np.clip(result.x[steps: 2 * steps], 0.0, desd.p_max)
    g = net_load - dis + chg
    logger.debug("%s: interior point finished in %d iterations", what, result.iterations)
    return np.maximum(g, 0.0), np.maximum(-g, 0.0), dis, chg


############## Checks and export ##############


def schedule_residuals(model, rg, outcome):
    """Largest violation of balance, SOC bounds and ratings of a social schedule."""
    d = outcome.decision
    supply = d.grid_buy - d.grid_sell
    for uid in d.discharge:
        supply = supply + d.battery_output(uid)
    demand = np.zeros(model.horizon.steps)
    for user in model.users:
        demand += model.net_load(user.id, forecast_for(user, rg))
    residuals = {"balance": float(np.max(np.abs(supply - demand))), "soc": 0.0, "rating": 0.0}
    residuals["rating"] = float(max(np.max(d.grid_buy), np.max(d.grid_sell)) - model.grid.p_g_max)
    for user in model.active_users:
        desd = user.desd
        soc = soc_trajectory(desd, d.discharge[user.id], d.charge[user.id], model.horizon.dt)
        over = max(np.max(soc - desd.e_max), np.max(desd.e_min - soc))
        residuals["soc"] = max(residuals["soc"], float(over))
        rating = max(np.max(d.discharge[user.id]), np.max(d.charge[user.id])) - desd.p_max
        residuals["rating"] = max(residuals["rating"], float(rating))
    residuals["soc"] = max(residuals["soc"], 0.0)
    residuals["rating"] = max(residuals["rating"], 0.0)
    return residuals


def schedule_frame(outcome):
    d = outcome.decision
    columns = {"grid_buy": d.grid_buy, "grid_sell": d.grid_sell}
    for uid in d.discharge:
        columns[f"{uid}_discharge"] = d.discharge[uid]
        columns[f"{uid}_charge"] = d.charge[uid]
        columns[f"{uid}_soc"] = outcome.soc[uid]
    frame = pd.DataFrame(columns)
    frame.index.name = "t"
    return frame
