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
# Simulated cooperative distributed energy scheduling. Every user and the grid
# run as separate agents that only exchange RoundMessage payloads (a price
# vector and a masked mismatch vector) with graph neighbours. The iteration
# is an exchange form of ADMM: each agent takes a proximal step on its own
# private cost, the network agrees on the average power mismatch by averaging
# consensus, and the local price estimates are mixed once per iteration and
# moved against the mismatch.
# ==============================================================================

import logging
from dataclasses import dataclass, field, fields
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import networkx as nx
import numpy as np
import pandas as pd
from pythonjsonlogger import jsonlogger
from tqdm import tqdm

from Consensus_module import NoConvergence, build_weights, run_average_consensus
from MicrogridModel_module import GRID_NODE, InvariantViolation, soc_trajectory
from Scheduling_module import (SocialDecision, SocialScheduleOutcome, bdc_cost, forecast_for, qp_interior_point,
                               trading_cost)

logger = logging.getLogger(__name__)

MESSAGE_LOGGER = "gridbargain.messages"
PAYLOAD_FIELDS = ("dual_prices", "mismatch")
HEADER_FIELDS = ("sender", "iteration", "round")


@dataclass(frozen=True)
class CodesConfig:
    step_a: float = 2.0  # initial penalty rho
    step_b: float = 10.0
    step_rule: str = "adaptive"  # "constant", "adaptive" or "diminishing": a / (k + b)
    max_iter: int = 10000
    tol: float = 1e-4  # kW
    price_tol: float = 1e-4  # cents/kWh, spread of the price estimates
    weight_rule: str = "metropolis"
    consensus_tol: float = 1e-9
    mask_scale: float = 1.0  # kW
    balance: float = 10.0  # residual ratio that triggers a penalty change
    adapt_factor: float = 2.0
    adapt_until: int = 1000  # penalty frozen afterwards
    rho_bounds: tuple = (1e-2, 1e3)
    log_messages: bool = False
    message_log_path: Optional[str] = None
    progress: bool = False

    def __post_init__(self):
        if not self.step_a > 0:
            raise InvariantViolation("codes.step_a", "must be > 0")
        if not self.step_b >= 1:
            raise InvariantViolation("codes.step_b", "must be >= 1")
        if not (self.tol > 0 and self.price_tol > 0):
            raise InvariantViolation("codes.tol", "must be > 0")
        if self.step_rule not in ("constant", "adaptive", "diminishing"):
            raise InvariantViolation("codes.step_rule", "must be 'constant', 'adaptive' or 'diminishing'")
        if self.max_iter < 1:
            raise InvariantViolation("codes.max_iter", "must be >= 1")
        if not (self.balance > 1 and self.adapt_factor > 1):
            raise InvariantViolation("codes.balance", "balance and adapt_factor must be > 1")

    def penalty(self, k):
        if self.step_rule == "diminishing":
            return self.step_a / (k + self.step_b)
        return self.step_a

    def adapt(self, rho, k, primal, dual):
        """Residual balancing: raise rho when balance lags, lower it when the iterates still move."""
        if self.step_rule != "adaptive":
            return self.penalty(k + 1)
        if k > self.adapt_until:
            return rho
        lo, hi = self.rho_bounds
        if primal > self.balance * dual:
            return min(rho * self.adapt_factor, hi)
        if dual > self.balance * primal:
            return max(rho / self.adapt_factor, lo)
        return rho


############## Messages ##############


@dataclass(frozen=True)
class RoundMessage:
    sender: str
    iteration: int
    round: int
    dual_prices: Optional[tuple]
    mismatch: tuple

    def as_record(self):
        return {
            "sender": self.sender,
            "iteration": self.iteration,
            "round": self.round,
            "dual_prices": None if self.dual_prices is None else list(self.dual_prices),
            "mismatch": list(self.mismatch),
        }


def _validate_message(msg, steps):
    names = tuple(f.name for f in fields(msg))
    if names != HEADER_FIELDS + PAYLOAD_FIELDS:
        raise InvariantViolation("message", f"unexpected fields {names}")
    if len(msg.mismatch) != steps or (msg.dual_prices is not None and len(msg.dual_prices) != steps):
        raise InvariantViolation("message", f"payload vectors must have length {steps}")


class MessageBus:
    """Synchronous neighbour-only delivery.

    One call to exchange() is one iteration: the first round carries every
    agent's price estimate, all rounds carry the mismatch states being
    averaged. Delivery follows the weight matrix, which is zero off the
    communication edges.
    """

    def __init__(self, weights, steps, keep_log=False, log_path=None):
        self.weights = weights
        self.steps = steps
        self.keep_log = keep_log or log_path is not None
        self.messages = []
        self._json_logger = None
        self._handler = None
        if log_path is not None:
            self._handler = logging.FileHandler(log_path, mode="w")
            self._handler.setFormatter(jsonlogger.JsonFormatter())
            self._json_logger = logging.getLogger(MESSAGE_LOGGER)
            self._json_logger.setLevel(logging.INFO)
            self._json_logger.propagate = False
            self._json_logger.addHandler(self._handler)

    def _post(self, iteration, rnd, prices, states):
        if not self.keep_log:
            return
        for a, sender in enumerate(self.weights.nodes):
            msg = RoundMessage(sender=str(sender), iteration=iteration, round=rnd,
                               dual_prices=None if prices is None else tuple(prices[a].tolist()),
                               mismatch=tuple(states[a].tolist()))
            _validate_message(msg, self.steps)
            self.messages.append(msg)
            if self._json_logger is not None:
                self._json_logger.info("round", extra=msg.as_record())

    def exchange(self, iteration, prices, masked_states, tol):
        self._post(iteration, 0, prices, masked_states)
        mixed_prices = self.weights.mix(prices)
        run = run_average_consensus(masked_states, self.weights, tol=tol, max_iter=100000, record=self.keep_log)
        for rnd, states in enumerate(run.trajectory[1:], start=1):
            self._post(iteration, rnd, None, states)
        return mixed_prices, run.final, run.iterations

    def close(self):
        if self._handler is not None:
            self._json_logger.removeHandler(self._handler)
            self._handler.close()
            self._handler = None


def audit_messages(messages, model, rg=None):
    """Privacy audit of a message log; returns the list of findings (empty = clean)."""
    findings = []
    secrets = {f"demand[{uid}]": np.asarray(model.demand(uid)) for uid in model.user_ids}
    for uid in model.user_ids:
        if rg is not None and rg.get(uid) is not None:
            secrets[f"rg[{uid}]"] = np.asarray(rg[uid])
            secrets[f"net_load[{uid}]"] = model.net_load(uid, rg[uid])
    battery_values = set()
    for user in model.active_users:
        d = user.desd
        battery_values.update({d.e0, d.e_min, d.e_max, d.p_max, d.kappa})
    for msg in messages:
        names = tuple(f.name for f in fields(msg))
        if names != HEADER_FIELDS + PAYLOAD_FIELDS:
            findings.append(f"{msg.sender}@{msg.iteration}: fields {names}")
            continue
        for name in PAYLOAD_FIELDS:
            payload = getattr(msg, name)
            if payload is None:
                continue
            vec = np.asarray(payload)
            for label, secret in secrets.items():
                if np.any(secret) and (np.allclose(vec, secret, atol=1e-9) or np.allclose(vec, -secret, atol=1e-9)):
                    findings.append(f"{msg.sender}@{msg.iteration}.{name} reveals {label}")
            if len(set(payload)) == 1 and payload[0] in battery_values:
                findings.append(f"{msg.sender}@{msg.iteration}.{name} repeats a battery parameter")
    return findings


############## Agents ##############


class CodesAgent:
    """An agent holds its private data; only contribution vectors leave it."""

    def __init__(self, agent_id):
        self.id = agent_id

    def initial_contribution(self, steps):
        return np.zeros(steps)

    def prox(self, v, rho):
        raise NotImplementedError


class GridAgent(CodesAgent):
    """Grid connection priced p_b on import and p_s on export, rated p_g_max each way."""

    def __init__(self, prices, p_g_max):
        super().__init__(GRID_NODE)
        self.buy = np.asarray(prices.buy, dtype=float)
        self.sell = np.asarray(prices.sell, dtype=float)
        # slopes of the cheapest gross exchange as a function of the net import g
        self.lo = np.minimum(self.buy, self.sell)  # g < 0
        self.hi = np.maximum(self.buy, self.sell)  # g > 0
        self.arbitrage = self.sell > self.buy  # steps where buying and selling at once pays
        self.p_g_max = p_g_max

    def prox(self, v, rho):
        up = v - self.hi / rho
        down = v - self.lo / rho
        g = np.where(up > 0, up, np.where(down < 0, down, 0.0))
        return np.clip(g, -self.p_g_max, self.p_g_max)

    def split(self, g):
        """Cheapest (G+, G-) with G+ - G- = g under the rating."""
        g = np.clip(g, -self.p_g_max, self.p_g_max)
        buy = np.maximum(g, 0.0)
        sell = np.maximum(-g, 0.0)
        # arbitrage steps: run both directions up to the rating
        buy = np.where(self.arbitrage, self.p_g_max + np.minimum(g, 0.0), buy)
        sell = np.where(self.arbitrage, self.p_g_max - np.maximum(g, 0.0), sell)
        return buy, sell

    def private_cost(self, g, dt):
        buy, sell = self.split(g)
        return trading_cost(self.buy, self.sell, buy, sell, dt)


class PassiveAgent(CodesAgent):
    def __init__(self, user_id, net_load):
        super().__init__(user_id)
        self._net_load = np.asarray(net_load, dtype=float)  # private, never posted

    def initial_contribution(self, steps):
        return -self._net_load

    def prox(self, v, rho):
        return -self._net_load


class BatteryAgent(CodesAgent):
    def __init__(self, user_id, desd, net_load, dt, terminal_soc=False):
        super().__init__(user_id)
        self.desd = desd  # private battery parameters
        self._net_load = np.asarray(net_load, dtype=float)  # private P_D - P_R
        self.dt = dt
        steps = self._net_load.size
        self.discharge = np.zeros(steps)  # P+
        self.charge = np.zeros(steps)  # P-
        self.soc = np.full(steps, desd.e0)  # SOC path behind the unit BDC lookup

        eye = np.eye(steps)
        zero = np.zeros((steps, steps))
        lower_tri = np.tril(np.ones((steps, steps)))
        a_dis = dt / desd.kappa * lower_tri
        a_chg = -dt * desd.kappa * lower_tri
        rhs_lo = np.full(steps, desd.e0 - desd.e_min)
        if terminal_soc:
            rhs_lo[-1] = min(rhs_lo[-1], 0.0)
        # SOC window, then 0 <= P+, P- <= P_max
        self._G = np.vstack([
            np.hstack([-a_dis, -a_chg]),
            np.hstack([a_dis, a_chg]),
            np.hstack([-eye, zero]),
            np.hstack([zero, -eye]),
            np.hstack([eye, zero]),
            np.hstack([zero, eye]),
        ])
        self._h = np.concatenate([np.full(steps, desd.e_max - desd.e0), rhs_lo, np.zeros(2 * steps),
                                  np.full(2 * steps, desd.p_max)])
        self._coupling = np.block([[eye, -eye], [-eye, eye]])  # (P+ - P-)^2

    def initial_contribution(self, steps):
        return -self._net_load

    def prox(self, v, rho):
        steps = self._net_load.size
        target = v + self._net_load
        unit = self.desd.bdc.unit_cost(self.soc / self.desd.e_max)
        c = np.concatenate([unit - rho * target, unit + rho * target])
        x = qp_interior_point(rho * self._coupling, c, self._G, self._h).x
        self.discharge = np.clip(x[:steps], 0.0, self.desd.p_max)
        self.charge = np.clip(x[steps:], 0.0, self.desd.p_max)
        self.soc = soc_trajectory(self.desd, self.discharge, self.charge, self.dt)
        return self.discharge - self.charge - self._net_load

    def private_cost(self):
        return bdc_cost(self.desd.bdc, self.discharge, self.charge, self.soc, self.desd.e_max, self.dt)


def build_agents(model, rg):
    agents = []
    for user in model.users:
        net_load = model.net_load(user.id, forecast_for(user, rg))
        if user.is_active:
            agents.append(BatteryAgent(user.id, user.desd, net_load, model.horizon.dt, model.terminal_soc))
        else:
            agents.append(PassiveAgent(user.id, net_load))
    agents.append(GridAgent(model.prices, model.grid.p_g_max))  # last node, the slack bus
    return agents


############## Solver ##############


@dataclass(eq=False)
class CodesRun:
    outcome: SocialScheduleOutcome
    ledger: dict
    trace: list
    converged: bool
    iterations: int
    dual_prices: np.ndarray
    messages: list = field(default_factory=list)
    consensus_rounds: int = 0
    penalty: float = 0.0  # rho at termination

    @property
    def price_spread(self):
        return float(np.max(np.ptp(self.dual_prices, axis=0)))

    def check(self):
        if not self.converged:
            last = self.trace[-1][2] if self.trace else float("nan")
            raise NoConvergence(f"codes stopped after {self.iterations} iterations with residual {last:.3e} kW",
                                iterations=self.iterations)
        return self


def _masks(rng, edges, n_agents, steps, scale):
    # pairwise masks cancel in the sum, so the network average is unchanged
    masks = np.zeros((n_agents, steps))
    for a, b in edges:
        m = rng.uniform(-scale, scale, size=steps)
        masks[a] += m
        masks[b] -= m
    return masks


def _iterate_cost(agents, contributions, dt):
    grid_agent = agents[-1]
    cost = grid_agent.private_cost(contributions[-1], dt)
    return cost + sum(a.private_cost() for a in agents if isinstance(a, BatteryAgent))


def run_codes(model, rg, config=CodesConfig(), seed=0):
    """Distributed solution of the cooperative schedule.

    Returns a CodesRun; a run that hits max_iter is returned with
    converged=False and its best diagnostics (call check() to raise).
    """
    steps, dt = model.horizon.steps, model.horizon.dt
    weights = build_weights(model.graph(), config.weight_rule)
    agents = build_agents(model, rg)
    order = [a.id for a in agents]
    if list(weights.nodes) != order:
        raise InvariantViolation("graph", "node order must list users then the grid")
    n = len(agents)
    pos = {node: k for k, node in enumerate(weights.nodes)}
    edges = [(pos[a], pos[b]) for a, b in model.graph().edges if a != b]

    price_seq, mask_seq = np.random.SeedSequence(seed).spawn(2)
    lo = np.minimum(model.prices.buy, model.prices.sell)
    hi = np.maximum(model.prices.buy, model.prices.sell)
    prices = np.random.default_rng(price_seq).uniform(lo, hi, size=(n, steps))  # one estimate per agent
    mask_rng = np.random.default_rng(mask_seq)

    bus = MessageBus(weights, steps, keep_log=config.log_messages, log_path=config.message_log_path)
    contributions = np.array([a.initial_contribution(steps) for a in agents])
    masked = contributions + _masks(mask_rng, edges, n, steps, config.mask_scale)
    prices, mean_est, rounds = bus.exchange(0, prices, masked, config.consensus_tol)

    trace = []
    converged = False
    iterations = 0
    rho = config.penalty(1)
    loop = range(1, config.max_iter + 1)
    try:
        for k in tqdm(loop, desc="codes", disable=not config.progress):
            new = np.array([agent.prox(contributions[a] - mean_est[a] + prices[a] / rho, rho)
                            for a, agent in enumerate(agents)])
            masked = new + _masks(mask_rng, edges, n, steps, config.mask_scale)
            mixed, mean_est, used = bus.exchange(k, prices, masked, config.consensus_tol)
            rounds += used
            prices = mixed - rho * mean_est

            residual = float(n * np.max(np.abs(mean_est)))  # power balance
            change = float(np.max(np.abs(new - contributions)))
            spread = float(np.max(np.ptp(prices, axis=0)))
            contributions = new
            iterations = k
            trace.append((k, _iterate_cost(agents, contributions, dt), residual))
            if residual <= config.tol and change <= config.tol and spread <= config.price_tol:
                converged = True
                break
            rho = config.adapt(rho, k, residual, rho * change)
    finally:
        bus.close()

    if not converged:
        logger.warning("codes did not converge in %d iterations (residual %.3e kW)", iterations, trace[-1][2])

    # the grid agent is the slack bus and absorbs the remaining mismatch
    grid_agent = agents[-1]
    grid_buy, grid_sell = grid_agent.split(contributions[-1] - n * mean_est[-1])
    batteries = [a for a in agents if isinstance(a, BatteryAgent)]
    decision = SocialDecision(grid_buy=grid_buy, grid_sell=grid_sell,
                              discharge={a.id: a.discharge for a in batteries},
                              charge={a.id: a.charge for a in batteries})
    c_p = trading_cost(model.prices.buy, model.prices.sell, grid_buy, grid_sell, dt)
    bdc_costs = {a.id: a.private_cost() for a in batteries}
    outcome = SocialScheduleOutcome(decision=decision, trading_cost=c_p, bdc_costs=bdc_costs,
                                    social_cost=c_p + sum(bdc_costs.values()),
                                    soc={a.id: a.soc for a in batteries})
    ledger = {GRID_NODE: c_p, **bdc_costs}
    logger.info("codes: %s after %d iterations, J_soc=%.4f cents", "converged" if converged else "stalled",
                iterations, outcome.social_cost)
    return CodesRun(outcome=outcome, ledger=ledger, trace=trace, converged=converged, iterations=iterations,
                    dual_prices=prices, messages=bus.messages, consensus_rounds=rounds, penalty=rho)


def convergence_trace(run, reference_cost=None):
    """Per-iteration cost gap and balance residual of a run."""
    frame = pd.DataFrame(run.trace, columns=["iteration", "cost", "max_residual"])
    reference = run.outcome.social_cost if reference_cost is None else reference_cost
    frame["cost_gap"] = (frame["cost"] - reference).abs()
    return frame[["iteration", "cost_gap", "max_residual"]]


############## Plots ##############


def plot_network(model, path):
    G = model.graph()
    pos = nx.circular_layout(G)
    colors = ["gray" if node == GRID_NODE else ("tab:green" if model.user(node).is_active else "tab:blue")
              for node in G.nodes]
    fig, ax = plt.subplots(figsize=(6, 6))
    nx.draw(G, pos, ax=ax, with_labels=True, node_color=colors, node_size=1500, edge_color="gray")
    ax.set_title("Communication graph")
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_convergence(trace, path):
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.semilogy(trace["iteration"], trace["max_residual"].clip(lower=1e-16), label="balance residual (kW)")
    ax.semilogy(trace["iteration"], trace["cost_gap"].clip(lower=1e-16), label="cost gap (cents)")
    ax.set_xlabel("iteration")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
