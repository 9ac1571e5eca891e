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

import logging
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import pandas as pd

from MicrogridModel_module import DisconnectedGraph, GridBargainError, InvariantViolation, LengthMismatch

logger = logging.getLogger(__name__)

WEIGHT_RULES = ("metropolis", "max-degree")


class NoConvergence(GridBargainError):
    def __init__(self, message, iterations=None):
        self.iterations = iterations
        super().__init__(message)


@dataclass(frozen=True)
class ConsensusConfig:
    tol: float = 1e-9
    max_iter: int = 10000
    weight_rule: str = "metropolis"
    record: bool = False

    def __post_init__(self):
        if self.weight_rule not in WEIGHT_RULES:
            raise InvariantViolation("consensus.weight_rule", f"must be one of {WEIGHT_RULES}")
        if not self.tol > 0:
            raise InvariantViolation("consensus.tol", "must be > 0")


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    nodes: tuple
    matrix: np.ndarray

    def index(self, node):
        return self.nodes.index(node)

    def mix(self, states):
        return self.matrix @ states

    def is_doubly_stochastic(self, tol=1e-12):
        m = self.matrix
        return bool(np.all(m >= 0) and np.allclose(m.sum(axis=0), 1.0, atol=tol, rtol=0)
                    and np.allclose(m.sum(axis=1), 1.0, atol=tol, rtol=0))


############## Weight construction ##############


def _check_connected(graph):
    if graph.number_of_nodes() == 0 or not nx.is_connected(graph):
        raise DisconnectedGraph(f"graph with nodes {list(graph.nodes)} is not connected")


def _weights_from(graph, edge_weight):
    _check_connected(graph)
    nodes = tuple(graph.nodes)
    pos = {node: k for k, node in enumerate(nodes)}
    matrix = np.zeros((len(nodes), len(nodes)))
    for a, b in graph.edges:
        if a == b:
            continue
        w = edge_weight(a, b)
        matrix[pos[a], pos[b]] = matrix[pos[b], pos[a]] = w
    np.fill_diagonal(matrix, 1.0 - matrix.sum(axis=1))
    return WeightMatrix(nodes=nodes, matrix=matrix)


def metropolis_weights(graph):
    deg = dict(graph.degree())
    return _weights_from(graph, lambda a, b: 1.0 / (1.0 + max(deg[a], deg[b])))


def max_degree_weights(graph):
    top = max(dict(graph.degree()).values(), default=0)
    return _weights_from(graph, lambda a, b: 1.0 / (1.0 + top))


def build_weights(graph, rule="metropolis"):
    if rule == "metropolis":
        return metropolis_weights(graph)
    if rule == "max-degree":
        return max_degree_weights(graph)
    raise InvariantViolation("weight_rule", f"unknown rule {rule!r}")


############## Averaging ##############


@dataclass(eq=False)
class ConsensusRun:
    initial: np.ndarray
    final: np.ndarray
    iterations: int
    trajectory: list = field(default_factory=list)

    @property
    def spread(self):
        return float(np.max(np.ptp(self.final, axis=0)))


def _spread(states):
    return float(np.max(np.ptp(states, axis=0)))


def run_average_consensus(x0, W, tol=1e-9, max_iter=10000, record=False):
    """Iterate x <- W x until every node agrees within tol.

    x0 is either one scalar per node or one row of values per node; all
    columns are averaged in lockstep.
    """
    states = np.array(x0, dtype=float)
    if states.shape[0] != len(W.nodes):
        raise LengthMismatch(f"{states.shape[0]} initial states for {len(W.nodes)} nodes")
    initial = states.copy()
    trajectory = [states.copy()] if record else []
    iterations = 0
    while _spread(states) > tol:
        if iterations >= max_iter:
            raise NoConvergence(f"consensus spread {_spread(states):.3e} after {max_iter} iterations",
                                iterations=iterations)
        states = W.mix(states)
        iterations += 1
        if record:
            trajectory.append(states.copy())
    return ConsensusRun(initial=initial, final=states, iterations=iterations, trajectory=trajectory)


def trajectory_frame(run, nodes):
    frame = pd.DataFrame(np.array(run.trajectory), columns=list(nodes))
    frame.index.name = "iteration"
    return frame


############## Cost allocation ##############


def allocation_states(selfish, bdc_costs, trading_cost):
    """Initial node states for distributed allocation: users then the grid node.

    Active users subtract their own degradation cost, the grid node holds the
    negated trading cost, so the node average is (sum S - J_soc) / (r + 1).
    """
    states = [s - bdc_costs.get(uid, 0.0) for uid, s in selfish.items()]
    states.append(-trading_cost)
    return np.array(states)


def allocate_from_consensus(S, x_hat, r):
    S = np.asarray(S, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)[: S.size]
    return S - (r + 1) * x_hat / r


def distributed_allocation(W, selfish, bdc_costs, trading_cost, config=ConsensusConfig()):
    """Each node learns its own allocated cost from neighbour averaging only."""
    x0 = allocation_states(selfish, bdc_costs, trading_cost)
    run = run_average_consensus(x0, W, config.tol, config.max_iter, config.record)
    r = len(selfish)
    J = allocate_from_consensus(list(selfish.values()), run.final, r)
    logger.debug("allocation consensus converged in %d iterations", run.iterations)
    return J, run
