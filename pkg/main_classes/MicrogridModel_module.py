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
# Units are fixed across the project: power kW, energy kWh, prices cents/kWh,
# costs cents, time hours.
# ==============================================================================

import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Union

import networkx as nx
import numpy as np
import pandas as pd
import yaml

logger = logging.getLogger(__name__)

GRID_NODE = "grid"
FEAS_TOL = 1e-6


############## Errors ##############


class GridBargainError(Exception):
    """Base class of every error raised by the package."""


class InvariantViolation(GridBargainError, ValueError):
    def __init__(self, field_name, rule):
        self.field = field_name
        self.rule = rule
        super().__init__(f"{field_name}: {rule}")


class ModelValidationError(InvariantViolation):
    """Several invariant violations found in one validation pass."""

    def __init__(self, violations):
        self.violations = list(violations)
        first = self.violations[0]
        super().__init__(first.field, first.rule)
        self.args = ("; ".join(str(v) for v in self.violations),)


class DisconnectedGraph(GridBargainError):
    pass


class LengthMismatch(GridBargainError, ValueError):
    pass


class FileError(GridBargainError, OSError):
    def __init__(self, path, reason="file not found"):
        self.path = str(path)
        super().__init__(f"{reason}: {self.path}")


############## Domain types ##############


def _as_series(values):
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Horizon:
    steps: int
    dt: float = 1.0


@dataclass(frozen=True, eq=False)
class PriceProfile:
    buy: np.ndarray
    sell: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "buy", _as_series(self.buy))
        object.__setattr__(self, "sell", _as_series(self.sell))

    @classmethod
    def from_buy(cls, buy, sell_ratio=0.8):
        buy = np.asarray(buy, dtype=float)
        return cls(buy=buy, sell=sell_ratio * buy)

    def scaled(self, alpha):
        return PriceProfile(buy=alpha * self.buy, sell=alpha * self.sell)


@dataclass(frozen=True)
class ConstantBdc:
    c_d: float = 0.0

    is_constant = True

    def unit_cost(self, soc_fraction):
        return np.full(np.shape(soc_fraction), float(self.c_d))

    def scaled(self, alpha):
        return ConstantBdc(alpha * self.c_d)


@dataclass(frozen=True)
class PiecewiseSocBdc:
    # (soc fraction, cents per kWh), strictly increasing in SOC
    breakpoints: tuple

    is_constant = False

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple((float(s), float(c)) for s, c in self.breakpoints))

    def unit_cost(self, soc_fraction):
        fractions = np.array([s for s, _ in self.breakpoints])
        costs = np.array([c for _, c in self.breakpoints])
        idx = np.searchsorted(fractions, np.asarray(soc_fraction, dtype=float), side="right") - 1
        return costs[np.clip(idx, 0, len(costs) - 1)]

    def scaled(self, alpha):
        return PiecewiseSocBdc(tuple((s, alpha * c) for s, c in self.breakpoints))


BdcModel = Union[ConstantBdc, PiecewiseSocBdc]


@dataclass(frozen=True)
class DesdParams:
    e0: float  # kWh stored at the start of the day
    e_min: float  # kWh
    e_max: float  # kWh
    p_max: float  # kW, same rating for charge and discharge
    kappa: float  # one-way efficiency
    bdc: BdcModel = field(default_factory=ConstantBdc)


@dataclass(frozen=True)
class RgUnit:
    kind: str  # "pv" or "wt"
    size: float

    @property
    def weather(self):
        return "solar" if self.kind == "pv" else "wind"


@dataclass(frozen=True)
class UserSpec:
    id: str
    kind: str = "passive"  # "passive" or "active"
    desd: Optional[DesdParams] = None
    rg: Optional[RgUnit] = None

    @property
    def is_active(self):
        return self.kind == "active"

    @classmethod
    def passive(cls, user_id):
        return cls(id=user_id, kind="passive")

    @classmethod
    def active(cls, user_id, desd, rg=None):
        return cls(id=user_id, kind="active", desd=desd, rg=rg)


@dataclass(frozen=True)
class GridLimits:
    p_g_max: float


@dataclass(frozen=True, eq=False)
class MicrogridModel:
    horizon: Horizon
    users: tuple
    demands: dict
    prices: PriceProfile
    grid: GridLimits
    edges: Optional[tuple] = None
    terminal_soc: bool = False

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "demands", {uid: _as_series(d) for uid, d in self.demands.items()})
        if self.edges is not None:
            object.__setattr__(self, "edges", tuple((str(a), str(b)) for a, b in self.edges))

    @property
    def r(self):
        return len(self.users)

    @property
    def user_ids(self):
        return [u.id for u in self.users]

    @property
    def active_users(self):
        return [u for u in self.users if u.is_active]

    @property
    def rg_users(self):
        return [u for u in self.users if u.rg is not None]

    def user(self, user_id):
        for u in self.users:
            if u.id == user_id:
                return u
        raise KeyError(user_id)

    def demand(self, user_id):
        return self.demands[user_id]

    def aggregate_demand(self):
        return np.sum([self.demands[uid] for uid in self.user_ids], axis=0)

    def node_ids(self):
        return self.user_ids + [GRID_NODE]

    def communication_edges(self):
        if self.edges is not None:
            return list(self.edges)
        return default_ring_edges(self.node_ids())

    def graph(self):
        g = nx.Graph()
        g.add_nodes_from(self.node_ids())
        g.add_edges_from(self.communication_edges())
        return g

    def net_load(self, user_id, rg_profile=None):
        """P_D - P_R for one user; RG defaults to zero."""
        load = np.array(self.demands[user_id], dtype=float)
        if rg_profile is not None:
            load = load - np.asarray(rg_profile, dtype=float)
        return load

    def scaled(self, alpha):
        """Same microgrid with every price and BDC unit cost multiplied by alpha."""
        users = []
        for u in self.users:
            if u.desd is not None:
                desd = DesdParams(u.desd.e0, u.desd.e_min, u.desd.e_max, u.desd.p_max, u.desd.kappa,
                                  u.desd.bdc.scaled(alpha))
                u = UserSpec(u.id, u.kind, desd, u.rg)
            users.append(u)
        return MicrogridModel(self.horizon, tuple(users), dict(self.demands), self.prices.scaled(alpha),
                              self.grid, self.edges, self.terminal_soc)


def default_ring_edges(nodes):
    nodes = list(nodes)
    if len(nodes) < 2:
        return []
    if len(nodes) == 2:
        return [(nodes[0], nodes[1])]
    return [(nodes[k], nodes[(k + 1) % len(nodes)]) for k in range(len(nodes))]


def default_grid_limits(users, demands):
    """Non-binding grid rating: ten times the largest power the microgrid can move."""
    aggregate = np.sum([np.asarray(d, dtype=float) for d in demands.values()], axis=0)
    peak = float(np.max(aggregate)) if np.size(aggregate) else 0.0
    capacity = sum(u.rg.size for u in users if u.rg is not None)
    capacity += sum(u.desd.p_max for u in users if u.desd is not None)
    return GridLimits(p_g_max=10.0 * max(peak, capacity, 1.0))


############## Operations ##############


def soc_trajectory(desd, discharge, charge, dt):
    """Stored energy after every step: E0 - sum(P+/kappa - kappa*P-) * dt."""
    discharge = np.asarray(discharge, dtype=float)
    charge = np.asarray(charge, dtype=float)
    drain = (discharge / desd.kappa - desd.kappa * charge) * dt
    return desd.e0 - np.cumsum(drain)


def _check_series(violations, name, values, steps):
    arr = np.asarray(values, dtype=float)
    if arr.shape != (steps,):
        violations.append(InvariantViolation(name, f"length {arr.size} does not match horizon {steps}"))
        return
    if not np.all(np.isfinite(arr)):
        violations.append(InvariantViolation(name, "values must be finite"))
    elif np.any(arr < 0):
        violations.append(InvariantViolation(name, "values must be >= 0"))


def _check_desd(violations, uid, desd):
    prefix = f"users[{uid}].desd"
    if not 0 <= desd.e_min <= desd.e0 <= desd.e_max:
        violations.append(InvariantViolation(prefix, "requires 0 <= E_min <= E0 <= E_max"))
    if not desd.p_max > 0:
        violations.append(InvariantViolation(f"{prefix}.p_max", "rating must be > 0"))
    if not 0 < desd.kappa <= 1:
        violations.append(InvariantViolation(f"{prefix}.kappa", "efficiency must lie in (0, 1]"))
    bdc = desd.bdc
    if isinstance(bdc, ConstantBdc):
        if bdc.c_d < 0:
            violations.append(InvariantViolation(f"{prefix}.bdc", "unit cost must be >= 0"))
    elif isinstance(bdc, PiecewiseSocBdc):
        fractions = [s for s, _ in bdc.breakpoints]
        if not bdc.breakpoints:
            violations.append(InvariantViolation(f"{prefix}.bdc", "needs at least one breakpoint"))
        elif any(c < 0 for _, c in bdc.breakpoints):
            violations.append(InvariantViolation(f"{prefix}.bdc", "unit cost must be >= 0"))
        elif fractions[0] < 0 or fractions[-1] > 1 or np.any(np.diff(fractions) <= 0):
            violations.append(InvariantViolation(f"{prefix}.bdc",
                                                 "breakpoints must be strictly increasing within [0, 1]"))
    else:
        violations.append(InvariantViolation(f"{prefix}.bdc", f"unknown BDC model {type(bdc).__name__}"))


def validate_model(raw):
    """Check every invariant of a model candidate and return it.

    All field violations are collected before raising, so the caller sees the
    complete list in one go. Connectivity is checked last.
    """
    violations = []
    horizon = raw.horizon
    if not isinstance(horizon.steps, (int, np.integer)) or horizon.steps < 1:
        violations.append(InvariantViolation("horizon.steps", "T must be an integer >= 1"))
    if not horizon.dt > 0:
        violations.append(InvariantViolation("horizon.dt", "dt must be > 0"))
    if violations:
        raise ModelValidationError(violations)
    steps = horizon.steps

    if raw.r < 1:
        violations.append(InvariantViolation("users", "at least one user is required"))
    ids = raw.user_ids
    if len(set(ids)) != len(ids):
        violations.append(InvariantViolation("users", "user ids must be unique"))
    if GRID_NODE in ids:
        violations.append(InvariantViolation("users", f"'{GRID_NODE}' is reserved for the grid node"))

    _check_series(violations, "prices.buy", raw.prices.buy, steps)
    _check_series(violations, "prices.sell", raw.prices.sell, steps)

    for user in raw.users:
        if user.id not in raw.demands:
            violations.append(InvariantViolation(f"demands[{user.id}]", "missing demand profile"))
        else:
            _check_series(violations, f"demands[{user.id}]", raw.demands[user.id], steps)
        if user.kind == "passive":
            if user.desd is not None:
                violations.append(InvariantViolation(f"users[{user.id}]", "passive user cannot own a DESD"))
            if user.rg is not None:
                violations.append(InvariantViolation(f"users[{user.id}]", "passive user cannot own RG"))
        elif user.kind == "active":
            if user.desd is None:
                violations.append(InvariantViolation(f"users[{user.id}]", "active user needs DESD parameters"))
            else:
                _check_desd(violations, user.id, user.desd)
            if user.rg is not None:
                if user.rg.kind not in ("pv", "wt"):
                    violations.append(InvariantViolation(f"users[{user.id}].rg", "kind must be 'pv' or 'wt'"))
                if not user.rg.size > 0:
                    violations.append(InvariantViolation(f"users[{user.id}].rg", "size must be > 0"))
        else:
            violations.append(InvariantViolation(f"users[{user.id}]", f"unknown kind {user.kind!r}"))

    extra = set(raw.demands) - set(ids)
    if extra:
        violations.append(InvariantViolation("demands", f"profiles for unknown users {sorted(extra)}"))

    if not raw.grid.p_g_max > 0:
        violations.append(InvariantViolation("grid.p_g_max", "must be > 0"))

    nodes = set(raw.node_ids())
    for a, b in raw.communication_edges():
        if a not in nodes or b not in nodes:
            violations.append(InvariantViolation("graph.edges", f"edge ({a}, {b}) references an unknown node"))

    if violations:
        raise ModelValidationError(violations)

    if np.any(raw.prices.sell >= raw.prices.buy):
        hours = np.flatnonzero(raw.prices.sell >= raw.prices.buy).tolist()
        logger.warning("sell price reaches buy price at steps %s (arbitrage risk)", hours)

    if not nx.is_connected(raw.graph()):
        raise DisconnectedGraph("communication graph over users + grid is not connected")
    return raw


############## Loading ##############


def _read_csv(path):
    if not os.path.isfile(path):
        raise FileError(path)
    try:
        return pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FileError(path, f"unreadable CSV ({e})")


def read_yaml(path):
    if not os.path.isfile(path):
        raise FileError(path)
    with open(path) as fh:
        try:
            return yaml.safe_load(fh) or {}
        except yaml.YAMLError as e:
            raise FileError(path, f"invalid YAML ({e})")


def _parse_bdc(doc):
    if doc is None:
        return ConstantBdc(0.0)
    if "constant" in doc:
        return ConstantBdc(float(doc["constant"]))
    if "piecewise_soc" in doc:
        return PiecewiseSocBdc(tuple(tuple(pair) for pair in doc["piecewise_soc"]))
    raise InvariantViolation("bdc", f"unknown BDC model {sorted(doc)}")


def _parse_user(doc):
    uid = str(doc["id"])
    if doc.get("kind", "passive") == "passive":
        desd = rg = None
        if "desd" in doc or "rg" in doc:
            # keep them so validation can report the contradiction
            desd = _parse_desd(doc["desd"]) if "desd" in doc else None
            rg = RgUnit(**doc["rg"]) if doc.get("rg") else None
        return UserSpec(id=uid, kind="passive", desd=desd, rg=rg)
    rg_doc = doc.get("rg")
    rg = RgUnit(kind=str(rg_doc["kind"]).lower(), size=float(rg_doc["size"])) if rg_doc else None
    return UserSpec(id=uid, kind=str(doc["kind"]), desd=_parse_desd(doc.get("desd")), rg=rg)


def _parse_desd(doc):
    if doc is None:
        return None
    return DesdParams(e0=float(doc["e0"]), e_min=float(doc["e_min"]), e_max=float(doc["e_max"]),
                      p_max=float(doc["p_max"]), kappa=float(doc["kappa"]), bdc=_parse_bdc(doc.get("bdc")))


def load_profiles(demand_path, price_path, user_ids, sell_ratio=None):
    demand_df = _read_csv(demand_path)
    missing = [uid for uid in user_ids if uid not in demand_df.columns]
    if missing:
        raise InvariantViolation("demands", f"{demand_path} has no column for users {missing}")
    demands = {uid: demand_df[uid].to_numpy(dtype=float) for uid in user_ids}

    price_df = _read_csv(price_path)
    if "p_buy" not in price_df.columns:
        raise InvariantViolation("prices", f"{price_path} needs a 'p_buy' column")
    if "p_sell" in price_df.columns:
        prices = PriceProfile(buy=price_df["p_buy"].to_numpy(dtype=float),
                              sell=price_df["p_sell"].to_numpy(dtype=float))
    else:
        prices = PriceProfile.from_buy(price_df["p_buy"].to_numpy(dtype=float),
                                       0.8 if sell_ratio is None else sell_ratio)
    return demands, prices


def load_model(path):
    """Read a model YAML document plus its CSV profiles and validate it."""
    doc = read_yaml(path)
    base = os.path.dirname(os.path.abspath(path))
    horizon_doc = doc.get("horizon", {})
    horizon = Horizon(steps=int(horizon_doc.get("steps", 24)), dt=float(horizon_doc.get("dt", 1.0)))
    users = tuple(_parse_user(u) for u in doc.get("users", []))
    profiles = doc.get("profiles", {})
    demands, prices = load_profiles(os.path.join(base, profiles.get("demand", "demand.csv")),
                                    os.path.join(base, profiles.get("prices", "prices.csv")),
                                    [u.id for u in users], doc.get("sell_ratio"))

    grid_doc = doc.get("grid") or {}
    if grid_doc.get("p_g_max") is None:
        grid = default_grid_limits(users, demands)
    else:
        grid = GridLimits(p_g_max=float(grid_doc["p_g_max"]))
    edges = None
    if doc.get("graph") and doc["graph"].get("edges") is not None:
        edges = tuple(tuple(e) for e in doc["graph"]["edges"])

    model = MicrogridModel(horizon=horizon, users=users, demands=demands, prices=prices, grid=grid,
                           edges=edges, terminal_soc=bool(doc.get("terminal_soc", False)))
    logger.debug("loaded model %s with %d users", path, model.r)
    return validate_model(model)
