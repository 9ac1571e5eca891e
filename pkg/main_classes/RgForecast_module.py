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
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from MicrogridModel_module import FileError, GridBargainError, InvariantViolation

logger = logging.getLogger(__name__)

PROB_TOL = 1e-9
SOLAR_CLASSES = ("sunny", "cloudy", "rainy")
WIND_LEVELS = ("level 1", "level 2", "level 3", "level 4")


class TooFewScenarios(GridBargainError, ValueError):
    pass


class KindMismatch(GridBargainError, ValueError):
    pass


def _check_distribution(name, probs):
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > PROB_TOL:
        raise InvariantViolation(name, f"probabilities {probs.tolist()} must be >= 0 and sum to 1")


@dataclass(frozen=True)
class WeatherForecast:
    # solar in (sunny, cloudy, rainy) order; wind from level 1 (calm) upwards
    solar: tuple = None
    wind: tuple = None

    def __post_init__(self):
        for name in ("solar", "wind"):
            probs = getattr(self, name)
            if probs is not None:
                object.__setattr__(self, name, tuple(float(p) for p in probs))
                _check_distribution(f"forecast.{name}", probs)

    def for_kind(self, kind):
        probs = self.solar if kind == "solar" else self.wind
        if probs is None:
            raise KindMismatch(f"forecast carries no {kind} distribution")
        return np.array(probs)

    def mix(self, other, alpha):
        """Convex combination alpha*self + (1-alpha)*other."""
        def blend(a, b):
            if a is None or b is None:
                return None
            return tuple(alpha * np.asarray(a) + (1 - alpha) * np.asarray(b))
        return WeatherForecast(solar=blend(self.solar, other.solar), wind=blend(self.wind, other.wind))


FORECAST_CASES = {
    "W1": WeatherForecast(solar=(0.8, 0.2, 0.0), wind=(0.0, 0.3, 0.7, 0.0)),
    "W2": WeatherForecast(solar=(0.0, 0.2, 0.8), wind=(0.5, 0.5, 0.0, 0.0)),
}


@dataclass(frozen=True, eq=False)
class ScenarioPool:
    """Scenario profiles of one RG owner, grouped into weather classes.

    Classes are numbered by increasing daily mean. Solar forecasts list the
    sunniest class first, so class c reads forecast entry n_classes-1-c; wind
    level n reads class n.
    """

    owner: str
    kind: str  # "solar" or "wind"
    profiles: np.ndarray  # (K, T) kW
    classes: np.ndarray  # class index per scenario
    conditionals: np.ndarray  # probability of the scenario inside its class
    n_classes: int

    def forecast_index(self, class_index):
        return self.n_classes - 1 - class_index if self.kind == "solar" else class_index

    def class_members(self, class_index):
        return np.flatnonzero(self.classes == class_index)

    def validate(self):
        profiles = np.asarray(self.profiles)
        if profiles.ndim != 2 or profiles.shape[0] < 1:
            raise InvariantViolation(f"pool[{self.owner}]", "needs at least one scenario profile")
        if np.any(profiles < 0):
            raise InvariantViolation(f"pool[{self.owner}]", "scenario profiles must be >= 0")
        if self.kind not in ("solar", "wind"):
            raise InvariantViolation(f"pool[{self.owner}]", f"unknown kind {self.kind!r}")
        for c in range(self.n_classes):
            members = self.class_members(c)
            if members.size:
                _check_distribution(f"pool[{self.owner}].class[{c}]", self.conditionals[members])
        return self


def classify_scenarios(raw_profiles, n_classes, owner="", kind="solar", seed=0, uniform_equal=False):
    """Sort scenarios by daily mean and split them into contiguous weather classes.

    The daily mean of the power profile stands in for irradiance (solar) or
    wind speed (wind). Ties keep input order; the remainder of K / n_classes
    goes to the lowest classes.
    """
    profiles = np.asarray(raw_profiles, dtype=float)
    if profiles.ndim == 1:
        profiles = profiles[np.newaxis, :]
    k = profiles.shape[0]
    if k < n_classes:
        raise TooFewScenarios(f"{k} scenarios cannot fill {n_classes} classes")

    order = np.argsort(profiles.mean(axis=1), kind="stable")
    sizes = np.full(n_classes, k // n_classes)
    sizes[: k % n_classes] += 1
    classes = np.empty(k, dtype=int)
    classes[order] = np.repeat(np.arange(n_classes), sizes)

    if uniform_equal:
        weights = np.ones(k)
    else:
        weights = np.random.default_rng(seed).uniform(0.0, 1.0, size=k)
    conditionals = np.zeros(k)
    for c in range(n_classes):
        members = classes == c
        conditionals[members] = weights[members] / weights[members].sum()

    pool = ScenarioPool(owner=owner, kind=kind, profiles=profiles, classes=classes,
                        conditionals=conditionals, n_classes=n_classes)
    logger.debug("pool %s: %d scenarios in classes of sizes %s", owner, k, sizes.tolist())
    return pool.validate()


@dataclass(frozen=True, eq=False)
class RgForecastResult:
    profiles: dict  # user id -> kW series

    def __getitem__(self, user_id):
        return self.profiles[user_id]

    def get(self, user_id, default=None):
        return self.profiles.get(user_id, default)

    def to_frame(self):
        return pd.DataFrame({uid: np.asarray(p) for uid, p in self.profiles.items()})


def expected_profile(pool, forecast):
    probs = forecast.for_kind(pool.kind)
    if probs.size != pool.n_classes:
        raise KindMismatch(f"{pool.kind} forecast has {probs.size} classes, pool {pool.owner} has {pool.n_classes}")
    profile = np.zeros(pool.profiles.shape[1])
    for c in range(pool.n_classes):
        mass = probs[pool.forecast_index(c)]
        if mass == 0:
            continue
        members = pool.class_members(c)
        if members.size == 0:
            raise InvariantViolation(f"pool[{pool.owner}].class[{c}]", "class is empty but has forecast mass")
        profile += mass * (pool.conditionals[members] @ pool.profiles[members])
    return profile


def predict_rg(pool, forecast):
    return RgForecastResult({pool.owner: expected_profile(pool, forecast)})


def predict_all(pools, forecast):
    return RgForecastResult({pool.owner: expected_profile(pool, forecast) for pool in pools})


def load_scenario_pool(path, owner, kind, n_classes=None, seed=0, uniform_equal=False):
    """Read a scenario CSV (header + one row per scenario, one column per step)."""
    if not os.path.isfile(path):
        raise FileError(path)
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FileError(path, f"unreadable CSV ({e})")
    if n_classes is None:
        n_classes = len(SOLAR_CLASSES) if kind == "solar" else len(WIND_LEVELS)
    return classify_scenarios(frame.to_numpy(dtype=float), n_classes, owner=owner, kind=kind,
                              seed=seed, uniform_equal=uniform_equal)
