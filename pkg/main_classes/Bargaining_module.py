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
# Nash bargaining over the cooperative bill: every user receives the same
# discount against its declared selfish cost. Users are addressed by their
# position in the D vector (0-based).
# ==============================================================================

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from MicrogridModel_module import GridBargainError, InvariantViolation

logger = logging.getLogger(__name__)

SUCCESS_TOL = 1e-9
MC_BLOCK = 1 << 20


class NegativeGamma(GridBargainError, ValueError):
    pass


class ZeroIdealCost(GridBargainError, ValueError):
    pass


class BargainingFailed(GridBargainError):
    pass


def _vector(values):
    return np.atleast_1d(np.asarray(values, dtype=float))


def check_gammas(gamma):
    gamma = _vector(gamma)
    if np.any(gamma < 0):
        raise NegativeGamma(f"adjustment factors must be >= 0, got {gamma.tolist()}")
    return gamma


def ideal_discount(D, J_soc):
    D = _vector(D)
    return float((D.sum() - J_soc) / D.size)


############## Allocation ##############


@dataclass(eq=False)
class AllocationResult:
    J: np.ndarray  # allocated cost per user, cents
    epsilon: float  # common discount
    success: bool  # epsilon >= 0
    S: np.ndarray  # announced selfish costs
    J_soc: float
    ideal_J: Optional[np.ndarray] = None  # allocation if everyone were honest
    ideal_epsilon: Optional[float] = None

    @property
    def ratios(self):
        return self.J / self.J_soc if self.J_soc else np.full(self.J.size, np.nan)

    def as_dict(self, user_ids=None):
        ids = user_ids or [str(k + 1) for k in range(self.J.size)]
        doc = {
            "J_soc": float(self.J_soc),
            "epsilon": float(self.epsilon),
            "success": bool(self.success),
            "users": {uid: {"S": float(s), "J": float(j)} for uid, s, j in zip(ids, self.S, self.J)},
        }
        if self.ideal_J is not None:
            doc["ideal_epsilon"] = float(self.ideal_epsilon)
            for uid, j0 in zip(ids, self.ideal_J):
                doc["users"][uid]["J0"] = float(j0)
        return doc


def selfish_cost(D_i, gamma_i):
    """S = D - gamma |D|; works elementwise on arrays."""
    gamma = check_gammas(gamma_i)
    S = _vector(D_i) - gamma * np.abs(_vector(D_i))
    return float(S[0]) if np.ndim(D_i) == 0 and np.ndim(gamma_i) == 0 else S


def allocate(S, J_soc):
    S = _vector(S)
    if S.size < 1:
        raise InvariantViolation("S", "at least one player is required")
    eps = float((S.sum() - J_soc) / S.size)
    return AllocationResult(J=S - eps, epsilon=eps, success=eps >= -SUCCESS_TOL, S=S, J_soc=float(J_soc))


def ideal_allocation(D, J_soc):
    result = allocate(D, J_soc)
    result.ideal_J = result.J.copy()
    result.ideal_epsilon = result.epsilon
    return result


def adjusted_allocation(D, gamma, J_soc):
    """Allocation under selfish-cost adjustment, written through the total reduction R_tot."""
    D = _vector(D)
    gamma = check_gammas(gamma)
    r = D.size
    eps0 = ideal_discount(D, J_soc)
    reduction = gamma * np.abs(D)
    r_tot = float(reduction.sum())
    J = D - reduction - (r * eps0 - r_tot) / r
    eps = eps0 - r_tot / r
    return AllocationResult(J=J, epsilon=eps, success=eps >= -SUCCESS_TOL, S=D - reduction, J_soc=float(J_soc),
                            ideal_J=D - eps0, ideal_epsilon=eps0)


############## Resilience ##############


@dataclass(frozen=True)
class ManipulationInterval:
    lower: float  # exclusive
    upper: float  # inclusive

    @property
    def empty(self):
        return bool(self.lower >= self.upper)

    def contains(self, gamma_i):
        return (not self.empty) and self.lower < gamma_i <= self.upper


def _abs_ideal(D, i):
    D = _vector(D)
    if D[i] == 0:
        raise ZeroIdealCost(f"user {i} has zero ideal cost, its adjustment has no effect")
    return D, abs(D[i])


def gamma_solo_bound(D, eps0, i):
    D, magnitude = _abs_ideal(D, i)
    return D.size * eps0 / magnitude


def others_reduction(D, gamma_others, i):
    D = _vector(D)
    gamma = check_gammas(gamma_others)
    if gamma.size == D.size - 1:
        gamma = np.insert(gamma, i, 0.0)
    elif gamma.size != D.size:
        raise InvariantViolation("gamma_others", f"expected {D.size - 1} or {D.size} factors")
    mask = np.ones(D.size, dtype=bool)
    mask[i] = False
    return float(np.sum(gamma[mask] * np.abs(D[mask])))


def manipulation_interval(D, eps0, gamma_others, i):
    """Range of gamma_i keeping bargaining alive while beating the honest allocation."""
    D, magnitude = _abs_ideal(D, i)
    r = D.size
    sigma = others_reduction(D, gamma_others, i)
    upper = (r * eps0 - sigma) / magnitude
    if r == 1:
        return ManipulationInterval(lower=max(upper, 0.0), upper=upper)
    return ManipulationInterval(lower=sigma / ((r - 1) * magnitude), upper=upper)


def dishonest_benefit(D, gamma, i, eps0):
    """Gain J_i0 - J_i of user i under adjustment profile gamma."""
    D = _vector(D)
    gamma = check_gammas(gamma)
    r_tot = float(np.sum(gamma * np.abs(D)))
    if eps0 - r_tot / D.size < -SUCCESS_TOL:
        raise BargainingFailed(f"total reduction {r_tot:.4f} exceeds the cooperation surplus {D.size * eps0:.4f}")
    return float(gamma[i] * abs(D[i]) - r_tot / D.size)


@dataclass
class UserResilience:
    sigma: float  # reduction announced by the other users
    solo_bound: Optional[float]  # largest gamma_i that keeps the bargain alone
    interval: Optional[ManipulationInterval]
    gain: Optional[float]  # cents saved by the misreport
    profits: bool


@dataclass
class ResilienceReport:
    users: dict  # user id -> UserResilience
    r_tot: float  # total reduction of announced costs
    r_eps0: float  # r * eps0, the cooperation surplus
    eps0: float
    success: bool
    max_single_gain: float
    average_gain_bound: Optional[float]

    def as_dict(self):
        doc = {"r_tot": self.r_tot, "r_eps0": self.r_eps0, "eps0": self.eps0, "success": self.success,
               "max_single_gain": self.max_single_gain, "average_gain_bound": self.average_gain_bound,
               "users": {}}
        for uid, u in self.users.items():
            entry = {"sigma": u.sigma, "solo_bound": u.solo_bound, "gain": u.gain, "profits": u.profits,
                     "interval": None}
            if u.interval is not None:
                entry["interval"] = {"lower": u.interval.lower, "upper": u.interval.upper,
                                     "empty": u.interval.empty}
            doc["users"][uid] = entry
        return doc


def resilience_report(D, gamma, J_soc, user_ids=None):
    D = _vector(D)
    gamma = check_gammas(gamma)
    ids = user_ids or [str(k + 1) for k in range(D.size)]
    eps0 = ideal_discount(D, J_soc)
    r = D.size
    r_tot = float(np.sum(gamma * np.abs(D)))
    success = eps0 - r_tot / r >= -SUCCESS_TOL
    users = {}
    for i, uid in enumerate(ids):
        sigma = others_reduction(D, gamma, i)
        if D[i] == 0:
            bound = interval = None
        else:
            bound = gamma_solo_bound(D, eps0, i)
            interval = manipulation_interval(D, eps0, gamma, i)
        gain = dishonest_benefit(D, gamma, i, eps0) if success else None
        users[uid] = UserResilience(sigma=sigma, solo_bound=bound, interval=interval, gain=gain,
                                    profits=bool(gain is not None and gain > 0))
    n_dishonest = int(np.count_nonzero(gamma > 0))
    return ResilienceReport(users=users, r_tot=r_tot, r_eps0=r * eps0, eps0=eps0, success=bool(success),
                            max_single_gain=eps0,
                            average_gain_bound=eps0 / n_dishonest if n_dishonest else None)


############## Region probabilities ##############


class RegionPredicate(str, Enum):
    ALL_DISHONEST_PROFIT = "all-dishonest-profit"
    BARGAINING_FAILS = "bargaining-fails"
    SUCCEEDS_BUT_SOME_LOSE = "succeeds-but-some-lose"


def classify_profiles(D, eps0, gammas, dishonest):
    """Boolean masks (all_profit, fails, some_lose) for a batch of gamma profiles (N x r)."""
    D = _vector(D)
    r = D.size
    r_tot = gammas @ np.abs(D)
    success = eps0 - r_tot / r >= -SUCCESS_TOL
    if dishonest:
        gains = gammas[:, dishonest] * np.abs(D[dishonest]) - (r_tot / r)[:, None]
        all_profit = success & np.all(gains > 0, axis=1)
    else:
        all_profit = np.zeros(gammas.shape[0], dtype=bool)
    return all_profit, ~success, success & ~all_profit


@dataclass
class RegionEstimate:
    probability: float
    stderr: float
    n_samples: int


def _block_counts(D, eps0, dishonest, seed, block, size):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))
    gammas = np.zeros((size, D.size))
    gammas[:, dishonest] = rng.uniform(0.0, 1.0, size=(size, len(dishonest)))
    return np.array([m.sum() for m in classify_profiles(D, eps0, gammas, dishonest)])


def region_counts(D, eps0, honest_set, n_samples, seed=0, workers=1, progress=False):
    """Counts of (all-profit, fails, some-lose) over n_samples uniform gamma draws.

    Draws come in fixed blocks with one Philox substream per block, so the
    counts do not depend on how many workers share the blocks.
    """
    D = _vector(D)
    if n_samples < 1:
        raise InvariantViolation("n_samples", "must be >= 1")
    dishonest = [i for i in range(D.size) if i not in set(honest_set)]
    sizes = [MC_BLOCK] * (n_samples // MC_BLOCK)
    if n_samples % MC_BLOCK:
        sizes.append(n_samples % MC_BLOCK)
    jobs = list(enumerate(sizes))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(lambda job: _block_counts(D, eps0, dishonest, seed, *job), jobs)
        counts = sum(tqdm(results, total=len(jobs), desc="monte carlo", disable=not progress))
    return counts


def _estimate(count, n):
    p = count / n
    return RegionEstimate(probability=float(p), stderr=float(np.sqrt(p * (1 - p) / n)), n_samples=int(n))


def estimate_region_probabilities(D, eps0, honest_set, n_samples, seed=0, workers=1, progress=False):
    counts = region_counts(D, eps0, honest_set, n_samples, seed, workers, progress)
    return {pred: _estimate(c, n_samples) for pred, c in zip(RegionPredicate, counts)}


def estimate_region_probability(D, eps0, honest_set, predicate, n_samples, seed=0, workers=1):
    return estimate_region_probabilities(D, eps0, honest_set, n_samples, seed, workers)[RegionPredicate(predicate)]


############## Lattices ##############


def region_lattice(D, eps0, honest_set, step=0.02, upper=1.0, user_ids=None):
    """Every gamma profile on a regular grid over the dishonest users, with region flags."""
    D = _vector(D)
    ids = user_ids or [str(k + 1) for k in range(D.size)]
    dishonest = [i for i in range(D.size) if i not in set(honest_set)]
    axis = np.round(np.arange(0.0, upper + step / 2, step), 12)
    grid = np.array(list(product(axis, repeat=len(dishonest)))) if dishonest else np.zeros((1, 0))
    gammas = np.zeros((grid.shape[0], D.size))
    gammas[:, dishonest] = grid
    all_profit, fails, some_lose = classify_profiles(D, eps0, gammas, dishonest)
    frame = pd.DataFrame(gammas, columns=[f"gamma_{uid}" for uid in ids])
    frame["success"] = ~fails
    frame["all_dishonest_profit"] = all_profit
    frame["some_lose"] = some_lose
    return frame


def success_lattice(D, eps0, honest_set, step=0.02, upper=1.0, user_ids=None):
    return region_lattice(D, eps0, honest_set, step, upper, user_ids).drop(columns=["all_dishonest_profit", "some_lose"])


def manipulation_lattice(D, eps0, honest_set, step=0.02, upper=1.0, user_ids=None):
    frame = region_lattice(D, eps0, honest_set, step, upper, user_ids)
    return frame[frame["all_dishonest_profit"]].reset_index(drop=True)
