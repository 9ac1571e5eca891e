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

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from Bargaining_module import (adjusted_allocation, check_gammas, estimate_region_probabilities,
                               gamma_solo_bound, ideal_discount, manipulation_lattice, resilience_report,
                               success_lattice)
from Codes_module import CodesConfig, convergence_trace, plot_convergence, plot_network, run_codes
from Consensus_module import ConsensusConfig, build_weights, distributed_allocation, trajectory_frame
from MicrogridModel_module import (ConstantBdc, DesdParams, FileError, GridBargainError, Horizon, InvariantViolation,
                                   MicrogridModel, PriceProfile, RgUnit, UserSpec, default_grid_limits, load_model,
                                   read_yaml, validate_model)
from RgForecast_module import FORECAST_CASES, RgForecastResult, WeatherForecast, load_scenario_pool, predict_all
from Scheduling_module import schedule_frame, schedule_residuals, solve_all_individual, solve_social

logger = logging.getLogger(__name__)

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")
CSV_FORMAT = "%.9g"


@dataclass(frozen=True)
class MonteCarloSpec:
    n_samples: int = 1_000_000
    seed: int = 0
    honest: tuple = ("1",)
    workers: int = 1

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvariantViolation("monte_carlo.n_samples", "must be >= 1")


@dataclass
class ExperimentConfig:
    model_path: Optional[str] = None
    pools: dict = field(default_factory=dict)  # user id -> scenario CSV
    case: str = "W1"
    forecast: Optional[WeatherForecast] = None
    gamma: Optional[list] = None
    solver: str = "centralized"
    verify_oracle: bool = False
    codes: CodesConfig = field(default_factory=CodesConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    monte_carlo: MonteCarloSpec = field(default_factory=MonteCarloSpec)
    seed: int = 0
    uniform_equal: bool = False
    d_vector: Optional[list] = None
    j_soc: Optional[float] = None
    lattice_step: float = 0.02
    out_dir: str = "results"
    plot: bool = False

    def weather(self):
        if self.forecast is not None:
            return self.forecast
        if self.case not in FORECAST_CASES:
            raise InvariantViolation("case", f"unknown weather case {self.case!r}, use one of {sorted(FORECAST_CASES)}")
        return FORECAST_CASES[self.case]


def _resolve(base, path):
    return path if os.path.isabs(path) else os.path.join(base, path)


def load_experiment(path, **overrides):
    """Experiment YAML -> ExperimentConfig; keyword overrides win over file entries."""
    doc = read_yaml(path)
    base = os.path.dirname(os.path.abspath(path))
    cfg = ExperimentConfig()
    if "model" in doc:
        cfg.model_path = _resolve(base, doc["model"])
    cfg.pools = {str(uid): _resolve(base, p) for uid, p in (doc.get("pools") or {}).items()}
    cfg.case = str(doc.get("case", cfg.case))
    if "forecast" in doc:
        fc = doc["forecast"]
        cfg.forecast = WeatherForecast(solar=fc.get("solar"), wind=fc.get("wind"))
    if doc.get("gamma") is not None:
        cfg.gamma = [float(g) for g in doc["gamma"]]
    cfg.solver = doc.get("solver", cfg.solver)
    cfg.seed = int(doc.get("seed", cfg.seed))
    cfg.uniform_equal = bool(doc.get("uniform_equal", False))
    cfg.lattice_step = float(doc.get("lattice_step", cfg.lattice_step))
    if doc.get("codes"):
        cfg.codes = CodesConfig(**doc["codes"])
    if doc.get("consensus"):
        cfg.consensus = ConsensusConfig(**doc["consensus"])
    if doc.get("monte_carlo"):
        mc = dict(doc["monte_carlo"])
        if "honest" in mc:
            mc["honest"] = tuple(str(h) for h in mc["honest"])
        cfg.monte_carlo = MonteCarloSpec(**mc)
    if doc.get("d_vector") is not None:
        cfg.d_vector = [float(d) for d in doc["d_vector"]]
        cfg.j_soc = float(doc["j_soc"])
    if "out" in doc:
        cfg.out_dir = _resolve(base, doc["out"])
    return apply_overrides(cfg, **overrides)


def apply_overrides(cfg, **overrides):
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "seed":
            cfg.seed = value
            cfg.monte_carlo = replace(cfg.monte_carlo, seed=value)
        elif key == "samples":
            cfg.monte_carlo = replace(cfg.monte_carlo, n_samples=value)
        elif key == "honest":
            cfg.monte_carlo = replace(cfg.monte_carlo, honest=tuple(str(h) for h in value))
        elif key == "workers":
            cfg.monte_carlo = replace(cfg.monte_carlo, workers=value)
        elif key == "message_log":
            cfg.codes = replace(cfg.codes, message_log_path=value, log_messages=True)
        else:
            setattr(cfg, key, value)
    if cfg.gamma is not None:
        check_gammas(cfg.gamma)
    if cfg.solver not in ("centralized", "distributed"):
        raise InvariantViolation("solver", "must be 'centralized' or 'distributed'")
    for path in [cfg.model_path, *cfg.pools.values()]:
        if path is not None and not os.path.isfile(path):
            raise FileError(path)
    return cfg


class ExperimentManager:
    """Runs forecast -> schedule -> individual costs -> allocation -> resilience."""

    def __init__(self, config):
        self.config = config
        self.model = None  # MicrogridModel, loaded on first use
        self.rg = None  # RgForecastResult of the configured weather case
        self.social = None  # centralized schedule, also the oracle
        self.codes_run = None  # distributed run, when asked for
        self.oracle_gap = None  # |J_soc distributed - J_soc centralized| in cents
        self.individual = None  # user id -> IndividualOutcome
        self._consensus_run = None
        self.timings = {}  # stage name -> seconds

    @contextmanager
    def _timed(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    ############## Pipeline steps ##############

    def load(self):
        if self.model is None:
            if self.config.model_path is None:
                raise InvariantViolation("model", "experiment has no model file")
            self.model = load_model(self.config.model_path)
        return self.model

    def run_forecast(self):
        model = self.load()
        weather = self.config.weather()
        pools = []
        with self._timed("forecast"):
            for k, user in enumerate(model.rg_users):
                if user.id not in self.config.pools:
                    raise FileError(f"<scenario pool for user {user.id}>", "no scenario file configured")
                pools.append(load_scenario_pool(self.config.pools[user.id], owner=user.id, kind=user.rg.weather,
                                                seed=self.config.seed + k, uniform_equal=self.config.uniform_equal))
            self.rg = predict_all(pools, weather)
        return self.rg

    def run_schedule(self):
        model = self.load()
        rg = self.rg if self.rg is not None else self.run_forecast()
        centralized = self.config.solver == "centralized"
        if centralized or self.config.verify_oracle:
            with self._timed("schedule_centralized"):
                self.social = solve_social(model, rg)
        if not centralized or self.config.verify_oracle:
            with self._timed("schedule_distributed"):
                self.codes_run = run_codes(model, rg, self.config.codes, self.config.seed)
            if self.social is not None:
                self.oracle_gap = abs(self.codes_run.outcome.social_cost - self.social.social_cost)
        return self.schedule_outcome()

    def schedule_outcome(self):
        if self.config.solver == "distributed" and self.codes_run is not None:
            return self.codes_run.outcome
        return self.social

    def run_individual(self):
        model = self.load()
        rg = self.rg if self.rg is not None else self.run_forecast()
        with self._timed("individual"):
            self.individual = solve_all_individual(model, rg)
        return self.individual

    def ideal_costs(self):
        """(user ids, D, J_soc), from overrides when given, otherwise solved."""
        if self.config.d_vector is not None:
            D = np.asarray(self.config.d_vector, dtype=float)
            ids = self.model.user_ids if self.model is not None else [str(k + 1) for k in range(D.size)]
            return ids, D, float(self.config.j_soc)
        outcome = self.schedule_outcome() or self.run_schedule()
        individual = self.individual or self.run_individual()
        ids = self.model.user_ids
        return ids, np.array([individual[uid].ideal_selfish_cost for uid in ids]), outcome.social_cost

    def run_bargain(self):
        ids, D, j_soc = self.ideal_costs()
        gamma = np.zeros(D.size) if self.config.gamma is None else check_gammas(self.config.gamma)
        if gamma.size != D.size:
            raise InvariantViolation("gamma", f"{gamma.size} factors for {D.size} users")
        with self._timed("bargain"):
            allocation = adjusted_allocation(D, gamma, j_soc)
            report = resilience_report(D, gamma, j_soc, ids)
        doc = {"allocation": allocation.as_dict(ids), "resilience": report.as_dict()}
        doc["allocation"]["ratios"] = {uid: float(x) for uid, x in zip(ids, allocation.ratios)}
        doc["solo_bounds"] = {uid: (None if D[i] == 0 else gamma_solo_bound(D, allocation.ideal_epsilon, i))
                              for i, uid in enumerate(ids)}

        outcome = self.schedule_outcome()
        if self.model is not None and outcome is not None and self.config.d_vector is None:
            with self._timed("allocation_consensus"):
                W = build_weights(self.model.graph(), self.config.consensus.weight_rule)
                selfish = dict(zip(ids, allocation.S))
                J, run = distributed_allocation(W, selfish, outcome.bdc_costs, outcome.trading_cost,
                                                self.config.consensus)
            doc["distributed_allocation"] = {"J": {uid: float(j) for uid, j in zip(ids, J)},
                                             "iterations": run.iterations}
            self._consensus_run = run
        return allocation, doc

    def run_region(self, honest=None):
        ids, D, j_soc = self.ideal_costs()
        spec = self.config.monte_carlo
        honest_ids = spec.honest if honest is None else honest
        unknown = [h for h in honest_ids if h not in ids]
        if unknown:
            raise InvariantViolation("honest", f"unknown users {unknown}")
        honest_idx = [ids.index(h) for h in honest_ids]
        eps0 = ideal_discount(D, j_soc)
        with self._timed("region"):
            estimates = estimate_region_probabilities(D, eps0, honest_idx, spec.n_samples, spec.seed, spec.workers)
        return {
            "honest": list(honest_ids),
            "n_samples": spec.n_samples,
            "seed": spec.seed,
            "probabilities": {pred.value: {"p": est.probability, "stderr": est.stderr}
                              for pred, est in estimates.items()},
        }

    def run_report(self, regions=True):
        doc = {"case": self.config.case, "seed": self.config.seed, "solver": self.config.solver}
        if self.config.d_vector is None:
            rg = self.run_forecast()
            outcome = self.run_schedule()
            self.run_individual()
            doc["forecast"] = {uid: [float(x) for x in p] for uid, p in rg.profiles.items()}
            doc["schedule"] = self.schedule_doc(outcome)
            doc["ideal_costs"] = {uid: o.ideal_selfish_cost for uid, o in self.individual.items()}
        allocation, bargain = self.run_bargain()
        doc.update(bargain)
        if regions:
            ids, _, _ = self.ideal_costs()
            doc["regions"] = {h: self.run_region(honest=(h,)) for h in ids}
        return allocation, doc

    def schedule_doc(self, outcome):
        doc = {"social_cost": outcome.social_cost, "trading_cost": outcome.trading_cost,
               "bdc_costs": dict(outcome.bdc_costs),
               "residuals": schedule_residuals(self.model, self.rg, outcome)}
        doc["soc_range"] = {uid: list(outcome.soc_range(uid, self.model.user(uid).desd.e_max))
                            for uid in outcome.soc}
        if self.codes_run is not None:
            doc["codes"] = {"converged": self.codes_run.converged, "iterations": self.codes_run.iterations,
                            "consensus_rounds": self.codes_run.consensus_rounds,
                            "price_spread": self.codes_run.price_spread,
                            "social_cost": self.codes_run.outcome.social_cost}
        if self.oracle_gap is not None:
            doc["oracle_gap"] = self.oracle_gap
        return doc

    ############## Output ##############

    def out_path(self, name):
        os.makedirs(self.config.out_dir, exist_ok=True)
        return os.path.join(self.config.out_dir, name)

    def write_forecast(self):
        paths = []
        for uid, profile in self.rg.profiles.items():
            frame = RgForecastResult({uid: profile}).to_frame()
            frame.index.name = "t"
            path = self.out_path(f"forecast_user{uid}.csv")
            frame.to_csv(path, float_format=CSV_FORMAT)
            paths.append(path)
        return paths

    def write_schedule(self):
        outcome = self.schedule_outcome()
        schedule_frame(outcome).to_csv(self.out_path("schedule.csv"), float_format=CSV_FORMAT)
        if self.codes_run is not None:
            reference = self.social.social_cost if self.social is not None else None
            trace = convergence_trace(self.codes_run, reference)
            trace.to_csv(self.out_path("convergence.csv"), index=False, float_format=CSV_FORMAT)
            if self.config.plot:
                plot_convergence(trace, self.out_path("convergence.png"))
        if self.config.plot:
            plot_network(self.model, self.out_path("network.png"))
            self._plot_schedule(outcome)

    def write_lattices(self, D, eps0, ids):
        step = self.config.lattice_step
        for i, uid in enumerate(ids):
            success_lattice(D, eps0, [i], step, user_ids=ids).to_csv(
                self.out_path(f"success_lattice_honest{uid}.csv"), index=False, float_format=CSV_FORMAT)
            manipulation_lattice(D, eps0, [i], step, user_ids=ids).to_csv(
                self.out_path(f"manipulation_lattice_honest{uid}.csv"), index=False, float_format=CSV_FORMAT)

    def write_consensus_trajectory(self):
        run = self._consensus_run
        if run is not None and run.trajectory:
            trajectory_frame(run, self.model.node_ids()).to_csv(self.out_path("allocation_consensus.csv"),
                                                                float_format=CSV_FORMAT)

    def write_report(self, doc, name="report.json"):
        path = self.out_path(name)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(self.out_path("timings.json"), "w") as fh:
            json.dump({k: round(v, 6) for k, v in self.timings.items()}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    ############## Plots ##############

    def plot_forecast(self):
        fig, ax = plt.subplots(figsize=(8, 4))
        for uid, profile in self.rg.profiles.items():
            ax.plot(np.arange(1, len(profile) + 1), profile, marker="o", label=f"user {uid}")
        ax.set_xlabel("t (h)")
        ax.set_ylabel("predicted RG (kW)")
        ax.set_title(f"RG prediction, case {self.config.case}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(self.out_path("forecast.png"), dpi=120)
        plt.close(fig)

    def _plot_schedule(self, outcome):
        d = outcome.decision
        t = np.arange(1, len(d.grid_buy) + 1)
        fig, axes = plt.subplots(1 + len(d.discharge), 1, figsize=(8, 2.5 * (1 + len(d.discharge))), sharex=True)
        axes = np.atleast_1d(axes)
        axes[0].step(t, d.grid_buy - d.grid_sell, where="mid")
        axes[0].set_ylabel("P_G (kW)")
        for ax, uid in zip(axes[1:], d.discharge):
            ax.step(t, d.battery_output(uid), where="mid")
            ax.set_ylabel(f"P_{uid},B (kW)")
        axes[-1].set_xlabel("t (h)")
        fig.tight_layout()
        fig.savefig(self.out_path("schedule.png"), dpi=120)
        plt.close(fig)

    ############## Synthetic instances ##############

    @staticmethod
    def random_instance(seed, r=None, steps=24, max_users=6, random_graph=False):
        """Feasible random microgrid plus an RG forecast for its RG owners."""
        rng = np.random.default_rng(seed)
        r = int(rng.integers(1, max_users + 1)) if r is None else r
        hours = np.arange(steps) * 24.0 / steps
        daylight = np.clip(np.sin(np.pi * (hours - 6.0) / 12.0), 0.0, None)

        buy = rng.uniform(5.0, 25.0, size=steps)
        prices = PriceProfile.from_buy(buy, 0.8)
        users, demands, rg = [], {}, {}
        for k in range(r):
            uid = str(k + 1)
            base = rng.uniform(0.3, 1.5)
            demands[uid] = base + rng.uniform(0.0, 2.5, size=steps) * (1.0 + 0.5 * np.cos(np.pi * (hours - 19.0) / 12.0))
            if rng.random() < 0.6:
                e_max = rng.uniform(5.0, 15.0)
                e_min = rng.uniform(0.1, 0.3) * e_max
                desd = DesdParams(e0=rng.uniform(e_min, e_max), e_min=e_min, e_max=e_max,
                                  p_max=rng.uniform(2.0, 5.0), kappa=rng.uniform(0.85, 0.98),
                                  bdc=ConstantBdc(rng.uniform(0.0, 2.0)))
                unit = None
                if rng.random() < 0.7:
                    size = rng.uniform(2.0, 7.0)
                    unit = RgUnit(kind="pv", size=size)
                    rg[uid] = size * daylight * rng.uniform(0.3, 1.0, size=steps)
                users.append(UserSpec.active(uid, desd, unit))
            else:
                users.append(UserSpec.passive(uid))

        edges = None
        if random_graph:
            nodes = [u.id for u in users] + ["grid"]
            edges = [(nodes[k], nodes[int(rng.integers(0, k))]) for k in range(1, len(nodes))]
            for a, b in rng.integers(0, len(nodes), size=(len(nodes) // 2, 2)):
                if a != b:
                    edges.append((nodes[a], nodes[b]))
        model = MicrogridModel(horizon=Horizon(steps=steps, dt=24.0 / steps), users=tuple(users), demands=demands,
                               prices=prices, grid=default_grid_limits(users, demands), edges=edges)
        return validate_model(model), RgForecastResult(rg)

    @staticmethod
    def table_fixture(case="W1"):
        """(D, J_soc) of the published ideal-allocation table."""
        doc = read_yaml(os.path.join(DATA_DIR, "reference_costs.yaml"))
        if case not in doc:
            raise GridBargainError(f"no fixture for case {case!r}")
        return np.array(doc[case]["D"], dtype=float), float(doc[case]["J_soc"])
