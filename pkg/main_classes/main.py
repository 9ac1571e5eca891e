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
# Command line entry point: python main_classes/main.py <command> ...
# Exit codes: 0 success, 2 validation or file error, 3 solver failure,
# 4 bargaining failure.
# ==============================================================================

import functools
import logging
import os
import sys

import click
from pythonjsonlogger import jsonlogger

from affichage import (print_allocation_table, print_banner, print_header, print_region_table, print_resilience,
                       print_schedule_summary, print_subheader)
from Bargaining_module import BargainingFailed, NegativeGamma, ZeroIdealCost, ideal_discount
from Consensus_module import NoConvergence
from ExperimentManager import ExperimentConfig, ExperimentManager, apply_overrides, load_experiment
from MicrogridModel_module import DisconnectedGraph, FileError, GridBargainError, InvariantViolation, LengthMismatch
from RgForecast_module import FORECAST_CASES, KindMismatch, TooFewScenarios
from Scheduling_module import Infeasible, SolverStall

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_BARGAINING = 0, 2, 3, 4
VALIDATION_ERRORS = (InvariantViolation, FileError, DisconnectedGraph, LengthMismatch, TooFewScenarios,
                     KindMismatch, NegativeGamma, ZeroIdealCost)
SOLVER_ERRORS = (Infeasible, SolverStall, NoConvergence)


def configure_logging():
    level = os.environ.get("GRIDBARGAIN_LOG", "warning").upper()
    handler = logging.StreamHandler(sys.stderr)
    if os.environ.get("GRIDBARGAIN_LOG_FORMAT", "text").lower() == "json":
        handler.setFormatter(jsonlogger.JsonFormatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level, logging.WARNING))


def exit_codes(command):
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            code = command(*args, **kwargs)
        except VALIDATION_ERRORS as e:
            click.echo(f"error: {e}", err=True)
            code = EXIT_VALIDATION
        except SOLVER_ERRORS as e:
            click.echo(f"solver error: {e}", err=True)
            code = EXIT_SOLVER
        except BargainingFailed as e:
            click.echo(f"bargaining failed: {e}", err=True)
            code = EXIT_BARGAINING
        except GridBargainError as e:
            click.echo(f"error: {e}", err=True)
            code = EXIT_VALIDATION
        sys.exit(code or EXIT_OK)
    return wrapper


def _floats(text):
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvariantViolation("vector", f"cannot parse {text!r} as comma separated numbers")


def _config(config_path, **overrides):
    if config_path is not None:
        return load_experiment(config_path, **overrides)
    return apply_overrides(ExperimentConfig(), **overrides)


def _bargain_overrides(d_vector, jsoc, fixture):
    D = _floats(d_vector)
    if fixture is not None:
        D, jsoc = ExperimentManager.table_fixture(fixture)
        D = D.tolist()
    if (D is None) != (jsoc is None):
        raise InvariantViolation("--d-vector/--jsoc", "both overrides must be given together")
    return D, jsoc


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                             help="Experiment YAML file.")
seed_option = click.option("--seed", type=int, default=None, help="Overrides every seed of the experiment.")
out_option = click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                          help="Output directory.")
case_option = click.option("--case", type=click.Choice(sorted(FORECAST_CASES)), default=None,
                           help="Weather forecast case.")


@click.group()
def cli():
    """Cooperative microgrid scheduling and bargaining experiments."""
    configure_logging()


@cli.command()
@config_option
@case_option
@seed_option
@out_option
@click.option("--uniform-equal", is_flag=True, default=None, help="Equal scenario probabilities within a class.")
@click.option("--plot", is_flag=True, default=None)
@exit_codes
def forecast(config_path, case, seed, out_dir, uniform_equal, plot):
    """Expected RG profile of every RG owner."""
    manager = ExperimentManager(_config(config_path, case=case, seed=seed, out_dir=out_dir,
                                        uniform_equal=uniform_equal, plot=plot))
    manager.run_forecast()
    for path in manager.write_forecast():
        click.echo(f"wrote {path}")
    if manager.config.plot:
        manager.plot_forecast()


@cli.command()
@config_option
@case_option
@seed_option
@out_option
@click.option("--solver", type=click.Choice(["centralized", "distributed"]), default=None)
@click.option("--verify-oracle", is_flag=True, default=None, help="Run the other solver too and report the gap.")
@click.option("--message-log", type=click.Path(dir_okay=False), default=None,
              help="Dump every distributed-solver message as JSON lines.")
@click.option("--plot", is_flag=True, default=None)
@exit_codes
def schedule(config_path, case, seed, out_dir, solver, verify_oracle, message_log, plot):
    """Cooperative day-ahead schedule."""
    manager = ExperimentManager(_config(config_path, case=case, seed=seed, out_dir=out_dir, solver=solver,
                                        verify_oracle=verify_oracle, message_log=message_log, plot=plot))
    print_header(f"Schedule, case {manager.config.case}, {manager.config.solver} solver")
    outcome = manager.run_schedule()
    doc = manager.schedule_doc(outcome)
    print_schedule_summary(doc)
    manager.write_schedule()
    manager.write_report({"case": manager.config.case, "schedule": doc}, "schedule.json")
    if manager.codes_run is not None:
        manager.codes_run.check()


@cli.command()
@config_option
@case_option
@seed_option
@out_option
@click.option("--d-vector", default=None, help="Ideal selfish costs D_i, comma separated (cents).")
@click.option("--jsoc", type=float, default=None, help="Social cost J_soc (cents).")
@click.option("--fixture", type=click.Choice(["W1", "W2"]), default=None, help="Use the shipped published costs.")
@click.option("--gamma", default=None, help="Adjustment factors, comma separated.")
@click.option("--lattice-step", type=float, default=None, help="Also write gamma lattices at this spacing.")
@exit_codes
def bargain(config_path, case, seed, out_dir, d_vector, jsoc, fixture, gamma, lattice_step):
    """Allocation of the social cost and resilience analysis."""
    D, jsoc = _bargain_overrides(d_vector, jsoc, fixture)
    manager = ExperimentManager(_config(config_path, case=case, seed=seed, out_dir=out_dir, d_vector=D, j_soc=jsoc,
                                        gamma=_floats(gamma), lattice_step=lattice_step))
    allocation, doc = manager.run_bargain()
    print_header("Cost allocation")
    print_allocation_table(doc["allocation"])
    print_subheader("Resilience")
    print_resilience(doc["resilience"])
    manager.write_report(doc, "bargain.json")
    manager.write_consensus_trajectory()
    if lattice_step is not None:
        ids, D_vec, j_soc = manager.ideal_costs()
        manager.write_lattices(D_vec, ideal_discount(D_vec, j_soc), ids)
    return EXIT_OK if allocation.success else EXIT_BARGAINING


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--d-vector", default=None)
@click.option("--jsoc", type=float, default=None)
@click.option("--fixture", type=click.Choice(["W1", "W2"]), default=None)
@click.option("--honest", multiple=True, help="Honest user id (repeatable).")
@click.option("--samples", type=int, default=None)
@click.option("--workers", type=int, default=None)
@exit_codes
def region(config_path, seed, out_dir, d_vector, jsoc, fixture, honest, samples, workers):
    """Monte Carlo probabilities of the manipulation regions."""
    D, jsoc = _bargain_overrides(d_vector, jsoc, fixture)
    manager = ExperimentManager(_config(config_path, seed=seed, out_dir=out_dir, d_vector=D, j_soc=jsoc,
                                        honest=honest or None, samples=samples, workers=workers))
    result = manager.run_region()
    print_header("Region probabilities")
    print_region_table(result)
    manager.write_report(result, "region.json")


@cli.command()
@config_option
@click.option("--case", type=click.Choice(sorted(FORECAST_CASES) + ["all"]), default=None)
@seed_option
@out_option
@click.option("--solver", type=click.Choice(["centralized", "distributed"]), default=None)
@click.option("--samples", type=int, default=None)
@click.option("--plot", is_flag=True, default=None)
@exit_codes
def report(config_path, case, seed, out_dir, solver, samples, plot):
    """Full pipeline, one report per weather case."""
    cases = sorted(FORECAST_CASES) if case == "all" else [case]
    failed = False
    for name in cases:
        cfg = _config(config_path, case=name, seed=seed, out_dir=out_dir, solver=solver, samples=samples, plot=plot)
        if case == "all":
            cfg.out_dir = os.path.join(cfg.out_dir, name)
        manager = ExperimentManager(cfg)
        print_banner(f"Experiment report, case {cfg.case}")
        allocation, doc = manager.run_report()
        if "schedule" in doc:
            print_subheader("Schedule")
            print_schedule_summary(doc["schedule"])
            manager.write_forecast()
            manager.write_schedule()
            if cfg.plot:
                manager.plot_forecast()
        print_subheader("Cost allocation")
        print_allocation_table(doc["allocation"])
        print_subheader("Region probabilities")
        for region_doc in doc["regions"].values():
            print_region_table(region_doc)
        click.echo(f"wrote {manager.write_report(doc)}")
        if manager.codes_run is not None:
            manager.codes_run.check()  # report is kept, exit code 3
        failed = failed or not allocation.success
    return EXIT_BARGAINING if failed else EXIT_OK


if __name__ == "__main__":
    cli()
