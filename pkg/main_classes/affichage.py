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

import click


############## Console output functions ##############


def print_banner(title):
    ascii_art = r"""
   ___     _    _ ___                       _
  / __|_ _(_)__| | _ ) __ _ _ _ __ _ __ _(_)_ _
 | (_ | '_| / _` | _ \/ _` | '_/ _` / _` | | ' \
  \___|_| |_\__,_|___/\__,_|_| \__, \__,_|_|_||_|
                               |___/
    """
    click.echo(ascii_art)
    click.echo("=" * 80)
    click.echo(title)
    click.echo("=" * 80)


def print_header(title):
    click.echo("\n" + "=" * 80)
    click.echo(f"{title}")
    click.echo("=" * 80)


def print_subheader(title):
    click.echo("\n" + "-" * 80)
    click.echo(f"{title}")
    click.echo("-" * 80)


def print_allocation_table(doc):
    """Allocation section of a report: one row per user."""
    users = doc["users"]
    has_ideal = any("J0" in u for u in users.values())
    head = f"{'User':>6} | {'S_i':>12} | {'J_i':>12}" + (f" | {'J_i^0':>12}" if has_ideal else "")
    click.echo(head)
    click.echo("-" * len(head))
    for uid, u in users.items():
        row = f"{uid:>6} | {u['S']:>12.2f} | {u['J']:>12.2f}"
        if has_ideal:
            row += f" | {u['J0']:>12.2f}"
        click.echo(row)
    click.echo("-" * len(head))
    status = "successful" if doc["success"] else "FAILED"
    click.echo(f"J_soc = {doc['J_soc']:.2f} cents | discount = {doc['epsilon']:.4f} cents | bargaining {status}")


def print_resilience(doc):
    for uid, u in doc["users"].items():
        bound = "unbounded" if u["solo_bound"] is None else f"{u['solo_bound']:.4f}"
        if u["interval"] is None:
            interval = "none"
        elif u["interval"]["empty"]:
            interval = "empty"
        else:
            interval = f"({u['interval']['lower']:.4f}, {u['interval']['upper']:.4f}]"
        click.echo(f"User {uid}: solo gamma bound {bound} | manipulation interval {interval}")
    click.echo(f"R_tot = {doc['r_tot']:.4f} | r*eps0 = {doc['r_eps0']:.4f}")


def print_region_table(region):
    click.echo(f"Honest users: {', '.join(region['honest'])} | samples: {region['n_samples']}")
    for name, est in region["probabilities"].items():
        click.echo(f"  {name:<24} {100 * est['p']:8.4f} %  (+/- {100 * est['stderr']:.4f} pp)")


def print_schedule_summary(doc):
    click.echo(f"Social cost J_soc: {doc['social_cost']:.4f} cents (trading {doc['trading_cost']:.4f})")
    for uid, cost in doc["bdc_costs"].items():
        lo, hi = doc["soc_range"][uid]
        click.echo(f"  DESD {uid}: BDC {cost:.4f} cents, SOC within {100 * lo:.1f}%-{100 * hi:.1f}%")
    if "codes" in doc:
        codes = doc["codes"]
        state = "converged" if codes["converged"] else "did not converge"
        click.echo(f"  distributed solver {state} in {codes['iterations']} iterations")
    if "oracle_gap" in doc:
        click.echo(f"  gap to centralized oracle: {doc['oracle_gap']:.6f} cents")
