import logging
import sys
from typing import Optional

import click
import click_log

from fracplap import log

logger = logging.getLogger("fracplap")
click_log.basic_config(logger)  # type: ignore


CONTEXT_SETTINGS = dict(
    help_option_names=["-h", "--help"], auto_envvar_prefix="FRACPLAP"
)

config_argument = click.argument(
    "config", type=click.Path(exists=True, dir_okay=False, readable=True)
)
output_dir_option = click.option(
    "--output-dir",
    type=click.Path(file_okay=False),
    default=None,
    help="Directory for output files, overriding output.directory from the config.",
)
seed_option = click.option(
    "--seed",
    type=click.IntRange(min=0),
    default=None,
    help="Seed for randomized checks, overriding the config seed.",
)
quiet_option = click.option(
    "--quiet", is_flag=True, help="Suppress console output other than errors."
)


def _quiet(quiet: bool) -> None:
    log.set_quiet(quiet)


@click.group(context_settings=CONTEXT_SETTINGS)
@click_log.simple_verbosity_option(logger, default="WARNING")
def cli() -> None:
    """fracplap solves the Dirichlet problem for the regional fractional
    p(x)-Laplacian with nonnegative L1 data, and checks the discrete
    estimates behind its renormalized solutions.

    Every command reads a toml config describing the domain, exponents,
    data, solver and diagnostics settings.
    """


@cli.command()
@config_argument
@output_dir_option
@seed_option
@quiet_option
def solve(
    config: str, output_dir: Optional[str], seed: Optional[int], quiet: bool
) -> None:
    """Minimize the energy and write solution.json, kernel.txt and meta.json."""
    _quiet(quiet)
    from .pipeline import run_solve

    sys.exit(run_solve(config, output_dir, seed))


@cli.command()
@config_argument
@output_dir_option
@seed_option
@quiet_option
def sweep(
    config: str, output_dir: Optional[str], seed: Optional[int], quiet: bool
) -> None:
    """Solve the truncated problems for every level and write sweep.csv."""
    _quiet(quiet)
    from .pipeline import run_sweep

    sys.exit(run_sweep(config, output_dir, seed))


@cli.command()
@config_argument
@output_dir_option
@seed_option
@quiet_option
def check(
    config: str, output_dir: Optional[str], seed: Optional[int], quiet: bool
) -> None:
    """Solve, run every diagnostic and write checks.json."""
    _quiet(quiet)
    from .pipeline import run_check

    sys.exit(run_check(config, output_dir, seed))


@cli.command()
@config_argument
@click.option(
    "--function",
    "function",
    required=True,
    help="Pointwise expression to sample on the mesh, e.g. 'x*(1-x)'.",
)
@output_dir_option
@seed_option
@quiet_option
def norms(
    config: str,
    function: str,
    output_dir: Optional[str],
    seed: Optional[int],
    quiet: bool,
) -> None:
    """Print the Luxemburg norms of a sampled function."""
    _quiet(quiet)
    from .pipeline import run_norms

    sys.exit(run_norms(config, function, output_dir, seed))
