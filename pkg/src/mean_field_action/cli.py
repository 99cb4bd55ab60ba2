#!/usr/bin/env python3
"""
Command Line Interface for mean-field-action

Every command loads a run configuration, runs one experiment, writes its
artifacts atomically to the output directory and prints a summary table.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import asyncio
import copy
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, NoReturn, Optional, Sequence, Tuple

import click
import numpy as np
import structlog
from rich.console import Console
from rich.table import Table
from tqdm import tqdm

from . import __version__
from .action import action
from .artifact_manager import ArtifactManager
from .config_manager import ConfigError, ConfigManager, RunConfig
from .core import (DiscreteStatistic, EndpointCoupling, MeanFieldError, NumericalError,
                   ValidationError, statistic_at_interval, straight_line_ensemble)
from .monitoring import RunMonitor
from .nbody import (CROSSING_GROUPS, convergence_experiment, crossing_coupling,
                    exchange_coupling, group_alignment, make_sampler, mean_pairwise_distance,
                    momentum, optimize, straight_line_action)
from .ot_hjb import (SpaceGrid, continuity_residual, eulerian_action, hjb_residual,
                     perturb_velocity, solve_free_endpoint)
from .potentials import audit_growth, check_symmetry, is_pair_convex
from .relaxation import (RelaxReport, VelocityGrid, default_grid, recovery_ensemble, relax,
                         split_structure)
from .vlasov import (bump_family, dobrushin_solve, stability_experiment, total_momentum,
                     weak_vlasov_residual)

structlog.configure(
    processors=[
        structlog.stdlib.filter_by_level,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.stdlib.PositionalArgumentsFormatter(),
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        structlog.processors.UnicodeDecoder(),
        structlog.processors.JSONRenderer()
    ],
    context_class=dict,
    logger_factory=structlog.stdlib.LoggerFactory(),
    wrapper_class=structlog.stdlib.BoundLogger,
    cache_logger_on_first_use=True,
)

logger = structlog.get_logger()

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

Summary = List[Tuple[str, Any]]
CommandBody = Callable[[RunConfig, ArtifactManager, RunMonitor], Tuple[Dict[str, Any], Summary]]


def setup_logging(log_level: str, log_file: Optional[str], console_logging: bool,
                  file_logging: bool) -> None:
    """Route structlog's JSON lines to stderr and, optionally, a log file."""
    level = getattr(logging, str(log_level).upper())
    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    root_logger.handlers.clear()
    formatter = logging.Formatter('%(message)s')
    if console_logging:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(level)
        console_handler.setFormatter(formatter)
        root_logger.addHandler(console_handler)
    if file_logging and log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)


def _fail(error: MeanFieldError, code: int) -> NoReturn:
    payload = {'error': str(error), 'type': type(error).__name__, 'details': error.details}
    click.echo(json.dumps(payload, sort_keys=True, default=str), err=True)
    sys.exit(code)


# ---------------------------------------------------------------------------
# Batch execution
# ---------------------------------------------------------------------------

async def _gather_ordered(jobs: Sequence[Callable[[], Any]], threads: int, desc: str) -> List[Any]:
    semaphore = asyncio.Semaphore(threads)
    results: List[Any] = [None] * len(jobs)
    with tqdm(total=len(jobs), desc=desc, unit="run", dynamic_ncols=True,
              disable=len(jobs) < 2) as pbar:
        async def run(index: int, job: Callable[[], Any]) -> None:
            async with semaphore:
                results[index] = await asyncio.to_thread(job)
            pbar.update(1)

        await asyncio.gather(*(run(i, job) for i, job in enumerate(jobs)))
    return results


def batch_runner(threads: int, desc: str) -> Callable[[List[Callable[[], Any]]], List[Any]]:
    """Run independent jobs on at most `threads` workers; results keep submission order."""
    def runner(jobs: List[Callable[[], Any]]) -> List[Any]:
        return asyncio.run(_gather_ordered(list(jobs), threads, desc))
    return runner


# ---------------------------------------------------------------------------
# Config helpers
# ---------------------------------------------------------------------------

def _coupling(rc: RunConfig) -> EndpointCoupling:
    preset = rc.endpoints.get('preset')
    if preset == 'crossing':
        return crossing_coupling()
    if preset == 'exchange':
        return exchange_coupling()
    starts, ends = rc.endpoints['starts'], rc.endpoints['ends']
    weights = rc.endpoints.get('weights')
    if weights is None:
        return EndpointCoupling.uniform(starts, ends)
    return EndpointCoupling(starts, ends, weights)


def _statistic(rc: RunConfig) -> DiscreteStatistic:
    s = rc.statistic
    positions = np.asarray(s['positions'], dtype=float)
    weights = s.get('weights')
    if weights is None:
        weights = np.full(positions.shape[0], 1.0 / positions.shape[0])
    return DiscreteStatistic(positions, s['velocities'], weights)


def _cell_masses(entry: Any, space: SpaceGrid, name: str) -> np.ndarray:
    """Explicit per-cell masses, or {low, high} for uniform mass on [low, high]."""
    if isinstance(entry, dict):
        centers = space.centers
        inside = (centers >= float(entry['low'])) & (centers <= float(entry['high']))
        if not inside.any():
            raise ConfigError(f"hjb.{name} covers no cell centre", dict(entry))
        return inside / inside.sum()
    masses = np.asarray(entry, dtype=float)
    if masses.shape != (space.cells,):
        raise ConfigError(f"hjb.{name} needs one mass per cell", {'cells': space.cells})
    return masses / masses.sum()


# ---------------------------------------------------------------------------
# Command bodies
# ---------------------------------------------------------------------------

def run_optimize(rc: RunConfig, artifacts: ArtifactManager,
                 monitor: RunMonitor) -> Tuple[Dict[str, Any], Summary]:
    coupling = _coupling(rc)
    report = optimize(coupling, rc.grid, rc.psi, rc.U, rc.optimizer)
    monitor.record_optimize(report)
    ens = report.ensemble
    value = action(ens, rc.psi, rc.U)
    straight = straight_line_ensemble(coupling, rc.grid)
    baseline = straight_line_action(coupling, rc.grid, rc.psi, rc.U)
    distance = mean_pairwise_distance(ens)
    result: Dict[str, Any] = {
        'optimizer': report.to_dict(),
        'action': value.to_dict(),
        'straight_line_action': baseline,
        'min_mean_pairwise_distance': float(distance.min()),
        'straight_line_min_mean_pairwise_distance': float(mean_pairwise_distance(straight).min()),
        'momentum': momentum(ens, rc.psi).tolist(),
    }
    summary: Summary = [('action', value.total), ('straight-line action', baseline),
                        ('iterations', report.iterations), ('EL residual', report.el_residual)]
    if rc.endpoints.get('preset'):
        mid = rc.grid.steps // 2
        result['group_alignment'] = group_alignment(ens, CROSSING_GROUPS, mid)
        result['straight_line_group_alignment'] = group_alignment(straight, CROSSING_GROUPS, mid)
        summary.append(('group alignment', result['group_alignment']))
    if not artifacts.save_trajectories(ens):
        monitor.record_warning("trajectories.csv was not written")
    return result, summary


def run_vlasov(rc: RunConfig, artifacts: ArtifactManager,
               monitor: RunMonitor) -> Tuple[Dict[str, Any], Summary]:
    f0 = _statistic(rc)
    v = rc.vlasov
    flow = dobrushin_solve(f0, rc.grid, rc.psi, rc.U, fptol=float(v['fptol']),
                           max_picard=int(v['max_picard']), newton_tol=float(v['newton_tol']))
    monitor.record_flow(flow)
    residual = weak_vlasov_residual(flow, bump_family(flow, count=int(v['bumps']), seed=rc.seed))
    totals = total_momentum(flow)
    result: Dict[str, Any] = {
        'flow': flow.summary(),
        'weak_residual': residual,
        'total_momentum': totals.tolist(),
        'momentum_drift': float(np.abs(totals - totals[0]).max()),
    }
    deltas = [float(delta) for delta in v.get('perturbations') or []]
    if deltas:
        def job(delta: float) -> Callable[[], Any]:
            g0 = DiscreteStatistic(f0.positions, f0.velocities + delta, f0.weights)
            return lambda: stability_experiment(f0, g0, rc.grid, rc.psi, rc.U,
                                                fptol=float(v['fptol']),
                                                max_picard=int(v['max_picard']))
        reports = batch_runner(rc.threads, "stability")([job(delta) for delta in deltas])
        result['stability'] = [dict(r.to_dict(), perturbation=delta)
                                for delta, r in zip(deltas, reports)]
    if not artifacts.save_flow(flow):
        monitor.record_warning("trajectories.csv was not written")
    summary: Summary = [('Picard iterations', flow.picard_iterations),
                        ('max contraction', flow.max_contraction),
                        ('weak residual', residual)]
    return result, summary


def _recovery_study(rc: RunConfig, f: DiscreteStatistic, grid: VelocityGrid,
                    monitor: RunMonitor) -> Dict[str, Any]:
    """Action of oscillating recovery ensembles around the straight paths of f."""
    r = rc.relaxation
    coupling = EndpointCoupling(f.positions, f.positions + rc.grid.T * f.velocities, f.weights)
    base = straight_line_ensemble(coupling, rc.grid)
    cache: Dict[bytes, RelaxReport] = {}
    reports = []
    for i in range(rc.grid.steps):
        fi = statistic_at_interval(base, i)
        key = fi.positions.tobytes() + fi.velocities.tobytes()
        if key not in cache:
            cache[key] = relax(fi, rc.psi, rc.U, grid, components=int(r['components']),
                               starts=int(r['starts']), seed=rc.seed,
                               max_rounds=int(r['max_rounds']), max_iter=int(r['max_iter']),
                               tol=float(r['tol']))
            monitor.record_relax(cache[key])
        reports.append(cache[key])
    mixtures = [rep.mixture if rep.value < rep.phi - 1e-12 else None for rep in reports]
    target = float(sum(rc.grid.dt * rep.value for rep in reports))
    rows = []
    for k in r['recovery_k']:
        ens = recovery_ensemble(base, mixtures, int(k))
        value = action(ens, rc.psi, rc.U).total
        copies = ens.size // base.size
        preserved = all(np.array_equal(ens.nodes[:, node], np.repeat(base.nodes[:, node], copies, axis=0))
                        for node in (0, -1))
        rows.append({'k': int(k), 'action': value, 'gap': value - target, 'endpoints_preserved': preserved})
    return {'relaxed_action': target, 'base_action': action(base, rc.psi, rc.U).total, 'levels': rows}


def run_relax(rc: RunConfig, artifacts: ArtifactManager,
              monitor: RunMonitor) -> Tuple[Dict[str, Any], Summary]:
    f = _statistic(rc)
    r = rc.relaxation
    if r.get('radius') is not None:
        grid = VelocityGrid(float(r['radius']), int(r['points']))
    else:
        grid = default_grid(f, rc.psi, rc.U, points=int(r['points']), seed=rc.seed)
    report = relax(f, rc.psi, rc.U, grid, components=int(r['components']),
                   starts=int(r['starts']), seed=rc.seed, max_rounds=int(r['max_rounds']),
                   max_iter=int(r['max_iter']), tol=float(r['tol']))
    monitor.record_relax(report)
    result: Dict[str, Any] = {'relaxation': report.to_dict()}
    summary: Summary = [('Phi', report.phi), ('Phi^rel', report.value), ('method', report.method)]
    expected = r.get('expected_split')
    if expected:
        result['split_structure'] = split_structure(report, int(expected.get('atom', 0)),
                                                    [float(t) for t in expected['targets']])
        summary.append(('split matches', result['split_structure']['matches']))
    if r.get('recovery_k'):
        result['recovery'] = _recovery_study(rc, f, grid, monitor)
        for row in result['recovery']['levels']:
            summary.append((f"recovery gap k={row['k']}", row['gap']))
    return result, summary


def run_converge(rc: RunConfig, artifacts: ArtifactManager,
                 monitor: RunMonitor) -> Tuple[Dict[str, Any], Summary]:
    e = rc.experiment
    sampler_entry = e.get('sampler') or {}
    params = dict(sampler_entry.get('params') or {})
    params.setdefault('dim', rc.dimension)
    sampler = make_sampler(str(sampler_entry.get('kind', 'uniform_shift')), params)
    table = convergence_experiment(sampler, e['n_values'], rc.grid, rc.psi, rc.U, seed=rc.seed,
                                   opts=rc.optimizer, runner=batch_runner(rc.threads, "converge"),
                                   pairing=str(e.get('pairing', 'quadruple')))
    for report in table.reports:
        monitor.record_optimize(report)
    if not artifacts.save_trajectories(table.reports[-1].ensemble):
        monitor.record_warning("trajectories.csv was not written")
    summary: Summary = [(f"W2^2 N={a}->{b}", dist) for (a, b), dist in zip(table.pairs, table.distances)]
    summary.append(('monotone', table.monotone))
    return table.to_dict(), summary


def run_hjb(rc: RunConfig, artifacts: ArtifactManager,
            monitor: RunMonitor) -> Tuple[Dict[str, Any], Summary]:
    h = rc.hjb
    space = SpaceGrid(float(h['a']), float(h['b']), int(h['cells']))
    mu0 = _cell_masses(h['mu0'], space, 'mu0')
    muT = _cell_masses(h['muT'], space, 'muT')
    solved = solve_free_endpoint(mu0, muT, space, rc.grid, rc.psi, rc.U,
                                 particles=int(h['particles']), opts=rc.optimizer)
    monitor.record_optimize(solved.report)
    threshold = float(h['threshold'])
    check = hjb_residual(solved.field, rc.psi, rc.U, threshold)
    monitor.record_hjb(check)
    result: Dict[str, Any] = {
        'free_endpoint': solved.to_dict(),
        'eulerian_action': eulerian_action(solved.field, rc.psi, rc.U),
        'continuity_residual': continuity_residual(solved.field),
        'space': space.to_dict(),
        'hjb': check.to_dict(),
    }
    summary: Summary = [('action', solved.action), ('pairing', list(solved.pairing)),
                        ('HJB deviation', check.max_deviation)]
    amplitude = float(h.get('perturbation') or 0.0)
    if amplitude:
        perturbed = hjb_residual(perturb_velocity(solved.field, amplitude), rc.psi, rc.U, threshold)
        result['perturbed_hjb'] = {'amplitude': amplitude, 'max_deviation': perturbed.max_deviation}
        summary.append(('perturbed HJB deviation', perturbed.max_deviation))
    if not (artifacts.save_field(solved.field) and artifacts.save_trajectories(solved.report.ensemble)):
        monitor.record_warning("field or trajectory CSV was not written")
    return result, summary


def run_audit(rc: RunConfig, artifacts: ArtifactManager,
              monitor: RunMonitor) -> Tuple[Dict[str, Any], Summary]:
    d = rc.dimension
    audit = audit_growth(rc.psi, rc.U, d=d, seed=rc.seed)
    monitor.record_audit(audit)
    result = {
        'audit': audit.to_dict(),
        'symmetry_defect': check_symmetry(rc.U, d, seed=rc.seed),
        'pair_convex': is_pair_convex(rc.psi, rc.U, d=d, seed=rc.seed),
    }
    summary: Summary = [('passed', audit.passed), ('c', audit.c), ('C', audit.C),
                        ('psi2 convex', result['pair_convex'])]
    return result, summary


COMMAND_BODIES: Dict[str, CommandBody] = {
    'optimize': run_optimize,
    'vlasov': run_vlasov,
    'relax': run_relax,
    'converge': run_converge,
    'hjb': run_hjb,
    'audit': run_audit,
}


# ---------------------------------------------------------------------------
# Click surface
# ---------------------------------------------------------------------------

def _print_summary(command: str, summary: Summary, health: str, directory: Path) -> None:
    table = Table(title=f"mfa {command}")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", justify="right")
    for name, value in summary:
        table.add_row(name, f"{value:.6g}" if isinstance(value, float) else str(value))
    table.add_row("health", health)
    table.add_row("output", str(directory))
    Console().print(table)


def execute(command: str, config: Optional[str] = None, out: Optional[str] = None,
            seed: Optional[int] = None, log_level: Optional[str] = None) -> None:
    """Load configuration, run one command and write its artifacts."""
    setup_logging(log_level or 'INFO', None, True, False)
    try:
        manager = ConfigManager(config)
        manager.update_from_cli({'command': command, 'seed': seed, 'out': out, 'log_level': log_level})
        manager.validate_config()
        setup_logging(manager.get('logging.level'), manager.get('logging.log_file'),
                      bool(manager.get('logging.console_logging')),
                      bool(manager.get('logging.file_logging')))
        rc = manager.run_config()
        monitor = RunMonitor(command)
        artifacts = ArtifactManager(str(rc.output_dir), command, rc.include_timing)
        logger.info("command_started", command=command, seed=rc.seed, output=str(rc.output_dir))
        result, summary = COMMAND_BODIES[command](rc, artifacts, monitor)
    except ConfigError as e:
        _fail(e, EXIT_CONFIG)
    except NumericalError as e:
        logger.error("numerical_failure", command=command, error=str(e))
        _fail(e, EXIT_NUMERICAL)
    except ValidationError as e:
        _fail(e, EXIT_CONFIG)
    except MeanFieldError as e:
        logger.error("command_failed", command=command, error=str(e))
        _fail(e, EXIT_FAILURE)

    settings = copy.deepcopy(manager.config)
    settings['output'].pop('directory', None)
    report = {
        'command': command,
        'version': __version__,
        'seed': rc.seed,
        'config': settings,
        'result': result,
        'monitoring': monitor.get_performance_report(),
    }
    if not artifacts.save_report(report):
        click.echo(json.dumps({'error': 'failed to write report.json', 'type': 'OSError',
                               'details': {'directory': str(rc.output_dir)}}), err=True)
        sys.exit(EXIT_FAILURE)
    logger.info("command_finished", command=command, health=monitor.get_health_status())
    _print_summary(command, summary, monitor.get_health_status(), rc.output_dir)


def common_options(func: Callable) -> Callable:
    @click.option('--config', '-c', 'config', type=click.Path(), help='Run configuration (YAML or JSON)')
    @click.option('--out', '-o', help='Output directory (overrides output.directory)')
    @click.option('--seed', type=click.IntRange(min=0), help='Run seed (overrides run.seed)')
    @click.option('--log-level', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                                                   case_sensitive=False),
                  help='Logging level')
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        return func(*args, **kwargs)
    return wrapper


@click.group()
@click.version_option(version=__version__, prog_name="mfa")
def cli():
    """Interaction-action minimization, Vlasov flows and relaxation experiments"""


@cli.command('optimize')
@common_options
def optimize_command(config, out, seed, log_level):
    """Minimize the N-body action for the configured endpoint coupling"""
    execute('optimize', config, out, seed, log_level)


@cli.command('vlasov')
@common_options
def vlasov_command(config, out, seed, log_level):
    """Solve the Vlasov characteristics from the configured statistic"""
    execute('vlasov', config, out, seed, log_level)


@cli.command('relax')
@common_options
def relax_command(config, out, seed, log_level):
    """Compute the relaxed energy of the configured statistic"""
    execute('relax', config, out, seed, log_level)


@cli.command('converge')
@common_options
def converge_command(config, out, seed, log_level):
    """Run the self-convergence study over growing particle counts"""
    execute('converge', config, out, seed, log_level)


@cli.command('hjb')
@common_options
def hjb_command(config, out, seed, log_level):
    """Solve the free-endpoint Eulerian problem and check the HJB residual"""
    execute('hjb', config, out, seed, log_level)


@cli.command('audit')
@common_options
def audit_command(config, out, seed, log_level):
    """Audit growth, symmetry and convexity of the configured potentials"""
    execute('audit', config, out, seed, log_level)


@cli.command('config')
@click.option('--config', '-c', 'config', type=click.Path(), help='Run configuration (YAML or JSON)')
@click.option('--save', 'save', help='Write the merged configuration to this file')
def config_command(config, save):
    """Show or save the merged configuration"""
    setup_logging('WARNING', None, True, False)
    try:
        manager = ConfigManager(config)
        manager.validate_config()
    except ConfigError as e:
        _fail(e, EXIT_CONFIG)
    if save:
        if not manager.save_config(save):
            click.echo(json.dumps({'error': f'failed to write {save}', 'type': 'OSError',
                                   'details': {}}), err=True)
            sys.exit(1)
        click.echo(f"Configuration saved to: {save}")
    else:
        manager.print_config()


def main():
    cli(prog_name="mfa")


if __name__ == '__main__':
    main()
