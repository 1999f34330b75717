"""Command line: ``vlpslam <subcommand> --seed N [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import os
import sys

import click

from . import harness
from .config import ConfigError, load_config
from .geometry import Pose2D
from .reports import FORMATS, emit_reports
from .scenario import run_scenario, stationary


def _common(f):
    f = click.option("--format", "formats", multiple=True, type=click.Choice(FORMATS),
                     help="Report formats to write (default: all).")(f)
    f = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                     help="Output directory (overrides output_dir).")(f)
    f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override one configuration key, e.g. stack.mcl.n_particles=300.")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="YAML experiment configuration merged over the defaults.")(f)
    f = click.option("--seed", "seeds", multiple=True, type=int, required=True,
                     help="Seed for the run; repeat for several seeds.")(f)
    return f


def _load(config_path, overrides, seeds, out):
    extra = list(overrides) + [{"seeds": list(seeds)}]
    if out is not None:
        extra.append({"output_dir": out})
    try:
        return load_config(config_path, extra)
    except ConfigError as err:
        raise click.ClickException(f"invalid configuration: {err}")


def _emit(rep, outdir, formats):
    paths = emit_reports(rep, outdir, formats or FORMATS)
    status = "PASS" if rep.passed else "FAIL"
    click.echo(f"{rep.name}: {status} ({len(paths)} files in {outdir})")
    for name, ok in rep.checks.items():
        click.echo(f"  {'ok  ' if ok else 'FAIL'} {name}")
    return rep.passed


def _per_seed(fn, cfg, formats, name):
    ok = True
    lfield = harness.likelihood_field(cfg) if name != "mapping" else None
    for seed in cfg.seeds:
        rep = fn(cfg, seed) if lfield is None else fn(cfg, seed, lfield=lfield)
        ok &= _emit(rep, os.path.join(cfg.output_dir, name, f"seed_{seed}"), formats)
    return ok


@click.group()
def main():
    """Simulated VLP + LiDAR localisation, mapping and navigation experiments."""


@main.command()
@_common
@click.option("--scenario", type=click.Choice(["trajectory", "mapping", "recovery", "static"]),
              default="trajectory", show_default=True)
@click.option("--pose", nargs=3, type=float, default=None, help="Pose for the static scenario.")
@click.option("--duration", type=float, default=2.0, show_default=True, help="Static scenario length.")
def simulate(seeds, config_path, overrides, out, formats, scenario, pose, duration):
    """Write the sensor log of a scripted scenario as NDJSON."""
    cfg = _load(config_path, overrides, seeds, out)
    if scenario == "trajectory":
        sc = harness.trajectory_scenario(cfg)
    elif scenario == "mapping":
        sc = harness.mapping_scenario(cfg)
    elif scenario == "recovery":
        sc = harness.recovery_scenario(cfg)
    else:
        if pose is None:
            raise click.UsageError("--pose is required for the static scenario")
        sc = stationary(Pose2D(*pose), duration)
    os.makedirs(cfg.output_dir, exist_ok=True)
    for seed in cfg.seeds:
        log = run_scenario(cfg.world, sc, seed, cfg.sim)
        path = os.path.join(cfg.output_dir, f"{sc.id}_seed_{seed}.ndjson")
        log.write(path)
        click.echo(f"{path}: {len(log.events)} events, {log.duration:.2f} s")


@main.command("map")
@_common
def map_cmd(seeds, config_path, overrides, out, formats):
    """Build the map from start pose B with and without the VLP origin constraint."""
    cfg = _load(config_path, overrides, seeds, out)
    sys.exit(0 if _per_seed(harness.run_mapping_alignment, cfg, formats, "mapping") else 1)


@main.command("static-accuracy")
@_common
@click.option("--poses", type=int, default=None, help="Poses per seed (default from config).")
def static_accuracy(seeds, config_path, overrides, out, formats, poses):
    """Random stationary poses: fused vs SLO-VLP-only vs MCL-only error statistics."""
    cfg = _load(config_path, overrides, seeds, out)
    try:
        rep = harness.run_static_accuracy(cfg, poses=poses)
    except harness.HarnessError as err:
        raise click.ClickException(str(err))
    ok = _emit(rep, os.path.join(cfg.output_dir, "static_accuracy"), formats)
    s = rep.summary()
    for e in sorted(s):
        click.echo(f"  {e}: mean {100 * s[e]['mean']:.2f} cm, max {100 * s[e]['max']:.2f} cm")
    sys.exit(0 if ok else 1)


@main.command()
@_common
def trajectory(seeds, config_path, overrides, out, formats):
    """The 46 m loop with an LED outage; all estimators on one log."""
    cfg = _load(config_path, overrides, seeds, out)
    sys.exit(0 if _per_seed(harness.run_trajectory, cfg, formats, "trajectory") else 1)


@main.command()
@_common
def recovery(seeds, config_path, overrides, out, formats):
    """Wrong-corridor initialisation recovered by VLP fixes."""
    cfg = _load(config_path, overrides, seeds, out)
    sys.exit(0 if _per_seed(harness.run_recovery, cfg, formats, "recovery") else 1)


@main.command()
@_common
@click.option("--goal", nargs=3, type=float, default=None, help="Single goal (x y theta) instead of the scenario set.")
@click.option("--start", nargs=3, type=float, default=None, help="Start pose for --goal.")
def navigate(seeds, config_path, overrides, out, formats, goal, start):
    """Closed-loop navigation scenarios on the fused estimate."""
    cfg = _load(config_path, overrides, seeds, out)
    scen = None
    if goal is not None:
        if start is None:
            raise click.UsageError("--goal needs --start")
        scen = [("cli", Pose2D(*start), Pose2D(*goal), [])]
    lfield = harness.likelihood_field(cfg)
    ok = True
    for seed in cfg.seeds:
        rep = harness.run_navigation(cfg, seed, lfield=lfield, scenarios=scen)
        ok &= _emit(rep, os.path.join(cfg.output_dir, "navigation", f"seed_{seed}"), formats)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
