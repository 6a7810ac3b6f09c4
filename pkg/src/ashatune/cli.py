"""Operator command line.

Experiment specs are YAML (or JSON) documents:

    space:
      dimensions:
        - {name: lr, kind: continuous-log, lower: 1.0e-4, upper: 1.0}
        - {name: units, kind: integer-range, lower: 16, upper: 512}
        - {name: act, kind: categorical, choices: [relu, tanh]}
    n: 256          # total configurations (stopping criterion)
    R: 256          # maximum resource per configuration
    mode: async-hyperband   # or asha / sync-sha / sync-hyperband
    # optional advanced fields: eta, r, bracket_set, experiment_seed,
    # incremental_training

Verbs: validate, submit, status, resume, simulate, export, replay-verify,
serve. Server-facing verbs talk to a running `ashatune serve` instance.
"""
from __future__ import annotations

import json
import sys

import click
import httpx
import yaml

from . import journal as jr
from .experiment import ExperimentSpec
from .simulate import (
    INCREMENTAL,
    RESTART,
    SimWorkload,
    SyntheticObjective,
    sweep_csv,
    straggler_drop_sweep,
    run_simulation,
)


def _load_spec(path: str) -> ExperimentSpec:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return ExperimentSpec.from_doc(doc)


def _check_spec(spec: ExperimentSpec) -> list[str]:
    problems = spec.space.validate()
    try:
        spec.resolved()
    except ValueError as exc:
        problems.append(str(exc))
    return problems


@click.group()
def main():
    """Successive-halving hyperparameter tuning toolkit."""


@main.command()
@click.argument("spec_file")
def validate(spec_file):
    """Validate an experiment spec file without submitting it."""
    try:
        spec = _load_spec(spec_file)
    except (KeyError, TypeError, ValueError, yaml.YAMLError) as exc:
        click.echo(f"invalid spec: {exc}")
        sys.exit(1)
    problems = _check_spec(spec)
    if problems:
        for p in problems:
            click.echo(f"invalid spec: {p}")
        sys.exit(1)
    eta, r, brackets = spec.resolved()
    click.echo(f"ok: mode={spec.mode} n={spec.n} R={spec.R} eta={eta} r={r} brackets={brackets}")


@main.command()
@click.argument("spec_file")
@click.option("--server", default="http://127.0.0.1:8314", show_default=True)
def submit(spec_file, server):
    """Submit an experiment spec to a running server."""
    with open(spec_file) as fh:
        doc = yaml.safe_load(fh)
    resp = httpx.post(f"{server}/experiments", json=doc, timeout=30.0)
    if resp.status_code != 200:
        click.echo(f"rejected: {resp.json()}")
        sys.exit(1)
    click.echo(resp.json()["experiment_id"])


@main.command()
@click.argument("experiment_id")
@click.option("--server", default="http://127.0.0.1:8314", show_default=True)
def status(experiment_id, server):
    """Print an experiment status snapshot."""
    resp = httpx.get(f"{server}/experiments/{experiment_id}", timeout=30.0)
    if resp.status_code != 200:
        click.echo(f"error: {resp.json()}")
        sys.exit(1)
    click.echo(json.dumps(resp.json(), indent=2, sort_keys=True))


@main.command()
@click.argument("experiment_id")
@click.option("--additional-n", type=int, required=True,
              help="How many more configurations to admit.")
@click.option("--server", default="http://127.0.0.1:8314", show_default=True)
def resume(experiment_id, additional_n, server):
    """Widen a finished or running experiment with more configurations."""
    resp = httpx.post(
        f"{server}/experiments/{experiment_id}/resume",
        json={"additional_n": additional_n},
        timeout=30.0,
    )
    if resp.status_code != 200:
        click.echo(f"error: {resp.json()}")
        sys.exit(1)
    click.echo(json.dumps(resp.json()))


@main.command()
@click.argument("spec_file", required=False)
@click.option("--workers", type=int, default=25, show_default=True)
@click.option("--sigma", type=float, default=0.0, show_default=True,
              help="Straggler standard deviation.")
@click.option("--drop-prob", type=float, default=0.0, show_default=True,
              help="Per-time-unit job drop probability.")
@click.option("--sim-seed", type=int, default=0, show_default=True)
@click.option("--horizon", type=float, default=None)
@click.option("--training-model", type=click.Choice([RESTART, INCREMENTAL]),
              default=RESTART, show_default=True)
@click.option("--journal-path", default=None, help="Journal the simulated run to this file.")
@click.option("--suite", is_flag=True,
              help="Run the full straggler/drop sweep instead of one simulation; prints CSV.")
@click.option("--replications", type=int, default=25, show_default=True,
              help="Replications per sweep cell (with --suite).")
def simulate(spec_file, workers, sigma, drop_prob, sim_seed, horizon,
             training_model, journal_path, suite, replications):
    """Run the discrete-event worker simulator."""
    if suite:
        click.echo(sweep_csv(straggler_drop_sweep(replications=replications)), nl=False)
        return
    if spec_file is None:
        click.echo("a spec file is required unless --suite is given")
        sys.exit(1)
    spec = _load_spec(spec_file)
    problems = _check_spec(spec)
    if problems:
        for p in problems:
            click.echo(f"invalid spec: {p}")
        sys.exit(1)
    workload = SimWorkload(
        worker_count=workers,
        objective=SyntheticObjective(seed=spec.experiment_seed),
        straggler_sigma=sigma,
        drop_prob=drop_prob,
        sim_seed=sim_seed,
        training_model=training_model,
    )
    journal = jr.Journal(path=journal_path) if journal_path else None
    metrics = run_simulation(spec, workload, horizon=horizon, journal=journal)
    click.echo(json.dumps({
        "configs_trained_to_R": metrics.configs_trained_to_R,
        "time_to_first_R": metrics.time_to_first_R,
        "end_time": metrics.end_time,
    }))


@main.command()
@click.argument("journal_file")
@click.option("--format", "fmt", type=click.Choice(["csv", "jsonlines"]),
              default="csv", show_default=True)
def export(journal_file, fmt):
    """Export a journal file as analysis-ready CSV or JSON lines."""
    journal = jr.Journal(path=journal_file)
    click.echo(jr.export_events(journal, fmt), nl=False)


@main.command(name="replay-verify")
@click.argument("journal_file")
def replay_verify(journal_file):
    """Verify journal integrity and that every prefix replays cleanly."""
    try:
        events = jr.read_events(journal_file)
    except jr.JournalIntegrityError as exc:
        click.echo(f"corrupt: {exc}")
        sys.exit(1)
    final = jr.replay(events)
    # every prefix must be a valid state too; a failure here means the
    # journal was written out of order
    for upto in range(1, len(events) + 1):
        jr.replay(events, upto=upto)
    incumbent = final.incumbent()
    click.echo(
        f"ok: {len(events)} events, "
        + ("no incumbent" if incumbent is None
           else f"incumbent config {incumbent.config_id} loss {incumbent.loss:.6g} "
                f"at resource {incumbent.resource}")
    )


@main.command()
@click.option("--port", type=int, default=8314, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data-dir", default=None,
              help="State directory (default: $ASHATUNE_DATA_DIR or ./ashatune-data).")
@click.option("--unit-time-seconds", type=float, default=1.0, show_default=True,
              help="Expected wall seconds per resource unit, used for dispatch leases.")
def serve(port, host, data_dir, unit_time_seconds):
    """Run the tuning server."""
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=data_dir, unit_time_seconds=unit_time_seconds)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
