"""Deterministic discrete-event simulation of workers running tuning jobs.

The simulator drives a policy only through the orchestrator's next_job /
record_result / report_drop interface -- the same surface the live service
uses -- so simulated behavior is the behavior of the real decision logic.

Straggler model: a job's expected duration equals its training cost; the
realized duration is cost * (1 + |z|) with z ~ Normal(0, sigma), rounded up
to the next integer tick. Drop model: at every time unit a running job is
dropped with probability p, so survival over `runtime` units is
(1 - p) ** runtime. (The source material prints the NOT-dropped probability
as 1 - (1-p)^256; that expression is its own complement and is treated as a
typo here.)

Randomness is keyed by (bracket, config, rung, attempt), not by dispatch
order: a job's realized duration and drop time are properties of the job
itself, so the same job costs the same under every policy. This makes
policy comparisons paired rather than independently noisy.

Time is integer ticks. Event ties are broken by (time, worker_id, event
kind), making the event trace bit-for-bit reproducible from the seed.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .experiment import (
    ASHA,
    BLOCKED,
    FINISHED,
    Experiment,
    ExperimentSpec,
    SYNC_SHA,
)
from .journal import Journal
from .space import Dimension, SearchSpace

RESTART = "restart-from-scratch"
INCREMENTAL = "incremental-checkpoint"

# default grids for the straggler / drop sweep; chosen to cover the regimes
# from no perturbation to heavy-tailed runtimes and frequent drops
SIGMA_GRID = (0.0, 0.5, 1.0, 2.0)
DROP_GRID = (0.0, 1e-4, 1e-3, 1e-2)

UNIT_SPACE = SearchSpace(
    dimensions=(Dimension(name="x", kind="continuous-linear", lower=0.0, upper=1.0),)
)


def straggler_time(base: float, sigma: float, z: Optional[float] = None, rng=None) -> float:
    """Realized runtime base * (1 + |z|), z ~ Normal(0, sigma)."""
    if base <= 0:
        raise ValueError("base time must be positive")
    if z is None:
        z = float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
    return base * (1.0 + abs(z))


def drop_survival(p: float, runtime: int) -> float:
    """Probability a job running for `runtime` whole units is never dropped."""
    if not 0 <= p < 1:
        raise ValueError("p must be in [0, 1)")
    if runtime < 0:
        raise ValueError("runtime must be >= 0")
    return (1.0 - p) ** runtime


@dataclass(frozen=True)
class SyntheticObjective:
    """Stand-in training objective with a known ground-truth ranking.

    loss(config, resource) = latent(config) + decay/sqrt(resource)
                             + noise_scale/sqrt(resource) * N(0, 1)

    latent is i.i.d. uniform [0, 1] per config id. The additive decay term is
    config-independent, so with zero noise the loss ordering at any resource
    equals the latent ordering; the noise term shrinks as training progresses,
    producing the early rank-crossings that early stopping must tolerate.
    """

    seed: int = 0
    noise_scale: float = 0.0
    decay_scale: float = 0.5

    def latent(self, config_id: int) -> float:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0, config_id]))
        return float(rng.random())

    def loss(self, config_id: int, resource: int) -> float:
        value = self.latent(config_id) + self.decay_scale / math.sqrt(resource)
        if self.noise_scale > 0:
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, 1, config_id, int(resource)])
            )
            value += self.noise_scale / math.sqrt(resource) * float(rng.normal())
        return value

    def true_top_fraction(self, config_ids, fraction_denominator: int) -> set[int]:
        """The true best floor(len/denominator) of config_ids by latent score."""
        ids = sorted(config_ids, key=lambda c: (self.latent(c), c))
        return set(ids[: len(ids) // fraction_denominator])


@dataclass(frozen=True)
class SimWorkload:
    worker_count: int
    objective: SyntheticObjective
    straggler_sigma: float = 0.0
    drop_prob: float = 0.0
    sim_seed: int = 0
    training_model: str = RESTART


@dataclass
class SimMetrics:
    configs_trained_to_R: int
    time_to_first_R: Optional[float]
    end_time: float
    trace: list[tuple] = field(default_factory=list)
    experiment: Optional[Experiment] = None

    def time_or(self, censor: float) -> float:
        return self.time_to_first_R if self.time_to_first_R is not None else censor


def _job_cost(ticket, bracket, training_model: str) -> int:
    if training_model == INCREMENTAL and ticket.rung > 0:
        return ticket.resource - bracket.params.rung_resource(ticket.rung - 1)
    return ticket.resource


def run_simulation(
    spec: ExperimentSpec,
    workload: SimWorkload,
    horizon: Optional[float] = None,
    journal: Optional[Journal] = None,
    keep_trace: bool = False,
    crash_at_event: Optional[int] = None,
    experiment: Optional[Experiment] = None,
) -> SimMetrics:
    """Run the experiment on simulated workers until it finishes, deadlocks,
    or passes the horizon. Fully deterministic in (spec, workload).

    crash_at_event aborts the loop after that many journal-visible state
    changes have happened, leaving the journal as a crash would (used by
    resume tests). Passing `experiment` continues an existing (e.g. resumed)
    experiment instead of creating a fresh one."""
    if workload.worker_count < 1:
        raise ValueError("need at least one worker")
    now_holder = [0.0]
    if experiment is not None:
        exp = experiment
        exp.clock = lambda: now_holder[0]
    else:
        exp = Experiment(spec, journal=journal, clock=lambda: now_holder[0])
    top_resource = {
        s: b.params.rung_resource(b.params.num_rungs - 1) for s, b in exp.brackets.items()
    }

    heap: list[tuple] = []  # (time, worker_id, kind, ticket, dispatch_no)
    free = list(range(workload.worker_count))
    heapq.heapify(free)
    dispatch_no = 0
    attempts: dict[tuple[int, int, int], int] = {}
    trace: list[tuple] = []
    completed_to_top = 0
    first_top: Optional[float] = None
    now = 0.0

    def dispatch():
        nonlocal dispatch_no
        while free:
            ticket = exp.next_job(now=now)
            if ticket is BLOCKED or ticket is FINISHED:
                break
            worker = heapq.heappop(free)
            job_key = (ticket.bracket_s, ticket.config_id, ticket.rung)
            attempt = attempts.get(job_key, 0)
            attempts[job_key] = attempt + 1
            rng = np.random.default_rng(
                np.random.SeedSequence([workload.sim_seed, 2, *job_key, attempt])
            )
            base = _job_cost(ticket, exp.brackets[ticket.bracket_s], workload.training_model)
            duration = max(1, math.ceil(straggler_time(base, workload.straggler_sigma, rng=rng)))
            drop_at = None
            if workload.drop_prob > 0:
                g = int(rng.geometric(workload.drop_prob))
                if g <= duration:
                    drop_at = g
            if drop_at is not None:
                heapq.heappush(heap, (now + drop_at, worker, "drop", ticket, dispatch_no))
            else:
                heapq.heappush(heap, (now + duration, worker, "complete", ticket, dispatch_no))
            dispatch_no += 1

    dispatch()
    event_count = 0
    while heap:
        next_time = heap[0][0]
        if horizon is not None and next_time > horizon:
            break
        now = next_time
        now_holder[0] = now
        while heap and heap[0][0] == now:
            _, worker, kind, ticket, _no = heapq.heappop(heap)
            heapq.heappush(free, worker)
            if kind == "complete":
                loss = workload.objective.loss(ticket.config_id, ticket.resource)
                exp.record_result(
                    ticket.config_id, ticket.rung, ticket.bracket_s, loss, now=now
                )
                if ticket.resource == top_resource[ticket.bracket_s]:
                    completed_to_top += 1
                    if first_top is None:
                        first_top = now
            else:
                exp.report_drop(ticket.config_id, ticket.rung, ticket.bracket_s, now=now)
            if keep_trace:
                trace.append(
                    (now, worker, kind, ticket.config_id, ticket.rung, ticket.bracket_s)
                )
            event_count += 1
            if crash_at_event is not None and event_count >= crash_at_event:
                return SimMetrics(
                    configs_trained_to_R=completed_to_top,
                    time_to_first_R=first_top,
                    end_time=now,
                    trace=trace,
                    experiment=exp,
                )
        dispatch()
    return SimMetrics(
        configs_trained_to_R=completed_to_top,
        time_to_first_R=first_top,
        end_time=now,
        trace=trace,
        experiment=exp,
    )


def _sweep_spec(mode: str, n: int, R: int, eta: int, seed: int) -> ExperimentSpec:
    return ExperimentSpec(
        space=UNIT_SPACE,
        n=n,
        R=R,
        mode=mode,
        eta=eta,
        r=1,
        bracket_set=[0],
        experiment_seed=seed,
    )


def straggler_drop_sweep(
    sigmas=SIGMA_GRID,
    drop_probs=DROP_GRID,
    replications: int = 25,
    workers: int = 25,
    eta: int = 4,
    R: int = 256,
    n: int = 256,
    horizon: float = 3000.0,
    base_seed: int = 0,
):
    """Straggler/drop sweep comparing synchronous SHA with its asynchronous
    counterpart: per (sigma, p) cell, the mean number of configurations
    trained to the full resource within the horizon and the mean time until
    the first one (censored at the horizon)."""
    if replications < 1:
        raise ValueError("replications must be >= 1")
    table: dict[tuple[float, float], dict[str, dict[str, float]]] = {}
    for sigma in sigmas:
        for p in drop_probs:
            cell: dict[str, dict[str, float]] = {}
            for mode in (SYNC_SHA, ASHA):
                counts, times = [], []
                for rep in range(replications):
                    seed = base_seed + rep
                    workload = SimWorkload(
                        worker_count=workers,
                        objective=SyntheticObjective(seed=seed),
                        straggler_sigma=sigma,
                        drop_prob=p,
                        sim_seed=seed,
                    )
                    m = run_simulation(_sweep_spec(mode, n, R, eta, seed), workload, horizon=horizon)
                    counts.append(m.configs_trained_to_R)
                    times.append(m.time_or(horizon))
                cell[mode] = {
                    "configs_trained_to_R": sum(counts) / len(counts),
                    "time_to_first_R": sum(times) / len(times),
                }
            table[(sigma, p)] = cell
    return table


def sweep_csv(table) -> str:
    lines = ["sigma,drop_prob,policy,mean_configs_trained_to_R,mean_time_to_first_R"]
    for (sigma, p), cell in sorted(table.items()):
        for mode, metrics in sorted(cell.items()):
            lines.append(
                f"{sigma},{p},{mode},{metrics['configs_trained_to_R']},{metrics['time_to_first_R']}"
            )
    return "\n".join(lines) + "\n"


def rung0_mispromotion_fraction(
    n: int,
    replications: int = 20,
    eta: int = 4,
    workers: int = 25,
    sigma: float = 1.0,
    R: int = 256,
    base_seed: int = 0,
) -> float:
    """Mean fraction of bottom-rung promotions that fall outside the true top
    1/eta of sampled configurations (asynchrony-induced mispromotions)."""
    fracs = []
    for rep in range(replications):
        seed = base_seed + rep
        workload = SimWorkload(
            worker_count=workers,
            objective=SyntheticObjective(seed=seed),
            straggler_sigma=sigma,
            sim_seed=seed,
        )
        m = run_simulation(_sweep_spec(ASHA, n, R, eta, seed), workload)
        bracket = m.experiment.brackets[0]
        promoted = bracket.rungs[0].promoted
        truth = workload.objective.true_top_fraction(range(n), eta)
        if promoted:
            fracs.append(len(promoted - truth) / len(promoted))
    return sum(fracs) / len(fracs)
