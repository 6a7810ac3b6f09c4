"""Fair-share cluster scheduling across tuning experiments.

Each experiment exposes a demand cap kappa * |S|: kappa is the largest
per-task accelerator count that still trains efficiently, |S| the size of its
stack of runnable training tasks. Capacity is divided by weighted max-min
fairness: experiments whose fair share exceeds their cap are frozen at the
cap and the surplus is re-divided among the rest (water-filling).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Protocol


class ScalingModel(Protocol):
    def speedup(self, g: int) -> float: ...


@dataclass(frozen=True)
class AnalyticScalingModel:
    """speedup(g) = g / (1 + alpha * (g - 1)); alpha is the parallelization
    overhead coefficient (alpha = 0 is perfect scaling)."""

    alpha: float = 1.0 / 45.0

    def speedup(self, g: int) -> float:
        if g < 1:
            raise ValueError("g must be >= 1")
        return g / (1.0 + self.alpha * (g - 1))


def max_gpus_for_efficiency(
    model: ScalingModel, tau: float, cluster_size: Optional[int] = None
) -> int:
    """Largest g with speedup(g)/g >= tau; perfect-scaling models are clamped
    to the cluster size (or 1 accelerator when no size is given)."""
    if not 0 < tau <= 1:
        raise ValueError("tau must be in (0, 1]")
    limit = cluster_size if cluster_size is not None else 1 << 20
    best = 1
    # tolerate float rounding when efficiency lands exactly on tau
    eps = 1e-12
    for g in range(2, limit + 1):
        if model.speedup(g) / g >= tau * (1.0 - eps):
            best = g
        else:
            break  # efficiency is non-increasing for valid scaling models
    if best == limit and cluster_size is None:
        return 1 << 20  # effectively unbounded; callers clamp to cluster size
    return best


@dataclass
class TaskStack:
    """LIFO stack of runnable training tasks for one experiment; promotions
    are pushed on top so the most recently unlocked work runs first."""

    tasks: list = field(default_factory=list)

    def push(self, task) -> None:
        self.tasks.append(task)

    def pop(self):
        return self.tasks.pop()

    def __len__(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class ClusterDemand:
    experiment_id: str
    kappa: int
    stack_size: int
    weight: float = 1.0

    def __post_init__(self):
        if self.kappa < 0 or self.stack_size < 0:
            raise ValueError("kappa and stack_size must be >= 0")
        if self.weight <= 0:
            raise ValueError("weight must be > 0")

    @property
    def cap(self) -> int:
        return self.kappa * self.stack_size


def demand(experiment_id: str, kappa: int, stack: TaskStack, weight: float = 1.0) -> ClusterDemand:
    """Current demand snapshot: cap = kappa * |S|, recomputed per push/pop."""
    return ClusterDemand(
        experiment_id=experiment_id, kappa=kappa, stack_size=len(stack), weight=weight
    )


def water_fill(demands: list[ClusterDemand], capacity: int) -> dict[str, int]:
    """Weighted max-min fair integral allocation, capped per demand.

    Exact fractional water-filling first (weighted shares, freeze anything
    above its cap, redistribute), then largest-remainder rounding of the
    unfrozen shares.
    """
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    ids = [d.experiment_id for d in demands]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate experiment ids in demand list")
    alloc: dict[str, Fraction] = {d.experiment_id: Fraction(0) for d in demands}
    active = [d for d in demands if d.cap > 0]
    remaining = Fraction(capacity)
    while active and remaining > 0:
        total_w = sum(Fraction(d.weight).limit_denominator(10**9) for d in active)
        share = {
            d.experiment_id: remaining
            * Fraction(d.weight).limit_denominator(10**9)
            / total_w
            for d in active
        }
        over = [d for d in active if share[d.experiment_id] >= d.cap]
        if not over:
            for d in active:
                alloc[d.experiment_id] = share[d.experiment_id]
            remaining = Fraction(0)
            break
        for d in over:
            alloc[d.experiment_id] = Fraction(d.cap)
            remaining -= d.cap
        active = [d for d in active if d not in over]
    # integralize the fractional (unfrozen) part by largest remainder
    floors = {eid: int(a) for eid, a in alloc.items()}
    leftover = min(capacity, sum(d.cap for d in demands)) - sum(floors.values())
    caps = {d.experiment_id: d.cap for d in demands}
    order = sorted(
        alloc,
        key=lambda eid: (-(alloc[eid] - floors[eid]), eid),
    )
    for eid in order:
        if leftover == 0:
            break
        if floors[eid] < caps[eid]:
            floors[eid] += 1
            leftover -= 1
    return floors


@dataclass(frozen=True)
class Directive:
    kind: str  # "dispatch" or "preempt"
    experiment_id: str
    count: int


@dataclass
class ClusterExperiment:
    stack: TaskStack
    kappa: int
    weight: float = 1.0
    running: int = 0  # accelerators currently in use


class Cluster:
    """Single decision loop over all registered experiments. Rebalance reads a
    demand snapshot, water-fills, and emits idempotent directives; preemption
    only ever happens at task/checkpoint boundaries, so a shrink directive
    marks tasks preemptible rather than killing them."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.experiments: dict[str, ClusterExperiment] = {}

    def add_experiment(self, experiment_id: str, kappa: int, weight: float = 1.0) -> TaskStack:
        stack = TaskStack()
        self.experiments[experiment_id] = ClusterExperiment(
            stack=stack, kappa=kappa, weight=weight
        )
        return stack

    def demands(self) -> list[ClusterDemand]:
        return [
            demand(eid, ce.kappa, ce.stack, ce.weight)
            for eid, ce in sorted(self.experiments.items())
        ]

    def rebalance(self) -> list[Directive]:
        allocation = water_fill(self.demands(), self.capacity)
        directives: list[Directive] = []
        for eid, ce in sorted(self.experiments.items()):
            target = allocation.get(eid, 0)
            if target > ce.running:
                grow = min(target - ce.running, ce.kappa * len(ce.stack))
                if grow > 0:
                    directives.append(Directive("dispatch", eid, grow))
            elif target < ce.running:
                directives.append(Directive("preempt", eid, ce.running - target))
        return directives

    def apply(self, directives: list[Directive]) -> None:
        for d in directives:
            ce = self.experiments[d.experiment_id]
            if d.kind == "dispatch":
                ce.running += d.count
                # pop whole tasks off the stack, kappa accelerators each
                tasks = min(len(ce.stack), -(-d.count // max(ce.kappa, 1)))
                for _ in range(tasks):
                    ce.stack.pop()
            else:
                ce.running -= d.count

    def allocations_csv(self, tick: int, allocation: dict[str, int]) -> str:
        return "\n".join(f"{tick},{eid},{alloc}" for eid, alloc in sorted(allocation.items()))
