"""Successive-halving bracket state machine.

One bracket runs successive halving at a fixed early-stopping rate s: configs
enter rung 0, train for r*eta^s resource units, and the top 1/eta of completed
configs are promoted one rung up with eta times the resource, until the top
rung at resource R. The synchronous variant closes an entire rung before
opening the next; the asynchronous variant (get_job) promotes whenever a
config ranks in the current top 1/eta of its rung.

Losses are minimized. NaN and +/-inf losses are recorded as +inf so broken
trials sort last instead of poisoning comparisons.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

NEW_CONFIG = "new-config"
PROMOTION = "promotion"
REDISPATCH = "redispatch"


class InfeasibleScheduleError(ValueError):
    pass


class ResultRejectedError(ValueError):
    pass


@dataclass(frozen=True)
class BracketParams:
    r: int
    R: int
    eta: int
    s: int = 0

    def __post_init__(self):
        if self.r < 1 or self.R < self.r:
            raise ValueError("need R >= r >= 1")
        if self.eta < 2:
            raise ValueError("eta must be >= 2")
        if not 0 <= self.s <= self.s_max:
            raise ValueError(f"s must be in [0, {self.s_max}]")

    @property
    def s_max(self) -> int:
        # floor(log_eta(R/r)) via exact integer arithmetic
        k, res = 0, self.r
        while res * self.eta <= self.R:
            res *= self.eta
            k += 1
        return k

    @property
    def num_rungs(self) -> int:
        return self.s_max - self.s + 1

    def rung_resource(self, k: int) -> int:
        return self.r * self.eta ** (self.s + k)


@dataclass
class RungState:
    k: int
    resource: int
    completed: dict[int, float] = field(default_factory=dict)
    pending: set[int] = field(default_factory=set)
    promoted: set[int] = field(default_factory=set)


@dataclass(frozen=True)
class Job:
    config_id: int
    rung: int
    resource: int
    kind: str


@dataclass(frozen=True)
class Finished:
    best_config_id: int
    best_loss: float


class NotReady:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NOT_READY"


NOT_READY = NotReady()


def normalize_loss(loss: float) -> float:
    loss = float(loss)
    if math.isnan(loss) or math.isinf(loss):
        return math.inf
    return loss


def rung_schedule(n: int, params: BracketParams) -> list[tuple[int, int]]:
    """Synchronous promotion schedule: [(n_i, r_i)] for i = 0 .. s_max - s.

    n_i = floor(n * eta^-i), r_i = r * eta^(i+s).
    """
    need = params.eta ** (params.s_max - params.s)
    if n < need:
        raise InfeasibleScheduleError(
            f"n={n} is infeasible for this bracket: need n >= {need} so that at "
            f"least one configuration reaches the top rung"
        )
    out = []
    for i in range(params.num_rungs):
        n_i = n // params.eta**i
        r_i = params.rung_resource(i)
        out.append((n_i, r_i))
    return out


def top_k(rung: RungState, count: int) -> list[int]:
    """The count lowest-loss completed config ids, ties broken by lower id."""
    if count < 0:
        raise ValueError("count must be >= 0")
    ranked = sorted(rung.completed, key=lambda cid: (rung.completed[cid], cid))
    return ranked[:count]


def completion_time_ratio(params: BracketParams) -> Fraction:
    """First top-rung completion time as a multiple of time(R), with enough
    workers to promote as soon as each rung's leader finishes, restarting
    training from scratch at every rung."""
    eta = params.eta
    return sum(
        (Fraction(1, eta**d) for d in range(params.num_rungs)), Fraction(0)
    )


@dataclass
class BracketState:
    params: BracketParams
    width_limit: Optional[int] = None
    infinite_horizon: bool = False
    sync_n: Optional[int] = None
    rungs: list[RungState] = field(default_factory=list)
    sampled_count: int = 0
    # (config_id, rung) pairs whose dispatched job was dropped, awaiting re-dispatch
    requeue: list[tuple[int, int]] = field(default_factory=list)
    _sync_started: bool = field(default=False)

    def __post_init__(self):
        if not self.rungs:
            self.rungs = [
                RungState(k=k, resource=self.params.rung_resource(k))
                for k in range(self.params.num_rungs)
            ]

    # -- low-level mutators (shared by the live path and journal replay) --

    def apply_sample(self, config_id: int) -> None:
        if self.width_limit is not None and self.sampled_count >= self.width_limit:
            raise ValueError("bottom rung width limit reached")
        self.rungs[0].pending.add(config_id)
        self.sampled_count += 1

    def apply_promote(self, config_id: int, from_rung: int) -> None:
        rung = self.rungs[from_rung]
        if config_id not in rung.completed:
            raise ValueError(f"config {config_id} has no result in rung {from_rung}")
        rung.promoted.add(config_id)
        if from_rung + 1 >= len(self.rungs):
            if not self.infinite_horizon:
                raise ValueError("cannot promote past the top rung")
            self.rungs.append(
                RungState(
                    k=from_rung + 1,
                    resource=self.params.rung_resource(from_rung + 1),
                )
            )
        self.rungs[from_rung + 1].pending.add(config_id)

    def apply_result(self, config_id: int, rung_k: int, loss: float) -> None:
        if not 0 <= rung_k < len(self.rungs):
            raise ResultRejectedError(f"unknown rung {rung_k}")
        rung = self.rungs[rung_k]
        if config_id in rung.completed:
            raise ResultRejectedError(
                f"duplicate result for config {config_id} at rung {rung_k}"
            )
        if config_id not in rung.pending:
            raise ResultRejectedError(
                f"config {config_id} was never dispatched at rung {rung_k}"
            )
        rung.pending.discard(config_id)
        rung.completed[config_id] = normalize_loss(loss)

    def apply_drop(self, config_id: int, rung_k: int) -> None:
        rung = self.rungs[rung_k]
        if config_id not in rung.pending:
            raise ValueError(f"config {config_id} not pending at rung {rung_k}")
        rung.pending.discard(config_id)
        self.requeue.append((config_id, rung_k))

    def apply_redispatch(self, config_id: int, rung_k: int) -> None:
        self.requeue.remove((config_id, rung_k))
        self.rungs[rung_k].pending.add(config_id)

    def apply_width_extension(self, additional: int) -> None:
        if self.width_limit is not None:
            self.width_limit += additional

    # -- asynchronous (ASHA) path --

    def promotion_scan(self) -> Optional[tuple[int, int]]:
        """Top-down scan for a promotable config: (config_id, from_rung) or None."""
        if self.infinite_horizon:
            tops = range(len(self.rungs) - 1, -1, -1)
        else:
            tops = range(len(self.rungs) - 2, -1, -1)
        for k in tops:
            rung = self.rungs[k]
            limit = len(rung.completed) // self.params.eta
            # cumulative promotions never exceed the current top-1/eta count,
            # even when earlier promotees have fallen out of the top set
            if len(rung.promoted) >= limit:
                continue
            for cid in top_k(rung, limit):
                if cid not in rung.promoted:
                    return cid, k
        return None

    def asha_peek(self) -> tuple[str, Optional[int], int]:
        """Next asynchronous action without mutating: (kind, config_id, rung).

        kind is one of redispatch / promotion / new-config / blocked; for
        new-config the config_id is None (the caller assigns it), for blocked
        both are meaningless.
        """
        if self.requeue:
            cid, k = self.requeue[0]
            return REDISPATCH, cid, k
        hit = self.promotion_scan()
        if hit is not None:
            cid, k = hit
            return PROMOTION, cid, k + 1
        if self.width_limit is None or self.sampled_count < self.width_limit:
            return NEW_CONFIG, None, 0
        return "blocked", None, -1

    def asha_get_job(self, sampler: Callable[[], int]) -> Optional[Job]:
        """Algorithm-2 get_job: promote whenever possible, otherwise grow the
        bottom rung; None when the bracket is width-limited with nothing
        promotable (blocked)."""
        kind, cid, rung_k = self.asha_peek()
        if kind == REDISPATCH:
            self.apply_redispatch(cid, rung_k)
        elif kind == PROMOTION:
            self.apply_promote(cid, rung_k - 1)
        elif kind == NEW_CONFIG:
            cid = sampler()
            self.apply_sample(cid)
        else:
            return None
        return Job(
            config_id=cid,
            rung=rung_k,
            resource=self.params.rung_resource(rung_k),
            kind=kind,
        )

    def asha_record_result(self, config_id: int, rung_k: int, loss: float) -> None:
        self.apply_result(config_id, rung_k, loss)

    # -- synchronous (SHA) path --

    def sync_schedule(self) -> list[tuple[int, int]]:
        if self.sync_n is None:
            raise ValueError("bracket was not created with a synchronous width n")
        return rung_schedule(self.sync_n, self.params)

    def sync_frontier(self) -> int:
        """Highest rung that has any membership, or -1 before the first rung."""
        for k in range(len(self.rungs) - 1, -1, -1):
            r = self.rungs[k]
            if r.completed or r.pending:
                return k
        return -1

    def sync_next(self, sampler: Callable[[], int]):
        """Advance the synchronous barrier.

        Returns a list of Jobs for the next rung once the current rung has
        fully completed, NOT_READY while jobs are outstanding, and Finished
        with the argmin-loss survivor once the top rung closes. Dropped jobs
        are re-emitted before the rung can close.
        """
        schedule = self.sync_schedule()
        k = self.sync_frontier()
        if k == -1:
            n0, r0 = schedule[0]
            jobs = []
            for _ in range(n0):
                cid = sampler()
                self.apply_sample(cid)
                jobs.append(Job(cid, 0, r0, NEW_CONFIG))
            return jobs
        rung = self.rungs[k]
        if self.requeue:
            jobs = []
            for cid, rk in list(self.requeue):
                self.apply_redispatch(cid, rk)
                jobs.append(Job(cid, rk, self.params.rung_resource(rk), REDISPATCH))
            return jobs
        if rung.pending:
            return NOT_READY
        if k == len(schedule) - 1:
            best = top_k(rung, 1)[0]
            return Finished(best_config_id=best, best_loss=rung.completed[best])
        n_next, r_next = schedule[k + 1]
        jobs = []
        for cid in top_k(rung, n_next):
            self.apply_promote(cid, k)
            jobs.append(Job(cid, k + 1, r_next, PROMOTION))
        return jobs

    # -- introspection --

    def is_blocked(self) -> bool:
        return self.asha_peek()[0] == "blocked"

    def is_drained(self) -> bool:
        """Width-limited, nothing pending, nothing promotable, nothing queued."""
        if self.requeue:
            return False
        if any(r.pending for r in self.rungs):
            return False
        return self.is_blocked()

    def snapshot(self) -> dict:
        """Field-by-field comparable view of the bracket."""
        return {
            "params": (self.params.r, self.params.R, self.params.eta, self.params.s),
            "width_limit": self.width_limit,
            "sampled_count": self.sampled_count,
            "requeue": list(self.requeue),
            "rungs": [
                {
                    "k": r.k,
                    "resource": r.resource,
                    "completed": dict(r.completed),
                    "pending": sorted(r.pending),
                    "promoted": sorted(r.promoted),
                }
                for r in self.rungs
            ],
        }
