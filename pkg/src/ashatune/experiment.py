"""Multi-bracket experiment orchestration.

An Experiment owns one or more brackets, hands out jobs (round-robin across
brackets for the asynchronous Hyperband mode), records results, and tracks
the incumbent. Every decision is journaled before it is applied, and the same
apply_event path serves both live operation and journal replay, so a replayed
experiment is field-by-field identical to the live one.

Defaults follow the production recipe: eta=4, r=ceil(R/256) clamped to >=1,
and the three most aggressive early-stopping brackets s in {0, 1, 2}. The
total configuration count n is the stopping criterion; it is split across
brackets inversely to each bracket's average resource per configuration so
every bracket consumes the same total training budget.
"""
from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Optional

from . import journal as jr
from .bracket import (
    NEW_CONFIG,
    PROMOTION,
    REDISPATCH,
    BracketParams,
    BracketState,
    Finished,
    InfeasibleScheduleError,
    normalize_loss,
    rung_schedule,
    top_k,
)
from .space import Configuration, SearchSpace

SYNC_SHA = "sync-sha"
ASHA = "asha"
SYNC_HYPERBAND = "sync-hyperband"
ASYNC_HYPERBAND = "async-hyperband"
MODES = (SYNC_SHA, ASHA, SYNC_HYPERBAND, ASYNC_HYPERBAND)

STANDARD = "standard"
AGGRESSIVE = "aggressive"
CONSERVATIVE = "conservative"
_BRACKET_SETS = {STANDARD: [0, 1, 2], AGGRESSIVE: [0], CONSERVATIVE: [0, 1, 2, 3, 4]}


class _Marker:
    def __init__(self, name: str):
        self._name = name

    def __repr__(self):
        return self._name


BLOCKED = _Marker("BLOCKED")
FINISHED = _Marker("FINISHED")


def default_settings(R: int) -> tuple[int, int, list[int]]:
    """Production defaults: (eta, r, standard bracket list) for a given R."""
    if R < 1:
        raise ValueError("R must be >= 1")
    eta = 4
    r = max(1, math.ceil(R / 256))
    s_max = BracketParams(r=r, R=R, eta=eta).s_max
    brackets = sorted({min(s, s_max) for s in _BRACKET_SETS[STANDARD]})
    return eta, r, brackets


def resolve_brackets(bracket_set, r: int, R: int, eta: int) -> list[int]:
    s_max = BracketParams(r=r, R=R, eta=eta).s_max
    if isinstance(bracket_set, str):
        wanted = _BRACKET_SETS[bracket_set]
    else:
        wanted = list(bracket_set)
    return sorted({min(s, s_max) for s in wanted})


def average_resource(s: int, r: int, R: int, eta: int) -> Fraction:
    """Mean resource per configuration in bracket s, as a fraction of R,
    assuming no incorrect promotions."""
    depth = BracketParams(r=r, R=R, eta=eta).s_max
    if s > depth:
        raise ValueError(f"s={s} exceeds the deepest bracket {depth}")
    num_rungs = depth - s + 1
    return Fraction(num_rungs, eta ** (depth - s))


def allocate_configs(n: int, brackets: list[int], r: int, R: int, eta: int) -> dict[int, int]:
    """Split n configurations across brackets proportional to 1 / average
    resource, integralized by largest remainder, with every bracket >= 1."""
    if n < len(brackets):
        raise ValueError(f"n={n} is smaller than the number of brackets {len(brackets)}")
    weights = {s: 1 / average_resource(s, r, R, eta) for s in brackets}
    total = sum(weights.values())
    quotas = {s: Fraction(n) * weights[s] / total for s in brackets}
    alloc = {s: int(quotas[s]) for s in brackets}
    leftover = n - sum(alloc.values())
    by_remainder = sorted(brackets, key=lambda s: (-(quotas[s] - alloc[s]), s))
    for s in by_remainder[:leftover]:
        alloc[s] += 1
    # floor of one configuration per bracket
    for s in brackets:
        while alloc[s] == 0:
            donor = max(brackets, key=lambda t: alloc[t])
            alloc[donor] -= 1
            alloc[s] += 1
    return alloc


@dataclass(frozen=True)
class IncumbentRecord:
    config_id: int
    loss: float
    wall_time: float
    rung: int
    bracket_s: int
    resource: int


@dataclass
class ExperimentSpec:
    space: SearchSpace
    n: int
    R: int
    mode: str = ASYNC_HYPERBAND
    eta: Optional[int] = None
    r: Optional[int] = None
    bracket_set: Any = STANDARD
    experiment_seed: int = 0
    incremental_training: bool = False
    infinite_horizon: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.R < 1:
            raise ValueError("R must be >= 1")

    def resolved(self) -> tuple[int, int, list[int]]:
        """(eta, r, bracket list) with defaults filled in."""
        eta = self.eta if self.eta is not None else 4
        if self.r is not None:
            r = self.r
        else:
            r = max(1, math.ceil(self.R / eta**4))
        brackets = resolve_brackets(self.bracket_set, r, self.R, eta)
        if self.mode in (SYNC_SHA, ASHA):
            brackets = [min(brackets)]
        return eta, r, brackets

    def to_doc(self) -> dict:
        return {
            "space": self.space.to_dict(),
            "n": self.n,
            "R": self.R,
            "mode": self.mode,
            "eta": self.eta,
            "r": self.r,
            "bracket_set": self.bracket_set,
            "experiment_seed": self.experiment_seed,
            "incremental_training": self.incremental_training,
            "infinite_horizon": self.infinite_horizon,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ExperimentSpec":
        return cls(
            space=SearchSpace.from_dict(doc["space"]),
            n=doc["n"],
            R=doc["R"],
            mode=doc.get("mode", ASYNC_HYPERBAND),
            eta=doc.get("eta"),
            r=doc.get("r"),
            bracket_set=doc.get("bracket_set", STANDARD),
            experiment_seed=doc.get("experiment_seed", 0),
            incremental_training=doc.get("incremental_training", False),
            infinite_horizon=doc.get("infinite_horizon", False),
        )


@dataclass(frozen=True)
class JobTicket:
    bracket_s: int
    config_id: int
    rung: int
    resource: int
    kind: str
    values: dict[str, Any]
    prior_checkpoint: Optional[str] = None


class Experiment:
    """Single-logical-writer experiment state. The caller (service, simulator,
    or CLI) serializes next_job / record_result / report_drop."""

    def __init__(
        self,
        spec: ExperimentSpec,
        journal: Optional[jr.Journal] = None,
        clock: Optional[Callable[[], float]] = None,
    ):
        self.spec = spec
        self.clock = clock or _time.time
        self.eta, self.r, self.bracket_order = spec.resolved()
        sync = spec.mode in (SYNC_SHA, SYNC_HYPERBAND)
        self.allocation = allocate_configs(spec.n, self.bracket_order, self.r, spec.R, self.eta)
        self.brackets: dict[int, BracketState] = {}
        for s in self.bracket_order:
            params = BracketParams(r=self.r, R=spec.R, eta=self.eta, s=s)
            if sync:
                # fail fast on infeasible synchronous schedules
                rung_schedule(self.allocation[s], params)
            self.brackets[s] = BracketState(
                params=params,
                width_limit=None if sync else self.allocation[s],
                infinite_horizon=spec.infinite_horizon and not sync,
                sync_n=self.allocation[s] if sync else None,
            )
        self.configs: dict[int, Configuration] = {}
        self.config_bracket: dict[int, int] = {}
        self.next_config_id = 0
        self.outstanding: set[tuple[int, int, int]] = set()  # (s, cid, rung)
        self.undispatched: set[tuple[int, int, int]] = set()
        self.checkpoints: dict[tuple[int, int, int], str] = {}
        self.incumbent_records: list[IncumbentRecord] = []
        self.bracket_records: list[IncumbentRecord] = []
        self._completed_brackets: set[int] = set()
        self._rr_next = 0
        self.journal = None
        if journal is not None:
            self.attach_journal(journal)
            if len(journal) == 0:
                journal.append(
                    jr.EXPERIMENT_CREATED, {"spec": spec.to_doc()}, timestamp=self.clock()
                )

    # -- construction from journal --

    @classmethod
    def from_spec_doc(cls, doc: dict, journal=None) -> "Experiment":
        return cls(ExperimentSpec.from_doc(doc), journal=journal)

    def attach_journal(self, journal: jr.Journal) -> None:
        self.journal = journal

    # -- event plumbing --

    def _emit(self, kind: str, payload: dict, now: Optional[float] = None) -> None:
        ts = self.clock() if now is None else now
        if self.journal is not None:
            self.journal.append(kind, payload, timestamp=ts)
        self.apply_event(jr.JournalEvent(sequence_no=-1, kind=kind, timestamp=ts, payload=payload))

    def apply_event(self, ev: jr.JournalEvent) -> None:
        p = ev.payload
        if ev.kind == jr.EXPERIMENT_CREATED:
            return
        if ev.kind == jr.CONFIG_SAMPLED:
            cid, s = p["config_id"], p["bracket_s"]
            self.configs[cid] = Configuration(
                config_id=cid, values=p["values"], sample_seed=p["sample_seed"]
            )
            self.config_bracket[cid] = s
            self.next_config_id = max(self.next_config_id, cid + 1)
            self.brackets[s].apply_sample(cid)
            self.undispatched.add((s, cid, 0))
        elif ev.kind == jr.CONFIG_PROMOTED:
            cid, s, k = p["config_id"], p["bracket_s"], p["from_rung"]
            self.brackets[s].apply_promote(cid, k)
            self.undispatched.add((s, cid, k + 1))
        elif ev.kind == jr.JOB_DISPATCHED:
            cid, s, rung = p["config_id"], p["bracket_s"], p["rung"]
            if p["kind"] == REDISPATCH:
                self.brackets[s].apply_redispatch(cid, rung)
            self.undispatched.discard((s, cid, rung))
            self.outstanding.add((s, cid, rung))
            self._rr_next = (self.bracket_order.index(s) + 1) % len(self.bracket_order)
        elif ev.kind == jr.RESULT_RECORDED:
            cid, s, rung = p["config_id"], p["bracket_s"], p["rung"]
            self.outstanding.discard((s, cid, rung))
            self.brackets[s].apply_result(cid, rung, p["loss"])
            if p.get("checkpoint"):
                self.checkpoints[(s, cid, rung)] = p["checkpoint"]
            self._observe_result(s, cid, rung, ev.timestamp)
        elif ev.kind == jr.JOB_DROPPED:
            cid, s, rung = p["config_id"], p["bracket_s"], p["rung"]
            self.outstanding.discard((s, cid, rung))
            self.brackets[s].apply_drop(cid, rung)
        elif ev.kind == jr.WIDTH_EXTENDED:
            for s_str, add in p["per_bracket"].items():
                s = int(s_str)
                self.brackets[s].apply_width_extension(add)
                self.allocation[s] += add
                self._completed_brackets.discard(s)
        else:
            raise ValueError(f"unknown event kind {ev.kind!r}")

    # -- incumbent accounting --

    def _observe_result(self, s: int, cid: int, rung: int, ts: float) -> None:
        bracket = self.brackets[s]
        resource = bracket.params.rung_resource(rung)
        loss = bracket.rungs[rung].completed[cid]
        cur = self.incumbent_records[-1] if self.incumbent_records else None
        better = (
            cur is None
            or resource > cur.resource
            or (resource == cur.resource and loss < cur.loss)
        )
        if better:
            self.incumbent_records.append(
                IncumbentRecord(cid, loss, ts, rung, s, resource)
            )
        if s not in self._completed_brackets and self._bracket_complete(s):
            self._completed_brackets.add(s)
            top = bracket.rungs[-1]
            if top.completed:
                best = top_k(top, 1)[0]
                self.bracket_records.append(
                    IncumbentRecord(best, top.completed[best], ts, top.k, s, top.resource)
                )

    def _bracket_complete(self, s: int) -> bool:
        b = self.brackets[s]
        has_outstanding = any(key[0] == s for key in self.outstanding)
        has_undispatched = any(key[0] == s for key in self.undispatched)
        if has_outstanding or has_undispatched or b.requeue:
            return False
        if b.sync_n is not None:
            frontier = b.sync_frontier()
            if frontier != len(b.rungs) - 1:
                return False
            top = b.rungs[-1]
            return not top.pending and len(top.completed) == b.sync_schedule()[-1][0]
        return b.is_drained() and b.sampled_count > 0

    def incumbent(self, accounting: str = "by-rung") -> Optional[IncumbentRecord]:
        if accounting == "by-rung":
            return self.incumbent_records[-1] if self.incumbent_records else None
        if accounting == "by-bracket":
            return self.bracket_records[-1] if self.bracket_records else None
        raise ValueError(f"unknown accounting {accounting!r}")

    # -- job flow --

    def _sample_config(self, s: int, now: Optional[float]) -> int:
        cid = self.next_config_id
        conf = self.spec.space.sample(self.spec.experiment_seed, cid)
        self._emit(
            jr.CONFIG_SAMPLED,
            {
                "config_id": cid,
                "bracket_s": s,
                "sample_seed": conf.sample_seed,
                "values": conf.values,
            },
            now,
        )
        return cid

    def _dispatch(self, s: int, cid: int, rung: int, kind: str, now: Optional[float]) -> JobTicket:
        bracket = self.brackets[s]
        resource = bracket.params.rung_resource(rung)
        self._emit(
            jr.JOB_DISPATCHED,
            {"config_id": cid, "bracket_s": s, "rung": rung, "resource": resource,
             "kind": kind},
            now,
        )
        return JobTicket(
            bracket_s=s,
            config_id=cid,
            rung=rung,
            resource=resource,
            kind=kind,
            values=self.configs[cid].values,
            prior_checkpoint=self.checkpoints.get((s, cid, rung - 1)),
        )

    def _pop_undispatched(self, now: Optional[float]) -> Optional[JobTicket]:
        if not self.undispatched:
            return None
        s, cid, rung = min(
            self.undispatched,
            key=lambda key: (self.bracket_order.index(key[0]), -key[2], key[1]),
        )
        kind = PROMOTION if rung > 0 else NEW_CONFIG
        return self._dispatch(s, cid, rung, kind, now)

    def next_job(self, now: Optional[float] = None):
        """Next unit of work: a JobTicket, BLOCKED, or FINISHED."""
        ticket = self._pop_undispatched(now)
        if ticket is not None:
            return ticket
        if self.spec.mode in (SYNC_SHA, SYNC_HYPERBAND):
            return self._next_sync(now)
        return self._next_async(now)

    def _next_async(self, now: Optional[float]):
        order = self.bracket_order
        for i in range(len(order)):
            s = order[(self._rr_next + i) % len(order)]
            bracket = self.brackets[s]
            kind, cid, rung = bracket.asha_peek()
            if kind == "blocked":
                continue
            if kind == REDISPATCH:
                return self._dispatch(s, cid, rung, REDISPATCH, now)
            if kind == PROMOTION:
                self._emit(
                    jr.CONFIG_PROMOTED,
                    {"config_id": cid, "bracket_s": s, "from_rung": rung - 1},
                    now,
                )
                return self._dispatch(s, cid, rung, PROMOTION, now)
            cid = self._sample_config(s, now)
            return self._dispatch(s, cid, 0, NEW_CONFIG, now)
        if self.finished():
            return FINISHED
        return BLOCKED

    def _next_sync(self, now: Optional[float]):
        for s in self.bracket_order:
            bracket = self.brackets[s]
            if self._sync_bracket_finished(s):
                continue
            if bracket.requeue:
                cid, rung = bracket.requeue[0]
                return self._dispatch(s, cid, rung, REDISPATCH, now)
            if any(key[0] == s for key in self.outstanding):
                return BLOCKED  # synchronous barrier: rung still running
            frontier = bracket.sync_frontier()
            schedule = bracket.sync_schedule()
            if frontier == -1:
                for _ in range(schedule[0][0]):
                    self._sample_config(s, now)
            else:
                n_next = schedule[frontier + 1][0]
                for cid in top_k(bracket.rungs[frontier], n_next):
                    self._emit(
                        jr.CONFIG_PROMOTED,
                        {"config_id": cid, "bracket_s": s, "from_rung": frontier},
                        now,
                    )
            return self._pop_undispatched(now)
        return FINISHED

    def _sync_bracket_finished(self, s: int) -> bool:
        bracket = self.brackets[s]
        if bracket.requeue or any(r.pending for r in bracket.rungs):
            return False
        frontier = bracket.sync_frontier()
        if frontier != len(bracket.rungs) - 1:
            return False
        return len(bracket.rungs[-1].completed) == bracket.sync_schedule()[-1][0]

    def record_result(
        self,
        config_id: int,
        rung: int,
        bracket_s: int,
        loss: float,
        now: Optional[float] = None,
        checkpoint: Optional[str] = None,
    ) -> None:
        if (bracket_s, config_id, rung) not in self.outstanding:
            from .bracket import ResultRejectedError

            if bracket_s not in self.brackets or rung >= len(self.brackets[bracket_s].rungs):
                raise ResultRejectedError(f"unknown (config, rung) ({config_id}, {rung})")
            if config_id in self.brackets[bracket_s].rungs[rung].completed:
                raise ResultRejectedError(
                    f"duplicate result for config {config_id} at rung {rung}"
                )
            raise ResultRejectedError(
                f"config {config_id} has no outstanding dispatch at rung {rung}"
            )
        payload = {
            "config_id": config_id,
            "bracket_s": bracket_s,
            "rung": rung,
            "loss": normalize_loss(loss),
        }
        if checkpoint:
            payload["checkpoint"] = checkpoint
        self._emit(jr.RESULT_RECORDED, payload, now)

    def report_drop(self, config_id: int, rung: int, bracket_s: int, now=None) -> None:
        self._emit(
            jr.JOB_DROPPED,
            {"config_id": config_id, "bracket_s": bracket_s, "rung": rung},
            now,
        )

    def extend_width(self, additional_n: int, now: Optional[float] = None) -> None:
        """Admit additional_n more configurations, split across brackets the
        same way the original n was."""
        if additional_n < 0:
            raise ValueError("additional_n must be >= 0")
        if additional_n == 0:
            return
        extra = allocate_configs(
            max(additional_n, len(self.bracket_order)),
            self.bracket_order,
            self.r,
            self.spec.R,
            self.eta,
        )
        if additional_n < len(self.bracket_order):
            # too few to give every bracket one: widen the most aggressive brackets
            extra = {s: 0 for s in self.bracket_order}
            for s in self.bracket_order[:additional_n]:
                extra[s] = 1
        self._emit(
            jr.WIDTH_EXTENDED,
            {"per_bracket": {str(s): extra[s] for s in self.bracket_order if extra[s]}},
            now,
        )

    # -- status --

    def finished(self) -> bool:
        if self.outstanding or self.undispatched:
            return False
        if self.spec.mode in (SYNC_SHA, SYNC_HYPERBAND):
            return all(self._sync_bracket_finished(s) for s in self.bracket_order)
        return all(b.is_drained() for b in self.brackets.values())

    def blocked(self) -> bool:
        return not self.finished() and isinstance(self.next_peek(), _Marker)

    def next_peek(self):
        """What next_job would return, without side effects on decisions.

        Only used for status displays; BLOCKED/FINISHED answers are exact,
        ticket answers are represented by the string 'job'."""
        if self.undispatched:
            return "job"
        if self.spec.mode in (SYNC_SHA, SYNC_HYPERBAND):
            for s in self.bracket_order:
                if self._sync_bracket_finished(s):
                    continue
                if self.brackets[s].requeue:
                    return "job"
                if any(key[0] == s for key in self.outstanding):
                    return BLOCKED
                return "job"
            return FINISHED
        for s in self.bracket_order:
            if self.brackets[s].asha_peek()[0] != "blocked":
                return "job"
        return FINISHED if self.finished() else BLOCKED

    def snapshot(self) -> dict:
        """Field-by-field comparable state, used by replay-fidelity checks."""
        return {
            "spec": self.spec.to_doc(),
            "brackets": {s: b.snapshot() for s, b in self.brackets.items()},
            "configs": {
                cid: {"values": c.values, "sample_seed": c.sample_seed}
                for cid, c in self.configs.items()
            },
            "config_bracket": dict(self.config_bracket),
            "next_config_id": self.next_config_id,
            "outstanding": sorted(self.outstanding),
            "undispatched": sorted(self.undispatched),
            "checkpoints": {str(k): v for k, v in self.checkpoints.items()},
            "incumbent_records": [vars(r) for r in self.incumbent_records],
            "bracket_records": [vars(r) for r in self.bracket_records],
            "allocation": dict(self.allocation),
            "rr_next": self._rr_next,
        }

    def results_csv(self) -> str:
        if self.journal is None:
            raise ValueError("experiment has no journal to export from")
        return jr.export_events(self.journal, "csv")
