"""HTTP service exposing experiment lifecycle and worker job polling.

Wire protocol (JSON over HTTP, all paths relative to the server root):

  POST /experiments                     create; body = experiment spec document
  GET  /experiments                     list ids with summary status
  GET  /experiments/{id}                status snapshot
  POST /experiments/{id}/resume         body {"additional_n": int}
  POST /experiments/{id}/poll           body {"worker_id": str} -> wire job or no-work
  POST /experiments/{id}/result         body = wire result -> ack
  POST /experiments/{id}/checkpoints    raw bytes -> {"digest": sha256}
  GET  /experiments/{id}/checkpoints/{digest}   raw bytes
  GET  /experiments/{id}/export?format=csv|jsonlines

A wire job carries a single-use trial token. Results must quote the token of
an outstanding dispatch; an exact duplicate of an already-accepted result is
acknowledged again without a second journal event, anything else is rejected.
Dispatches carry a lease (default 10x the expected time for the job's
resource); an expired lease journals a job-dropped event and the slot is
re-dispatched later with a fresh token.

All decision state lives in the per-experiment journal under the data
directory (ASHATUNE_DATA_DIR or --data-dir), so restarting the server loses
nothing that was acknowledged: experiments are rebuilt by replay, and trials
that were in flight across the restart are dropped and re-enqueued.
"""
from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import journal as jr
from .bracket import ResultRejectedError
from .experiment import BLOCKED, FINISHED, Experiment, ExperimentSpec

DATA_DIR_ENV = "ASHATUNE_DATA_DIR"
DEFAULT_BACKOFF_SECONDS = 2.0
DEFAULT_LEASE_FACTOR = 10.0


@dataclass
class Lease:
    token: str
    config_id: int
    rung: int
    bracket_s: int
    worker_id: str
    deadline: float


@dataclass
class ExperimentHandle:
    experiment_id: str
    experiment: Experiment
    journal: jr.Journal
    store: jr.CheckpointStore
    lock: threading.Lock = field(default_factory=threading.Lock)
    leases: dict[str, Lease] = field(default_factory=dict)
    accepted: dict[str, dict] = field(default_factory=dict)  # token -> result payload


class TunerService:
    """Registry of experiments plus the request handlers behind the app.

    Every mutation of one experiment happens under that experiment's lock, so
    concurrent polls and submissions serialize into some valid order.
    """

    def __init__(
        self,
        data_dir: str,
        unit_time_seconds: float = 1.0,
        lease_factor: float = DEFAULT_LEASE_FACTOR,
        clock=time.monotonic,
    ):
        self.data_dir = data_dir
        self.unit_time_seconds = unit_time_seconds
        self.lease_factor = lease_factor
        self.clock = clock
        self.handles: dict[str, ExperimentHandle] = {}
        self.registry_lock = threading.Lock()
        os.makedirs(data_dir, exist_ok=True)
        self._load_existing()

    # -- persistence layout --

    def _paths(self, experiment_id: str) -> tuple[str, str, str]:
        root = os.path.join(self.data_dir, experiment_id)
        return root, os.path.join(root, "journal.log"), os.path.join(root, "blobs")

    def _load_existing(self) -> None:
        for experiment_id in sorted(os.listdir(self.data_dir)):
            root, journal_path, blob_root = self._paths(experiment_id)
            if not os.path.isfile(journal_path):
                continue
            journal = jr.Journal(path=journal_path)
            experiment = jr.replay(journal)
            experiment.attach_journal(journal)
            handle = ExperimentHandle(
                experiment_id=experiment_id,
                experiment=experiment,
                journal=journal,
                store=jr.CheckpointStore(blob_root),
            )
            # in-flight dispatches lost their tokens with the old process;
            # drop them so the work is re-enqueued instead of stuck pending
            for s, cid, rung in sorted(experiment.outstanding):
                experiment.report_drop(cid, rung, s)
            self.handles[experiment_id] = handle

    # -- lifecycle --

    def create_experiment(self, doc: dict) -> tuple[Optional[str], list[str]]:
        try:
            spec = ExperimentSpec.from_doc(doc)
        except (KeyError, TypeError, ValueError) as exc:
            return None, [str(exc)]
        violations = spec.space.validate()
        if violations:
            return None, violations
        experiment_id = uuid.uuid4().hex[:12]
        root, journal_path, blob_root = self._paths(experiment_id)
        os.makedirs(root, exist_ok=True)
        journal = jr.Journal(path=journal_path)
        try:
            experiment = Experiment(spec, journal=journal)
        except ValueError as exc:
            journal.close()
            os.remove(journal_path)
            os.rmdir(root)
            return None, [str(exc)]
        handle = ExperimentHandle(
            experiment_id=experiment_id,
            experiment=experiment,
            journal=journal,
            store=jr.CheckpointStore(blob_root),
        )
        with self.registry_lock:
            self.handles[experiment_id] = handle
        return experiment_id, []

    def get(self, experiment_id: str) -> Optional[ExperimentHandle]:
        return self.handles.get(experiment_id)

    # -- job flow --

    def _reap_expired(self, handle: ExperimentHandle) -> None:
        now = self.clock()
        for token in [t for t, lease in handle.leases.items() if lease.deadline <= now]:
            lease = handle.leases.pop(token)
            handle.experiment.report_drop(lease.config_id, lease.rung, lease.bracket_s)

    def poll_job(self, handle: ExperimentHandle, worker_id: str) -> dict:
        with handle.lock:
            self._reap_expired(handle)
            ticket = handle.experiment.next_job()
            if ticket is BLOCKED or ticket is FINISHED:
                return {
                    "status": "no-work",
                    "finished": ticket is FINISHED,
                    "backoff_seconds": DEFAULT_BACKOFF_SECONDS,
                }
            token = uuid.uuid4().hex
            lease_seconds = self.lease_factor * self.unit_time_seconds * ticket.resource
            handle.leases[token] = Lease(
                token=token,
                config_id=ticket.config_id,
                rung=ticket.rung,
                bracket_s=ticket.bracket_s,
                worker_id=worker_id,
                deadline=self.clock() + lease_seconds,
            )
            return {
                "status": "job",
                "job": {
                    "experiment_id": handle.experiment_id,
                    "trial_token": token,
                    "config_id": ticket.config_id,
                    "values": ticket.values,
                    "rung": ticket.rung,
                    "bracket_s": ticket.bracket_s,
                    "resource": ticket.resource,
                    "prior_checkpoint": ticket.prior_checkpoint,
                    "training_model": (
                        "incremental-checkpoint"
                        if handle.experiment.spec.incremental_training
                        else "restart-from-scratch"
                    ),
                    "lease_seconds": lease_seconds,
                },
            }

    def submit_result(self, handle: ExperimentHandle, body: dict) -> tuple[int, dict]:
        token = body.get("trial_token")
        if not isinstance(token, str):
            return 422, {"error": "missing trial_token"}
        normalized = {
            "trial_token": token,
            "loss": body.get("loss"),
            "checkpoint": body.get("checkpoint"),
        }
        with handle.lock:
            self._reap_expired(handle)
            if token in handle.accepted:
                if handle.accepted[token] == normalized:
                    return 200, {"status": "ack", "duplicate": True}
                return 409, {"error": "token already used with a different result"}
            lease = handle.leases.get(token)
            if lease is None:
                return 404, {"error": "unknown or expired trial token"}
            try:
                loss = float(body.get("loss"))
            except (TypeError, ValueError):
                return 422, {"error": "loss must be a number (NaN/inf allowed)"}
            checkpoint = body.get("checkpoint")
            if checkpoint is not None and not handle.store.has(checkpoint):
                return 422, {"error": f"checkpoint {checkpoint} was never uploaded"}
            try:
                handle.experiment.record_result(
                    lease.config_id,
                    lease.rung,
                    lease.bracket_s,
                    loss,
                    checkpoint=checkpoint,
                )
            except ResultRejectedError as exc:
                return 409, {"error": str(exc)}
            del handle.leases[token]
            handle.accepted[token] = normalized
            return 200, {"status": "ack", "duplicate": False}

    # -- status --

    def status(self, handle: ExperimentHandle) -> dict:
        with handle.lock:
            exp = handle.experiment
            incumbent = exp.incumbent()
            completed = sum(
                len(rung.completed) for b in exp.brackets.values() for rung in b.rungs
            )
            return {
                "experiment_id": handle.experiment_id,
                "sequence_no": len(handle.journal),
                "mode": exp.spec.mode,
                "n": exp.spec.n,
                "R": exp.spec.R,
                "eta": exp.eta,
                "r": exp.r,
                "allocation": {str(s): c for s, c in exp.allocation.items()},
                "brackets": {
                    str(s): {
                        "rung_widths": [len(r.completed) for r in b.rungs],
                        "rung_pending": [len(r.pending) for r in b.rungs],
                        "rung_resources": [r.resource for r in b.rungs],
                    }
                    for s, b in exp.brackets.items()
                },
                "completed_trials": completed,
                "outstanding": len(exp.outstanding),
                "finished": exp.finished(),
                "blocked": exp.blocked(),
                "incumbent": None if incumbent is None else vars(incumbent),
            }


def create_app(
    data_dir: Optional[str] = None,
    unit_time_seconds: float = 1.0,
    lease_factor: float = DEFAULT_LEASE_FACTOR,
) -> FastAPI:
    resolved = data_dir or os.environ.get(DATA_DIR_ENV) or os.path.join(".", "ashatune-data")
    service = TunerService(
        resolved, unit_time_seconds=unit_time_seconds, lease_factor=lease_factor
    )
    app = FastAPI(title="ashatune")
    app.state.service = service

    def not_found() -> JSONResponse:
        return JSONResponse({"error": "experiment not found"}, status_code=404)

    @app.post("/experiments")
    async def create_experiment(request: Request):
        try:
            doc = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            return JSONResponse({"error": f"invalid body: {exc}"}, status_code=422)
        experiment_id, violations = service.create_experiment(doc)
        if experiment_id is None:
            return JSONResponse({"error": "invalid spec", "violations": violations},
                                status_code=422)
        return {"experiment_id": experiment_id}

    @app.get("/experiments")
    def list_experiments():
        out = []
        for experiment_id in sorted(service.handles):
            handle = service.handles[experiment_id]
            with handle.lock:
                out.append(
                    {
                        "experiment_id": experiment_id,
                        "mode": handle.experiment.spec.mode,
                        "finished": handle.experiment.finished(),
                    }
                )
        return {"experiments": out}

    @app.get("/experiments/{experiment_id}")
    def experiment_status(experiment_id: str):
        handle = service.get(experiment_id)
        if handle is None:
            return not_found()
        return service.status(handle)

    @app.post("/experiments/{experiment_id}/resume")
    async def resume_experiment(experiment_id: str, request: Request):
        handle = service.get(experiment_id)
        if handle is None:
            return not_found()
        doc = json.loads(await request.body())
        additional = doc.get("additional_n")
        if not isinstance(additional, int) or additional < 1:
            return JSONResponse({"error": "additional_n must be a positive integer"},
                                status_code=422)
        with handle.lock:
            handle.experiment.extend_width(additional)
        return {"status": "resumed", "additional_n": additional}

    @app.post("/experiments/{experiment_id}/poll")
    async def poll_job(experiment_id: str, request: Request):
        handle = service.get(experiment_id)
        if handle is None:
            return not_found()
        doc = json.loads(await request.body())
        return service.poll_job(handle, str(doc.get("worker_id", "anonymous")))

    @app.post("/experiments/{experiment_id}/result")
    async def submit_result(experiment_id: str, request: Request):
        handle = service.get(experiment_id)
        if handle is None:
            return not_found()
        doc = json.loads(await request.body())
        code, body = service.submit_result(handle, doc)
        return JSONResponse(body, status_code=code)

    @app.post("/experiments/{experiment_id}/checkpoints")
    async def upload_checkpoint(experiment_id: str, request: Request):
        handle = service.get(experiment_id)
        if handle is None:
            return not_found()
        ref = handle.store.put(await request.body())
        return {"digest": ref.digest, "size": ref.size}

    @app.get("/experiments/{experiment_id}/checkpoints/{digest}")
    def download_checkpoint(experiment_id: str, digest: str):
        handle = service.get(experiment_id)
        if handle is None:
            return not_found()
        try:
            blob = handle.store.get(digest)
        except FileNotFoundError:
            return JSONResponse({"error": "unknown checkpoint"}, status_code=404)
        return Response(content=blob, media_type="application/octet-stream")

    @app.get("/experiments/{experiment_id}/export")
    def export(experiment_id: str, format: str = "csv"):
        handle = service.get(experiment_id)
        if handle is None:
            return not_found()
        if format not in ("csv", "jsonlines"):
            return JSONResponse({"error": "format must be csv or jsonlines"}, status_code=422)
        with handle.lock:
            text = jr.export_events(handle.journal, format)
        return Response(content=text, media_type="text/plain")

    return app
