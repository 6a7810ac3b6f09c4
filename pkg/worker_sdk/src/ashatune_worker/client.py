"""Poll/train/report loop for one worker process.

The SDK is a pure protocol client: it never makes tuning decisions. It polls
the server for a job, runs the user's training callable to the prescribed
resource, and reports exactly one terminal loss per trial. Checkpoints are
opaque bytes: whatever the user function saves is what a later rung's trial
receives, byte for byte.

The user training callable receives a TrialContext and either returns the
final loss or calls ctx.report(loss) once. If it raises, the trial is
reported as failed (+inf loss) and the worker moves on.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import httpx

MAX_BACKOFF_SECONDS = 30.0


class WorkerError(RuntimeError):
    pass


class _Transport:
    """HTTP wrapper with capped exponential retry on connection failures."""

    def __init__(self, server: str, client: Optional[httpx.Client] = None,
                 max_retries: int = 8, sleep=time.sleep):
        self.server = server.rstrip("/")
        self.client = client or httpx.Client(timeout=60.0)
        self.max_retries = max_retries
        self.sleep = sleep

    def request(self, method: str, path: str, **kwargs) -> httpx.Response:
        delay = 0.5
        for attempt in range(self.max_retries + 1):
            try:
                return self.client.request(method, self.server + path, **kwargs)
            except httpx.TransportError:
                if attempt == self.max_retries:
                    raise
                self.sleep(delay)
                delay = min(delay * 2, MAX_BACKOFF_SECONDS)
        raise AssertionError("unreachable")


@dataclass
class TrialContext:
    """Everything one trial needs: the configuration, how far to train, the
    previous rung's checkpoint (None at rung 0 or in restart mode), and the
    report/checkpoint callbacks."""

    values: dict[str, Any]
    resource: int
    rung: int
    config_id: int
    checkpoint: Optional[bytes]
    _upload: Callable[[bytes], str] = field(repr=False, default=None)
    _reported: Optional[float] = field(default=None, repr=False)
    _checkpoint_digest: Optional[str] = field(default=None, repr=False)

    def report(self, loss: float) -> None:
        """Record the trial's terminal loss; callable exactly once."""
        if self._reported is not None:
            raise WorkerError("report() called twice for one trial")
        self._reported = float(loss)

    def save_checkpoint(self, blob: bytes) -> str:
        """Upload opaque checkpoint bytes; the digest rides along with the
        result so the next rung can resume from it."""
        if not isinstance(blob, bytes):
            raise WorkerError("checkpoint must be bytes")
        self._checkpoint_digest = self._upload(blob)
        return self._checkpoint_digest


@dataclass
class WorkerSummary:
    trials_completed: int = 0
    trials_failed: int = 0
    polls: int = 0
    finished: bool = False


def run_worker(
    server: str,
    experiment_id: str,
    train_fn: Callable[[TrialContext], Optional[float]],
    worker_id: str = "worker",
    max_trials: Optional[int] = None,
    max_polls: Optional[int] = None,
    sleep=time.sleep,
    client: Optional[httpx.Client] = None,
) -> WorkerSummary:
    """Run the poll -> train -> report loop until the experiment finishes.

    max_trials / max_polls bound the loop for tests; by default the worker
    runs until the server says the experiment is finished.
    """
    transport = _Transport(server, client=client, sleep=sleep)
    summary = WorkerSummary()
    base = f"/experiments/{experiment_id}"

    while True:
        if max_polls is not None and summary.polls >= max_polls:
            return summary
        resp = transport.request("POST", f"{base}/poll", json={"worker_id": worker_id})
        if resp.status_code == 404:
            raise WorkerError(f"experiment {experiment_id} not found")
        summary.polls += 1
        body = resp.json()
        if body["status"] == "no-work":
            if body.get("finished"):
                summary.finished = True
                return summary
            sleep(min(float(body.get("backoff_seconds", 2.0)), MAX_BACKOFF_SECONDS))
            continue

        job = body["job"]
        prior = None
        if job.get("prior_checkpoint"):
            blob_resp = transport.request(
                "GET", f"{base}/checkpoints/{job['prior_checkpoint']}"
            )
            if blob_resp.status_code == 200:
                prior = blob_resp.content

        def upload(blob: bytes) -> str:
            up = transport.request("POST", f"{base}/checkpoints", content=blob)
            return up.json()["digest"]

        ctx = TrialContext(
            values=job["values"],
            resource=job["resource"],
            rung=job["rung"],
            config_id=job["config_id"],
            checkpoint=prior,
            _upload=upload,
        )
        failed = False
        try:
            returned = train_fn(ctx)
            if ctx._reported is None:
                if returned is None:
                    raise WorkerError("train function neither returned nor reported a loss")
                ctx.report(returned)
            elif returned is not None and float(returned) != ctx._reported:
                raise WorkerError("train function both returned and reported, and they differ")
            loss = ctx._reported
        except Exception:
            # user code failed: report the trial as lost so tuning continues
            failed = True
            loss = math.inf

        # non-finite losses ride as strings: JSON has no inf/nan literals
        wire_loss = loss if math.isfinite(loss) else str(loss)
        result = {"trial_token": job["trial_token"], "loss": wire_loss}
        if not failed and ctx._checkpoint_digest is not None:
            result["checkpoint"] = ctx._checkpoint_digest
        ack = transport.request("POST", f"{base}/result", json=result)
        if ack.status_code == 200:
            if failed:
                summary.trials_failed += 1
            else:
                summary.trials_completed += 1
        # non-200 means the lease expired or the token was superseded; the
        # server has re-enqueued the work, nothing for this worker to do

        if max_trials is not None and (
            summary.trials_completed + summary.trials_failed >= max_trials
        ):
            return summary
