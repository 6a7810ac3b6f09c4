"""Client SDK for running training workers against an ashatune server."""

from .client import TrialContext, WorkerError, WorkerSummary, run_worker

__all__ = ["TrialContext", "WorkerError", "WorkerSummary", "run_worker"]
