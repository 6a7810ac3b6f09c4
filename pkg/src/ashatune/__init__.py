"""Successive-halving hyperparameter tuning engine: synchronous and
asynchronous bracket state machines, multi-bracket orchestration, fair-share
cluster scheduling, a replayable event journal, a discrete-event worker
simulator, and an HTTP job-serving service."""

from .bracket import (
    BracketParams,
    BracketState,
    Finished,
    Job,
    NOT_READY,
    completion_time_ratio,
    rung_schedule,
    top_k,
)
from .experiment import (
    ASHA,
    ASYNC_HYPERBAND,
    BLOCKED,
    FINISHED,
    Experiment,
    ExperimentSpec,
    IncumbentRecord,
    SYNC_HYPERBAND,
    SYNC_SHA,
    allocate_configs,
    average_resource,
    default_settings,
)
from .journal import CheckpointRef, CheckpointStore, Journal, JournalEvent, replay, resume
from .scheduler import (
    AnalyticScalingModel,
    Cluster,
    ClusterDemand,
    TaskStack,
    max_gpus_for_efficiency,
    water_fill,
)
from .simulate import (
    SimMetrics,
    SimWorkload,
    SyntheticObjective,
    drop_survival,
    straggler_drop_sweep,
    run_simulation,
    straggler_time,
)
from .space import Configuration, Dimension, SearchSpace, sample, validate_space

__all__ = [name for name in dir() if not name.startswith("_")]
