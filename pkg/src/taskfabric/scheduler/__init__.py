"""Batch workload manager adapters: a Slurm CLI driver and a cluster simulator."""

from taskfabric.scheduler.base import (
    LEGAL_TRANSITIONS,
    ClusterSnapshot,
    JobState,
    SchedulerAdapter,
    SchedulerJob,
)
from taskfabric.scheduler.simulator import SimEvent, SimulatedCluster
from taskfabric.scheduler.slurm import SlurmCLI

__all__ = [
    "LEGAL_TRANSITIONS",
    "ClusterSnapshot",
    "JobState",
    "SchedulerAdapter",
    "SchedulerJob",
    "SimEvent",
    "SimulatedCluster",
    "SlurmCLI",
]
