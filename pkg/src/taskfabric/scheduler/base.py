from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Protocol

from taskfabric.model import NodeSpec, TaskSpec


class JobState(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"
    CANCELLED = "CANCELLED"

    @property
    def terminal(self) -> bool:
        return self in (JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED)


LEGAL_TRANSITIONS = {
    JobState.PENDING: {JobState.RUNNING, JobState.CANCELLED},
    JobState.RUNNING: {JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED},
    JobState.COMPLETED: set(),
    JobState.FAILED: set(),
    JobState.CANCELLED: set(),
}


@dataclass(frozen=True)
class SchedulerJob:
    scheduler_job_id: str
    task_id: str
    state: JobState
    submit_time_ms: int
    start_time_ms: int | None = None
    end_time_ms: int | None = None
    node: str | None = None


@dataclass(frozen=True)
class ClusterSnapshot:
    nodes: tuple[NodeSpec, ...]
    cpus_free: int
    gpus_free: int
    memory_mb_free: int
    queued_jobs: int
    running_jobs: int
    taken_at_ms: int

    @property
    def cpus_total(self) -> int:
        return sum(n.cpus_total for n in self.nodes)

    @property
    def gpus_total(self) -> int:
        return sum(n.gpus_total for n in self.nodes)

    @property
    def memory_mb_total(self) -> int:
        return sum(n.memory_mb_total for n in self.nodes)


class SchedulerAdapter(Protocol):
    """Uniform surface over a batch workload manager."""

    def snapshot(self) -> ClusterSnapshot: ...

    def submit(self, spec: TaskSpec, command: str, env: Mapping[str, str]) -> SchedulerJob: ...

    def job_state(self, scheduler_job_id: str) -> SchedulerJob: ...

    def cancel(self, scheduler_job_id: str) -> SchedulerJob: ...

    def find_jobs(self, name: str) -> list[SchedulerJob]:
        """Jobs whose job name equals ``name`` (the task id), oldest first."""
        ...
