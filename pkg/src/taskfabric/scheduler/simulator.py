"""Deterministic discrete-event model of a batch-scheduled cluster.

Scheduling is FIFO first-fit without backfill: at every scheduling pass the
queue head is placed on the first node (declaration order) with enough free
CPUs, GPUs and memory; when the head does not fit the pass stops.

Virtual job durations come from the ``_sim_duration_ms`` task parameter
(default 1000 ms). A truthy ``_sim_fail`` parameter makes the job end FAILED.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Mapping

from taskfabric.errors import SubmissionRejectedError, UnknownJobError
from taskfabric.model import NodeSpec, TaskSpec
from taskfabric.scheduler.base import ClusterSnapshot, JobState, SchedulerJob

log = logging.getLogger(__name__)

DEFAULT_DURATION_MS = 1000
DURATION_PARAM = "_sim_duration_ms"
FAIL_PARAM = "_sim_fail"


@dataclass(frozen=True)
class SimEvent:
    time_ms: int
    scheduler_job_id: str
    task_id: str
    old_state: JobState | None
    new_state: JobState
    node: str | None = None


@dataclass
class _Job:
    job_id: str
    seq: int
    spec: TaskSpec
    command: str
    env: dict[str, str]
    duration_ms: int
    fail: bool
    submit_ms: int
    state: JobState = JobState.PENDING
    start_ms: int | None = None
    end_ms: int | None = None
    node: int | None = None
    exit_code: int | None = None

    def view(self, nodes: list[NodeSpec]) -> SchedulerJob:
        return SchedulerJob(
            scheduler_job_id=self.job_id,
            task_id=self.spec.task_id,
            state=self.state,
            submit_time_ms=self.submit_ms,
            start_time_ms=self.start_ms,
            end_time_ms=self.end_ms,
            node=None if self.node is None else nodes[self.node].name,
        )


@dataclass
class _Free:
    cpus: int
    gpus: int
    memory_mb: int

    def fits(self, spec: TaskSpec) -> bool:
        r = spec.resources
        return r.cpus <= self.cpus and r.gpus <= self.gpus and r.memory_mb <= self.memory_mb

    def take(self, spec: TaskSpec, sign: int = 1) -> None:
        r = spec.resources
        self.cpus -= sign * r.cpus
        self.gpus -= sign * r.gpus
        self.memory_mb -= sign * r.memory_mb


# Called with (job view, spec, command, env, end time) when a job's duration elapses;
# a non-zero return value marks the job FAILED.
Executor = Callable[[SchedulerJob, TaskSpec, str, Mapping[str, str], int], int]


class SimulatedCluster:
    def __init__(self, nodes: list[NodeSpec] | tuple[NodeSpec, ...], *, start_ms: int = 0,
                 executor: Executor | None = None, name: str = "sim"):
        if not nodes:
            raise ValueError("a simulated cluster needs at least one node")
        self.name = name
        self.nodes = list(nodes)
        self.executor = executor
        self._now = start_ms
        self._free = [_Free(n.cpus_total, n.gpus_total, n.memory_mb_total) for n in self.nodes]
        self._jobs: dict[str, _Job] = {}
        self._queue: list[_Job] = []
        self._running: list[_Job] = []
        self._seq = 0
        self._lock = threading.RLock()
        self.event_log: list[SimEvent] = []

    @property
    def now_ms(self) -> int:
        return self._now

    # adapter surface ----------------------------------------------------

    def snapshot(self) -> ClusterSnapshot:
        with self._lock:
            return ClusterSnapshot(
                nodes=tuple(self.nodes),
                cpus_free=sum(f.cpus for f in self._free),
                gpus_free=sum(f.gpus for f in self._free),
                memory_mb_free=sum(f.memory_mb for f in self._free),
                queued_jobs=len(self._queue),
                running_jobs=len(self._running),
                taken_at_ms=self._now,
            )

    def submit(self, spec: TaskSpec, command: str, env: Mapping[str, str] | None = None) -> SchedulerJob:
        r = spec.resources
        if not any(
            r.cpus <= n.cpus_total and r.gpus <= n.gpus_total and r.memory_mb <= n.memory_mb_total
            for n in self.nodes
        ):
            raise SubmissionRejectedError(
                f"unsatisfiable resources for {spec.task_id}: cpus={r.cpus} gpus={r.gpus} "
                f"memory_mb={r.memory_mb} exceed every node"
            )
        duration = spec.params.get(DURATION_PARAM, DEFAULT_DURATION_MS)
        if isinstance(duration, bool) or not isinstance(duration, (int, float)) or duration <= 0:
            raise SubmissionRejectedError(f"{DURATION_PARAM} must be a positive number")
        with self._lock:
            self._seq += 1
            job = _Job(
                job_id=str(self._seq),
                seq=self._seq,
                spec=spec,
                command=command,
                env=dict(env or {}),
                duration_ms=int(duration),
                fail=bool(spec.params.get(FAIL_PARAM, False)),
                submit_ms=self._now,
            )
            self._jobs[job.job_id] = job
            self._queue.append(job)
            self._record(job, None, JobState.PENDING)
            return job.view(self.nodes)

    def job_state(self, scheduler_job_id: str) -> SchedulerJob:
        with self._lock:
            return self._get(scheduler_job_id).view(self.nodes)

    def cancel(self, scheduler_job_id: str) -> SchedulerJob:
        with self._lock:
            job = self._get(scheduler_job_id)
            if job.state is JobState.PENDING:
                self._queue.remove(job)
                self._finish(job, JobState.CANCELLED)
            elif job.state is JobState.RUNNING:
                self._running.remove(job)
                self._free[job.node].take(job.spec, -1)
                self._finish(job, JobState.CANCELLED)
            return job.view(self.nodes)

    def find_jobs(self, name: str) -> list[SchedulerJob]:
        with self._lock:
            return [j.view(self.nodes) for j in self._jobs.values() if j.spec.task_id == name]

    def jobs(self) -> list[SchedulerJob]:
        with self._lock:
            return [j.view(self.nodes) for j in self._jobs.values()]

    def job_command(self, scheduler_job_id: str) -> tuple[str, dict[str, str]]:
        with self._lock:
            job = self._get(scheduler_job_id)
            return job.command, dict(job.env)

    # virtual clock ------------------------------------------------------

    def sim_advance(self, dt_ms: int) -> list[SimEvent]:
        """Advance the virtual clock by ``dt_ms`` and return the state changes that occurred."""
        if dt_ms <= 0:
            raise ValueError("dt_ms must be positive")
        return self.advance_to(self._now + dt_ms)

    def advance_to(self, target_ms: int) -> list[SimEvent]:
        with self._lock:
            mark = len(self.event_log)
            self._schedule()
            while True:
                ends = [j.start_ms + j.duration_ms for j in self._running]
                if not ends or min(ends) > target_ms:
                    break
                self._now = min(ends)
                for job in sorted((j for j in self._running if j.start_ms + j.duration_ms == self._now),
                                  key=lambda j: j.seq):
                    self._complete(job)
                self._schedule()
            self._now = max(self._now, target_ms)
            events = self.event_log[mark:]
            return sorted(events, key=lambda e: (e.time_ms, int(e.scheduler_job_id)))

    # internals ----------------------------------------------------------

    def _get(self, scheduler_job_id: str) -> _Job:
        job = self._jobs.get(scheduler_job_id)
        if job is None:
            raise UnknownJobError(f"unknown scheduler job id {scheduler_job_id!r}")
        return job

    def _record(self, job: _Job, old: JobState | None, new: JobState) -> None:
        node = None if job.node is None else self.nodes[job.node].name
        self.event_log.append(SimEvent(self._now, job.job_id, job.spec.task_id, old, new, node))

    def _finish(self, job: _Job, state: JobState) -> None:
        old = job.state
        job.state = state
        job.end_ms = self._now
        self._record(job, old, state)

    def _schedule(self) -> None:
        while self._queue:
            head = self._queue[0]
            slot = next((i for i, free in enumerate(self._free) if free.fits(head.spec)), None)
            if slot is None:
                return
            self._queue.pop(0)
            self._free[slot].take(head.spec)
            head.node = slot
            head.start_ms = self._now
            head.state = JobState.RUNNING
            self._running.append(head)
            self._record(head, JobState.PENDING, JobState.RUNNING)

    def _complete(self, job: _Job) -> None:
        self._running.remove(job)
        self._free[job.node].take(job.spec, -1)
        ok = not job.fail
        if ok and self.executor is not None:
            view = SchedulerJob(job.job_id, job.spec.task_id, JobState.RUNNING, job.submit_ms, job.start_ms,
                                None, self.nodes[job.node].name)
            try:
                job.exit_code = self.executor(view, job.spec, job.command, job.env, self._now)
            except Exception:
                log.exception("executor crashed for job %s", job.job_id)
                job.exit_code = -1
            ok = job.exit_code == 0
        self._finish(job, JobState.COMPLETED if ok else JobState.FAILED)
