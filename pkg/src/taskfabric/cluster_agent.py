"""Cluster agent: keeps a batch scheduler's queue supplied from the ``-new`` topic.

Each cycle is strictly ordered: snapshot -> poll -> admit/submit -> reconcile ->
enforce timeouts -> commit. A ``-new`` record's offset is committed only once its
task is recorded in the in-flight journal or has reached a terminal publish, so a
restarted agent replays the journal and re-reads everything else.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from taskfabric.broker import BrokerRecord, CommitPosition, CommitTracker, ensure_topics
from taskfabric.channels import Publisher
from taskfabric.config import DeploymentConfig
from taskfabric.errors import (
    BrokerUnavailableError,
    DecodeError,
    RebalanceNotice,
    RetriableError,
    SubmissionRejectedError,
    UnknownJobError,
    ValidationError,
)
from taskfabric.model import (
    AgentIdentity,
    AgentKind,
    CoreStatus,
    ErrorPhase,
    TaskSpec,
    canonical_json,
    decode_message,
    now_ms,
    validate_task_id,
)
from taskfabric.runner import ENV_AGENT, ENV_WORKDIR, EXIT_PENDING, flush_pending, launch, write_params
from taskfabric.scheduler import ClusterSnapshot, JobState, SchedulerJob, SimulatedCluster, SlurmCLI

log = logging.getLogger(__name__)

JOURNAL_FILE = "inflight.journal"


@dataclass
class InFlightEntry:
    spec: TaskSpec
    scheduler_job_id: str
    phase: CoreStatus = CoreStatus.SUBMITTED
    deadline_ms: int | None = None
    broker_ack: CommitPosition | None = None

    @property
    def queued(self) -> bool:
        return self.phase is not CoreStatus.RUNNING

    def to_json(self) -> dict:
        ack = self.broker_ack
        return {
            "spec": self.spec.to_wire(),
            "scheduler_job_id": self.scheduler_job_id,
            "phase": self.phase.value,
            "deadline_ms": self.deadline_ms,
            "broker_ack": None if ack is None else [ack.group, ack.topic, ack.partition, ack.next_offset],
        }

    @classmethod
    def from_json(cls, obj: dict) -> InFlightEntry:
        ack = obj.get("broker_ack")
        return cls(
            spec=decode_message(canonical_json(obj["spec"])),
            scheduler_job_id=obj["scheduler_job_id"],
            phase=CoreStatus(obj["phase"]),
            deadline_ms=obj.get("deadline_ms"),
            broker_ack=None if ack is None else CommitPosition(*ack),
        )


@dataclass(frozen=True)
class AdmissionBudget:
    free_slots: int
    oversubscribe_slots: int
    in_flight_count: int

    @property
    def remaining(self) -> int:
        return max(0, self.free_slots + self.oversubscribe_slots - self.in_flight_count)


def admission_slots(snapshot: ClusterSnapshot, pending_specs: Sequence[TaskSpec]) -> int:
    """How many leading pending tasks fit into the snapshot's free CPUs and GPUs.

    For homogeneous requests of ``c`` CPUs and ``g`` GPUs this equals
    ``min(cpus_free // c, gpus_free // g)``; for mixed requests it is a first-fit
    estimate over the queue order.
    """
    cpus, gpus = snapshot.cpus_free, snapshot.gpus_free
    slots = 0
    for spec in pending_specs:
        r = spec.resources
        if r.cpus > cpus or r.gpus > gpus:
            break
        cpus -= r.cpus
        gpus -= r.gpus
        slots += 1
    return slots


def queued_in_flight(snapshot: ClusterSnapshot, in_flight: Sequence[InFlightEntry]) -> int:
    """In-flight tasks still waiting for resources.

    Entry phases are refreshed only by reconcile, which runs after admission, so a
    job that started since the last cycle still looks queued. The snapshot's pending
    count caps the stale figure.
    """
    return min(sum(1 for e in in_flight if e.queued), snapshot.queued_jobs)


def compute_admission(
    snapshot: ClusterSnapshot,
    pending_specs: Sequence[TaskSpec],
    in_flight: Sequence[InFlightEntry],
    config: DeploymentConfig,
) -> list[TaskSpec]:
    """Longest prefix of ``pending_specs`` that keeps the queue oversubscribed by a fixed headroom.

    Only in-flight tasks still waiting in the scheduler queue count against the
    budget; running ones already show up as occupied resources in the snapshot.
    """
    budget = AdmissionBudget(
        free_slots=admission_slots(snapshot, pending_specs),
        oversubscribe_slots=config.oversubscribe_slots,
        in_flight_count=queued_in_flight(snapshot, in_flight),
    )
    return list(pending_specs[: budget.remaining])


Coord = tuple[str, int, int]


class InFlightJournal:
    """Append-only JSON-lines journal of in-flight entries, replayed on start.

    Besides the entries it remembers the ``-new`` coordinates of records whose task
    already finished, so a redelivery of such a record is not executed again.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.settled: set[Coord] = set()

    def replay(self) -> dict[str, InFlightEntry]:
        entries: dict[str, InFlightEntry] = {}
        if not self.path.exists():
            return entries
        for line in self.path.read_text(encoding="utf-8").splitlines():
            try:
                item = json.loads(line)
            except json.JSONDecodeError:
                log.warning("ignoring torn journal line in %s", self.path)
                continue
            if item["op"] == "put":
                entry = InFlightEntry.from_json(item["entry"])
                entries[entry.spec.task_id] = entry
            elif item["op"] == "del":
                entries.pop(item["task_id"], None)
            if item.get("settled"):
                self.settled.add(tuple(item["settled"]))
        return entries

    def compact(self, entries: dict[str, InFlightEntry]) -> None:
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for task_id in sorted(entries):
                fh.write(json.dumps({"op": "put", "entry": entries[task_id].to_json()}, sort_keys=True) + "\n")
            for coord in sorted(self.settled):
                fh.write(json.dumps({"op": "settle", "settled": list(coord)}, sort_keys=True) + "\n")
        os.replace(tmp, self.path)

    def _append(self, item: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(item, sort_keys=True) + "\n")
            fh.flush()

    def put(self, entry: InFlightEntry) -> None:
        self._append({"op": "put", "entry": entry.to_json()})

    def remove(self, task_id: str, settled: Coord | None = None) -> None:
        item = {"op": "del", "task_id": task_id}
        if settled is not None:
            item["settled"] = list(settled)
            self.settled.add(settled)
        self._append(item)

    def settle(self, coord: Coord) -> None:
        self.settled.add(coord)
        self._append({"op": "settle", "settled": list(coord)})

    def prune(self, committed: Callable[[str, int], int]) -> None:
        """Forget coordinates the group has committed past; they can no longer be redelivered."""
        self.settled = {c for c in self.settled if c[2] >= committed(c[0], c[1])}


@dataclass
class CycleReport:
    now_ms: int
    polled: int = 0
    submitted: list[str] = field(default_factory=list)
    adopted: list[str] = field(default_factory=list)
    rejected: list[str] = field(default_factory=list)
    status_changes: list[tuple[str, str]] = field(default_factory=list)
    finished: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    timeouts: list[str] = field(default_factory=list)
    committed: list[CommitPosition] = field(default_factory=list)
    retriable_errors: list[str] = field(default_factory=list)


class ClusterAgent:
    def __init__(
        self,
        config: DeploymentConfig,
        broker,
        adapter,
        *,
        name: str,
        workdir: str | Path | None = None,
        create_topics: bool = True,
    ):
        self.config = config
        self.broker = broker
        self.adapter = adapter
        self.identity = AgentIdentity(AgentKind.CLUSTER, name)
        self.topics = config.topics
        self.workdir = Path(workdir) if workdir is not None else config.workdir_path
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.publisher = Publisher(broker, self.topics, self.identity)
        self.journal = InFlightJournal(self.workdir / JOURNAL_FILE)
        self.inflight: dict[str, InFlightEntry] = self.journal.replay()
        self.backlog: list[tuple[BrokerRecord, TaskSpec]] = []
        if create_topics:
            ensure_topics(broker, self.topics, config.partitions_new, config.partitions_other)
        self.journal.prune(self._committed)
        self.journal.compact(self.inflight)
        self.subscription = broker.subscribe(config.cluster_group, [self.topics.new], member_id=name)
        self.tracker = CommitTracker(config.cluster_group)
        if self.inflight:
            log.info("%s recovered %d in-flight tasks from journal", name, len(self.inflight))

    @property
    def name(self) -> str:
        return self.identity.name

    # helpers ------------------------------------------------------------

    def launch_command(self, spec: TaskSpec) -> str:
        config_path = self.config.source_path or str(self.workdir / "taskfabric.cfg")
        return (
            f"{self.config.runner_command} --config {shlex.quote(config_path)} "
            f"--task-id {shlex.quote(spec.task_id)} --script {shlex.quote(spec.script)}"
        )

    def launch_env(self, spec: TaskSpec) -> dict[str, str]:
        return {ENV_AGENT: str(self.identity), ENV_WORKDIR: str(self.workdir)}

    def _handle_rebalance(self, notice: RebalanceNotice) -> None:
        keep = self.subscription.assigned()
        log.info("%s rebalanced; now holds %s", self.name, sorted(keep))
        self.backlog = [(r, s) for r, s in self.backlog if (r.topic, r.partition) in keep]
        self.tracker.drop_partitions(keep)

    def _add(self, entry: InFlightEntry) -> None:
        self.inflight[entry.spec.task_id] = entry
        self.journal.put(entry)

    def _committed(self, topic: str, partition: int) -> int:
        return self.broker.committed(self.config.cluster_group, topic, partition)

    def _remove(self, task_id: str) -> None:
        entry = self.inflight.pop(task_id, None)
        ack = entry.broker_ack if entry is not None else None
        coord = None
        if ack is not None and self._committed(ack.topic, ack.partition) < ack.next_offset:
            coord = (ack.topic, ack.partition, ack.next_offset - 1)
        self.journal.remove(task_id, coord)

    # cycle --------------------------------------------------------------

    def run_cycle(self, now_ms: int) -> CycleReport:
        report = CycleReport(now_ms)
        try:
            snapshot = self.adapter.snapshot()
        except RetriableError as exc:
            report.retriable_errors.append(f"snapshot: {exc}")
            snapshot = None
        if snapshot is not None:
            self._poll(snapshot, report)
            self._admit(snapshot, now_ms, report)
        self.reconcile(now_ms, report)
        report.timeouts = self.enforce_timeouts(now_ms)
        self._commit(report)
        return report

    def _poll(self, snapshot: ClusterSnapshot, report: CycleReport) -> None:
        queued = queued_in_flight(snapshot, list(self.inflight.values()))
        wanted = max(0, snapshot.cpus_free + self.config.oversubscribe_slots - queued) - len(self.backlog)
        if wanted <= 0:
            return
        for _ in range(2):
            try:
                records = self.subscription.poll(max_records=wanted, timeout_ms=0)
                break
            except RebalanceNotice as notice:
                self._handle_rebalance(notice)
            except BrokerUnavailableError as exc:
                report.retriable_errors.append(f"poll: {exc}")
                return
        else:
            return
        report.polled = len(records)
        queued_ids = {s.task_id for _, s in self.backlog}
        for record in records:
            self.tracker.track(record)
            if (record.topic, record.partition, record.offset) in self.journal.settled:
                log.info("record %s[%d]@%d already handled; skipping redelivery", record.topic, record.partition,
                         record.offset)
                self.tracker.settle(record)
                continue
            try:
                spec = decode_message(record.value)
                if not isinstance(spec, TaskSpec):
                    raise DecodeError(f"expected a task message, got {type(spec).__name__}")
            except DecodeError as exc:
                log.error("undecodable record %s[%d]@%d: %s", record.topic, record.partition, record.offset, exc)
                self._reject_record(record, str(exc), report.now_ms)
                continue
            if spec.task_id in self.inflight or spec.task_id in queued_ids:
                log.info("task %s is already tracked; skipping redelivery", spec.task_id)
                self.tracker.settle(record)
                continue
            queued_ids.add(spec.task_id)
            self.backlog.append((record, spec))

    def _reject_record(self, record: BrokerRecord, message: str, now: int) -> None:
        task_id = None
        if record.key is not None:
            try:
                task_id = validate_task_id(record.key.decode("utf-8"))
            except (UnicodeDecodeError, ValidationError):
                task_id = None
        if task_id is not None:
            try:
                self.publisher.error(task_id, ErrorPhase.SUBMIT, f"undecodable task message: {message}", now)
            except BrokerUnavailableError:
                return
            self.journal.settle((record.topic, record.partition, record.offset))
        self.tracker.settle(record)

    def _admit(self, snapshot: ClusterSnapshot, now: int, report: CycleReport) -> None:
        admitted = compute_admission(snapshot, [s for _, s in self.backlog], list(self.inflight.values()),
                                     self.config)
        done = 0
        for record, spec in self.backlog[: len(admitted)]:
            try:
                self._submit_one(record, spec, now, report)
            except RetriableError as exc:
                report.retriable_errors.append(f"submit {spec.task_id}: {exc}")
                break
            done += 1
        self.backlog = self.backlog[done:]

    def _submit_one(self, record: BrokerRecord, spec: TaskSpec, now: int, report: CycleReport) -> None:
        ack = self.subscription.position_after(record)
        existing = [j for j in self.adapter.find_jobs(spec.task_id) if not j.state.terminal]
        if existing:
            job = existing[-1]
            log.info("adopting existing scheduler job %s for %s", job.scheduler_job_id, spec.task_id)
            self._add(InFlightEntry(spec, job.scheduler_job_id, CoreStatus.SUBMITTED, None, ack))
            report.adopted.append(spec.task_id)
            self.tracker.settle(record)
            return
        write_params(self.workdir, spec.task_id, spec.params)
        try:
            job = self.adapter.submit(spec, self.launch_command(spec), self.launch_env(spec))
        except SubmissionRejectedError as exc:
            self.publisher.error(spec.task_id, ErrorPhase.SUBMIT, str(exc), now)
            self.journal.settle((record.topic, record.partition, record.offset))
            report.rejected.append(spec.task_id)
            self.tracker.settle(record)
            return
        self._add(InFlightEntry(spec, job.scheduler_job_id, CoreStatus.SUBMITTED, None, ack))
        self.tracker.settle(record)
        report.submitted.append(spec.task_id)
        try:
            self.publisher.status(spec.task_id, CoreStatus.SUBMITTED, now, job.scheduler_job_id)
        except BrokerUnavailableError as exc:
            report.retriable_errors.append(f"publish {spec.task_id}: {exc}")
            return
        report.status_changes.append((spec.task_id, CoreStatus.SUBMITTED.value))

    def reconcile(self, now: int, report: CycleReport | None = None) -> None:
        report = report if report is not None else CycleReport(now)
        for task_id in sorted(self.inflight):
            entry = self.inflight[task_id]
            try:
                job = self.adapter.job_state(entry.scheduler_job_id)
            except UnknownJobError:
                log.error("scheduler forgot job %s of %s", entry.scheduler_job_id, task_id)
                self.publisher.error(task_id, ErrorPhase.INTERNAL,
                                     f"scheduler job {entry.scheduler_job_id} is unknown to the scheduler", now)
                self._remove(task_id)
                report.failed.append(task_id)
                continue
            except RetriableError as exc:
                report.retriable_errors.append(f"state {task_id}: {exc}")
                continue
            try:
                self._reconcile_one(entry, job, now, report)
            except BrokerUnavailableError as exc:
                report.retriable_errors.append(f"publish {task_id}: {exc}")

    def _reconcile_one(self, entry: InFlightEntry, job: SchedulerJob, now: int, report: CycleReport) -> None:
        task_id = entry.spec.task_id
        if job.state is JobState.PENDING and entry.phase is CoreStatus.SUBMITTED:
            self.publisher.status(task_id, CoreStatus.WAITING, now, job.scheduler_job_id)
            entry.phase = CoreStatus.WAITING
            self.journal.put(entry)
            report.status_changes.append((task_id, CoreStatus.WAITING.value))
        elif job.state is JobState.RUNNING and entry.phase is not CoreStatus.RUNNING:
            started = job.start_time_ms if job.start_time_ms is not None else now
            timeout_s = entry.spec.effective_timeout_s(self.config.default_timeout_s)
            self.publisher.status(task_id, CoreStatus.RUNNING, max(now, started), job.scheduler_job_id)
            entry.phase = CoreStatus.RUNNING
            entry.deadline_ms = started + timeout_s * 1000
            self.journal.put(entry)
            report.status_changes.append((task_id, CoreStatus.RUNNING.value))
        elif job.state is JobState.COMPLETED:
            # the runner itself published DONE and the result; only a spilled result needs help
            if not flush_pending(self.broker, self.workdir, task_id):
                return
            self._remove(task_id)
            report.finished.append(task_id)
        elif job.state is JobState.FAILED:
            flush_pending(self.broker, self.workdir, task_id)
            phase = ErrorPhase.RUN if job.start_time_ms is not None else ErrorPhase.LAUNCH
            self.publisher.error(task_id, phase, f"scheduler job {job.scheduler_job_id} failed", now)
            self._remove(task_id)
            report.failed.append(task_id)
        elif job.state is JobState.CANCELLED:
            self.publisher.error(task_id, ErrorPhase.INTERNAL,
                                 f"scheduler job {job.scheduler_job_id} was cancelled outside the agent", now)
            self.publisher.status(task_id, CoreStatus.CANCELLED, now, job.scheduler_job_id)
            self._remove(task_id)
            report.failed.append(task_id)

    def enforce_timeouts(self, now: int) -> list[str]:
        cancelled = []
        for task_id in sorted(self.inflight):
            entry = self.inflight[task_id]
            if entry.phase is not CoreStatus.RUNNING or entry.deadline_ms is None or now <= entry.deadline_ms:
                continue
            try:
                job = self.adapter.cancel(entry.scheduler_job_id)
            except RetriableError as exc:
                log.warning("cancel of %s failed, retrying next cycle: %s", task_id, exc)
                continue
            if job.state in (JobState.COMPLETED, JobState.FAILED):
                continue  # finished just before the deadline check; reconcile handles it
            timeout_s = entry.spec.effective_timeout_s(self.config.default_timeout_s)
            try:
                self.publisher.timeout(task_id, timeout_s, now, entry.scheduler_job_id)
            except BrokerUnavailableError:
                continue
            self._remove(task_id)
            cancelled.append(task_id)
        return cancelled

    def _commit(self, report: CycleReport) -> None:
        positions = self.tracker.positions()
        if not positions:
            return
        try:
            self.subscription.commit(positions)
            report.committed = positions
            if self.journal.settled:
                self.journal.prune(self._committed)
        except RebalanceNotice as notice:
            self._handle_rebalance(notice)
            keep = self.subscription.assigned()
            retained = [p for p in positions if (p.topic, p.partition) in keep]
            if retained:
                self.subscription.commit(retained)
                report.committed = retained
        except BrokerUnavailableError as exc:
            # positions were consumed from the tracker; fall back to redelivery semantics
            report.retriable_errors.append(f"commit: {exc}")

    # lifecycle ----------------------------------------------------------

    def close(self) -> None:
        try:
            self.subscription.close()
        except Exception:  # noqa: BLE001 - shutdown is best effort
            log.debug("unsubscribe failed", exc_info=True)

    def serve(self, *, once: bool = False, stop: threading.Event | None = None,
              clock: Callable[[], int] = now_ms) -> None:
        stop = stop or threading.Event()
        try:
            while not stop.is_set():
                now = clock()
                if isinstance(self.adapter, SimulatedCluster):
                    self.adapter.advance_to(now)
                report = self.run_cycle(now)
                if report.submitted or report.timeouts or report.retriable_errors:
                    log.info("cycle: submitted=%d timeouts=%d inflight=%d errors=%s", len(report.submitted),
                             len(report.timeouts), len(self.inflight), report.retriable_errors)
                if once:
                    break
                stop.wait(self.config.poll_interval_s)
        finally:
            self.close()


def inline_executor(config: DeploymentConfig, broker, workdir: str | Path, agent: AgentIdentity):
    """Simulator executor running the task runner in-process at the job's virtual end time."""

    def execute(job: SchedulerJob, spec: TaskSpec, command: str, env, end_ms: int) -> int:
        code = launch(config, spec.task_id, spec.script, broker=broker, agent=agent, workdir=workdir,
                      clock=lambda: end_ms, scheduler_job_id=job.scheduler_job_id, spill_wait_s=0)
        return 0 if code == EXIT_PENDING else code

    return execute


def build_adapter(config: DeploymentConfig, broker, *, name: str, workdir: str | Path | None = None,
                  start_ms: int | None = None):
    workdir = Path(workdir) if workdir is not None else config.workdir_path
    if config.scheduler == "slurm":
        return SlurmCLI(workdir, command_timeout_s=config.command_timeout_s)
    if not config.sim_nodes:
        raise ValueError("scheduler = sim requires at least one sim.node.<i> entry")
    agent = AgentIdentity(AgentKind.CLUSTER, name)
    return SimulatedCluster(
        config.sim_nodes,
        start_ms=now_ms() if start_ms is None else start_ms,
        executor=inline_executor(config, broker, workdir, agent),
        name=name,
    )
