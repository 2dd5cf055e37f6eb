"""Worker agent: runs tasks directly on a workstation in a fixed number of process slots.

No scheduler queue exists here, so tasks go straight to RUNNING. Each task runs
the task runner as a child process; the runner publishes DONE/result itself and
the agent reports only what the child could not (crashes, spawn failures,
timeouts).
"""

from __future__ import annotations

import logging
import os
import socket
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from taskfabric.broker import BrokerRecord, CommitTracker, ensure_topics
from taskfabric.channels import Publisher
from taskfabric.config import DeploymentConfig, dump_config
from taskfabric.errors import BrokerUnavailableError, DecodeError, RebalanceNotice
from taskfabric.model import (
    AgentIdentity,
    AgentKind,
    CoreStatus,
    ErrorPhase,
    TaskSpec,
    decode_message,
    now_ms,
    tail_text,
)
from taskfabric.runner import (
    ENV_AGENT,
    ENV_WORKDIR,
    EXIT_FAILED,
    EXIT_OK,
    EXIT_PENDING,
    flush_pending,
    task_dir,
    write_params,
)

log = logging.getLogger(__name__)

STDERR_FILE = "stderr.log"

# (spec, argv, env, stderr path) -> process handle with poll()/kill()/wait()/returncode
Launcher = Callable[[TaskSpec, list, dict, Path], Any]


def popen_launcher(spec: TaskSpec, argv: list[str], env: dict[str, str], stderr_path: Path):
    with open(stderr_path, "wb") as err:
        return subprocess.Popen(argv, env=env, stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL, stderr=err)


@dataclass
class WorkerSlotState:
    slot_index: int
    occupant: str | None = None
    started_ms: int | None = None
    deadline_ms: int | None = None
    process: Any = None
    spec: TaskSpec | None = None

    def clear(self) -> None:
        self.occupant = self.started_ms = self.deadline_ms = self.process = self.spec = None


@dataclass
class WorkerCycleReport:
    now_ms: int
    launched: list[str] = field(default_factory=list)
    finished: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    timeouts: list[str] = field(default_factory=list)
    retriable_errors: list[str] = field(default_factory=list)


class WorkerAgent:
    def __init__(
        self,
        config: DeploymentConfig,
        broker,
        *,
        name: str | None = None,
        slots: int | None = None,
        workdir: str | Path | None = None,
        launcher: Launcher = popen_launcher,
        create_topics: bool = True,
    ):
        self.config = config
        self.broker = broker
        self.identity = AgentIdentity(AgentKind.WORKER, name or socket.gethostname() or "worker")
        self.topics = config.topics
        self.workdir = Path(workdir) if workdir is not None else config.workdir_path
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.max_slots = slots or config.max_worker_slots
        self.slots = [WorkerSlotState(i) for i in range(self.max_slots)]
        self.launcher = launcher
        self.publisher = Publisher(broker, self.topics, self.identity)
        self.unflushed: set[str] = set()
        if create_topics:
            ensure_topics(broker, self.topics, config.partitions_new, config.partitions_other)
        self.subscription = broker.subscribe(config.worker_group, [self.topics.new],
                                             member_id=f"worker-{self.identity.name}")
        self.tracker = CommitTracker(config.worker_group)
        self.config_path = self._child_config_path()

    def _child_config_path(self) -> Path:
        if self.config.source_path:
            return Path(self.config.source_path)
        # materialize an equivalent config with absolute paths for the children
        endpoint = self.config.broker_endpoint
        scheme, _, rest = endpoint.partition(":")
        if scheme == "inproc":
            endpoint = f"inproc:{self.config.resolve(rest).resolve()}"
        cfg = self.config.replace(broker_endpoint=endpoint, workdir=str(self.workdir.resolve()),
                                  datadir=str(self.config.datadir_path.resolve()))
        path = self.workdir / "worker.cfg"
        path.write_text(dump_config(cfg), encoding="utf-8")
        return path

    def capacity(self) -> int:
        return sum(1 for s in self.slots if s.occupant is None)

    def occupied(self) -> list[WorkerSlotState]:
        return [s for s in self.slots if s.occupant is not None]

    def run_cycle(self, now_ms: int) -> WorkerCycleReport:
        report = WorkerCycleReport(now_ms)
        self._retry_flushes()
        self._reap(now_ms, report)
        self._enforce_deadlines(now_ms, report)
        self._poll_and_launch(now_ms, report)
        positions = self.tracker.positions()
        if positions:
            try:
                self.subscription.commit(positions)
            except RebalanceNotice:
                keep = self.subscription.assigned()
                self.tracker.drop_partitions(keep)
                retained = [p for p in positions if (p.topic, p.partition) in keep]
                if retained:
                    self.subscription.commit(retained)
            except BrokerUnavailableError as exc:
                report.retriable_errors.append(f"commit: {exc}")
        return report

    def _retry_flushes(self) -> None:
        for task_id in sorted(self.unflushed):
            if flush_pending(self.broker, self.workdir, task_id):
                self.unflushed.discard(task_id)

    def _stderr_tail(self, task_id: str) -> str | None:
        path = task_dir(self.workdir, task_id) / STDERR_FILE
        try:
            return tail_text(path.read_text(encoding="utf-8", errors="replace")) or None
        except FileNotFoundError:
            return None

    def _reap(self, now: int, report: WorkerCycleReport) -> None:
        for slot in self.occupied():
            code = slot.process.poll()
            if code is None:
                continue
            task_id = slot.occupant
            if code == EXIT_OK or code == EXIT_FAILED:
                (report.finished if code == EXIT_OK else report.failed).append(task_id)
            elif code == EXIT_PENDING:
                if not flush_pending(self.broker, self.workdir, task_id):
                    self.unflushed.add(task_id)
                report.finished.append(task_id)
            else:
                try:
                    self.publisher.error(task_id, ErrorPhase.RUN, f"payload process exited with code {code}", now,
                                         detail=self._stderr_tail(task_id))
                except BrokerUnavailableError as exc:
                    report.retriable_errors.append(f"publish {task_id}: {exc}")
                    continue
                report.failed.append(task_id)
            slot.clear()

    def _enforce_deadlines(self, now: int, report: WorkerCycleReport) -> None:
        for slot in sorted(self.occupied(), key=lambda s: s.occupant):
            if slot.deadline_ms is None or now <= slot.deadline_ms:
                continue
            slot.process.kill()
            try:
                slot.process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                log.error("child for %s did not die after SIGKILL", slot.occupant)
            timeout_s = slot.spec.effective_timeout_s(self.config.default_timeout_s)
            try:
                self.publisher.timeout(slot.occupant, timeout_s, now)
            except BrokerUnavailableError as exc:
                report.retriable_errors.append(f"publish {slot.occupant}: {exc}")
            report.timeouts.append(slot.occupant)
            slot.clear()

    def _poll_and_launch(self, now: int, report: WorkerCycleReport) -> None:
        free = self.capacity()
        if free == 0:
            return
        records: list[BrokerRecord] = []
        for _ in range(2):
            try:
                records = self.subscription.poll(max_records=free, timeout_ms=0)
                break
            except RebalanceNotice:
                self.tracker.drop_partitions(self.subscription.assigned())
            except BrokerUnavailableError as exc:
                report.retriable_errors.append(f"poll: {exc}")
                return
        for record in records:
            self.tracker.track(record)
            try:
                spec = decode_message(record.value)
                if not isinstance(spec, TaskSpec):
                    raise DecodeError(f"expected a task message, got {type(spec).__name__}")
            except DecodeError as exc:
                log.error("dropping undecodable task record at offset %d: %s", record.offset, exc)
                self.tracker.settle(record)
                continue
            if any(s.occupant == spec.task_id for s in self.slots):
                self.tracker.settle(record)
                continue
            self._launch(spec, now, report)
            self.tracker.settle(record)

    def _launch(self, spec: TaskSpec, now: int, report: WorkerCycleReport) -> None:
        slot = next(s for s in self.slots if s.occupant is None)
        write_params(self.workdir, spec.task_id, spec.params)
        argv = [sys.executable, "-m", "taskfabric.runner", "--config", str(self.config_path),
                "--task-id", spec.task_id, "--script", spec.script]
        env = dict(os.environ)
        env[ENV_AGENT] = str(self.identity)
        env[ENV_WORKDIR] = str(self.workdir.resolve())
        self.publisher.status(spec.task_id, CoreStatus.RUNNING, now)
        try:
            process = self.launcher(spec, argv, env, task_dir(self.workdir, spec.task_id) / STDERR_FILE)
        except OSError as exc:
            self.publisher.error(spec.task_id, ErrorPhase.LAUNCH, f"could not start payload process: {exc}", now)
            report.failed.append(spec.task_id)
            return
        timeout_s = spec.effective_timeout_s(self.config.default_timeout_s)
        slot.occupant = spec.task_id
        slot.started_ms = now
        slot.deadline_ms = now + timeout_s * 1000
        slot.process = process
        slot.spec = spec
        report.launched.append(spec.task_id)

    def close(self, *, kill_children: bool = True) -> None:
        if kill_children:
            for slot in self.occupied():
                slot.process.kill()
                slot.process.wait()
        try:
            self.subscription.close()
        except Exception:  # noqa: BLE001 - shutdown is best effort
            log.debug("unsubscribe failed", exc_info=True)

    def serve(self, *, once: bool = False, stop: threading.Event | None = None,
              clock: Callable[[], int] = now_ms) -> None:
        stop = stop or threading.Event()
        try:
            while not stop.is_set():
                self.run_cycle(clock())
                if once:
                    break
                stop.wait(self.config.poll_interval_s)
        finally:
            self.close(kill_children=not once)
