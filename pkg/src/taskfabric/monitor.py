"""Monitor agent: a durable, deduplicated registry of task state plus a small REST API.

Registry merge rules are order-independent so that monitors consuming the same
records in different interleavings converge to identical state:

* a broker record is applied at most once, keyed by (topic, partition, offset);
* history is kept in canonical order (timestamp, lifecycle rank, then content)
  and identical status updates are stored once;
* terminal states are absorbing and conflicts between terminal outcomes resolve
  by precedence DONE > ERROR > CANCELLED;
* the retained result/error is the earliest one (timestamp, then encoded bytes);
  later results count as duplicates.

Persistence is an append-only journal of ingested records plus a periodic
snapshot; replay is snapshot + journal tail.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable
from urllib.parse import parse_qs, unquote, urlparse

from taskfabric.broker import BrokerRecord, CommitPosition
from taskfabric.config import DeploymentConfig
from taskfabric.errors import BrokerUnavailableError, DecodeError, RebalanceNotice
from taskfabric.model import (
    CoreStatus,
    ErrorEnvelope,
    ResultEnvelope,
    StatusKind,
    StatusUpdate,
    TaskSpec,
    canonical_json,
    decode_message,
    encode_message,
    is_terminal,
    now_ms,
    parse_status,
)

log = logging.getLogger(__name__)

JOURNAL_FILE = "monitor.journal"
SNAPSHOT_FILE = "monitor.snapshot.json"
DEAD_LETTER_FILE = "dead-letter.jsonl"
THROUGHPUT_WINDOW_MS = 10 * 60 * 1000

_LIFECYCLE_RANK = {
    CoreStatus.SUBMITTED: 0,
    CoreStatus.WAITING: 1,
    CoreStatus.RUNNING: 2,
    CoreStatus.DONE: 4,
    CoreStatus.ERROR: 4,
    CoreStatus.CANCELLED: 4,
}
_TERMINAL_PRECEDENCE = {CoreStatus.DONE: 3, CoreStatus.ERROR: 2, CoreStatus.CANCELLED: 1}


def _history_key(update: StatusUpdate) -> tuple:
    return (update.timestamp_ms, _LIFECYCLE_RANK.get(update.status, 3), encode_message(update))


def _envelope_key(env: ResultEnvelope | ErrorEnvelope) -> tuple:
    return (env.timestamp_ms, encode_message(env))


@dataclass
class TaskRecord:
    task_id: str
    latest_status: StatusKind
    history: list[StatusUpdate] = field(default_factory=list)
    result: ResultEnvelope | None = None
    error: ErrorEnvelope | None = None
    first_seen_ms: int = 0
    last_update_ms: int = 0
    duplicate_results: int = 0
    errors_seen: int = 0

    @classmethod
    def empty(cls, task_id: str, timestamp_ms: int) -> TaskRecord:
        return cls(task_id, CoreStatus.SUBMITTED, first_seen_ms=timestamp_ms, last_update_ms=timestamp_ms)

    @property
    def terminal(self) -> bool:
        return is_terminal(self.latest_status)

    def _touch(self, timestamp_ms: int) -> None:
        self.first_seen_ms = min(self.first_seen_ms, timestamp_ms)
        self.last_update_ms = max(self.last_update_ms, timestamp_ms)

    def _recompute(self) -> None:
        terminal = {u.status for u in self.history if is_terminal(u.status)}
        if self.result is not None:
            terminal.add(CoreStatus.DONE)
        if self.error is not None:
            terminal.add(CoreStatus.ERROR)
        if terminal:
            self.latest_status = max(terminal, key=_TERMINAL_PRECEDENCE.__getitem__)
        elif self.history:
            self.latest_status = self.history[-1].status

    def add_status(self, update: StatusUpdate) -> None:
        if update not in self.history:
            self.history.append(update)
            self.history.sort(key=_history_key)
        self._touch(update.timestamp_ms)
        self._recompute()

    def add_result(self, result: ResultEnvelope) -> bool:
        """Returns True when the result was a duplicate."""
        self._touch(result.timestamp_ms)
        duplicate = self.result is not None
        if self.result is None or _envelope_key(result) < _envelope_key(self.result):
            self.result = result
        if duplicate:
            self.duplicate_results += 1
        self._recompute()
        return duplicate

    def add_error(self, error: ErrorEnvelope) -> None:
        self._touch(error.timestamp_ms)
        self.errors_seen += 1
        if self.error is None or _envelope_key(error) < _envelope_key(self.error):
            self.error = error
        self._recompute()

    def to_wire(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "latest_status": str(self.latest_status),
            "history": [u.to_wire() for u in self.history],
            "result": None if self.result is None else self.result.to_wire(),
            "error": None if self.error is None else self.error.to_wire(),
            "first_seen_ms": self.first_seen_ms,
            "last_update_ms": self.last_update_ms,
            "duplicate_results": self.duplicate_results,
            "errors_seen": self.errors_seen,
        }

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> TaskRecord:
        def dec(x):
            return None if x is None else decode_message(canonical_json(x))

        rec = cls(
            task_id=obj["task_id"],
            latest_status=parse_status(obj["latest_status"]),
            history=[dec(u) for u in obj["history"]],
            result=dec(obj["result"]),
            error=dec(obj["error"]),
            first_seen_ms=obj["first_seen_ms"],
            last_update_ms=obj["last_update_ms"],
            duplicate_results=obj["duplicate_results"],
            errors_seen=obj.get("errors_seen", 0),
        )
        return rec


@dataclass(frozen=True)
class RegistryStats:
    counts: dict[str, int]
    total: int
    duplicate_results_seen: int
    throughput_per_min: float
    dead_letters: int = 0

    def to_wire(self) -> dict[str, Any]:
        return {
            "counts": dict(sorted(self.counts.items())),
            "total": self.total,
            "duplicate_results_seen": self.duplicate_results_seen,
            "throughput_per_min": self.throughput_per_min,
            "dead_letters": self.dead_letters,
        }


class Registry:
    def __init__(self):
        self.tasks: dict[str, TaskRecord] = {}
        self.positions: dict[tuple[str, int], int] = {}
        self.duplicate_results_seen = 0
        self.dead_letters = 0

    def seen(self, topic: str, partition: int, offset: int) -> bool:
        return offset < self.positions.get((topic, partition), 0)

    def apply(self, record: BrokerRecord) -> TaskRecord | None:
        """Apply one broker record. Replays of already-applied coordinates are no-ops.

        Raises DecodeError for records that do not carry a status/result/error envelope;
        their coordinates still count as applied.
        """
        tp = (record.topic, record.partition)
        if self.seen(record.topic, record.partition, record.offset):
            return None
        self.positions[tp] = record.offset + 1
        try:
            env = decode_message(record.value)
            if isinstance(env, TaskSpec):
                raise DecodeError("task specs are not monitor input")
        except DecodeError:
            self.dead_letters += 1
            raise
        return self.apply_envelope(env)

    def apply_envelope(self, env: StatusUpdate | ResultEnvelope | ErrorEnvelope) -> TaskRecord:
        rec = self.tasks.get(env.task_id)
        if rec is None:
            rec = self.tasks[env.task_id] = TaskRecord.empty(env.task_id, env.timestamp_ms)
        if isinstance(env, StatusUpdate):
            rec.add_status(env)
        elif isinstance(env, ResultEnvelope):
            if rec.add_result(env):
                self.duplicate_results_seen += 1
        else:
            rec.add_error(env)
        return rec

    def get(self, task_id: str) -> TaskRecord | None:
        return self.tasks.get(task_id)

    def stats(self, now: int | None = None) -> RegistryStats:
        now = now_ms() if now is None else now
        counts: dict[str, int] = {}
        recent = 0
        for rec in self.tasks.values():
            key = str(rec.latest_status)
            counts[key] = counts.get(key, 0) + 1
            if rec.terminal and now - THROUGHPUT_WINDOW_MS < rec.last_update_ms <= now:
                recent += 1
        return RegistryStats(counts, len(self.tasks), self.duplicate_results_seen,
                             recent / (THROUGHPUT_WINDOW_MS / 60000), self.dead_letters)

    def to_wire(self) -> dict[str, Any]:
        positions: dict[str, dict[str, int]] = {}
        for (topic, partition), nxt in self.positions.items():
            positions.setdefault(topic, {})[str(partition)] = nxt
        return {
            "tasks": {tid: self.tasks[tid].to_wire() for tid in sorted(self.tasks)},
            "positions": positions,
            "duplicate_results_seen": self.duplicate_results_seen,
            "dead_letters": self.dead_letters,
        }

    def snapshot_bytes(self) -> bytes:
        return canonical_json(self.to_wire())

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> Registry:
        reg = cls()
        reg.tasks = {tid: TaskRecord.from_wire(r) for tid, r in obj["tasks"].items()}
        reg.positions = {(t, int(p)): n for t, parts in obj["positions"].items() for p, n in parts.items()}
        reg.duplicate_results_seen = obj["duplicate_results_seen"]
        reg.dead_letters = obj.get("dead_letters", 0)
        return reg


class MonitorAgent:
    def __init__(
        self,
        config: DeploymentConfig,
        broker,
        *,
        name: str = "monitor",
        group: str | None = None,
        datadir: str | Path | None = None,
        create_topics: bool = True,
    ):
        from taskfabric.broker import ensure_topics

        self.config = config
        self.broker = broker
        self.name = name
        self.group = group or config.monitor_group
        self.topics = config.topics
        self.datadir = Path(datadir) if datadir is not None else config.datadir_path
        self.datadir.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.datadir / JOURNAL_FILE
        self.snapshot_path = self.datadir / SNAPSHOT_FILE
        self.registry = self._recover()
        self._since_snapshot = 0
        self.ingested: list[tuple[str, int, int]] = []
        self._view_lock = threading.Lock()
        self._view: dict[str, dict[str, Any]] = {}
        self._publish_view(self.registry.tasks)
        if create_topics:
            ensure_topics(broker, self.topics, config.partitions_new, config.partitions_other)
        self.subscription = broker.subscribe(self.group, [self.topics.jobs, self.topics.done, self.topics.error],
                                             member_id=name)

    # persistence --------------------------------------------------------

    def _recover(self) -> Registry:
        if self.snapshot_path.exists():
            registry = Registry.from_wire(json.loads(self.snapshot_path.read_bytes()))
        else:
            registry = Registry()
        if self.journal_path.exists():
            for line in self.journal_path.read_text(encoding="utf-8").splitlines():
                try:
                    item = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn tail write
                record = BrokerRecord(item["topic"], item["partition"], item["offset"], None,
                                      base64.b64decode(item["value"]), 0)
                try:
                    registry.apply(record)
                except DecodeError:
                    pass
        return registry

    def write_snapshot(self) -> Path:
        tmp = self.snapshot_path.with_suffix(".tmp")
        tmp.write_bytes(self.registry.snapshot_bytes())
        os.replace(tmp, self.snapshot_path)
        self.journal_path.write_bytes(b"")
        self._since_snapshot = 0
        return self.snapshot_path

    def _dead_letter(self, record: BrokerRecord, error: Exception) -> None:
        with open(self.datadir / DEAD_LETTER_FILE, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "topic": record.topic, "partition": record.partition, "offset": record.offset,
                "error": str(error), "value": base64.b64encode(record.value).decode("ascii"),
            }, sort_keys=True) + "\n")

    # ingestion ----------------------------------------------------------

    def ingest(self, record: BrokerRecord, *, journal_fh=None) -> TaskRecord | None:
        if self.registry.seen(record.topic, record.partition, record.offset):
            return None
        line = json.dumps({"topic": record.topic, "partition": record.partition, "offset": record.offset,
                           "value": base64.b64encode(record.value).decode("ascii")}, sort_keys=True) + "\n"
        if journal_fh is not None:
            journal_fh.write(line)
        else:
            with open(self.journal_path, "a", encoding="utf-8") as fh:
                fh.write(line)
        self.ingested.append((record.topic, record.partition, record.offset))
        self._since_snapshot += 1
        try:
            return self.registry.apply(record)
        except DecodeError as exc:
            log.warning("dead-lettering %s[%d]@%d: %s", record.topic, record.partition, record.offset, exc)
            self._dead_letter(record, exc)
            return None

    def run_cycle(self, max_records: int = 1000, timeout_ms: int = 0) -> int:
        """Poll once, ingest, flush the journal, then commit. Returns the number of records ingested."""
        try:
            records = self.subscription.poll(max_records=max_records, timeout_ms=timeout_ms)
        except RebalanceNotice:
            records = self.subscription.poll(max_records=max_records, timeout_ms=timeout_ms)
        except BrokerUnavailableError as exc:
            log.warning("monitor poll failed: %s", exc)
            return 0
        if not records:
            return 0
        changed: dict[str, TaskRecord] = {}
        positions: dict[tuple[str, int], CommitPosition] = {}
        with open(self.journal_path, "a", encoding="utf-8") as fh:
            for record in records:
                rec = self.ingest(record, journal_fh=fh)
                if rec is not None:
                    changed[rec.task_id] = rec
                positions[(record.topic, record.partition)] = self.subscription.position_after(record)
            fh.flush()
            os.fsync(fh.fileno())
        self._publish_view(changed)
        if self._since_snapshot >= self.config.snapshot_every:
            self.write_snapshot()
        try:
            self.subscription.commit(positions.values())
        except RebalanceNotice:
            keep = self.subscription.assigned()
            self.subscription.commit(p for tp, p in positions.items() if tp in keep)
        except BrokerUnavailableError as exc:
            log.info("monitor commit deferred: %s", exc)
        return len(records)

    def drain(self, max_rounds: int = 1000) -> int:
        total = 0
        for _ in range(max_rounds):
            n = self.run_cycle()
            if n == 0:
                break
            total += n
        return total

    # read path ----------------------------------------------------------

    def _publish_view(self, changed: dict[str, TaskRecord]) -> None:
        if not changed:
            return
        update = {tid: rec.to_wire() for tid, rec in changed.items()}
        with self._view_lock:
            view = dict(self._view)
            view.update(update)
            self._view = view

    def query_task(self, task_id: str) -> TaskRecord | None:
        return self.registry.get(task_id)

    def query_stats(self, now: int | None = None) -> RegistryStats:
        return self.registry.stats(now)

    def view(self) -> dict[str, dict[str, Any]]:
        return self._view

    def close(self) -> None:
        try:
            self.subscription.close()
        except Exception:  # noqa: BLE001 - shutdown is best effort
            log.debug("unsubscribe failed", exc_info=True)

    def serve(self, *, stop: threading.Event | None = None, once: bool = False) -> None:
        stop = stop or threading.Event()
        try:
            while not stop.is_set():
                self.run_cycle(timeout_ms=int(self.config.poll_interval_s * 1000))
                if once:
                    break
        finally:
            self.write_snapshot()
            self.close()


def stats_from_view(view: dict[str, dict[str, Any]], now: int) -> dict[str, Any]:
    counts: dict[str, int] = {}
    recent = 0
    for rec in view.values():
        counts[rec["latest_status"]] = counts.get(rec["latest_status"], 0) + 1
        if is_terminal(rec["latest_status"]) and now - THROUGHPUT_WINDOW_MS < rec["last_update_ms"] <= now:
            recent += 1
    return {
        "counts": dict(sorted(counts.items())),
        "total": len(view),
        "duplicate_results_seen": sum(r["duplicate_results"] for r in view.values()),
        "throughput_per_min": recent / (THROUGHPUT_WINDOW_MS / 60000),
    }


def make_handler(get_view: Callable[[], dict[str, dict[str, Any]]]):
    class Handler(BaseHTTPRequestHandler):
        server_version = "taskfabric-monitor"

        def log_message(self, fmt, *args):  # noqa: A003 - stdlib signature
            log.debug("http: " + fmt, *args)

        def _send(self, status: HTTPStatus, body: Any) -> None:
            data = canonical_json(body)
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):  # noqa: N802 - stdlib naming
            url = urlparse(self.path)
            parts = [unquote(p) for p in url.path.split("/") if p]
            view = get_view()
            if parts == ["healthz"]:
                return self._send(HTTPStatus.OK, {"status": "ok"})
            if parts == ["stats"]:
                return self._send(HTTPStatus.OK, stats_from_view(view, now_ms()))
            if parts == ["tasks"]:
                query = parse_qs(url.query)
                try:
                    offset = int(query.get("offset", ["0"])[0])
                    limit = int(query.get("limit", ["100"])[0])
                except ValueError:
                    return self._send(HTTPStatus.BAD_REQUEST, {"error": "offset and limit must be integers"})
                if offset < 0 or not 1 <= limit <= 1000:
                    return self._send(HTTPStatus.BAD_REQUEST, {"error": "offset >= 0 and 1 <= limit <= 1000"})
                wanted = query.get("status", [None])[0]
                ids = sorted(tid for tid, rec in view.items() if wanted is None or rec["latest_status"] == wanted)
                page = [view[tid] for tid in ids[offset: offset + limit]]
                return self._send(HTTPStatus.OK, {"tasks": page, "total": len(ids), "offset": offset,
                                                  "limit": limit})
            if len(parts) == 2 and parts[0] == "tasks":
                rec = view.get(parts[1])
                if rec is None:
                    return self._send(HTTPStatus.NOT_FOUND, {"error": "not found", "task_id": parts[1]})
                return self._send(HTTPStatus.OK, rec)
            return self._send(HTTPStatus.NOT_FOUND, {"error": "no such route"})

    return Handler


def start_http_server(monitor: MonitorAgent, port: int, host: str = "127.0.0.1") -> ThreadingHTTPServer:
    """Serve the monitor's read view in a background thread. Port 0 picks a free port."""
    server = ThreadingHTTPServer((host, port), make_handler(monitor.view))
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, name="monitor-http", daemon=True)
    thread.start()
    return server
