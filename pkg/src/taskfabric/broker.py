"""Partitioned, offset-addressed publish/subscribe log with consumer groups.

``InProcessBroker`` is the built-in backend. Without a root directory it is
ephemeral (memory only). With a root directory it is journaled and can be
shared by several processes on one filesystem:

    <root>/<topic>/<partition>.log     4-byte big-endian length + payload frames
    <root>/groups/<group>.offsets      {"<topic>": {"<partition>": next_offset}}
    <root>/groups/<group>.members      membership + generation (coordination)

A frame payload is ``>q`` append_time_ms, ``>i`` key length (-1 when there is
no key), the key bytes, then the value bytes.

Any object offering the same create_topic/publish/poll/commit/rebalance
surface can replace it; :func:`connect` dispatches on the endpoint scheme.
"""

from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

from taskfabric.errors import (
    BrokerError,
    BrokerUnavailableError,
    NotAssignedError,
    RebalanceNotice,
    TopicConflictError,
    UnknownTopicError,
)
from taskfabric.model import TopicSet, canonical_json, now_ms

log = logging.getLogger(__name__)

_FRAME_LEN = struct.Struct(">I")
_FRAME_HEAD = struct.Struct(">qi")
_FILE_POLL_S = 0.01

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class BrokerRecord:
    topic: str
    partition: int
    offset: int
    key: bytes | None
    value: bytes
    append_time_ms: int


@dataclass(frozen=True)
class CommitPosition:
    group: str
    topic: str
    partition: int
    next_offset: int


def range_assign(
    members: dict[str, Iterable[str]], partition_counts: dict[str, int]
) -> dict[str, dict[str, list[int]]]:
    """Range assignment: per topic, contiguous partition ranges over sorted member ids."""
    result: dict[str, dict[str, list[int]]] = {m: {} for m in members}
    for topic in sorted(partition_counts):
        subscribed = sorted(m for m, topics in members.items() if topic in set(topics))
        if not subscribed:
            continue
        count = partition_counts[topic]
        base, extra = divmod(count, len(subscribed))
        start = 0
        for i, member in enumerate(subscribed):
            size = base + (1 if i < extra else 0)
            result[member][topic] = list(range(start, start + size))
            start += size
    return result


def encode_frame(record: BrokerRecord) -> bytes:
    key_len = -1 if record.key is None else len(record.key)
    payload = _FRAME_HEAD.pack(record.append_time_ms, key_len) + (record.key or b"") + record.value
    return _FRAME_LEN.pack(len(payload)) + payload


def decode_frames(data: bytes, topic: str, partition: int, first_offset: int) -> tuple[list[BrokerRecord], int]:
    """Decode complete frames from ``data``; returns records and bytes consumed."""
    records = []
    pos = 0
    offset = first_offset
    while pos + _FRAME_LEN.size <= len(data):
        (length,) = _FRAME_LEN.unpack_from(data, pos)
        end = pos + _FRAME_LEN.size + length
        if end > len(data):
            break
        body = data[pos + _FRAME_LEN.size : end]
        append_ms, key_len = _FRAME_HEAD.unpack_from(body, 0)
        head = _FRAME_HEAD.size
        if key_len < 0:
            key, value = None, body[head:]
        else:
            key, value = body[head : head + key_len], body[head + key_len :]
        records.append(BrokerRecord(topic, partition, offset, key, value, append_ms))
        offset += 1
        pos = end
    return records, pos


@contextlib.contextmanager
def _flocked(path: Path) -> Iterator[None]:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        yield
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class Subscription:
    """A consumer-group member handle. Confine each handle to one consuming activity."""

    def __init__(self, broker: InProcessBroker, group: str, topics: frozenset[str], member_id: str, incarnation: int):
        self.broker = broker
        self.group = group
        self.topics = topics
        self.member_id = member_id
        self.incarnation = incarnation
        self.generation = -1
        self.assignment: dict[str, list[int]] = {}
        self.cursors: dict[tuple[str, int], int] = {}
        self._rr = 0

    def poll(self, max_records: int = 500, timeout_ms: int = 0) -> list[BrokerRecord]:
        return self.broker.poll(self, max_records, timeout_ms)

    def commit(self, positions: Iterable[CommitPosition]) -> None:
        self.broker.commit(self, list(positions))

    def position_after(self, record: BrokerRecord) -> CommitPosition:
        return CommitPosition(self.group, record.topic, record.partition, record.offset + 1)

    def assigned(self) -> set[tuple[str, int]]:
        return {(t, p) for t, parts in self.assignment.items() for p in parts}

    def close(self) -> None:
        self.broker.unsubscribe(self)

    def __repr__(self) -> str:
        return f"Subscription(group={self.group!r}, member={self.member_id!r}, assignment={self.assignment})"


class InProcessBroker:
    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._paused = False
        self._rr: dict[str, int] = {}
        # (topic, partition) -> cached records; for journaled mode also the byte position read so far
        self._logs: dict[tuple[str, int], list[BrokerRecord]] = {}
        self._log_pos: dict[tuple[str, int], int] = {}
        self._topics: dict[str, int] = {}
        # ephemeral-mode group state
        self._offsets: dict[str, dict[str, dict[str, int]]] = {}
        self._members: dict[str, dict] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            (self.root / "groups").mkdir(exist_ok=True)

    @property
    def journaled(self) -> bool:
        return self.root is not None

    # outage hook ---------------------------------------------------------

    def pause(self) -> None:
        """Make every client operation fail with BrokerUnavailableError until resume()."""
        with self._lock:
            self._paused = True

    def resume(self) -> None:
        with self._cond:
            self._paused = False
            self._cond.notify_all()

    def _check_available(self) -> None:
        if self._paused:
            raise BrokerUnavailableError("broker is unavailable")

    # topics --------------------------------------------------------------

    def create_topic(self, name: str, partitions: int) -> None:
        if not name or name == "groups" or "/" in name or name.startswith("."):
            raise BrokerError(f"invalid topic name {name!r}")
        if not isinstance(partitions, int) or partitions < 1:
            raise BrokerError("partitions must be >= 1")
        with self._lock:
            self._check_available()
            existing = self._partition_count(name)
            if existing is not None:
                if existing != partitions:
                    raise TopicConflictError(f"topic {name!r} exists with {existing} partitions, not {partitions}")
                return
            if self.root is None:
                self._topics[name] = partitions
                for p in range(partitions):
                    self._logs[(name, p)] = []
                return
            with _flocked(self.root / ".topics.lock"):
                existing = self._partition_count(name)
                if existing is not None:
                    if existing != partitions:
                        raise TopicConflictError(
                            f"topic {name!r} exists with {existing} partitions, not {partitions}"
                        )
                    return
                staging = self.root / f".{name}.staging"
                staging.mkdir(exist_ok=True)
                for p in range(partitions):
                    (staging / f"{p}.log").touch()
                os.replace(staging, self.root / name)
            self._topics[name] = partitions

    def _partition_count(self, topic: str) -> int | None:
        if topic in self._topics:
            return self._topics[topic]
        if self.root is None:
            return None
        tdir = self.root / topic
        if not tdir.is_dir():
            return None
        count = len(list(tdir.glob("*.log")))
        self._topics[topic] = count
        return count

    def partitions_for(self, topic: str) -> int:
        with self._lock:
            count = self._partition_count(topic)
        if count is None:
            raise UnknownTopicError(f"unknown topic {topic!r}")
        return count

    def topics(self) -> list[str]:
        with self._lock:
            if self.root is not None:
                for d in self.root.iterdir():
                    if d.is_dir() and d.name != "groups" and not d.name.startswith("."):
                        self._partition_count(d.name)
            return sorted(self._topics)

    # log access ----------------------------------------------------------

    def _log_path(self, topic: str, partition: int) -> Path:
        assert self.root is not None
        return self.root / topic / f"{partition}.log"

    def _refresh(self, topic: str, partition: int) -> list[BrokerRecord]:
        key = (topic, partition)
        cached = self._logs.setdefault(key, [])
        if self.root is None:
            return cached
        pos = self._log_pos.get(key, 0)
        with open(self._log_path(topic, partition), "rb") as fh:
            fh.seek(pos)
            data = fh.read()
        if data:
            records, used = decode_frames(data, topic, partition, len(cached))
            cached.extend(records)
            self._log_pos[key] = pos + used
        return cached

    def end_offset(self, topic: str, partition: int) -> int:
        with self._lock:
            self.partitions_for(topic)
            return len(self._refresh(topic, partition))

    def read(self, topic: str, partition: int, offset: int = 0, max_records: int | None = None) -> list[BrokerRecord]:
        """Read records directly by position, bypassing consumer groups."""
        with self._lock:
            self.partitions_for(topic)
            records = self._refresh(topic, partition)
            end = len(records) if max_records is None else offset + max_records
            return records[offset:end]

    def choose_partition(self, topic: str, key: bytes | None) -> int:
        count = self.partitions_for(topic)
        if key is not None:
            return fnv1a_64(key) % count
        nxt = self._rr.get(topic, 0)
        self._rr[topic] = nxt + 1
        return nxt % count

    def publish(self, topic: str, key: bytes | None, value: bytes) -> tuple[int, int]:
        if isinstance(key, str):
            key = key.encode("utf-8")
        with self._cond:
            self._check_available()
            partition = self.choose_partition(topic, key)
            if self.root is None:
                records = self._logs[(topic, partition)]
                record = BrokerRecord(topic, partition, len(records), key, bytes(value), now_ms())
                records.append(record)
            else:
                path = self._log_path(topic, partition)
                fd = os.open(path, os.O_WRONLY | os.O_APPEND)
                try:
                    fcntl.flock(fd, fcntl.LOCK_EX)
                    records = self._refresh(topic, partition)
                    record = BrokerRecord(topic, partition, len(records), key, bytes(value), now_ms())
                    frame = encode_frame(record)
                    os.write(fd, frame)
                    records.append(record)
                    self._log_pos[(topic, partition)] = self._log_pos.get((topic, partition), 0) + len(frame)
                finally:
                    fcntl.flock(fd, fcntl.LOCK_UN)
                    os.close(fd)
            self._cond.notify_all()
            return partition, record.offset

    # group state ---------------------------------------------------------

    def _group_path(self, group: str, suffix: str) -> Path:
        assert self.root is not None
        return self.root / "groups" / f"{group}.{suffix}"

    def _load_json(self, path: Path, default):
        try:
            return json.loads(path.read_bytes())
        except FileNotFoundError:
            return default

    @contextlib.contextmanager
    def _group_state(self, group: str, kind: str) -> Iterator[dict]:
        """Yield a mutable copy of the group's ``kind`` state and persist it on exit."""
        default = {"generation": 0, "members": {}} if kind == "members" else {}
        if self.root is None:
            store = self._members if kind == "members" else self._offsets
            state = store.setdefault(group, default)
            yield state
            return
        path = self._group_path(group, kind)
        with _flocked(self._group_path(group, "lock")):
            state = self._load_json(path, default)
            before = canonical_json(state)
            yield state
            after = canonical_json(state)
            if after != before or not path.exists():
                _atomic_write(path, after)

    def _read_group(self, group: str, kind: str) -> dict:
        if self.root is None:
            store = self._members if kind == "members" else self._offsets
            return store.get(group, {"generation": 0, "members": {}} if kind == "members" else {})
        default = {"generation": 0, "members": {}} if kind == "members" else {}
        return self._load_json(self._group_path(group, kind), default)

    def committed(self, group: str, topic: str, partition: int) -> int:
        with self._lock:
            return self._read_group(group, "offsets").get(topic, {}).get(str(partition), 0)

    def committed_offsets(self, group: str) -> dict[str, dict[str, int]]:
        with self._lock:
            return json.loads(json.dumps(self._read_group(group, "offsets")))

    # membership ----------------------------------------------------------

    def subscribe(self, group: str, topics: Iterable[str], member_id: str | None = None) -> Subscription:
        """Join ``group``. Re-joining with an existing member id replaces the previous incarnation."""
        topics = frozenset(topics)
        if not group:
            raise BrokerError("consumer group id must be non-empty")
        with self._lock:
            self._check_available()
            for t in topics:
                self.partitions_for(t)
            with self._group_state(group, "members") as state:
                members = state["members"]
                if member_id is None:
                    n = len(members)
                    while f"member-{n}" in members:
                        n += 1
                    member_id = f"member-{n}"
                previous = members.get(member_id)
                incarnation = (previous["incarnation"] + 1) if previous else 0
                members[member_id] = {"topics": sorted(topics), "incarnation": incarnation}
                if previous is None or previous["topics"] != sorted(topics):
                    state["generation"] += 1
            sub = Subscription(self, group, topics, member_id, incarnation)
            self._sync(sub, notify=False)
            return sub

    def _leave(self, group: str, member_id: str, incarnation: int | None) -> bool:
        with self._lock:
            with self._group_state(group, "members") as state:
                current = state["members"].get(member_id)
                if current is None or (incarnation is not None and current["incarnation"] != incarnation):
                    return False
                del state["members"][member_id]
                state["generation"] += 1
            self._cond.notify_all()
            return True

    def unsubscribe(self, sub: Subscription) -> None:
        """Explicit deregistration (clean shutdown)."""
        self._leave(sub.group, sub.member_id, sub.incarnation)

    def simulate_crash(self, member: Subscription | str, group: str | None = None) -> None:
        """Test hook: drop a member without committing, as a detected crash would."""
        if isinstance(member, Subscription):
            self._leave(member.group, member.member_id, None)
            return
        if group is None:
            raise BrokerError("group is required when crashing a member by id")
        self._leave(group, member, None)

    def members(self, group: str) -> list[str]:
        with self._lock:
            return sorted(self._read_group(group, "members")["members"])

    def rebalance(self, group: str) -> dict[str, dict[str, list[int]]]:
        """Current range assignment for every live member of ``group``."""
        with self._lock:
            state = self._read_group(group, "members")
            members = {m: info["topics"] for m, info in state["members"].items()}
            topics = {t for ts in members.values() for t in ts}
            counts = {t: self.partitions_for(t) for t in topics}
            return range_assign(members, counts)

    def _sync(self, sub: Subscription, *, notify: bool = True) -> None:
        state = self._read_group(sub.group, "members")
        info = state["members"].get(sub.member_id)
        if info is None or info["incarnation"] != sub.incarnation:
            raise BrokerError(f"member {sub.member_id!r} is no longer part of group {sub.group!r}")
        if state["generation"] == sub.generation:
            return
        assignment = self.rebalance(sub.group).get(sub.member_id, {})
        changed = assignment != sub.assignment
        keep = {(t, p) for t, parts in assignment.items() for p in parts}
        sub.cursors = {tp: c for tp, c in sub.cursors.items() if tp in keep}
        sub.assignment = assignment
        sub.generation = state["generation"]
        if changed and notify:
            raise RebalanceNotice(sub.member_id, assignment)

    # consuming -----------------------------------------------------------

    def poll(self, sub: Subscription, max_records: int = 500, timeout_ms: int = 0) -> list[BrokerRecord]:
        if max_records < 1:
            raise BrokerError("max_records must be >= 1")
        deadline = time.monotonic() + timeout_ms / 1000.0
        with self._cond:
            while True:
                self._check_available()
                self._sync(sub)
                records = self._fetch(sub, max_records)
                remaining = deadline - time.monotonic()
                if records or remaining <= 0:
                    return records
                self._cond.wait(min(remaining, _FILE_POLL_S) if self.root is not None else remaining)

    def _fetch(self, sub: Subscription, max_records: int) -> list[BrokerRecord]:
        parts = sorted(sub.assigned())
        if not parts:
            return []
        offsets = self._read_group(sub.group, "offsets")
        out: list[BrokerRecord] = []
        start = sub._rr % len(parts)
        sub._rr += 1
        for tp in parts[start:] + parts[:start]:
            if len(out) >= max_records:
                break
            topic, partition = tp
            committed = offsets.get(topic, {}).get(str(partition), 0)
            position = max(committed, sub.cursors.get(tp, 0))
            records = self._refresh(topic, partition)
            batch = records[position : position + max_records - len(out)]
            if batch:
                out.extend(batch)
                sub.cursors[tp] = batch[-1].offset + 1
            else:
                sub.cursors[tp] = position
        return out

    def commit(self, sub: Subscription, positions: list[CommitPosition]) -> None:
        if not positions:
            return
        with self._cond:
            self._check_available()
            self._sync(sub)
            assigned = sub.assigned()
            for pos in positions:
                if pos.group != sub.group:
                    raise BrokerError(f"position for group {pos.group!r} committed through {sub.group!r}")
                if (pos.topic, pos.partition) not in assigned:
                    raise NotAssignedError(
                        f"{pos.topic}[{pos.partition}] is not assigned to member {sub.member_id!r}"
                    )
                if pos.next_offset < 0 or pos.next_offset > len(self._refresh(pos.topic, pos.partition)):
                    raise BrokerError(f"commit offset {pos.next_offset} beyond end of {pos.topic}[{pos.partition}]")
            with self._group_state(sub.group, "offsets") as offsets:
                for pos in positions:
                    per_topic = offsets.setdefault(pos.topic, {})
                    key = str(pos.partition)
                    per_topic[key] = max(per_topic.get(key, 0), pos.next_offset)

    def close(self) -> None:
        pass


class CommitTracker:
    """Tracks polled records until they are settled and yields contiguous commit positions.

    A partition's committed offset only advances past a record once that record and
    every earlier polled record in the partition are settled.
    """

    def __init__(self, group: str):
        self.group = group
        self._pending: dict[tuple[str, int], dict[int, bool]] = {}
        self._floor: dict[tuple[str, int], int] = {}

    def track(self, record: BrokerRecord) -> None:
        tp = (record.topic, record.partition)
        self._pending.setdefault(tp, {})[record.offset] = False
        self._floor.setdefault(tp, record.offset)

    def settle(self, record_or_tp, offset: int | None = None) -> None:
        if isinstance(record_or_tp, BrokerRecord):
            tp, offset = (record_or_tp.topic, record_or_tp.partition), record_or_tp.offset
        else:
            tp = record_or_tp
        pending = self._pending.get(tp)
        if pending is not None and offset in pending:
            pending[offset] = True

    def drop_partitions(self, keep: set[tuple[str, int]]) -> None:
        for tp in list(self._pending):
            if tp not in keep:
                del self._pending[tp]
                self._floor.pop(tp, None)

    def positions(self) -> list[CommitPosition]:
        out = []
        for tp, pending in sorted(self._pending.items()):
            advanced = None
            for off in sorted(pending):
                if not pending[off]:
                    break
                del pending[off]
                advanced = off + 1
            if advanced is not None:
                out.append(CommitPosition(self.group, tp[0], tp[1], advanced))
        return out


_MEMORY_BROKERS: dict[str, InProcessBroker] = {}
_DRIVERS: dict[str, Callable[[str], object]] = {}
_registry_lock = threading.Lock()


def register_driver(scheme: str, factory: Callable[[str], object]) -> None:
    """Register an external broker driver for endpoints of the form ``<scheme>:<rest>``."""
    _DRIVERS[scheme] = factory


def connect(endpoint: str, base_dir: str | Path | None = None):
    """Open a broker from an endpoint string.

    ``inproc:<root>`` opens the journaled in-process backend rooted at ``<root>``;
    ``mem:<name>`` returns a process-wide ephemeral broker shared by name.
    """
    scheme, sep, rest = endpoint.partition(":")
    if not sep:
        raise BrokerError(f"broker endpoint {endpoint!r} has no scheme")
    if scheme == "inproc":
        if not rest:
            raise BrokerError("inproc endpoint needs a root directory, e.g. inproc:./broker")
        root = Path(rest).expanduser()
        if not root.is_absolute() and base_dir is not None:
            root = Path(base_dir) / root
        return InProcessBroker(root)
    if scheme == "mem":
        with _registry_lock:
            return _MEMORY_BROKERS.setdefault(rest, InProcessBroker())
    if scheme in _DRIVERS:
        return _DRIVERS[scheme](rest)
    raise BrokerError(f"no broker driver registered for scheme {scheme!r}")


def ensure_topics(broker, topics: TopicSet, partitions_new: int = 8, partitions_other: int = 1) -> None:
    broker.create_topic(topics.new, partitions_new)
    for name in (topics.jobs, topics.done, topics.error):
        broker.create_topic(name, partitions_other)
