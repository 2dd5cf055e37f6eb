"""Publishing task specs to the ``-new`` topic."""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Iterable

from taskfabric.errors import BrokerUnavailableError, DecodeError, EncodeError, ValidationError
from taskfabric.model import (
    CoreStatus,
    ResourceRequest,
    TaskSpec,
    TopicSet,
    canonical_json,
    decode_message,
    encode_message,
)

log = logging.getLogger(__name__)

SKIP_DUPLICATE = "duplicate in batch"
SKIP_DONE = "already done"


@dataclass
class SubmissionReport:
    submitted: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    failed: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed

    def to_wire(self) -> dict[str, Any]:
        return {
            "submitted": list(self.submitted),
            "skipped": [list(s) for s in self.skipped],
            "failed": [list(f) for f in self.failed],
        }


class MonitorClient:
    """Thin client for the monitor's REST API."""

    def __init__(self, base_url: str, timeout_s: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s

    def _get(self, path: str) -> Any:
        with urllib.request.urlopen(self.base_url + path, timeout=self.timeout_s) as resp:
            return json.loads(resp.read())

    def task(self, task_id: str) -> dict[str, Any] | None:
        try:
            return self._get("/tasks/" + urllib.parse.quote(task_id, safe=""))
        except urllib.error.HTTPError as exc:
            if exc.code == 404:
                return None
            raise

    def stats(self) -> dict[str, Any]:
        return self._get("/stats")

    def tasks(self, status: str | None = None, offset: int = 0, limit: int = 100) -> dict[str, Any]:
        query = {"offset": offset, "limit": limit}
        if status is not None:
            query["status"] = status
        return self._get("/tasks?" + urllib.parse.urlencode(query))


def _already_done(monitor: MonitorClient | None, task_id: str) -> bool:
    if monitor is None:
        return False
    try:
        record = monitor.task(task_id)
    except (OSError, ValueError) as exc:
        log.warning("monitor unreachable, not skipping %s: %s", task_id, exc)
        return False
    return record is not None and record.get("latest_status") == CoreStatus.DONE.value


def submit(
    broker,
    topics: TopicSet,
    specs: Iterable[TaskSpec],
    *,
    skip_if_done: bool = False,
    monitor: MonitorClient | str | None = None,
) -> SubmissionReport:
    """Publish each spec to ``topics.new`` keyed by task id, in input order.

    Once the broker becomes unreachable every remaining spec is reported failed.
    With ``skip_if_done`` the monitor is asked about each id; an unreachable
    monitor never causes a skip.
    """
    if isinstance(monitor, str):
        monitor = MonitorClient(monitor) if monitor else None
    report = SubmissionReport()
    seen: set[str] = set()
    broker_down: str | None = None
    for spec in specs:
        if spec.task_id in seen:
            report.skipped.append((spec.task_id, SKIP_DUPLICATE))
            continue
        seen.add(spec.task_id)
        if broker_down is not None:
            report.failed.append((spec.task_id, broker_down))
            continue
        if skip_if_done and _already_done(monitor, spec.task_id):
            report.skipped.append((spec.task_id, SKIP_DONE))
            continue
        try:
            broker.publish(topics.new, spec.task_id.encode("utf-8"), encode_message(spec))
        except BrokerUnavailableError as exc:
            broker_down = f"broker unavailable: {exc}"
            report.failed.append((spec.task_id, broker_down))
            continue
        except (EncodeError, ValidationError) as exc:
            report.failed.append((spec.task_id, str(exc)))
            continue
        report.submitted.append(spec.task_id)
    return report


def load_manifest(data: bytes | str) -> list[TaskSpec]:
    """Parse a JSON list of task objects. ``resources``, ``timeout_s`` and ``params`` may be omitted."""
    items = json.loads(data)
    if not isinstance(items, list):
        raise DecodeError("manifest must be a JSON list of task objects")
    specs = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise DecodeError(f"manifest entry {i} is not an object")
        wire = {"resources": {}, "timeout_s": None, "params": {}, **item, "type": TaskSpec.TYPE}
        wire["resources"] = {**ResourceRequest().to_wire(), **wire["resources"]}
        specs.append(decode_message(canonical_json(wire)))
    return specs
