"""Domain value objects and the JSON wire format shared by every component.

Every envelope encodes to a UTF-8 JSON object with a ``type`` discriminator,
lexicographically sorted keys and no insignificant whitespace, so encodings
are byte-stable across calls and processes.
"""

from __future__ import annotations

import json
import math
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

from taskfabric.errors import (
    ConfigError,
    DecodeError,
    EncodeError,
    InvalidFieldError,
    MalformedMessageError,
    MissingFieldError,
    UnknownTypeError,
    ValidationError,
)

MAX_DETAIL_BYTES = 16 * 1024

_PREFIX_RE = re.compile(r"^[A-Za-z0-9_.]+$")
_WS_RE = re.compile(r"\s")


def now_ms() -> int:
    return time.time_ns() // 1_000_000


class CoreStatus(str, Enum):
    SUBMITTED = "SUBMITTED"
    WAITING = "WAITING"
    RUNNING = "RUNNING"
    DONE = "DONE"
    ERROR = "ERROR"
    CANCELLED = "CANCELLED"

    def __str__(self) -> str:
        return self.value


# A status is either a CoreStatus or a custom, verbatim-preserved string.
StatusKind = Union[CoreStatus, str]

TERMINAL_STATUSES = frozenset({CoreStatus.DONE, CoreStatus.ERROR, CoreStatus.CANCELLED})


def parse_status(value: str) -> StatusKind:
    if not isinstance(value, str) or not value:
        raise ValidationError("status must be a non-empty string")
    try:
        return CoreStatus(value)
    except ValueError:
        return value


def is_terminal(status: StatusKind) -> bool:
    return status in TERMINAL_STATUSES


class AgentKind(str, Enum):
    CLUSTER = "CLUSTER"
    WORKER = "WORKER"
    MONITOR = "MONITOR"
    SUBMITTER = "SUBMITTER"


class ErrorPhase(str, Enum):
    SUBMIT = "SUBMIT"
    LAUNCH = "LAUNCH"
    RUN = "RUN"
    TIMEOUT = "TIMEOUT"
    INTERNAL = "INTERNAL"


def validate_task_id(task_id: str) -> str:
    if not isinstance(task_id, str) or not task_id:
        raise ValidationError("task_id must be a non-empty string")
    if _WS_RE.search(task_id) or "/" in task_id or task_id in (".", ".."):
        raise ValidationError(f"task_id {task_id!r} must not contain whitespace or path separators")
    return task_id


def _check_int(name: str, value: Any, minimum: int) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value!r}")


@dataclass(frozen=True)
class AgentIdentity:
    kind: AgentKind
    name: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AgentKind(self.kind))
        if not isinstance(self.name, str) or not self.name:
            raise ValidationError("agent name must be non-empty")

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.name}"

    @classmethod
    def parse(cls, text: str) -> AgentIdentity:
        kind, sep, name = text.partition(":")
        if not sep:
            raise ValidationError(f"agent identity {text!r} must look like KIND:name")
        return cls(AgentKind(kind.upper()), name)

    def to_wire(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "name": self.name}


@dataclass(frozen=True)
class ResourceRequest:
    cpus: int = 1
    gpus: int = 0
    memory_mb: int = 1024

    def __post_init__(self) -> None:
        _check_int("cpus", self.cpus, 1)
        _check_int("gpus", self.gpus, 0)
        _check_int("memory_mb", self.memory_mb, 1)

    def to_wire(self) -> dict[str, Any]:
        return {"cpus": self.cpus, "gpus": self.gpus, "memory_mb": self.memory_mb}


@dataclass(frozen=True)
class TopicSet:
    prefix: str
    new: str
    jobs: str
    done: str
    error: str

    def all(self) -> tuple[str, str, str, str]:
        return (self.new, self.jobs, self.done, self.error)


def validate_prefix(prefix: str) -> str:
    if not isinstance(prefix, str) or not _PREFIX_RE.match(prefix):
        raise ValidationError(f"invalid topic prefix {prefix!r}: must match [A-Za-z0-9_.]+")
    return prefix


def derive_topic_set(prefix: str) -> TopicSet:
    try:
        validate_prefix(prefix)
    except ValidationError as exc:
        raise ConfigError(str(exc), key="prefix") from exc
    return TopicSet(
        prefix=prefix,
        new=f"{prefix}-new",
        jobs=f"{prefix}-jobs",
        done=f"{prefix}-done",
        error=f"{prefix}-error",
    )


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    script: str
    resources: ResourceRequest = field(default_factory=ResourceRequest)
    timeout_s: int | None = None
    params: dict[str, Any] = field(default_factory=dict)

    TYPE = "task"

    def __post_init__(self) -> None:
        validate_task_id(self.task_id)
        if not isinstance(self.script, str) or not self.script:
            raise ValidationError("script must be non-empty")
        if not isinstance(self.resources, ResourceRequest):
            raise ValidationError("resources must be a ResourceRequest")
        if self.timeout_s is not None:
            _check_int("timeout_s", self.timeout_s, 1)
        if not isinstance(self.params, dict):
            raise ValidationError("params must be a mapping")
        for key in self.params:
            if not isinstance(key, str) or not key.isidentifier():
                raise ValidationError(f"param key {key!r} is not a valid identifier")

    def effective_timeout_s(self, default_timeout_s: int) -> int:
        return self.timeout_s if self.timeout_s is not None else default_timeout_s

    def to_wire(self) -> dict[str, Any]:
        return {
            "type": self.TYPE,
            "task_id": self.task_id,
            "script": self.script,
            "resources": self.resources.to_wire(),
            "timeout_s": self.timeout_s,
            "params": self.params,
        }


@dataclass(frozen=True)
class StatusUpdate:
    task_id: str
    status: StatusKind
    agent: AgentIdentity
    timestamp_ms: int
    scheduler_job_id: str | None = None

    TYPE = "status"

    def __post_init__(self) -> None:
        validate_task_id(self.task_id)
        object.__setattr__(self, "status", parse_status(self.status))
        _check_int("timestamp_ms", self.timestamp_ms, 0)

    def to_wire(self) -> dict[str, Any]:
        return {
            "type": self.TYPE,
            "task_id": self.task_id,
            "status": str(self.status),
            "agent": self.agent.to_wire(),
            "scheduler_job_id": self.scheduler_job_id,
            "timestamp_ms": self.timestamp_ms,
        }


@dataclass(frozen=True)
class ResultEnvelope:
    task_id: str
    agent: AgentIdentity
    result: Any
    wall_time_s: float
    timestamp_ms: int

    TYPE = "result"

    def __post_init__(self) -> None:
        validate_task_id(self.task_id)
        if isinstance(self.wall_time_s, bool) or not isinstance(self.wall_time_s, (int, float)):
            raise ValidationError("wall_time_s must be a number")
        if not math.isfinite(self.wall_time_s) or self.wall_time_s < 0:
            raise ValidationError("wall_time_s must be finite and non-negative")
        object.__setattr__(self, "wall_time_s", float(self.wall_time_s))
        _check_int("timestamp_ms", self.timestamp_ms, 0)

    def to_wire(self) -> dict[str, Any]:
        return {
            "type": self.TYPE,
            "task_id": self.task_id,
            "agent": self.agent.to_wire(),
            "result": self.result,
            "wall_time_s": self.wall_time_s,
            "timestamp_ms": self.timestamp_ms,
        }


@dataclass(frozen=True)
class ErrorEnvelope:
    task_id: str
    agent: AgentIdentity
    phase: ErrorPhase
    message: str
    timestamp_ms: int
    detail: str | None = None

    TYPE = "error"

    def __post_init__(self) -> None:
        validate_task_id(self.task_id)
        object.__setattr__(self, "phase", ErrorPhase(self.phase))
        if not isinstance(self.message, str) or not self.message:
            raise ValidationError("error message must be non-empty")
        if self.detail is not None and len(self.detail.encode("utf-8")) > MAX_DETAIL_BYTES:
            raise ValidationError(f"error detail exceeds {MAX_DETAIL_BYTES} bytes")
        _check_int("timestamp_ms", self.timestamp_ms, 0)

    def to_wire(self) -> dict[str, Any]:
        return {
            "type": self.TYPE,
            "task_id": self.task_id,
            "agent": self.agent.to_wire(),
            "phase": self.phase.value,
            "message": self.message,
            "detail": self.detail,
            "timestamp_ms": self.timestamp_ms,
        }


Envelope = Union[TaskSpec, StatusUpdate, ResultEnvelope, ErrorEnvelope]


@dataclass(frozen=True)
class NodeSpec:
    name: str
    cpus_total: int
    gpus_total: int = 0
    memory_mb_total: int = 16384

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("node name must be non-empty")
        _check_int("cpus_total", self.cpus_total, 1)
        _check_int("gpus_total", self.gpus_total, 0)
        _check_int("memory_mb_total", self.memory_mb_total, 1)


def tail_text(text: str, limit: int = MAX_DETAIL_BYTES) -> str:
    """Return the longest suffix of ``text`` whose UTF-8 encoding fits in ``limit`` bytes."""
    raw = text.encode("utf-8")
    if len(raw) <= limit:
        return text
    return raw[-limit:].decode("utf-8", errors="ignore")


# wire format


def _check_json_value(value: Any, path: str) -> None:
    if value is None or isinstance(value, (str, bool, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise EncodeError(f"param {path!r} is not a finite number", key=path)
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check_json_value(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for k, item in value.items():
            if not isinstance(k, str):
                raise EncodeError(f"param {path!r} has non-string key {k!r}", key=path)
            _check_json_value(item, f"{path}.{k}")
        return
    raise EncodeError(f"param {path!r} has non-serializable value of type {type(value).__name__}", key=path)


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode(
        "utf-8"
    )


def encode_message(envelope: Envelope) -> bytes:
    if isinstance(envelope, TaskSpec):
        for key, value in envelope.params.items():
            _check_json_value(value, key)
    elif isinstance(envelope, ResultEnvelope):
        _check_json_value(envelope.result, "result")
    elif not isinstance(envelope, (StatusUpdate, ErrorEnvelope)):
        raise EncodeError(f"cannot encode {type(envelope).__name__}")
    try:
        return canonical_json(envelope.to_wire())
    except (TypeError, ValueError) as exc:
        raise EncodeError(str(exc)) from exc


def _req(obj: dict, name: str, kind: type | tuple[type, ...], *, nullable: bool = False) -> Any:
    if name not in obj:
        raise MissingFieldError(name)
    value = obj[name]
    if value is None and nullable:
        return None
    if isinstance(value, bool) and bool not in (kind if isinstance(kind, tuple) else (kind,)):
        raise InvalidFieldError(f"field {name} has wrong type bool", field=name)
    if not isinstance(value, kind):
        raise InvalidFieldError(f"field {name} has wrong type {type(value).__name__}", field=name)
    return value


def _agent_from_wire(obj: dict) -> AgentIdentity:
    raw = _req(obj, "agent", dict)
    return AgentIdentity(_req(raw, "kind", str), _req(raw, "name", str))


def _task_from_wire(obj: dict) -> TaskSpec:
    task_id = _req(obj, "task_id", str)
    script = _req(obj, "script", str)
    res = _req(obj, "resources", dict)
    return TaskSpec(
        task_id=task_id,
        script=script,
        resources=ResourceRequest(
            cpus=_req(res, "cpus", int),
            gpus=_req(res, "gpus", int),
            memory_mb=_req(res, "memory_mb", int),
        ),
        timeout_s=_req(obj, "timeout_s", int, nullable=True),
        params=_req(obj, "params", dict),
    )


def _status_from_wire(obj: dict) -> StatusUpdate:
    return StatusUpdate(
        task_id=_req(obj, "task_id", str),
        status=_req(obj, "status", str),
        agent=_agent_from_wire(obj),
        timestamp_ms=_req(obj, "timestamp_ms", int),
        scheduler_job_id=_req(obj, "scheduler_job_id", str, nullable=True),
    )


def _result_from_wire(obj: dict) -> ResultEnvelope:
    if "result" not in obj:
        raise MissingFieldError("result")
    return ResultEnvelope(
        task_id=_req(obj, "task_id", str),
        agent=_agent_from_wire(obj),
        result=obj["result"],
        wall_time_s=_req(obj, "wall_time_s", (int, float)),
        timestamp_ms=_req(obj, "timestamp_ms", int),
    )


def _error_from_wire(obj: dict) -> ErrorEnvelope:
    return ErrorEnvelope(
        task_id=_req(obj, "task_id", str),
        agent=_agent_from_wire(obj),
        phase=_req(obj, "phase", str),
        message=_req(obj, "message", str),
        timestamp_ms=_req(obj, "timestamp_ms", int),
        detail=_req(obj, "detail", str, nullable=True),
    )


_DECODERS = {
    TaskSpec.TYPE: _task_from_wire,
    StatusUpdate.TYPE: _status_from_wire,
    ResultEnvelope.TYPE: _result_from_wire,
    ErrorEnvelope.TYPE: _error_from_wire,
}


def decode_message(raw: bytes) -> Envelope:
    """Inverse of :func:`encode_message`. Unknown extra fields are ignored."""
    try:
        obj = json.loads(raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessageError(f"malformed message: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedMessageError("message must be a JSON object")
    kind = obj.get("type")
    if kind is None:
        raise MissingFieldError("type")
    decoder = _DECODERS.get(kind)
    if decoder is None:
        raise UnknownTypeError(f"unknown message type {kind!r}")
    try:
        return decoder(obj)
    except DecodeError:
        raise
    except ValidationError as exc:
        raise InvalidFieldError(f"invariant violation: {exc}") from exc
    except ValueError as exc:
        raise InvalidFieldError(f"invalid value: {exc}") from exc
