"""Deployment configuration: a flat ``key = value`` text file.

Precedence is documented defaults < file values < explicit overrides.
Lines starting with ``#`` or ``;`` are comments. Values may be wrapped in
single or double quotes. Simulator nodes are declared as
``sim.node.<i> = name,cpus,gpus,memory_mb``.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from taskfabric.errors import ConfigError, ValidationError
from taskfabric.model import NodeSpec, TopicSet, derive_topic_set, validate_prefix


class Delivery(str, Enum):
    AT_LEAST_ONCE = "AT_LEAST_ONCE"
    EXACTLY_ONCE_EFFECTIVE = "EXACTLY_ONCE_EFFECTIVE"


@dataclass(frozen=True)
class DeploymentConfig:
    broker_endpoint: str = "inproc:./broker"
    prefix: str = "ksa"
    poll_interval_s: float = 5.0
    oversubscribe_slots: int = 2
    default_timeout_s: int = 86400
    max_worker_slots: int = 4
    monitor_http_port: int = 8080
    delivery: Delivery = Delivery.AT_LEAST_ONCE
    # deployment plumbing beyond the core keys
    workdir: str = "./work"
    datadir: str = "./monitor-data"
    scheduler: str = "slurm"
    sim_nodes: tuple[NodeSpec, ...] = ()
    partitions_new: int = 8
    partitions_other: int = 1
    cluster_group: str = "cluster-agents"
    worker_group: str = "cluster-agents"
    monitor_group: str = "monitors"
    monitor_url: str = ""
    runner_command: str = "taskfabric-run"
    command_timeout_s: float = 30.0
    snapshot_every: int = 500
    base_dir: str = "."
    source_path: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        try:
            validate_prefix(self.prefix)
        except ValidationError as exc:
            raise ConfigError(str(exc), key="prefix") from exc
        _positive("poll_interval_s", self.poll_interval_s)
        _non_negative_int("oversubscribe_slots", self.oversubscribe_slots)
        _positive_int("default_timeout_s", self.default_timeout_s)
        _positive_int("max_worker_slots", self.max_worker_slots)
        _positive_int("partitions_new", self.partitions_new)
        _positive_int("partitions_other", self.partitions_other)
        _positive_int("snapshot_every", self.snapshot_every)
        _positive("command_timeout_s", self.command_timeout_s)
        if not isinstance(self.monitor_http_port, int) or not 0 <= self.monitor_http_port <= 65535:
            raise ConfigError("monitor_http_port must be an integer in [0, 65535]", key="monitor_http_port")
        if self.scheduler not in ("sim", "slurm"):
            raise ConfigError("scheduler must be 'sim' or 'slurm'", key="scheduler")
        if not self.broker_endpoint:
            raise ConfigError("broker_endpoint must be set", key="broker_endpoint")
        for key in ("cluster_group", "worker_group", "monitor_group"):
            if not getattr(self, key):
                raise ConfigError(f"{key} must be non-empty", key=key)

    @property
    def topics(self) -> TopicSet:
        return derive_topic_set(self.prefix)

    def resolve(self, path: str | Path) -> Path:
        """Resolve ``path`` against the directory holding the config file."""
        p = Path(path).expanduser()
        return p if p.is_absolute() else (Path(self.base_dir) / p)

    @property
    def workdir_path(self) -> Path:
        return self.resolve(self.workdir)

    @property
    def datadir_path(self) -> Path:
        return self.resolve(self.datadir)

    def replace(self, **changes: Any) -> DeploymentConfig:
        return dataclasses.replace(self, **changes)


def _positive(key: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(f"{key} must be > 0, got {value!r}", key=key)


def _positive_int(key: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{key} must be a positive integer, got {value!r}", key=key)


def _non_negative_int(key: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ConfigError(f"{key} must be a non-negative integer, got {value!r}", key=key)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(DeploymentConfig)}
_DOTTED_ALIASES = {
    "worker.group": "worker_group",
    "monitor.group": "monitor_group",
    "cluster.group": "cluster_group",
}
_NODE_KEY = re.compile(r"^sim\.node\.(\d+)$")
_INTERNAL = {"sim_nodes", "source_path", "base_dir"}


def _coerce(key: str, raw: Any) -> Any:
    kind = _FIELD_TYPES[key]
    if not isinstance(raw, str):
        if kind == "float" and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if kind == "Delivery":
            return _coerce(key, str(raw.value if isinstance(raw, Enum) else raw))
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "Delivery":
            return Delivery(text.upper())
    except ValueError as exc:
        raise ConfigError(f"invalid value for {key}: {raw!r}", key=key) from exc
    return text


def parse_node(key: str, value: str) -> NodeSpec:
    parts = [p.strip() for p in str(value).split(",")]
    if len(parts) != 4:
        raise ConfigError(f"{key} must be 'name,cpus,gpus,memory_mb'", key=key)
    try:
        return NodeSpec(parts[0], int(parts[1]), int(parts[2]), int(parts[3]))
    except (ValueError, ValidationError) as exc:
        raise ConfigError(f"invalid node definition {key}: {exc}", key=key) from exc


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines into an ordered mapping."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}", line=lineno)
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        values[key] = value
    return values


def _apply(settings: dict[str, Any], nodes: dict[int, NodeSpec], raw: Mapping[str, Any]) -> None:
    for key, value in raw.items():
        match = _NODE_KEY.match(key)
        if match:
            nodes[int(match.group(1))] = value if isinstance(value, NodeSpec) else parse_node(key, value)
            continue
        name = _DOTTED_ALIASES.get(key, key)
        if name not in _FIELD_TYPES or name in _INTERNAL:
            raise ConfigError(f"unknown configuration key {key!r}", key=key)
        settings[name] = _coerce(name, value)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> DeploymentConfig:
    settings: dict[str, Any] = {}
    nodes: dict[int, NodeSpec] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        _apply(settings, nodes, parse_config_text(text))
        settings["base_dir"] = str(path.resolve().parent)
        settings["source_path"] = str(path.resolve())
    _apply(settings, nodes, overrides or {})
    if nodes:
        settings["sim_nodes"] = tuple(nodes[i] for i in sorted(nodes))
    return DeploymentConfig(**settings)


def dump_config(config: DeploymentConfig) -> str:
    """Render ``config`` back into the flat file format."""
    lines = []
    for f in dataclasses.fields(DeploymentConfig):
        if f.name in _INTERNAL:
            continue
        value = getattr(config, f.name)
        lines.append(f"{f.name} = {value.value if isinstance(value, Enum) else value}")
    for i, node in enumerate(config.sim_nodes):
        lines.append(f"sim.node.{i} = {node.name},{node.cpus_total},{node.gpus_total},{node.memory_mb_total}")
    return "\n".join(lines) + "\n"
