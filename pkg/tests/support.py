"""Shared builders and a deterministic driver for multi-agent runs."""

from __future__ import annotations

import socket
from dataclasses import dataclass, field
from pathlib import Path

from taskfabric.broker import InProcessBroker, ensure_topics
from taskfabric.config import DeploymentConfig
from taskfabric.model import NodeSpec, ResourceRequest, TaskSpec, encode_message

FIXTURES = Path(__file__).parent / "fixtures"
FLAKY_PAYLOAD = str(FIXTURES / "flaky_payload.py")
MATRIX_PAYLOAD = "taskfabric.payloads.matrix:MatrixComputation"


def nodes(count: int, cpus: int = 4, gpus: int = 0, memory_mb: int = 16384, prefix: str = "n") -> tuple:
    return tuple(NodeSpec(f"{prefix}{i}", cpus, gpus, memory_mb) for i in range(count))


def make_config(tmp_path: Path, **overrides) -> DeploymentConfig:
    base = dict(
        broker_endpoint=f"inproc:{tmp_path / 'broker'}",
        prefix="t",
        poll_interval_s=0.5,
        workdir=str(tmp_path / "work"),
        datadir=str(tmp_path / "monitor-data"),
        scheduler="sim",
        base_dir=str(tmp_path),
    )
    base.update(overrides)
    return DeploymentConfig(**base)


def make_broker(config: DeploymentConfig, root: Path | None = None) -> InProcessBroker:
    broker = InProcessBroker(root)
    ensure_topics(broker, config.topics, config.partitions_new, config.partitions_other)
    return broker


def spec(task_id: str, *, cpus: int = 1, gpus: int = 0, memory_mb: int = 256, timeout_s=None,
         script: str = MATRIX_PAYLOAD, **params) -> TaskSpec:
    return TaskSpec(task_id, script, ResourceRequest(cpus, gpus, memory_mb), timeout_s, params)


def publish_specs(broker, config: DeploymentConfig, specs) -> None:
    for s in specs:
        broker.publish(config.topics.new, s.task_id.encode(), encode_message(s))


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@dataclass
class Published:
    """Everything agents published, decoded, read straight from the broker logs."""

    statuses: list = field(default_factory=list)
    results: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def read_outputs(broker, config: DeploymentConfig) -> Published:
    from taskfabric.model import decode_message

    out = Published()
    topics = config.topics
    for topic, bucket in ((topics.jobs, out.statuses), (topics.done, out.results), (topics.error, out.errors)):
        for p in range(broker.partitions_for(topic)):
            bucket.extend(decode_message(r.value) for r in broker.read(topic, p))
    return out
