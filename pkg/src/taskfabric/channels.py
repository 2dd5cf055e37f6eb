from __future__ import annotations

from taskfabric.model import (
    AgentIdentity,
    CoreStatus,
    ErrorEnvelope,
    ErrorPhase,
    StatusKind,
    StatusUpdate,
    TopicSet,
    encode_message,
)


class Publisher:
    """Publishes an agent's status and error envelopes keyed by task id."""

    def __init__(self, broker, topics: TopicSet, agent: AgentIdentity):
        self.broker = broker
        self.topics = topics
        self.agent = agent
        self.sent: list[StatusUpdate | ErrorEnvelope] = []

    def status(self, task_id: str, status: StatusKind, timestamp_ms: int, scheduler_job_id: str | None = None
               ) -> StatusUpdate:
        update = StatusUpdate(task_id, status, self.agent, timestamp_ms, scheduler_job_id)
        self.broker.publish(self.topics.jobs, task_id.encode("utf-8"), encode_message(update))
        self.sent.append(update)
        return update

    def error(self, task_id: str, phase: ErrorPhase, message: str, timestamp_ms: int, detail: str | None = None
              ) -> ErrorEnvelope:
        env = ErrorEnvelope(task_id, self.agent, phase, message, timestamp_ms, detail)
        self.broker.publish(self.topics.error, task_id.encode("utf-8"), encode_message(env))
        self.sent.append(env)
        return env

    def timeout(self, task_id: str, timeout_s: int, timestamp_ms: int, scheduler_job_id: str | None = None) -> None:
        self.error(task_id, ErrorPhase.TIMEOUT, f"task exceeded its {timeout_s}s timeout and was cancelled",
                   timestamp_ms)
        self.status(task_id, CoreStatus.CANCELLED, timestamp_ms, scheduler_job_id)
