"""Broker-mediated distribution of independent tasks across batch clusters and workstations."""

from taskfabric.config import DeploymentConfig, load_config
from taskfabric.model import (
    AgentIdentity,
    CoreStatus,
    ErrorEnvelope,
    ResourceRequest,
    ResultEnvelope,
    StatusUpdate,
    TaskSpec,
    decode_message,
    derive_topic_set,
    encode_message,
)
from taskfabric.runner import Computation

__version__ = "0.1.0"

__all__ = [
    "AgentIdentity",
    "Computation",
    "CoreStatus",
    "DeploymentConfig",
    "ErrorEnvelope",
    "ResourceRequest",
    "ResultEnvelope",
    "StatusUpdate",
    "TaskSpec",
    "decode_message",
    "derive_topic_set",
    "encode_message",
    "load_config",
]
