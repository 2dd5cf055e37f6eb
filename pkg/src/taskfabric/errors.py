"""Exception hierarchy shared by all taskfabric components."""


class TaskFabricError(Exception):
    """Base class for every error raised by this package."""


class RetriableError(TaskFabricError):
    """The operation may succeed if attempted again later."""


class ValidationError(TaskFabricError, ValueError):
    """A value object was constructed with data violating its invariants."""


class ConfigError(TaskFabricError):
    def __init__(self, message: str, *, key: str | None = None, line: int | None = None):
        super().__init__(message)
        self.key = key
        self.line = line


class EncodeError(TaskFabricError):
    def __init__(self, message: str, *, key: str | None = None):
        super().__init__(message)
        self.key = key


class DecodeError(TaskFabricError):
    """Base class for wire-format decoding failures."""


class MalformedMessageError(DecodeError):
    pass


class UnknownTypeError(DecodeError):
    pass


class MissingFieldError(DecodeError):
    def __init__(self, field: str):
        super().__init__(f"missing field {field}")
        self.field = field


class InvalidFieldError(DecodeError):
    def __init__(self, message: str, *, field: str | None = None):
        super().__init__(message)
        self.field = field


# broker


class BrokerError(TaskFabricError):
    pass


class UnknownTopicError(BrokerError):
    pass


class TopicConflictError(BrokerError):
    pass


class NotAssignedError(BrokerError):
    pass


class BrokerUnavailableError(BrokerError, RetriableError):
    pass


class RebalanceNotice(BrokerError, RetriableError):
    """The member's partition assignment changed; poll again to continue."""

    def __init__(self, member_id: str, assignment: dict[str, list[int]]):
        super().__init__(f"member {member_id!r} was rebalanced")
        self.member_id = member_id
        self.assignment = assignment


# scheduler


class SchedulerError(TaskFabricError):
    pass


class SchedulerUnavailableError(SchedulerError, RetriableError):
    pass


class SubmissionRejectedError(SchedulerError):
    """Permanent rejection, e.g. a request no node can ever satisfy."""


class UnknownJobError(SchedulerError):
    pass
