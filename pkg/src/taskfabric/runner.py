"""Payload-side launcher: reads a task's params.json, runs user code, publishes the outcome.

User code subclasses :class:`Computation` and implements :meth:`Computation.compute`.
The runner calls ``setup``, ``compute`` and ``teardown`` in that order. A normal
return publishes the result to ``-done`` followed by a DONE status on ``-jobs``;
an exception publishes an error envelope with phase RUN.

Exit codes: 0 when DONE was published, 70 when an error was published, 75 when
the terminal messages could not be delivered and were spilled to
``<workdir>/<task_id>/result.pending`` for a supervisor to flush.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib
import importlib.util
import inspect
import json
import logging
import os
import socket
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from taskfabric.broker import connect
from taskfabric.config import DeploymentConfig, load_config
from taskfabric.errors import BrokerUnavailableError, EncodeError, TaskFabricError
from taskfabric.model import (
    AgentIdentity,
    AgentKind,
    CoreStatus,
    Envelope,
    ErrorEnvelope,
    ErrorPhase,
    ResultEnvelope,
    StatusKind,
    StatusUpdate,
    TopicSet,
    canonical_json,
    encode_message,
    now_ms,
    tail_text,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 70
EXIT_PENDING = 75

ENV_AGENT = "TASKFABRIC_AGENT"
ENV_WORKDIR = "TASKFABRIC_WORKDIR"
ENV_JOB_ID = "TASKFABRIC_JOB_ID"

PARAMS_FILE = "params.json"
SPILL_FILE = "result.pending"
PUBLISH_ATTEMPTS = 3


class LaunchError(TaskFabricError):
    pass


def task_dir(workdir: str | Path, task_id: str) -> Path:
    return Path(workdir) / task_id


def write_params(workdir: str | Path, task_id: str, params: dict[str, Any]) -> Path:
    path = task_dir(workdir, task_id) / PARAMS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(canonical_json(params))
    os.replace(tmp, path)
    return path


def read_params(workdir: str | Path, task_id: str) -> dict[str, Any]:
    path = task_dir(workdir, task_id) / PARAMS_FILE
    try:
        data = json.loads(path.read_bytes())
    except FileNotFoundError as exc:
        raise LaunchError(f"missing parameter file {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LaunchError(f"corrupt parameter file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise LaunchError(f"parameter file {path} must hold a JSON object")
    return data


def _publish(broker, topic: str, key: str, envelope: Envelope, attempts: int = PUBLISH_ATTEMPTS) -> None:
    value = encode_message(envelope)
    for attempt in range(1, attempts + 1):
        try:
            broker.publish(topic, key.encode("utf-8"), value)
            return
        except BrokerUnavailableError:
            if attempt == attempts:
                raise
            time.sleep(0.02 * attempt)


@dataclass
class RunContext:
    task_id: str
    params: dict[str, Any]
    config: DeploymentConfig
    broker: Any
    agent: AgentIdentity
    workdir: Path
    clock: Callable[[], int] = now_ms
    scheduler_job_id: str | None = None
    statuses_posted: list[StatusKind] = field(default_factory=list)

    @property
    def topics(self) -> TopicSet:
        return self.config.topics

    def post_status(self, status: StatusKind) -> bool:
        """Publish a status update; failures are logged and the computation carries on."""
        update = StatusUpdate(self.task_id, status, self.agent, self.clock(), self.scheduler_job_id)
        try:
            _publish(self.broker, self.topics.jobs, self.task_id, update)
        except BrokerUnavailableError:
            log.warning("could not publish status %s for %s: broker unavailable", status, self.task_id)
            return False
        self.statuses_posted.append(update.status)
        return True


class Computation:
    """Base class for user computations run by the task runner."""

    def __init__(self, context: RunContext):
        self.context = context
        self.task_id = context.task_id
        self.params = context.params

    def setup(self) -> None:
        pass

    def compute(self) -> Any:
        raise NotImplementedError

    def teardown(self) -> None:
        pass

    def post_status(self, status: StatusKind) -> bool:
        return self.context.post_status(status)


def _load_module_from_file(path: Path):
    name = "taskfabric_payload_" + hashlib.sha1(str(path.resolve()).encode()).hexdigest()[:12]
    if name in sys.modules:
        return sys.modules[name]
    spec = importlib.util.spec_from_file_location(name, path)
    if spec is None or spec.loader is None:
        raise LaunchError(f"cannot load payload script {path}")
    module = importlib.util.module_from_spec(spec)
    sys.modules[name] = module
    try:
        spec.loader.exec_module(module)
    except BaseException:
        del sys.modules[name]
        raise
    return module


def load_computation(script: str, base_dir: str | Path | None = None) -> type[Computation]:
    """Resolve a script reference to a Computation subclass.

    Accepted forms: ``path/to/file.py``, ``path/to/file.py:ClassName``,
    ``package.module`` and ``package.module:ClassName``.
    """
    target, _, attr = script.partition(":")
    try:
        if target.endswith(".py"):
            path = Path(target)
            if not path.is_absolute() and not path.exists() and base_dir is not None:
                path = Path(base_dir) / path
            if not path.exists():
                raise LaunchError(f"payload script {target} not found")
            module = _load_module_from_file(path)
        else:
            module = importlib.import_module(target)
    except LaunchError:
        raise
    except Exception as exc:
        raise LaunchError(f"cannot import payload {script!r}: {exc}") from exc
    if attr:
        cls = getattr(module, attr, None)
        if not (inspect.isclass(cls) and issubclass(cls, Computation)):
            raise LaunchError(f"{script!r} does not name a Computation subclass")
        return cls
    found = [
        obj for obj in vars(module).values()
        if inspect.isclass(obj) and issubclass(obj, Computation) and obj is not Computation
        and obj.__module__ == module.__name__
    ]
    if len(found) != 1:
        raise LaunchError(f"{script!r} must define exactly one Computation subclass, found {len(found)}")
    return found[0]


def _spill(workdir: Path, task_id: str, messages: list[tuple[str, Envelope]]) -> Path:
    path = task_dir(workdir, task_id) / SPILL_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        for topic, env in messages:
            fh.write(json.dumps({"topic": topic, "value": encode_message(env).decode("utf-8")}) + "\n")
    return path


def flush_pending(broker, workdir: str | Path, task_id: str) -> bool:
    """Publish spilled terminal messages for ``task_id``. True when nothing remains pending."""
    path = task_dir(workdir, task_id) / SPILL_FILE
    if not path.exists():
        return True
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    for i, line in enumerate(lines):
        item = json.loads(line)
        try:
            broker.publish(item["topic"], task_id.encode("utf-8"), item["value"].encode("utf-8"))
        except BrokerUnavailableError:
            path.write_text("".join(ln + "\n" for ln in lines[i:]), encoding="utf-8")
            return False
    path.unlink()
    return True


def _deliver_terminal(context: RunContext, messages: list[tuple[str, Envelope]], spill_wait_s: float) -> bool:
    """Publish terminal messages, spilling them to disk while the broker is unreachable."""
    for i, (topic, env) in enumerate(messages):
        try:
            _publish(context.broker, topic, context.task_id, env)
        except BrokerUnavailableError:
            log.warning("broker unavailable; spilling result for %s", context.task_id)
            _spill(context.workdir, context.task_id, messages[i:])
            break
    else:
        return True
    deadline = time.monotonic() + spill_wait_s
    delay = 0.05
    while True:
        if flush_pending(context.broker, context.workdir, context.task_id):
            return True
        if time.monotonic() >= deadline:
            return False
        time.sleep(delay)
        delay = min(delay * 2, 1.0)


def run(computation_cls: type[Computation], context: RunContext, *, spill_wait_s: float = 30.0) -> int:
    """Run one computation to completion and publish exactly one terminal outcome."""
    started = time.perf_counter()
    topics = context.topics
    try:
        computation = computation_cls(context)
        computation.setup()
        try:
            result = computation.compute()
        finally:
            computation.teardown()
        result_env = ResultEnvelope(
            context.task_id, context.agent, result, time.perf_counter() - started, context.clock()
        )
        encode_message(result_env)
    except (Exception, SystemExit) as exc:
        if isinstance(exc, EncodeError):
            message = f"result is not serializable: {exc}"
        else:
            message = f"{type(exc).__name__}: {exc}"
        error = ErrorEnvelope(
            context.task_id, context.agent, ErrorPhase.RUN, message, context.clock(),
            detail=tail_text(traceback.format_exc()),
        )
        delivered = _deliver_terminal(context, [(topics.error, error)], spill_wait_s)
        return EXIT_FAILED if delivered else EXIT_PENDING
    done = StatusUpdate(context.task_id, CoreStatus.DONE, context.agent, context.clock(), context.scheduler_job_id)
    delivered = _deliver_terminal(context, [(topics.done, result_env), (topics.jobs, done)], spill_wait_s)
    return EXIT_OK if delivered else EXIT_PENDING


def default_agent() -> AgentIdentity:
    text = os.environ.get(ENV_AGENT)
    if text:
        return AgentIdentity.parse(text)
    return AgentIdentity(AgentKind.WORKER, socket.gethostname() or "localhost")


def launch(
    config: DeploymentConfig,
    task_id: str,
    script: str,
    *,
    broker=None,
    agent: AgentIdentity | None = None,
    workdir: str | Path | None = None,
    clock: Callable[[], int] = now_ms,
    scheduler_job_id: str | None = None,
    spill_wait_s: float = 30.0,
) -> int:
    """Full launch sequence: read params, resolve the payload, run it."""
    if broker is None:
        broker = connect(config.broker_endpoint, config.base_dir)
    agent = agent or default_agent()
    if workdir is None:
        workdir = os.environ.get(ENV_WORKDIR) or config.workdir_path
    workdir = Path(workdir)
    scheduler_job_id = scheduler_job_id or os.environ.get(ENV_JOB_ID) or os.environ.get("SLURM_JOB_ID")
    context = RunContext(task_id, {}, config, broker, agent, workdir, clock, scheduler_job_id)
    try:
        context.params = read_params(workdir, task_id)
        cls = load_computation(script, config.base_dir)
    except LaunchError as exc:
        error = ErrorEnvelope(task_id, agent, ErrorPhase.LAUNCH, str(exc), clock(),
                              detail=tail_text(traceback.format_exc()))
        delivered = _deliver_terminal(context, [(config.topics.error, error)], spill_wait_s)
        return EXIT_FAILED if delivered else EXIT_PENDING
    return run(cls, context, spill_wait_s=spill_wait_s)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="taskfabric-run", description="Run one task payload")
    parser.add_argument("--config", required=True, help="deployment config file")
    parser.add_argument("--task-id", required=True)
    parser.add_argument("--script", required=True, help="payload script reference")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    config = load_config(args.config)
    return launch(config, args.task_id, args.script)


if __name__ == "__main__":
    # re-enter through the importable module so payloads share its Computation class
    from taskfabric.runner import main as _main

    raise SystemExit(_main())
