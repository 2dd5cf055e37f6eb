from __future__ import annotations

import argparse
import json
import logging
import signal
import socket
import sys
import threading
from pathlib import Path
from typing import Any

from taskfabric.broker import connect, ensure_topics
from taskfabric.cluster_agent import ClusterAgent, build_adapter
from taskfabric.config import load_config
from taskfabric.errors import TaskFabricError
from taskfabric.model import ResourceRequest, TaskSpec
from taskfabric.monitor import MonitorAgent, start_http_server
from taskfabric.scaffold import scaffold
from taskfabric.submitter import load_manifest, submit
from taskfabric.worker_agent import WorkerAgent

log = logging.getLogger("taskfabric")


def _stop_on_signals() -> threading.Event:
    stop = threading.Event()

    def handler(signum, frame):
        log.info("received signal %d, stopping", signum)
        stop.set()

    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, handler)
    return stop


def _parse_param(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _open(config):
    broker = connect(config.broker_endpoint, config.base_dir)
    ensure_topics(broker, config.topics, config.partitions_new, config.partitions_other)
    return broker


def cmd_cluster_agent(args) -> int:
    config = load_config(args.config)
    broker = _open(config)
    name = args.name or socket.gethostname()
    adapter = build_adapter(config, broker, name=name)
    agent = ClusterAgent(config, broker, adapter, name=name, create_topics=False)
    agent.serve(once=args.once, stop=None if args.once else _stop_on_signals())
    return 0


def cmd_worker_agent(args) -> int:
    config = load_config(args.config)
    broker = _open(config)
    agent = WorkerAgent(config, broker, name=args.name, slots=args.slots, create_topics=False)
    agent.serve(once=args.once, stop=None if args.once else _stop_on_signals())
    return 0


def cmd_monitor(args) -> int:
    config = load_config(args.config)
    broker = _open(config)
    monitor = MonitorAgent(config, broker, name=args.name, create_topics=False)
    port = config.monitor_http_port if args.port is None else args.port
    server = start_http_server(monitor, port, host=args.host)
    log.info("monitor REST API on http://%s:%d", *server.server_address[:2])
    try:
        monitor.serve(once=args.once, stop=None if args.once else _stop_on_signals())
    finally:
        server.shutdown()
    return 0


def cmd_submit(args) -> int:
    config = load_config(args.config)
    if args.manifest:
        specs = load_manifest(Path(args.manifest).read_bytes())
    else:
        if not (args.task_id and args.script):
            print("submit: --task-id and --script are required without --manifest", file=sys.stderr)
            return 2
        specs = [TaskSpec(
            args.task_id,
            args.script,
            ResourceRequest(cpus=args.cpus, gpus=args.gpus, memory_mb=args.mem),
            timeout_s=args.timeout,
            params=dict(args.param),
        )]
    broker = _open(config)
    report = submit(broker, config.topics, specs, skip_if_done=args.skip_if_done, monitor=config.monitor_url)
    print(json.dumps(report.to_wire(), indent=2))
    return 0 if report.ok else 1


def cmd_scaffold(args) -> int:
    created = scaffold(args.dir, args.prefix, port=args.port)
    for path in created:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskfabric", description="Broker-mediated task distribution")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster-agent", help="feed tasks into a batch scheduler")
    p.add_argument("--config", required=True)
    p.add_argument("--name", help="cluster name (default: hostname)")
    p.add_argument("--once", action="store_true", help="run exactly one cycle")
    p.set_defaults(func=cmd_cluster_agent)

    p = sub.add_parser("worker-agent", help="run tasks directly on this machine")
    p.add_argument("--config", required=True)
    p.add_argument("--name", help="worker name (default: hostname)")
    p.add_argument("--slots", type=int)
    p.add_argument("--once", action="store_true", help="run exactly one cycle")
    p.set_defaults(func=cmd_worker_agent)

    p = sub.add_parser("monitor", help="track task state and serve the REST API")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--name", default="monitor")
    p.add_argument("--once", action="store_true", help="ingest one batch and exit")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("submit", help="publish task specs")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", help="JSON file holding a list of task objects")
    p.add_argument("--task-id")
    p.add_argument("--script")
    p.add_argument("--cpus", type=int, default=1)
    p.add_argument("--gpus", type=int, default=0)
    p.add_argument("--mem", type=int, default=1024, help="memory in MB")
    p.add_argument("--timeout", type=int, help="timeout in seconds")
    p.add_argument("--param", type=_parse_param, action="append", default=[], metavar="KEY=VALUE",
                   help="task parameter; VALUE is parsed as JSON when possible")
    p.add_argument("--skip-if-done", action="store_true", help="skip tasks the monitor already reports DONE")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("scaffold", help="generate a runnable project template")
    p.add_argument("dir")
    p.add_argument("--prefix", required=True)
    p.add_argument("--port", type=int, default=8080, help="monitor port written into the config")
    p.set_defaults(func=cmd_scaffold)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TaskFabricError, OSError) as exc:
        print(f"taskfabric {args.command}: {exc}", file=sys.stderr)
        return 1
