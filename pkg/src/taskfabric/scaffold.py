"""Generates a runnable project skeleton: config, start scripts, demo payload and submit script."""

from __future__ import annotations

import stat
from pathlib import Path

from taskfabric.errors import TaskFabricError, ValidationError
from taskfabric.model import validate_prefix


class ScaffoldError(TaskFabricError):
    pass


CONFIG_TEMPLATE = """\
# taskfabric deployment for project "{prefix}"
broker_endpoint = inproc:./broker
prefix = {prefix}
poll_interval_s = 0.2
oversubscribe_slots = 2
default_timeout_s = 600
max_worker_slots = 2
monitor_http_port = {port}
monitor_url = http://127.0.0.1:{port}
delivery = EXACTLY_ONCE_EFFECTIVE
workdir = ./work
datadir = ./monitor-data

# "slurm" drives sbatch/squeue/scancel; "sim" runs an in-process cluster simulator
scheduler = sim
sim.node.0 = node0,4,0,16384
sim.node.1 = node1,4,0,16384
"""

AGENT_SCRIPT = """\
#!/usr/bin/env bash
set -euo pipefail
cd "$(dirname "$0")"
exec "${{PYTHON:-python3}}" -m taskfabric {command} --config taskfabric.cfg {extra}"$@"
"""

PAYLOAD_TEMPLATE = '''\
"""Demo payload: multiplies two seeded random integer matrices."""

import random

from taskfabric.runner import Computation


class MatrixComputation(Computation):
    def compute(self):
        n = int(self.params.get("n", 3))
        seed = int(self.params.get("seed", 0))
        rng = random.Random(seed)
        a = [[rng.randint(0, 9) for _ in range(n)] for _ in range(n)]
        b = [[rng.randint(0, 9) for _ in range(n)] for _ in range(n)]
        self.post_status("MULTIPLYING")
        c = [[sum(a[i][k] * b[k][j] for k in range(n)) for j in range(n)] for i in range(n)]
        return {
            "n": n,
            "seed": seed,
            "checksum": sum(sum(row) for row in c),
            "trace": sum(c[i][i] for i in range(n)),
        }
'''

SUBMIT_TEMPLATE = '''\
"""Submit demo matrix tasks and optionally wait until the monitor reports them finished."""

import argparse
import json
import sys
import time
from pathlib import Path

from taskfabric.broker import connect, ensure_topics
from taskfabric.config import load_config
from taskfabric.model import ResourceRequest, TaskSpec
from taskfabric.submitter import MonitorClient, submit

HERE = Path(__file__).resolve().parent


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--count", type=int, default=8)
    parser.add_argument("--size", type=int, default=4)
    parser.add_argument("--wait", action="store_true")
    parser.add_argument("--wait-timeout", type=float, default=120.0)
    args = parser.parse_args()

    config = load_config(HERE / "taskfabric.cfg")
    broker = connect(config.broker_endpoint, config.base_dir)
    ensure_topics(broker, config.topics, config.partitions_new, config.partitions_other)
    specs = [
        TaskSpec(f"{prefix}-{{i}}", "payload.py", ResourceRequest(cpus=1, memory_mb=256),
                 params={{"n": args.size, "seed": i}})
        for i in range(args.count)
    ]
    report = submit(broker, config.topics, specs, skip_if_done=True, monitor=config.monitor_url)
    print(json.dumps(report.to_wire()), flush=True)
    if report.failed:
        return 1
    if not args.wait:
        return 0

    monitor = MonitorClient(config.monitor_url)
    pending = {{spec.task_id for spec in specs}}
    deadline = time.monotonic() + args.wait_timeout
    failed = 0
    while pending and time.monotonic() < deadline:
        for task_id in sorted(pending):
            try:
                record = monitor.task(task_id)
            except OSError:
                break
            if record is None:
                continue
            status = record["latest_status"]
            if status == "DONE":
                result = record["result"]["result"]
                print(json.dumps({{"task_id": task_id, "status": status, "result": result}}), flush=True)
                pending.discard(task_id)
            elif status in ("ERROR", "CANCELLED"):
                print(json.dumps({{"task_id": task_id, "status": status, "error": record["error"]}}), flush=True)
                pending.discard(task_id)
                failed += 1
        time.sleep(0.2)
    if pending:
        print(f"timed out waiting for {{len(pending)}} task(s)", file=sys.stderr)
        return 1
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
'''

DEMO_SCRIPT = """\
#!/usr/bin/env bash
# Starts the monitor, a simulated cluster agent and a worker agent, submits the demo
# tasks, waits for them to finish, then stops everything.
set -euo pipefail
cd "$(dirname "$0")"
export PYTHON="${PYTHON:-python3}"
mkdir -p logs
pids=()
cleanup() {
    for pid in "${pids[@]}"; do kill "$pid" 2>/dev/null || true; done
    wait 2>/dev/null || true
}
trap cleanup EXIT

./start_monitor.sh >logs/monitor.log 2>&1 &
pids+=("$!")
./start_cluster_agent.sh >logs/cluster-agent.log 2>&1 &
pids+=("$!")
./start_worker_agent.sh >logs/worker-agent.log 2>&1 &
pids+=("$!")

for _ in $(seq 1 100); do
    if "$PYTHON" -c "import urllib.request, sys; urllib.request.urlopen(sys.argv[1] + '/healthz', timeout=1)" \\
        "http://127.0.0.1:{port}" 2>/dev/null; then
        break
    fi
    sleep 0.1
done

"$PYTHON" submit.py --count "${{DEMO_TASKS:-8}}" --wait
"""

README_TEMPLATE = """\
# {prefix}

Generated taskfabric project.

* `taskfabric.cfg` holds the deployment settings (broker, topic prefix, scheduler).
* `start_cluster_agent.sh`, `start_worker_agent.sh` and `start_monitor.sh` start one component each.
* `payload.py` is the demo computation; `submit.py` publishes demo tasks.
* `run_demo.sh` runs everything end to end on the built-in cluster simulator.

Switch `scheduler = slurm` in `taskfabric.cfg` to submit through sbatch on a real cluster.
"""


def _render(prefix: str, port: int) -> dict[str, tuple[str, bool]]:
    return {
        "taskfabric.cfg": (CONFIG_TEMPLATE.format(prefix=prefix, port=port), False),
        "start_cluster_agent.sh": (AGENT_SCRIPT.format(command="cluster-agent",
                                                       extra='--name "${CLUSTER_NAME:-sim-1}" '), True),
        "start_worker_agent.sh": (AGENT_SCRIPT.format(command="worker-agent", extra=""), True),
        "start_monitor.sh": (AGENT_SCRIPT.format(command="monitor", extra=""), True),
        "payload.py": (PAYLOAD_TEMPLATE, False),
        "submit.py": (SUBMIT_TEMPLATE.replace("{prefix}", prefix).replace("{{", "{").replace("}}", "}"), False),
        "run_demo.sh": (DEMO_SCRIPT.replace("{port}", str(port)).replace("{{", "{").replace("}}", "}"), True),
        "README.md": (README_TEMPLATE.format(prefix=prefix), False),
    }


def scaffold(project_dir: str | Path, prefix: str, *, port: int = 8080) -> list[Path]:
    """Create a project in ``project_dir`` (absent or empty). Returns the created files."""
    try:
        validate_prefix(prefix)
    except ValidationError as exc:
        raise ScaffoldError(str(exc)) from exc
    root = Path(project_dir)
    if root.exists():
        if not root.is_dir():
            raise ScaffoldError(f"{root} exists and is not a directory")
        if any(root.iterdir()):
            raise ScaffoldError(f"refusing to scaffold into non-empty directory {root}")
    root.mkdir(parents=True, exist_ok=True)
    created = []
    for name, (content, executable) in _render(prefix, port).items():
        path = root / name
        path.write_text(content, encoding="utf-8")
        if executable:
            path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
        created.append(path)
    return created
