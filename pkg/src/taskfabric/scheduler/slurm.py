"""Slurm driver that talks to the workload manager only through its command-line tools."""

from __future__ import annotations

import logging
import re
import shlex
import subprocess
import threading
from pathlib import Path
from typing import Callable, Mapping, Sequence

from taskfabric.errors import (
    SchedulerUnavailableError,
    SubmissionRejectedError,
    UnknownJobError,
)
from taskfabric.model import NodeSpec, TaskSpec, now_ms
from taskfabric.scheduler.base import ClusterSnapshot, JobState, SchedulerJob

log = logging.getLogger(__name__)

STATE_MAP = {
    "PENDING": JobState.PENDING,
    "RUNNING": JobState.RUNNING,
    "COMPLETING": JobState.RUNNING,
    "COMPLETED": JobState.COMPLETED,
    "FAILED": JobState.FAILED,
    "NODE_FAIL": JobState.FAILED,
    "OUT_OF_MEMORY": JobState.FAILED,
    "CANCELLED": JobState.CANCELLED,
    "TIMEOUT": JobState.CANCELLED,
}

# sbatch stderr fragments that mean the request can never be satisfied
_PERMANENT_MARKERS = (
    "requested node configuration is not available",
    "invalid",
    "unsatisfiable",
    "more processors requested than permitted",
    "memory specification can not be satisfied",
)

Runner = Callable[..., subprocess.CompletedProcess]


def map_state(raw: str) -> JobState:
    token = raw.strip().split()[0].rstrip("+") if raw.strip() else ""
    state = STATE_MAP.get(token)
    if state is None:
        raise SchedulerUnavailableError(f"unknown Slurm job state {raw.strip()!r}")
    return state


def parse_memory_mb(text: str) -> int:
    """Parse Slurm memory strings such as ``4000``, ``500M``, ``4G`` or ``1T`` into MiB."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)([KMGT]?)\s*", text.upper())
    if not m:
        return 0
    value = float(m.group(1))
    factor = {"K": 1 / 1024, "M": 1, "": 1, "G": 1024, "T": 1024 * 1024}[m.group(2)]
    return int(value * factor)


def parse_gpu_count(text: str) -> int:
    """Count GPUs in gres strings like ``gpu:4``, ``gpu:a100:2(S:0-1)`` or ``gres/gpu:2``."""
    total = 0
    for item in text.split(","):
        item = re.sub(r"\(.*?\)", "", item.strip())
        if item.startswith("gres/"):
            item = item[len("gres/"):]
        if not item.startswith("gpu"):
            continue
        last = item.split(":")[-1]
        total += int(last) if last.isdigit() else 1
    return total


class SlurmCLI:
    def __init__(self, workdir: str | Path, *, command_timeout_s: float = 30.0, run: Runner = subprocess.run):
        self.workdir = Path(workdir)
        self.command_timeout_s = command_timeout_s
        self._run = run
        self._lock = threading.Lock()
        # locally observed submit/start/end times; Slurm's own are not needed for supervision
        self._times: dict[str, dict[str, int | None]] = {}
        self._names: dict[str, str] = {}

    def _call(self, argv: Sequence[str]) -> subprocess.CompletedProcess:
        try:
            proc = self._run(list(argv), capture_output=True, text=True, timeout=self.command_timeout_s)
        except FileNotFoundError as exc:
            raise SchedulerUnavailableError(f"{argv[0]} not found") from exc
        except subprocess.TimeoutExpired as exc:
            raise SchedulerUnavailableError(f"{argv[0]} timed out after {self.command_timeout_s}s") from exc
        return proc

    def _check(self, argv: Sequence[str]) -> str:
        proc = self._call(argv)
        if proc.returncode != 0:
            raise SchedulerUnavailableError(f"{argv[0]} exited {proc.returncode}: {proc.stderr.strip()}")
        return proc.stdout

    def write_wrapper(self, spec: TaskSpec, command: str, env: Mapping[str, str]) -> Path:
        task_dir = self.workdir / spec.task_id
        task_dir.mkdir(parents=True, exist_ok=True)
        path = task_dir / "wrapper.sh"
        lines = ["#!/bin/bash", "set -e"]
        lines += [f"export {k}={shlex.quote(v)}" for k, v in sorted(env.items())]
        lines += [f"exec {command}", ""]
        path.write_text("\n".join(lines), encoding="utf-8")
        path.chmod(0o755)
        return path

    def submit_argv(self, spec: TaskSpec, wrapper: Path) -> list[str]:
        r = spec.resources
        argv = [
            "sbatch",
            "--parsable",
            f"--job-name={spec.task_id}",
            f"--cpus-per-task={r.cpus}",
            f"--mem={r.memory_mb}M",
        ]
        if r.gpus:
            argv.append(f"--gpus={r.gpus}")
        argv.append(str(wrapper))
        return argv

    def submit(self, spec: TaskSpec, command: str, env: Mapping[str, str] | None = None) -> SchedulerJob:
        wrapper = self.write_wrapper(spec, command, env or {})
        argv = self.submit_argv(spec, wrapper)
        proc = self._call(argv)
        if proc.returncode != 0:
            err = proc.stderr.strip()
            if any(marker in err.lower() for marker in _PERMANENT_MARKERS):
                raise SubmissionRejectedError(f"sbatch rejected {spec.task_id}: {err}")
            raise SchedulerUnavailableError(f"sbatch exited {proc.returncode}: {err}")
        job_id = proc.stdout.strip().split(";")[0]
        if not job_id:
            raise SchedulerUnavailableError("sbatch returned no job id")
        with self._lock:
            self._times[job_id] = {"submit": now_ms(), "start": None, "end": None}
            self._names[job_id] = spec.task_id
        return SchedulerJob(job_id, spec.task_id, JobState.PENDING, self._times[job_id]["submit"])

    def _raw_state(self, job_id: str) -> str:
        proc = self._call(["squeue", "-h", "-j", job_id, "-o", "%T"])
        if proc.returncode == 0 and proc.stdout.strip():
            return proc.stdout.strip().splitlines()[0]
        out = self._check(["sacct", "-n", "-j", job_id, "-o", "State"])
        lines = [ln for ln in out.splitlines() if ln.strip()]
        if not lines:
            raise UnknownJobError(f"unknown scheduler job id {job_id!r}")
        return lines[0]

    def _view(self, job_id: str, state: JobState, name: str | None = None) -> SchedulerJob:
        with self._lock:
            times = self._times.setdefault(job_id, {"submit": now_ms(), "start": None, "end": None})
            if state is not JobState.PENDING and times["start"] is None and state is not JobState.CANCELLED:
                times["start"] = now_ms()
            if state.terminal and times["end"] is None:
                times["end"] = now_ms()
            if name:
                self._names[job_id] = name
            return SchedulerJob(job_id, self._names.get(job_id, ""), state, times["submit"], times["start"],
                                times["end"])

    def job_state(self, scheduler_job_id: str) -> SchedulerJob:
        return self._view(scheduler_job_id, map_state(self._raw_state(scheduler_job_id)))

    def cancel(self, scheduler_job_id: str) -> SchedulerJob:
        current = self.job_state(scheduler_job_id)
        if current.state.terminal:
            return current
        self._check(["scancel", scheduler_job_id])
        return self._view(scheduler_job_id, JobState.CANCELLED)

    def find_jobs(self, name: str) -> list[SchedulerJob]:
        out = self._check(["squeue", "-h", "-n", name, "-o", "%i %T"])
        jobs = []
        for line in out.splitlines():
            parts = line.split()
            if len(parts) >= 2:
                jobs.append(self._view(parts[0], map_state(parts[1]), name))
        return sorted(jobs, key=lambda j: int(j.scheduler_job_id) if j.scheduler_job_id.isdigit() else 0)

    def snapshot(self) -> ClusterSnapshot:
        nodes: dict[str, NodeSpec] = {}
        for line in self._check(["sinfo", "-h", "-o", "%n %c %m %G"]).splitlines():
            parts = line.split()
            if len(parts) < 3 or parts[0] in nodes:
                continue
            gpus = parse_gpu_count(parts[3]) if len(parts) > 3 else 0
            try:
                nodes[parts[0]] = NodeSpec(parts[0], int(parts[1]), gpus, max(1, parse_memory_mb(parts[2])))
            except ValueError:
                log.warning("ignoring unparsable sinfo line %r", line)
        queued = running = used_cpus = used_gpus = used_mem = 0
        for line in self._check(["squeue", "-h", "-o", "%T %C %m %b"]).splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "PENDING":
                queued += 1
            elif parts[0] in ("RUNNING", "COMPLETING"):
                running += 1
                used_cpus += int(parts[1]) if len(parts) > 1 and parts[1].isdigit() else 0
                used_mem += parse_memory_mb(parts[2]) if len(parts) > 2 else 0
                used_gpus += parse_gpu_count(parts[3]) if len(parts) > 3 else 0
        specs = tuple(nodes.values())
        return ClusterSnapshot(
            nodes=specs,
            cpus_free=max(0, sum(n.cpus_total for n in specs) - used_cpus),
            gpus_free=max(0, sum(n.gpus_total for n in specs) - used_gpus),
            memory_mb_free=max(0, sum(n.memory_mb_total for n in specs) - used_mem),
            queued_jobs=queued,
            running_jobs=running,
            taken_at_ms=now_ms(),
        )
