import subprocess

import pytest

from taskfabric.errors import SchedulerUnavailableError, SubmissionRejectedError, UnknownJobError
from taskfabric.model import ResourceRequest, TaskSpec
from taskfabric.scheduler import JobState, SlurmCLI
from taskfabric.scheduler.slurm import map_state, parse_gpu_count, parse_memory_mb


class FakeRun:
    """Scripted stand-in for subprocess.run keyed on the command name."""

    def __init__(self, responses):
        self.responses = responses
        self.calls = []

    def __call__(self, argv, **kwargs):
        self.calls.append(argv)
        answer = self.responses[argv[0]]
        if callable(answer):
            answer = answer(argv)
        if isinstance(answer, BaseException):
            raise answer
        code, out, err = answer
        return subprocess.CompletedProcess(argv, code, out, err)


def spec(gpus=0):
    return TaskSpec("t1", "p.py:C", ResourceRequest(2, gpus, 1024))


def test_submit_argv_and_wrapper(tmp_path):
    run = FakeRun({"sbatch": (0, "4242;cluster\n", "")})
    cli = SlurmCLI(tmp_path, run=run)
    job = cli.submit(spec(gpus=1), "python3 -m runner", {"B": "two words", "A": "1"})
    assert job.scheduler_job_id == "4242" and job.state is JobState.PENDING
    wrapper = tmp_path / "t1" / "wrapper.sh"
    assert run.calls == [["sbatch", "--parsable", "--job-name=t1", "--cpus-per-task=2", "--mem=1024M",
                          "--gpus=1", str(wrapper)]]
    assert wrapper.read_text().splitlines() == [
        "#!/bin/bash", "set -e", "export A=1", "export B='two words'", "exec python3 -m runner"]
    assert "--gpus" not in " ".join(cli.submit_argv(spec(), wrapper))


def test_submit_failures(tmp_path):
    cli = SlurmCLI(tmp_path, run=FakeRun({"sbatch": (1, "", "sbatch: error: Requested node configuration is "
                                                             "not available")}))
    with pytest.raises(SubmissionRejectedError):
        cli.submit(spec(), "x")
    cli = SlurmCLI(tmp_path, run=FakeRun({"sbatch": (1, "", "Socket timed out on send/recv")}))
    with pytest.raises(SchedulerUnavailableError):
        cli.submit(spec(), "x")
    cli = SlurmCLI(tmp_path, run=FakeRun({"sbatch": FileNotFoundError()}))
    with pytest.raises(SchedulerUnavailableError, match="not found"):
        cli.submit(spec(), "x")
    cli = SlurmCLI(tmp_path, run=FakeRun({"sbatch": subprocess.TimeoutExpired("sbatch", 30)}))
    with pytest.raises(SchedulerUnavailableError, match="timed out"):
        cli.submit(spec(), "x")


def test_job_state_falls_back_to_sacct(tmp_path):
    run = FakeRun({"squeue": (0, "", ""), "sacct": (0, "COMPLETED\nCOMPLETED\n", "")})
    cli = SlurmCLI(tmp_path, run=run)
    job = cli.job_state("7")
    assert job.state is JobState.COMPLETED and job.end_time_ms is not None
    assert run.calls == [["squeue", "-h", "-j", "7", "-o", "%T"], ["sacct", "-n", "-j", "7", "-o", "State"]]


def test_job_state_running_from_squeue(tmp_path):
    cli = SlurmCLI(tmp_path, run=FakeRun({"squeue": (0, "RUNNING\n", "")}))
    job = cli.job_state("7")
    assert job.state is JobState.RUNNING and job.start_time_ms is not None


def test_unknown_job(tmp_path):
    cli = SlurmCLI(tmp_path, run=FakeRun({"squeue": (1, "", "Invalid job id"), "sacct": (0, "\n", "")}))
    with pytest.raises(UnknownJobError):
        cli.job_state("zzz")


@pytest.mark.parametrize("raw,state", [
    ("PENDING", JobState.PENDING), ("COMPLETING", JobState.RUNNING), ("CANCELLED by 0", JobState.CANCELLED),
    ("CANCELLED+", JobState.CANCELLED), ("TIMEOUT", JobState.CANCELLED), ("OUT_OF_MEMORY", JobState.FAILED),
    ("NODE_FAIL", JobState.FAILED),
])
def test_map_state(raw, state):
    assert map_state(raw) is state


def test_unknown_state_is_retriable():
    with pytest.raises(SchedulerUnavailableError):
        map_state("REQUEUE_HOLD")


def test_cancel_is_idempotent(tmp_path):
    states = iter(["RUNNING\n", "CANCELLED\n"])
    run = FakeRun({"squeue": lambda argv: (0, next(states), ""), "scancel": (0, "", "")})
    cli = SlurmCLI(tmp_path, run=run)
    assert cli.cancel("9").state is JobState.CANCELLED
    assert cli.cancel("9").state is JobState.CANCELLED
    assert [c[0] for c in run.calls].count("scancel") == 1


def test_find_jobs_sorted(tmp_path):
    cli = SlurmCLI(tmp_path, run=FakeRun({"squeue": (0, "12 RUNNING\n3 PENDING\n", "")}))
    jobs = cli.find_jobs("t1")
    assert [(j.scheduler_job_id, j.state, j.task_id) for j in jobs] == [
        ("3", JobState.PENDING, "t1"), ("12", JobState.RUNNING, "t1")]


def test_snapshot_parsing(tmp_path):
    def squeue(argv):
        return 0, "RUNNING 4 8G gres/gpu:1\nPENDING 2 1G N/A\nCOMPLETING 2 1000M N/A\n", ""

    sinfo = "n1 16 64000 gpu:a100:2(S:0-1)\nn2 8 32G (null)\nn1 16 64000 gpu:a100:2\n"
    cli = SlurmCLI(tmp_path, run=FakeRun({"sinfo": (0, sinfo, ""), "squeue": squeue}))
    snap = cli.snapshot()
    assert [n.name for n in snap.nodes] == ["n1", "n2"]
    assert snap.cpus_total == 24 and snap.gpus_total == 2
    assert snap.cpus_free == 18 and snap.gpus_free == 1
    assert snap.memory_mb_free == 64000 + 32768 - 8192 - 1000
    assert (snap.queued_jobs, snap.running_jobs) == (1, 2)


def test_snapshot_unavailable(tmp_path):
    cli = SlurmCLI(tmp_path, run=FakeRun({"sinfo": (1, "", "slurm_load_partitions: Unable to contact")}))
    with pytest.raises(SchedulerUnavailableError):
        cli.snapshot()


@pytest.mark.parametrize("text,mb", [("4000", 4000), ("500M", 500), ("4G", 4096), ("1T", 1048576),
                                     ("2048K", 2), ("1.5G", 1536), ("junk", 0)])
def test_parse_memory(text, mb):
    assert parse_memory_mb(text) == mb


@pytest.mark.parametrize("text,n", [("gpu:4", 4), ("gpu:a100:2(S:0-1)", 2), ("gres/gpu:2", 2), ("(null)", 0),
                                    ("gpu", 1), ("gpu:1,mps:100", 1)])
def test_parse_gpus(text, n):
    assert parse_gpu_count(text) == n
