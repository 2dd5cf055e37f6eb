import time

import pytest

from taskfabric.model import CoreStatus, ErrorPhase
from taskfabric.worker_agent import WorkerAgent

from support import FLAKY_PAYLOAD, make_broker, make_config, publish_specs, read_outputs, spec


class FakeProc:
    def __init__(self):
        self.returncode = None
        self.killed = False

    def poll(self):
        return self.returncode

    def kill(self):
        self.killed = True
        self.returncode = -9

    def wait(self, timeout=None):
        return self.returncode


class FakeLauncher:
    def __init__(self):
        self.procs = {}
        self.argv = {}
        self.fail_spawn = set()

    def __call__(self, spec, argv, env, stderr_path):
        if spec.task_id in self.fail_spawn:
            raise OSError("exec format error")
        stderr_path.write_text("Traceback...\nBoom: segfault-ish\n")
        self.argv[spec.task_id] = (argv, env)
        proc = self.procs[spec.task_id] = FakeProc()
        return proc


@pytest.fixture
def rig(tmp_path):
    config = make_config(tmp_path, max_worker_slots=4)
    broker = make_broker(config)
    launcher = FakeLauncher()
    agent = WorkerAgent(config, broker, name="ws", launcher=launcher)
    return config, broker, launcher, agent


def test_capacity_and_slot_bound(rig):
    config, broker, launcher, agent = rig
    assert agent.capacity() == 4
    publish_specs(broker, config, [spec(f"t{i}") for i in range(10)])
    report = agent.run_cycle(1000)
    assert len(report.launched) == 4 and agent.capacity() == 0
    assert len(agent.run_cycle(2000).launched) == 0
    first = report.launched[0]
    launcher.procs[first].returncode = 0
    report = agent.run_cycle(3000)
    assert report.finished == [first] and len(report.launched) == 1
    assert agent.capacity() + len(agent.occupied()) == 4


def test_running_published_directly_and_argv(rig, tmp_path):
    config, broker, launcher, agent = rig
    publish_specs(broker, config, [spec("one", n=2)])
    agent.run_cycle(1000)
    out = read_outputs(broker, config)
    assert [(s.task_id, s.status) for s in out.statuses] == [("one", CoreStatus.RUNNING)]
    argv, env = launcher.argv["one"]
    assert argv[1:3] == ["-m", "taskfabric.runner"] and argv[argv.index("--task-id") + 1] == "one"
    assert env["TASKFABRIC_AGENT"] == "WORKER:ws"
    assert (tmp_path / "work" / "one" / "params.json").read_text() == '{"n":2}'


def test_crash_without_terminal_publishes_run_error(rig):
    config, broker, launcher, agent = rig
    publish_specs(broker, config, [spec("crash")])
    agent.run_cycle(1000)
    launcher.procs["crash"].returncode = 139
    report = agent.run_cycle(2000)
    assert report.failed == ["crash"]
    (err,) = read_outputs(broker, config).errors
    assert err.phase is ErrorPhase.RUN and "139" in err.message and "segfault-ish" in err.detail


def test_runner_reported_failure_is_not_duplicated(rig):
    config, broker, launcher, agent = rig
    publish_specs(broker, config, [spec("own")])
    agent.run_cycle(1000)
    launcher.procs["own"].returncode = 70
    assert agent.run_cycle(2000).failed == ["own"]
    assert read_outputs(broker, config).errors == []


def test_deadline_kills_child(rig):
    config, broker, launcher, agent = rig
    publish_specs(broker, config, [spec("slow", timeout_s=2)])
    agent.run_cycle(1000)
    assert agent.run_cycle(3000).timeouts == []
    report = agent.run_cycle(3001)
    assert report.timeouts == ["slow"] and launcher.procs["slow"].killed
    assert agent.capacity() == 4
    out = read_outputs(broker, config)
    assert [e.phase for e in out.errors] == [ErrorPhase.TIMEOUT]
    assert out.statuses[-1].status is CoreStatus.CANCELLED


def test_spawn_failure_is_launch_error(rig):
    config, broker, launcher, agent = rig
    launcher.fail_spawn.add("nope")
    publish_specs(broker, config, [spec("nope")])
    report = agent.run_cycle(1000)
    assert report.failed == ["nope"] and agent.capacity() == 4
    (err,) = read_outputs(broker, config).errors
    assert err.phase is ErrorPhase.LAUNCH


def test_offsets_committed_after_launch(rig):
    config, broker, launcher, agent = rig
    publish_specs(broker, config, [spec("c1")])
    agent.run_cycle(1000)
    total = sum(broker.committed(config.worker_group, "t-new", p) for p in range(config.partitions_new))
    assert total == 1


def test_real_children_end_to_end(tmp_path):
    config = make_config(tmp_path)
    broker = make_broker(config, tmp_path / "broker")
    agent = WorkerAgent(config, broker, name="real", slots=2)
    specs = [spec(f"r{i}", script=FLAKY_PAYLOAD, n=3, seed=i) for i in range(3)]
    specs.append(spec("r-bad", script=FLAKY_PAYLOAD, _sim_fail=True))
    publish_specs(broker, config, specs)
    deadline = time.monotonic() + 60
    while time.monotonic() < deadline:
        agent.run_cycle(int(time.time() * 1000))
        assert len(agent.occupied()) <= 2
        out = read_outputs(broker, config)
        if len(out.results) + len(out.errors) == 4 and not agent.occupied():
            break
        time.sleep(0.05)
    agent.close()
    out = read_outputs(broker, config)
    assert sorted(r.task_id for r in out.results) == ["r0", "r1", "r2"]
    assert [(e.task_id, e.phase) for e in out.errors] == [("r-bad", ErrorPhase.RUN)]
