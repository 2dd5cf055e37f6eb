import random

import pytest

from taskfabric.errors import SubmissionRejectedError, UnknownJobError
from taskfabric.model import NodeSpec, ResourceRequest, TaskSpec
from taskfabric.scheduler import JobState, SimulatedCluster
from taskfabric.scheduler.base import LEGAL_TRANSITIONS


def job_spec(task_id, cpus=1, gpus=0, mem=256, duration=1000, fail=False):
    params = {"_sim_duration_ms": duration}
    if fail:
        params["_sim_fail"] = True
    return TaskSpec(task_id, "x", ResourceRequest(cpus, gpus, mem), None, params)


def two_by_four():
    return SimulatedCluster([NodeSpec("a", 4), NodeSpec("b", 4)])


def test_idle_snapshot_and_arithmetic():
    sim = two_by_four()
    assert sim.snapshot().cpus_free == 8
    sim.submit(job_spec("t1", cpus=3), "cmd")
    sim.sim_advance(1)
    snap = sim.snapshot()
    assert snap.cpus_free == 5 and snap.running_jobs == 1 and snap.queued_jobs == 0


def test_saturation_keeps_jobs_pending():
    sim = SimulatedCluster([NodeSpec("a", 2)])
    for i in range(3):
        sim.submit(job_spec(f"t{i}"), "cmd")
    sim.sim_advance(1)
    snap = sim.snapshot()
    assert snap.cpus_free == 0 and snap.queued_jobs == 1


def test_unsatisfiable_is_permanent():
    sim = SimulatedCluster([NodeSpec("a", 8)])
    with pytest.raises(SubmissionRejectedError, match="unsatisfiable"):
        sim.submit(job_spec("big", cpus=16), "cmd")
    assert sim.jobs() == []


def test_three_four_cpu_jobs_on_eight_cpu_node():
    sim = SimulatedCluster([NodeSpec("a", 8)])
    ids = [sim.submit(job_spec(f"t{i}", cpus=4), "cmd").scheduler_job_id for i in range(3)]
    sim.sim_advance(1)
    assert [sim.job_state(i).state for i in ids] == [JobState.RUNNING, JobState.RUNNING, JobState.PENDING]


def test_state_queries():
    sim = two_by_four()
    job = sim.submit(job_spec("t", duration=10_000), "cmd")
    assert sim.job_state(job.scheduler_job_id).state is JobState.PENDING
    sim.sim_advance(5_000)
    assert sim.job_state(job.scheduler_job_id).state is JobState.RUNNING
    sim.sim_advance(5_000)
    done = sim.job_state(job.scheduler_job_id)
    assert done.state is JobState.COMPLETED and done.end_time_ms == 10_000
    with pytest.raises(UnknownJobError):
        sim.job_state("zzz")


def test_cancel_semantics():
    sim = SimulatedCluster([NodeSpec("a", 2)])
    running = sim.submit(job_spec("r", cpus=2), "cmd")
    pending = sim.submit(job_spec("p", cpus=2), "cmd")
    sim.sim_advance(1)
    assert sim.cancel(pending.scheduler_job_id).state is JobState.CANCELLED
    assert sim.job_state(pending.scheduler_job_id).start_time_ms is None
    before = sim.snapshot().cpus_free
    assert sim.cancel(running.scheduler_job_id).state is JobState.CANCELLED
    assert sim.snapshot().cpus_free == before + 2
    done = sim.submit(job_spec("d", duration=10), "cmd")
    sim.sim_advance(100)
    assert sim.cancel(done.scheduler_job_id).state is JobState.COMPLETED


def test_second_job_starts_exactly_when_first_ends():
    sim = SimulatedCluster([NodeSpec("a", 4)])
    first = sim.submit(job_spec("first", cpus=4, duration=10_000), "cmd")
    second = sim.submit(job_spec("second", cpus=4, duration=1_000), "cmd")
    sim.sim_advance(20_000)
    assert sim.job_state(second.scheduler_job_id).start_time_ms == sim.job_state(first.scheduler_job_id).end_time_ms
    assert sim.job_state(second.scheduler_job_id).start_time_ms == 10_000


def test_empty_advance_has_no_events():
    assert two_by_four().sim_advance(1000) == []


def test_injected_failure_and_executor_exit_code():
    calls = []

    def executor(job, spec, command, env, end_ms):
        calls.append((spec.task_id, command, dict(env), end_ms))
        return 3 if spec.task_id == "bad-exit" else 0

    sim = SimulatedCluster([NodeSpec("a", 4)], executor=executor)
    ok = sim.submit(job_spec("ok", duration=100), "run ok", {"K": "v"})
    flagged = sim.submit(job_spec("flagged", duration=100, fail=True), "run flagged")
    bad = sim.submit(job_spec("bad-exit", duration=100), "run bad")
    sim.sim_advance(200)
    assert sim.job_state(ok.scheduler_job_id).state is JobState.COMPLETED
    assert sim.job_state(flagged.scheduler_job_id).state is JobState.FAILED
    assert sim.job_state(bad.scheduler_job_id).state is JobState.FAILED
    assert ("ok", "run ok", {"K": "v"}, 100) in calls
    assert all(c[0] != "flagged" for c in calls)


def test_events_sorted_by_time_then_job_id():
    sim = SimulatedCluster([NodeSpec("a", 1)])
    for i in range(12):
        sim.submit(job_spec(f"t{i}", duration=10), "cmd")
    events = sim.sim_advance(1000)
    keys = [(e.time_ms, int(e.scheduler_job_id)) for e in events]
    assert keys == sorted(keys)


# randomized stream ------------------------------------------------------------


class ReferenceCluster:
    """Straightforward re-statement of FIFO first-fit without backfill, used as an oracle."""

    def __init__(self, nodes):
        self.nodes = nodes
        self.free = [[n.cpus_total, n.gpus_total, n.memory_mb_total] for n in nodes]
        self.now = 0
        self.queue = []
        self.running = {}  # id -> (node, req, end, fail)
        self.state = {}
        self.log = []
        self.seq = 0

    def submit(self, req, duration, fail):
        self.seq += 1
        jid = self.seq
        self.queue.append((jid, req, duration, fail))
        self.state[jid] = "PENDING"
        self.log.append((self.now, jid, None, "PENDING", None))
        return jid

    def _schedule(self):
        while self.queue:
            jid, req, duration, fail = self.queue[0]
            node = next((i for i, f in enumerate(self.free) if all(f[k] >= req[k] for k in range(3))), None)
            if node is None:
                return
            self.queue.pop(0)
            for k in range(3):
                self.free[node][k] -= req[k]
            self.running[jid] = (node, req, self.now + duration, fail)
            self.state[jid] = "RUNNING"
            self.log.append((self.now, jid, "PENDING", "RUNNING", self.nodes[node].name))

    def _release(self, jid):
        node, req, _, _ = self.running.pop(jid)
        for k in range(3):
            self.free[node][k] += req[k]
        return node

    def cancel(self, jid):
        if self.state[jid] == "PENDING":
            self.queue = [q for q in self.queue if q[0] != jid]
            self.state[jid] = "CANCELLED"
            self.log.append((self.now, jid, "PENDING", "CANCELLED", None))
        elif self.state[jid] == "RUNNING":
            node = self._release(jid)
            self.state[jid] = "CANCELLED"
            self.log.append((self.now, jid, "RUNNING", "CANCELLED", self.nodes[node].name))

    def advance(self, dt):
        target = self.now + dt
        self._schedule()
        while self.running:
            t = min(v[2] for v in self.running.values())
            if t > target:
                break
            self.now = t
            for jid in sorted(j for j, v in self.running.items() if v[2] == t):
                fail = self.running[jid][3]
                node = self._release(jid)
                new = "FAILED" if fail else "COMPLETED"
                self.state[jid] = new
                self.log.append((self.now, jid, "RUNNING", new, self.nodes[node].name))
            self._schedule()
        self.now = max(self.now, target)


def random_stream(seed, n_events=1000):
    rng = random.Random(seed)
    nodes = [NodeSpec(f"n{i}", rng.choice([2, 4, 8]), rng.choice([0, 0, 1, 2]), rng.choice([4096, 8192]))
             for i in range(rng.randint(1, 4))]
    ops = []
    submitted = 0
    for _ in range(n_events):
        r = rng.random()
        if r < 0.55:
            node = rng.choice(nodes)
            req = (rng.randint(1, node.cpus_total), rng.randint(0, node.gpus_total),
                   rng.randint(1, node.memory_mb_total))
            ops.append(("submit", req, rng.randint(1, 5000), rng.random() < 0.1))
            submitted += 1
        elif r < 0.65 and submitted:
            ops.append(("cancel", rng.randint(1, submitted)))
        else:
            ops.append(("advance", rng.randint(1, 3000)))
    return nodes, ops


def run_stream(nodes, ops, check):
    sim = SimulatedCluster(nodes)
    ref = ReferenceCluster(nodes)
    for i, op in enumerate(ops):
        if op[0] == "submit":
            _, req, duration, fail = op
            params = {"_sim_duration_ms": duration}
            if fail:
                params["_sim_fail"] = True
            sim.submit(TaskSpec(f"j{i}", "x", ResourceRequest(*req), None, params), "cmd")
            ref.submit(req, duration, fail)
        elif op[0] == "cancel":
            sim.cancel(str(op[1]))
            ref.cancel(op[1])
        else:
            sim.sim_advance(op[1])
            ref.advance(op[1])
        if check:
            check_invariants(sim, nodes)
    return sim, ref


def check_invariants(sim, nodes):
    snap = sim.snapshot()
    held = {n.name: [0, 0, 0] for n in nodes}
    running = pending = 0
    for job in sim.jobs():
        if job.state is JobState.RUNNING:
            running += 1
            spec = sim._jobs[job.scheduler_job_id].spec  # request of the running job
            h = held[job.node]
            h[0] += spec.resources.cpus
            h[1] += spec.resources.gpus
            h[2] += spec.resources.memory_mb
        elif job.state is JobState.PENDING:
            pending += 1
    for n in nodes:
        h = held[n.name]
        assert h[0] <= n.cpus_total and h[1] <= n.gpus_total and h[2] <= n.memory_mb_total
    assert snap.cpus_free + sum(h[0] for h in held.values()) == snap.cpus_total
    assert snap.gpus_free + sum(h[1] for h in held.values()) == snap.gpus_total
    assert snap.memory_mb_free + sum(h[2] for h in held.values()) == snap.memory_mb_total
    assert (snap.running_jobs, snap.queued_jobs) == (running, pending)


@pytest.mark.parametrize("seed", range(5))
def test_randomized_stream_conservation_fifo_and_determinism(seed):
    nodes, ops = random_stream(seed)
    sim, ref = run_stream(nodes, ops, check=True)
    log = [(e.time_ms, int(e.scheduler_job_id), e.old_state and e.old_state.value, e.new_state.value, e.node)
           for e in sim.event_log]
    assert log == ref.log

    # FIFO without backfill: jobs start in submission order
    starts = [int(e.scheduler_job_id) for e in sim.event_log if e.new_state is JobState.RUNNING]
    assert starts == sorted(starts)

    # every observed transition sequence is a legal path
    per_job = {}
    for e in sim.event_log:
        per_job.setdefault(e.scheduler_job_id, []).append((e.old_state, e.new_state))
    for transitions in per_job.values():
        for old, new in transitions:
            if old is not None:
                assert new in LEGAL_TRANSITIONS[old]

    sim_again, _ = run_stream(nodes, ops, check=False)
    assert sim_again.event_log == sim.event_log
