import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskfabric.errors import BrokerUnavailableError, DecodeError
from taskfabric.model import AgentIdentity, AgentKind, CoreStatus, StatusUpdate, decode_message, encode_message
from taskfabric.monitor import MonitorAgent, start_http_server
from taskfabric.submitter import SKIP_DONE, SKIP_DUPLICATE, MonitorClient, load_manifest, submit

from support import free_port, make_broker, make_config, spec


@pytest.fixture
def env(tmp_path):
    config = make_config(tmp_path)
    return config, make_broker(config)


def published(broker, config):
    out = []
    for p in range(config.partitions_new):
        out.extend(decode_message(r.value) for r in broker.read(config.topics.new, p))
    return out


def test_three_fresh_specs(env):
    config, broker = env
    report = submit(broker, config.topics, [spec("t1"), spec("t2"), spec("t3")])
    assert report.submitted == ["t1", "t2", "t3"] and report.skipped == [] and report.failed == []
    assert sorted(s.task_id for s in published(broker, config)) == ["t1", "t2", "t3"]


def test_duplicate_in_batch(env):
    config, broker = env
    report = submit(broker, config.topics, [spec("a"), spec("a", cpus=2)])
    assert report.submitted == ["a"] and report.skipped == [("a", SKIP_DUPLICATE)]
    (only,) = published(broker, config)
    assert only.resources.cpus == 1


def test_skip_if_done_consults_monitor(env, tmp_path):
    config, broker = env
    agent = AgentIdentity(AgentKind.CLUSTER, "c")
    broker.publish("t-jobs", b"t2", encode_message(StatusUpdate("t2", CoreStatus.DONE, agent, 5)))
    broker.publish("t-jobs", b"t3", encode_message(StatusUpdate("t3", CoreStatus.RUNNING, agent, 5)))
    monitor = MonitorAgent(config, broker, datadir=tmp_path / "m")
    monitor.drain()
    server = start_http_server(monitor, 0)
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}"
        report = submit(broker, config.topics, [spec("t1"), spec("t2"), spec("t3")], skip_if_done=True,
                        monitor=url)
        assert report.submitted == ["t1", "t3"] and report.skipped == [("t2", SKIP_DONE)]
        assert MonitorClient(url).task("t9") is None
        assert MonitorClient(url).stats()["total"] == 2
        assert MonitorClient(url).tasks(status="DONE")["total"] == 1
    finally:
        server.shutdown()
        server.server_close()


def test_unreachable_monitor_never_skips(env):
    config, broker = env
    url = f"http://127.0.0.1:{free_port()}"
    report = submit(broker, config.topics, [spec("t1")], skip_if_done=True, monitor=MonitorClient(url, 0.5))
    assert report.submitted == ["t1"]


class FailingAfter:
    def __init__(self, broker, n):
        self.broker = broker
        self.n = n

    def publish(self, topic, key, value):
        if self.n == 0:
            raise BrokerUnavailableError("connection refused")
        self.n -= 1
        return self.broker.publish(topic, key, value)


def test_broker_outage_fails_remaining(env):
    config, broker = env
    report = submit(FailingAfter(broker, 1), config.topics, [spec("a"), spec("b"), spec("c")])
    assert report.submitted == ["a"]
    assert [t for t, _ in report.failed] == ["b", "c"]
    assert all("broker unavailable" in why for _, why in report.failed)
    assert not report.ok


def test_unencodable_params_fail_only_that_spec(env):
    config, broker = env
    bad = spec("bad", x=float("inf"))
    report = submit(broker, config.topics, [bad, spec("good")])
    assert report.submitted == ["good"] and [t for t, _ in report.failed] == ["bad"]


@settings(max_examples=300)
@given(st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), max_size=12), st.integers(0, 12))
def test_report_partitions_input_and_preserves_order(ids, fail_after):
    from taskfabric.broker import InProcessBroker
    from taskfabric.model import derive_topic_set

    topics = derive_topic_set("p")
    broker = InProcessBroker()
    broker.create_topic(topics.new, 1)
    report = submit(FailingAfter(broker, fail_after), topics, [spec(t) for t in ids])
    outcome = report.submitted + [t for t, _ in report.skipped] + [t for t, _ in report.failed]
    assert sorted(outcome) == sorted(ids)
    assert [decode_message(r.value).task_id for r in broker.read(topics.new, 0)] == report.submitted
    assert report.submitted == [t for t in dict.fromkeys(ids)][: len(report.submitted)]


def test_manifest_defaults_and_errors():
    specs = load_manifest('[{"task_id": "m1", "script": "p.py"},'
                          ' {"task_id": "m2", "script": "p.py", "resources": {"cpus": 4}, "params": {"n": 2}}]')
    assert [s.task_id for s in specs] == ["m1", "m2"]
    assert specs[0].resources.cpus == 1 and specs[0].timeout_s is None and specs[0].params == {}
    assert specs[1].resources.cpus == 4 and specs[1].params == {"n": 2}
    with pytest.raises(DecodeError):
        load_manifest('{"task_id": "x"}')
    with pytest.raises(DecodeError):
        load_manifest('[1]')
    with pytest.raises(DecodeError):
        load_manifest('[{"script": "p.py"}]')
