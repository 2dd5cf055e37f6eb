"""Randomized checks of the broker's ordering, keying, group and commit guarantees."""

from collections import defaultdict

from hypothesis import given, settings
from hypothesis import strategies as st

from taskfabric.broker import CommitPosition, InProcessBroker, range_assign
from taskfabric.errors import RebalanceNotice

CASES = settings(max_examples=1000)

keys = st.one_of(st.none(), st.binary(min_size=1, max_size=6))
messages = st.lists(st.tuples(keys, st.binary(max_size=8)), max_size=40)


def drain(sub, batch=500):
    out = []
    while True:
        try:
            got = sub.poll(batch)
        except RebalanceNotice:
            continue
        if not got:
            return out
        out.extend(got)


def fnv(data: bytes) -> int:
    # independent FNV-1a 64 reference
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) % (1 << 64)
    return h


@CASES
@given(messages, st.integers(1, 8), st.integers(1, 7))
def test_per_partition_total_order(msgs, partitions, batch):
    broker = InProcessBroker()
    broker.create_topic("t", partitions)
    expected = defaultdict(list)
    for key, value in msgs:
        p, off = broker.publish("t", key, value)
        assert off == len(expected[p])
        expected[p].append(value)
    sub = broker.subscribe("g", ["t"], "m")
    seen = defaultdict(list)
    for rec in drain(sub, batch):
        assert rec.offset == len(seen[rec.partition])  # strictly increasing, no gaps
        seen[rec.partition].append(rec.value)
    assert dict(seen) == {p: v for p, v in expected.items() if v}


@CASES
@given(st.lists(st.binary(min_size=1, max_size=6), min_size=1, max_size=30), st.integers(1, 16))
def test_same_key_colocation(key_list, partitions):
    broker = InProcessBroker()
    broker.create_topic("t", partitions)
    placed = defaultdict(set)
    for key in key_list:
        p, _ = broker.publish("t", key, b"")
        placed[key].add(p)
    for key, parts in placed.items():
        assert parts == {fnv(key) % partitions}


@CASES
@given(messages, st.integers(1, 8), st.integers(1, 5))
def test_group_isolation(msgs, partitions, members):
    broker = InProcessBroker()
    broker.create_topic("t", partitions)
    coords = {broker.publish("t", k, v) for k, v in msgs}
    shared = [broker.subscribe("balance", ["t"], f"m{i}") for i in range(members)]
    solo = broker.subscribe("fanout", ["t"], "only")
    per_member = [{(r.partition, r.offset) for r in drain(s)} for s in shared]
    for i, a in enumerate(per_member):
        for b in per_member[i + 1:]:
            assert a.isdisjoint(b)
    assert set().union(*per_member) == coords
    assert {(r.partition, r.offset) for r in drain(solo)} == coords
    # the two groups keep separate positions
    for s in shared:
        s.commit([CommitPosition("balance", "t", p, broker.end_offset("t", p))
                  for (_, p) in sorted(s.assigned())])
    assert all(broker.committed("fanout", "t", p) == 0 for p in range(partitions))


@CASES
@given(st.integers(1, 20), st.lists(st.integers(0, 20), min_size=1, max_size=15))
def test_commit_monotonicity(count, commits):
    broker = InProcessBroker()
    broker.create_topic("t", 1)
    for _ in range(count):
        broker.publish("t", None, b"v")
    sub = broker.subscribe("g", ["t"], "m")
    drain(sub)
    high = 0
    for target in commits:
        target = min(target, count)
        sub.commit([CommitPosition("g", "t", 0, target)])
        high = max(high, target)
        assert broker.committed("g", "t", 0) == high


member_ids = st.lists(st.text(min_size=1, max_size=6), min_size=3, max_size=3, unique=True)


@CASES
@given(member_ids, st.permutations(range(3)), st.booleans())
def test_three_members_four_partitions_split_2_1_1(ids, order, churn):
    broker = InProcessBroker()
    broker.create_topic("t", 4)
    subs = {}
    for i in order:
        subs[ids[i]] = broker.subscribe("g", ["t"], ids[i])
    if churn:
        # a member leaves and comes back; the final assignment is the same
        broker.unsubscribe(subs[ids[order[0]]])
        subs[ids[order[0]]] = broker.subscribe("g", ["t"], ids[order[0]])
    assignment = broker.rebalance("g")
    held = {m: sorted(assignment[m].get("t", [])) for m in ids}
    assert sorted(len(v) for v in held.values()) == [1, 1, 2]
    flat = [p for v in held.values() for p in v]
    assert sorted(flat) == [0, 1, 2, 3]
    # contiguous ranges handed out in sorted member order
    assert [p for m in sorted(ids) for p in held[m]] == [0, 1, 2, 3]
    # members see their own share after the rebalance notice
    for m, sub in subs.items():
        drain(sub)
        assert sub.assigned() == {("t", p) for p in held[m]}


@CASES
@given(st.dictionaries(st.text(min_size=1, max_size=4), st.sets(st.sampled_from("abc"), min_size=1), min_size=1,
                       max_size=6),
       st.dictionaries(st.sampled_from("abc"), st.integers(1, 9), min_size=1))
def test_range_assignment_is_a_partition(members, counts):
    result = range_assign(members, counts)
    for topic, n in counts.items():
        subscribed = sorted(m for m, ts in members.items() if topic in ts)
        owners = defaultdict(list)
        for m in members:
            for p in result[m].get(topic, []):
                owners[p].append(m)
        if subscribed:
            assert sorted(owners) == list(range(n))
            assert all(len(v) == 1 for v in owners.values())
            sizes = [len(result[m].get(topic, [])) for m in subscribed]
            assert max(sizes) - min(sizes) <= 1
        else:
            assert not owners


@CASES
@given(st.integers(1, 25), st.integers(0, 25), st.integers(1, 6))
def test_at_least_once_after_crash(count, crash_after, batch):
    broker = InProcessBroker()
    broker.create_topic("t", 1)
    for i in range(count):
        broker.publish("t", None, str(i).encode())
    sub = broker.subscribe("g", ["t"], "m")
    processed = []
    committed = 0
    while len(processed) < min(crash_after, count):
        recs = sub.poll(batch)
        processed.extend(r.offset for r in recs)
        if len(processed) % 2 == 0 and recs:
            sub.commit([sub.position_after(recs[-1])])
            committed = recs[-1].offset + 1
    broker.simulate_crash(sub)
    restarted = broker.subscribe("g", ["t"], "m")
    redelivered = [r.offset for r in drain(restarted)]
    assert redelivered == list(range(committed, count))
    assert set(processed) | set(redelivered) == set(range(count))
