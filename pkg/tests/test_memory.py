import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hebbmem.memory import (
    EmptyMemoryError,
    EpisodicMemory,
    Neighborhood,
    RingBuffer,
    SnapshotError,
    Unbounded,
    partition,
    select_new,
)

from oracles import brute_force_knn, random_memory


# -- write --------------------------------------------------------------------

def test_single_write():
    mem = EpisodicMemory(2)
    mem.write([1, 0], 3)
    assert len(mem) == 1
    assert mem.class_counts == {3: 1}
    assert mem.entries()[0].seq == 0


def test_ring_buffer_evicts_oldest():
    mem = EpisodicMemory(1, RingBuffer(2))
    mem.write([1.0], 0)  # a
    mem.write([2.0], 1)  # b
    mem.write([3.0], 0)  # c
    keys = [e.key[0] for e in mem.entries()]
    assert keys == [2.0, 3.0]
    assert mem.class_counts == {0: 1, 1: 1}
    assert [e.seq for e in mem.entries()] == [1, 2]


def test_unbounded_conservation():
    rng = np.random.default_rng(0)
    mem = EpisodicMemory(4)
    for _ in range(500):
        mem.write(rng.normal(size=4), int(rng.integers(0, 7)))
    assert len(mem) == 500
    assert sum(mem.class_counts.values()) == 500


@pytest.mark.parametrize("h", [[1.0], [1.0, 2.0, 3.0]])
def test_write_rejects_bad_dimension(h):
    with pytest.raises(ValueError, match="dimension"):
        EpisodicMemory(2).write(h, 0)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_write_rejects_non_finite(bad):
    with pytest.raises(ValueError, match="non-finite"):
        EpisodicMemory(2).write([0.0, bad], 0)


def test_int_capacity_is_ring_buffer():
    assert EpisodicMemory(3, 10).capacity == RingBuffer(10)
    assert EpisodicMemory(3).capacity == Unbounded()
    with pytest.raises(ValueError):
        RingBuffer(0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(0, 4), min_size=0, max_size=60))
def test_ring_buffer_count_conservation(m, labels):
    mem = EpisodicMemory(1, RingBuffer(m))
    for t, y in enumerate(labels):
        mem.write([float(t)], y)
        assert len(mem) <= m
        assert sum(mem.class_counts.values()) == len(mem)
        live = [e.value for e in mem.entries()]
        assert mem.class_counts == {c: live.count(c) for c in set(live)}
    seqs = [e.seq for e in mem.entries()]
    assert seqs == list(range(max(0, len(labels) - m), len(labels)))


# -- class_count --------------------------------------------------------------

def test_class_count():
    mem = EpisodicMemory(1, RingBuffer(3))
    for t in range(3):
        mem.write([t], 2)
    assert mem.class_count(2) == 3
    assert mem.class_count(9) == 0
    mem.write([5.0], 1)  # evicts a class-2 entry
    assert mem.class_count(2) == 2


# -- retrieve_knn -------------------------------------------------------------

def test_knn_kernel_value():
    mem = EpisodicMemory(1)
    mem.write([0.0], 0)
    mem.write([10.0], 1)
    nb = mem.retrieve_knn([1.0], k=1, eps=1.0)
    assert len(nb) == 1
    assert nb.keys[0].tolist() == [0.0]
    assert nb.labels[0] == 0
    assert nb.closeness[0] == 0.5


def test_knn_exact_match():
    mem = EpisodicMemory(2)
    mem.write([3.0, 1.0], 1)
    mem.write([0.0, 0.0], 4)
    nb = mem.retrieve_knn([0.0, 0.0], k=2, eps=1e-3)
    assert nb.labels[0] == 4
    assert nb.closeness[0] == pytest.approx(1000.0, rel=1e-12)


def test_knn_k_larger_than_memory():
    mem = EpisodicMemory(1)
    for x, y in [(5.0, 0), (1.0, 1), (3.0, 2)]:
        mem.write([x], y)
    nb = mem.retrieve_knn([0.0], k=10)
    assert nb.labels.tolist() == [1, 2, 0]


def test_knn_tie_break_prefers_older():
    mem = EpisodicMemory(1)
    mem.write([1.0], 0)
    mem.write([-1.0], 1)
    mem.write([1.0], 2)
    nb = mem.retrieve_knn([0.0], k=2)
    assert nb.seqs.tolist() == [0, 1]


def test_knn_errors():
    mem = EpisodicMemory(2)
    with pytest.raises(EmptyMemoryError, match="empty memory"):
        mem.retrieve_knn([0, 0], 3)
    mem.write([0, 0], 0)
    with pytest.raises(ValueError):
        mem.retrieve_knn([0, 0], 0)
    with pytest.raises(ValueError):
        mem.retrieve_knn([0, 0, 0], 1)


def test_knn_matches_brute_force_oracle():
    rng = np.random.default_rng(1234)
    for trial in range(200):
        grid = trial % 2 == 0  # integer grid keys produce many exact ties
        mem = random_memory(rng, grid)
        keys, values, seqs = mem.arrays()
        if grid:
            q = rng.integers(-2, 3, size=mem.dim).astype(float)
        else:
            q = rng.normal(size=mem.dim)
        k = int(rng.integers(1, 300))
        eps = float(rng.choice([1e-3, 0.1, 1.0]))
        nb = mem.retrieve_knn(q, k, eps)
        expected = brute_force_knn(keys, values, seqs, q.tolist(), k, eps)
        assert nb.seqs.tolist() == [e[0] for e in expected]
        assert nb.labels.tolist() == [e[1] for e in expected]
        np.testing.assert_allclose(nb.closeness, [e[2] for e in expected], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 10.0), st.lists(st.floats(0, 100), min_size=2, max_size=20, unique=True))
def test_kernel_monotone_in_distance(eps, xs):
    mem = EpisodicMemory(1)
    for x in xs:
        mem.write([x], 0)
    nb = mem.retrieve_knn([0.0], k=len(xs), eps=eps)
    d2 = nb.keys[:, 0] ** 2
    assert np.all(np.diff(d2) >= 0)
    assert np.all(np.diff(nb.closeness) <= 0)
    # strict wherever the denominators are distinct in float64
    strict = np.diff(eps + d2) > 0
    assert np.all(np.diff(nb.closeness)[strict] < 0)
    assert np.all(np.isfinite(nb.closeness)) and np.all(nb.closeness > 0)


def test_determinism():
    def run():
        rng = np.random.default_rng(7)
        mem = EpisodicMemory(5, RingBuffer(50))
        out = []
        for _ in range(120):
            mem.write(rng.normal(size=5), int(rng.integers(0, 3)))
            nb = mem.retrieve_knn(rng.normal(size=5), 7)
            out.append((nb.seqs.tolist(), nb.closeness.tolist()))
        return out

    assert run() == run()


def test_concurrent_reads_agree():
    rng = np.random.default_rng(3)
    mem = EpisodicMemory(8)
    mem.write_many(rng.normal(size=(300, 8)), rng.integers(0, 5, size=300))
    queries = rng.normal(size=(40, 8))
    serial = [mem.retrieve_knn(q, 9).seqs.tolist() for q in queries]
    results = [None] * len(queries)

    def work(i):
        results[i] = mem.retrieve_knn(queries[i], 9).seqs.tolist()

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(queries))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == serial


# -- partition / select_new ---------------------------------------------------

def _nbrs(labels):
    return Neighborhood.from_items([([float(i)], y, 1.0) for i, y in enumerate(labels)])


def test_partition():
    nin, nout = partition(_nbrs([1, 2, 1]), 1)
    assert len(nin) == 2 and len(nout) == 1
    nin, nout = partition(_nbrs([1, 2, 1]), 5)
    assert len(nin) == 0 and nout.labels.tolist() == [1, 2, 1]
    nin, nout = partition(_nbrs([3, 3]), 3)
    assert len(nout) == 0


def test_select_new():
    assert select_new(_nbrs([0, 5, 1]), {0, 1}).labels.tolist() == [5]
    assert len(select_new(_nbrs([0, 1, 0]), {0, 1})) == 0
    assert select_new(_nbrs([0, 5, 1]), set()).labels.tolist() == [0, 5, 1]


def test_select_new_preserves_order():
    nb = _nbrs([7, 0, 6, 1, 7])
    assert select_new(nb, {0, 1}).keys[:, 0].tolist() == [0.0, 2.0, 4.0]


# -- snapshot -----------------------------------------------------------------

@pytest.mark.parametrize("cap", [None, RingBuffer(1), RingBuffer(17), RingBuffer(1000)])
def test_snapshot_roundtrip(cap):
    rng = np.random.default_rng(11)
    mem = EpisodicMemory(6, cap)
    mem.write_many(rng.normal(size=(150, 6)), rng.integers(0, 9, size=150))
    back = EpisodicMemory.from_bytes(mem.to_bytes())
    assert back == mem
    assert back.next_seq == mem.next_seq == 150
    assert back.class_counts == mem.class_counts
    for a, b in zip(back.entries(), mem.entries()):
        assert a.key.tobytes() == b.key.tobytes()
    # the restored memory keeps evolving identically
    q = rng.normal(size=6)
    back.write(q, 2)
    mem.write(q, 2)
    assert back == mem


def test_snapshot_empty(tmp_path):
    mem = EpisodicMemory(3, RingBuffer(4))
    path = tmp_path / "m.hebm"
    mem.save(path)
    back = EpisodicMemory.load(path)
    assert back == mem and len(back) == 0 and back.next_seq == 0


def test_snapshot_header_layout():
    mem = EpisodicMemory(2)
    mem.write([1.5, -2.0], 7)
    raw = mem.to_bytes()
    assert raw[:4] == b"HEBM"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[6:10], "little") == 2
    assert raw[10] == 0
    assert int.from_bytes(raw[19:27], "little") == 1
    body = raw[27:]
    assert int.from_bytes(body[:8], "little") == 0
    assert int.from_bytes(body[8:12], "little") == 7
    assert np.frombuffer(body[12:], "<f8").tolist() == [1.5, -2.0]


def test_snapshot_decode_errors():
    mem = EpisodicMemory(2)
    mem.write([1, 2], 0)
    raw = mem.to_bytes()
    with pytest.raises(SnapshotError, match="magic"):
        EpisodicMemory.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(SnapshotError, match="version"):
        EpisodicMemory.from_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
    with pytest.raises(SnapshotError):
        EpisodicMemory.from_bytes(raw[:-3])
    with pytest.raises(SnapshotError, match="truncated"):
        EpisodicMemory.from_bytes(raw[:5])
