import threading

from gyrolab.kernel import Kernel, KernelClock, KernelId, KernelStore, chunk_bounds, run_chunks


def test_kernel_store():
    calls = []
    k = KernelStore()
    k.add("charge", Kernel("charge", lambda step: calls.append(("charge", step)), KernelId.charge))
    k.add("sort", Kernel("sort", lambda step: calls.append(("sort", step)), KernelId.sort, every=3))
    k.add("diagnostics", Kernel("diagnostics", lambda step: calls.append(("diag", step)), None, every=2))
    assert list(k.all_identifier()) == ["charge", "sort", "diagnostics"]
    assert k.get("nope") is None
    for step in range(4):
        for kernel in k.due(step):
            kernel.run(step)
    assert calls == [("charge", 0), ("sort", 0), ("diag", 0), ("charge", 1), ("charge", 2), ("diag", 2),
                     ("charge", 3), ("sort", 3)]
    assert k.to_yaml() == {"charge": {"timing": "charge"}, "sort": {"timing": "sort", "every": 3},
                           "diagnostics": {"timing": None, "every": 2}}

    try:
        k.add("charge", Kernel("again", lambda step: None))
        assert False
    except ValueError as e:
        assert "registered twice" in str(e)

    try:
        Kernel("bad", lambda step: None, every=0)
        assert False
    except ValueError:
        pass


def test_kernel_id():
    assert str(KernelId.poisson) == "poisson"
    assert KernelId.parse("Shift") == KernelId.shift
    try:
        KernelId.parse("gather")
        assert False
    except ValueError as e:
        assert "gather" in str(e)


def test_clock_splits_time():
    rows = []
    clock = KernelClock(lambda kernel, rank, seconds: rows.append((kernel, rank, seconds)))
    with clock.measure(KernelId.push, 2):
        pass
    with clock.measure(KernelId.shift, range(4)):
        sum(range(1000))
    assert rows[0][:2] == (KernelId.push, 2)
    assert [r[1] for r in rows[1:]] == [0, 1, 2, 3]
    assert len({r[2] for r in rows[1:]}) == 1
    assert all(r[2] >= 0.0 for r in rows)

    # time is booked when the kernel fails, too
    try:
        with clock.measure(KernelId.field, 0):
            raise RuntimeError("boom")
    except RuntimeError:
        pass
    assert rows[-1][0] == KernelId.field


def test_chunks():
    assert chunk_bounds(10, 1) == [(0, 10)]
    bounds = chunk_bounds(10, 3)
    assert bounds[0][0] == 0 and bounds[-1][1] == 10
    assert all(a[1] == b[0] for a, b in zip(bounds[:-1], bounds[1:]))
    assert chunk_bounds(2, 4)[0] == (0, 0)

    threads = set()

    def work(start, stop):
        threads.add(threading.get_ident())
        return list(range(start, stop))

    parts = run_chunks(work, 100, 4)
    assert [x for p in parts for x in p] == list(range(100))
    assert run_chunks(work, 0, 1) == [[]]
