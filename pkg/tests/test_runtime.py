import threading
import time

import numpy as np
import pytest

from multidev import (
    AllocationError,
    ConfigError,
    DevGroup,
    KernelError,
    Passthrough,
    UsageError,
    create_environment,
    create_segmented,
    current_rank,
)
from multidev.segvec import Clone, Natural


def test_default_group_covers_all_devices():
    with create_environment(4) as env:
        assert env.ranks == [0, 1, 2, 3]


def test_subgroup():
    with create_environment(8, DevGroup.from_to(0, 2)) as env:
        assert env.ranks == [0, 1]
        assert env.size == 2


@pytest.mark.parametrize("count, group", [(2, DevGroup(1, 3)), (0, None), (3, DevGroup(2, 2))])
def test_bad_environment_is_config_error(count, group):
    with pytest.raises(ConfigError):
        create_environment(count, group)


def test_submit_outside_group():
    with create_environment(2) as env:
        with pytest.raises(UsageError):
            env.submit(5, lambda: None)


def test_submit_after_shutdown():
    env = create_environment(1)
    env.shutdown()
    with pytest.raises(UsageError):
        env.submit(0, lambda: None)


def test_two_fills_complete_in_order(env4):
    v = create_segmented(env4, 40, Natural(), "real32")
    buf = v.local_range(0)
    env4.submit(0, buf.fill, 1.0)
    env4.submit(0, buf.fill, 0.0)
    env4.barrier_fence()
    assert np.all(buf == 0.0)


def test_fifo_per_rank_under_interleaving():
    stamps = {0: [], 1: []}
    with create_environment(2) as env:
        for i in range(1000):
            r = i % 2 if i % 7 else 1 - i % 2
            env.submit(r, stamps[r].append, i)
        env.barrier_fence()
    for seq in stamps.values():
        assert seq == sorted(seq)
    assert len(stamps[0]) + len(stamps[1]) == 1000


def test_fifo_with_concurrent_host_threads():
    seen = []
    with create_environment(1) as env:

        def producer(tag):
            for i in range(200):
                env.submit(0, seen.append, (tag, i))

        threads = [threading.Thread(target=producer, args=(t,)) for t in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        env.barrier_fence()
    for tag in range(4):
        mine = [i for t, i in seen if t == tag]
        assert mine == list(range(200))


def test_barrier_with_no_work_returns():
    with create_environment(3) as env:
        env.barrier_fence()


def test_barrier_makes_writes_visible():
    with create_environment(3) as env:
        v = create_segmented(env, 3, Clone(), "real32")

        def slow_write(rank):
            time.sleep(0.01)
            v.local_range(rank)[:] = rank + 1

        for r in env.ranks:
            env.submit(r, slow_write, r)
        env.barrier_fence()
        for r in env.ranks:
            assert np.all(v.local_range(r) == r + 1)


def test_concurrent_barriers_do_not_deadlock():
    with create_environment(4) as env:
        for r in env.ranks:
            env.submit(r, time.sleep, 0.02)
        done = []
        threads = [threading.Thread(target=lambda: done.append(env.barrier_fence())) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=10)
        assert len(done) == 2


def test_current_rank_inside_commands():
    with create_environment(3) as env:
        got = {}
        for r in env.ranks:
            env.submit(r, lambda r=r: got.__setitem__(r, current_rank()))
        env.barrier_fence()
        assert got == {0: 0, 1: 1, 2: 2}
    assert current_rank() is None


def test_invoke_kernel_all_writes_rank_ids():
    with create_environment(3) as env:
        v = create_segmented(env, 9, Natural(), "real32")
        env.invoke_kernel_all(lambda seg: seg.fill(current_rank()), v).wait()
        for s in v.segments:
            assert np.all(v.local_range(s.rank) == s.rank)


def test_invoke_kernel_touches_only_its_rank():
    with create_environment(3) as env:
        v = create_segmented(env, 9, Natural(), "real32")
        env.invoke_kernel_all(lambda seg: seg.fill(0), v).wait()
        before = {r: v.local_range(r).copy() for r in env.ranks}
        env.invoke_kernel(lambda seg: seg.fill(7), v, rank=1).wait()
        assert np.all(v.local_range(1) == 7)
        for r in (0, 2):
            np.testing.assert_array_equal(v.local_range(r), before[r])


def test_invoke_kernel_on_clone_adds_rank():
    with create_environment(4) as env:
        v = create_segmented(env, 5, Clone(), "real32")
        env.invoke_kernel_all(lambda seg: seg.fill(1.0), v).wait()
        env.invoke_kernel_all(lambda seg: seg.__iadd__(current_rank()), v).wait()
        for r in env.ranks:
            np.testing.assert_array_equal(v.local_range(r), np.full(5, 1.0 + r, np.float32))


def test_passthrough_forwards_container():
    with create_environment(2) as env:
        v = create_segmented(env, 4, Natural(), "real32")
        got = []
        env.invoke_kernel(lambda c: got.append(c), Passthrough(v), rank=0).wait()
        assert got == [v]


def test_kernel_failure_surfaces_at_fence():
    with create_environment(2) as env:
        fence = env.submit(1, lambda: 1 / 0)
        with pytest.raises(KernelError) as info:
            fence.wait()
        assert info.value.rank == 1
        assert isinstance(info.value.cause, ZeroDivisionError)
        # already reported, so the barrier stays quiet
        env.barrier_fence()


def test_unreported_failure_surfaces_at_barrier():
    with create_environment(2) as env:
        env.submit(0, lambda: [][1])
        with pytest.raises(KernelError):
            env.barrier_fence()
        env.barrier_fence()


def test_queue_survives_failure():
    with create_environment(1) as env:
        out = []
        env.submit(0, lambda: 1 / 0)
        f = env.submit(0, out.append, 1)
        f.wait()
        assert out == [1]


def test_gang_runs_on_all_ranks_and_syncs():
    with create_environment(4) as env:
        phase = []
        lock = threading.Lock()

        def body(rank, sync):
            with lock:
                phase.append(("a", rank))
            sync()
            with lock:
                phase.append(("b", rank))

        env.submit_gang([0, 1, 2, 3], body).wait()
        assert [p for p, _ in phase[:4]] == ["a"] * 4
        assert sorted(r for _, r in phase[4:]) == [0, 1, 2, 3]


def test_gang_failure_does_not_hang():
    with create_environment(3) as env:

        def body(rank, sync):
            if rank == 1:
                raise RuntimeError("boom")
            sync()

        with pytest.raises(KernelError):
            env.submit_gang(env.ranks, body).wait(timeout=10)
        env.barrier_fence()


def test_gangs_and_plain_commands_interleave_without_deadlock():
    with create_environment(4) as env:
        count = []

        def body(rank, sync):
            sync()

        def submitter(seed):
            rng = np.random.default_rng(seed)
            for _ in range(50):
                ranks = sorted(rng.choice(4, size=rng.integers(1, 5), replace=False).tolist())
                env.submit_gang(ranks, body)
                env.submit(int(rng.integers(4)), count.append, 1)

        threads = [threading.Thread(target=submitter, args=(s,)) for s in range(3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        env.barrier_fence()
        assert len(count) == 150


def test_allocation_failure_at_creation_and_release():
    with create_environment(2, arena_bytes=1024) as env:
        v = create_segmented(env, 128, Natural(), "real32")  # 256 B per device
        assert env.device(0).arena.used == 256
        with pytest.raises(AllocationError):
            create_segmented(env, 1024, Natural(), "complex32")
        # a failed allocation leaves nothing behind
        assert env.device(0).arena.used == 256
        del v
        assert env.device(0).arena.used == 0
