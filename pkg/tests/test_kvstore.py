import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokensim.costs import CostModel
from tokensim.kvstore import (
    EvictionPlan,
    KvResidency,
    LoadPlan,
    ResidencyError,
    TransferQueueState,
    advance_write_through,
    io_overhead_estimate,
    overlap_timeline,
    plan_write_chunk,
    preempt,
    resume,
    split_chunks,
)

CM = CostModel(h2d_bandwidth=100000, d2h_bandwidth=100000)


class TestPlanWriteChunk:
    def test_priority_split_under_capacity(self):
        # capacity = 0.05 s * 100000 tok/s = 5000; B has the fatter buffer
        # so it drains first and A gets the remainder.
        plan = plan_write_chunk(
            pending={1: 3000, 2: 4000},
            est_compute_interval=0.05,
            cm=CM,
            buffers={1: 50, 2: 200},
        )
        assert plan == [(2, 4000), (1, 1000)]

    def test_empty_pending(self):
        assert plan_write_chunk({}, 0.05, CM, {}) == []

    def test_under_capacity_single(self):
        assert plan_write_chunk({7: 100}, 0.05, CM, {7: 10}) == [(7, 100)]

    def test_tie_breaks_ascending_id(self):
        plan = plan_write_chunk({2: 10, 1: 10}, 1.0, CM, {1: 5, 2: 5})
        assert plan == [(1, 10), (2, 10)]

    def test_rejects_bad_interval(self):
        with pytest.raises(ValueError):
            plan_write_chunk({1: 10}, 0.0, CM, {1: 1})


class TestPreempt:
    def test_partial_sync(self):
        r = KvResidency(0, total_kv=4000, gpu_resident=4000, cpu_synced=3500)
        plan = preempt(r)
        assert plan == EvictionPlan(0, instant_release=3500, residual_d2h=500)

    def test_fully_synced_is_instant(self):
        r = KvResidency(0, total_kv=4000, gpu_resident=4000, cpu_synced=4000)
        plan = preempt(r)
        assert plan.instant_release == 4000
        assert plan.residual_d2h == 0

    def test_write_back_degenerate(self):
        r = KvResidency(0, total_kv=4000, gpu_resident=4000, cpu_synced=0)
        plan = preempt(r)
        assert plan.instant_release == 0
        assert plan.residual_d2h == 4000

    def test_not_resident(self):
        r = KvResidency(0, total_kv=100, gpu_resident=0, cpu_synced=100)
        with pytest.raises(ResidencyError):
            preempt(r)


class TestResume:
    def test_full_reload(self):
        r = KvResidency(0, total_kv=4000, gpu_resident=0, cpu_synced=4000)
        plan = resume(r)
        assert plan.h2d_tokens == 4000

    def test_already_resident(self):
        r = KvResidency(0, total_kv=4000, gpu_resident=4000, cpu_synced=4000)
        plan = resume(r)
        assert plan.h2d_tokens == 0
        assert plan.chunks == ()

    def test_chunking_arithmetic(self):
        r = KvResidency(0, total_kv=4000, gpu_resident=0, cpu_synced=4000)
        plan = resume(r, chunk_tokens=512)
        assert plan.chunks == (512,) * 7 + (416,)

    def test_not_resumable(self):
        r = KvResidency(0, total_kv=4000, gpu_resident=0, cpu_synced=1000)
        with pytest.raises(ResidencyError):
            resume(r)


class TestOverlapTimeline:
    def test_two_channel_hand_simulation(self):
        # Hand-derived: residual eviction 500 -> 0.005 s on d2h; load 2000 ->
        # 0.02 s on h2d; with ample free memory the channels run in parallel
        # so the makespan is max(0.005, 0.02); serialized it is the sum.
        ev = [EvictionPlan(0, instant_release=3500, residual_d2h=500)]
        ld = [LoadPlan(1, h2d_tokens=2000, chunks=(2000,))]
        tq = TransferQueueState()
        done = overlap_timeline(ev, ld, tq, CM, free_gpu_tokens=10000, overlap=True)
        assert done[1] == pytest.approx(0.02)
        assert done[0] == pytest.approx(0.005)
        serial = overlap_timeline(ev, ld, tq, CM, free_gpu_tokens=10000, overlap=False)
        assert serial[1] == pytest.approx(0.025)

    def test_load_only(self):
        done = overlap_timeline(
            [], [LoadPlan(1, 1500, (1500,))], TransferQueueState(), CM, free_gpu_tokens=2000
        )
        assert done[1] == pytest.approx(0.015)

    def test_instant_release_admits_load_at_zero_free(self):
        ev = [EvictionPlan(0, instant_release=3500, residual_d2h=500)]
        ld = [LoadPlan(1, h2d_tokens=2000, chunks=(2000,))]
        done = overlap_timeline(ev, ld, TransferQueueState(), CM, free_gpu_tokens=0)
        assert done[1] == pytest.approx(0.02)  # starts immediately

    def test_memory_gating_waits_for_eviction(self):
        # No instant release: the load chunk must wait for the residual.
        ev = [EvictionPlan(0, instant_release=0, residual_d2h=500)]
        ld = [LoadPlan(1, h2d_tokens=400, chunks=(400,))]
        done = overlap_timeline(ev, ld, TransferQueueState(), CM, free_gpu_tokens=0)
        assert done[1] == pytest.approx(0.005 + 0.004)

    def test_overflow_detection(self):
        ld = [LoadPlan(1, h2d_tokens=400, chunks=(400,))]
        with pytest.raises(MemoryError):
            overlap_timeline([], ld, TransferQueueState(), CM, free_gpu_tokens=0)

    def test_duplicate_requests_rejected(self):
        with pytest.raises(ValueError):
            overlap_timeline(
                [EvictionPlan(1, 0, 10)],
                [LoadPlan(1, 10, (10,))],
                TransferQueueState(),
                CM,
            )


class TestIoOverheadEstimate:
    def test_four_term_sum(self):
        r = KvResidency(0, total_kv=4000, gpu_resident=0, cpu_synced=3500)
        t = io_overhead_estimate(r, TransferQueueState(), CM)
        assert t == pytest.approx(0.005 + 0.04)

    def test_queue_ahead_adds_wait(self):
        from tokensim.kvstore import Chunk

        r = KvResidency(0, total_kv=4000, gpu_resident=0, cpu_synced=4000)
        tq = TransferQueueState(h2d_queue=[Chunk(owner=9, tokens=10000, direction="h2d", kind="load")])
        t = io_overhead_estimate(r, tq, CM)
        assert t == pytest.approx(0.1 + 0.04)

    def test_resident_and_synced_is_free(self):
        r = KvResidency(0, total_kv=4000, gpu_resident=4000, cpu_synced=4000)
        assert io_overhead_estimate(r, TransferQueueState(), CM) == 0.0


class TestResidencyBookkeeping:
    def test_write_through_pointer_monotone(self):
        r = KvResidency(0, total_kv=100, gpu_resident=100, cpu_synced=10, inflight_d2h=20)
        r2 = advance_write_through(r, 20)
        assert r2.cpu_synced == 30
        assert r2.inflight_d2h == 0
        assert r2.cpu_synced >= r.cpu_synced

    @given(
        tokens=st.integers(min_value=0, max_value=10000),
        chunk=st.integers(min_value=1, max_value=600),
    )
    def test_split_chunks_partitions_exactly(self, tokens, chunk):
        sizes = split_chunks(tokens, chunk)
        assert sum(sizes) == tokens
        assert all(0 < s <= chunk for s in sizes)
        if sizes:
            assert all(s == chunk for s in sizes[:-1])

    def test_resumable_definition(self):
        assert KvResidency(0, total_kv=10, gpu_resident=4, cpu_synced=6).resumable
        assert not KvResidency(0, total_kv=10, gpu_resident=4, cpu_synced=5).resumable
