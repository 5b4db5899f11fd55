import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokensim.engine import RequestRecord
from tokensim.metrics import (
    EffectiveThroughputConfig,
    MetricError,
    QosConfig,
    effective_throughput,
    effective_token_weight,
    nearest_rank,
    qos,
    raw_throughput,
    replay_rebuffer,
    token_weight,
    ttft_stats,
)

QOS = QosConfig(buffer_threshold_frac=0.10, decay_alpha=0.01,
                ttft_penalty_weight=1.0, rebuffer_penalty_weight=1.0)
EFF = EffectiveThroughputConfig()


def make_record(rid=0, ttft=1.0, n_tokens=10, buffers=None, rebuffer=0.0, output_len=None, rate=20.0):
    output_len = output_len if output_len is not None else n_tokens
    rec = RequestRecord(
        request_id=rid,
        arrival=0.0,
        prompt_len=8,
        output_len=output_len,
        consume_rate=rate,
        ttft=ttft,
        gen_times=[ttft + 0.01 * j for j in range(n_tokens)],
        buffer_at_gen=buffers if buffers is not None else [1] * n_tokens,
        consume_times=[ttft + 0.05 * j for j in range(n_tokens)],
        rebuffer_s=rebuffer,
    )
    return rec


class TestTokenWeight:
    def test_boundary_inclusive(self):
        # tau = 0.10 * 500 = 50; at exactly the threshold the weight is 1.
        assert token_weight(50, 500, QOS) == 1.0

    def test_linear_decay(self):
        assert token_weight(70, 500, QOS) == pytest.approx(0.8, abs=1e-9)

    def test_clamped_at_zero(self):
        assert token_weight(200, 500, QOS) == 0.0

    @given(b=st.integers(min_value=0, max_value=2000))
    def test_range_and_monotonicity(self, b):
        w = token_weight(b, 500, QOS)
        assert 0.0 <= w <= 1.0
        assert token_weight(b + 1, 500, QOS) <= w

    def test_continuity_at_threshold(self):
        lo = token_weight(50, 500, QOS)
        hi = token_weight(51, 500, QOS)
        assert abs(lo - hi) <= QOS.decay_alpha + 1e-12


class TestQos:
    def test_hand_evaluated_single_record(self):
        rec = make_record(ttft=1.0, n_tokens=10, buffers=[1] * 10)
        assert qos([rec], 10.0, QOS) == pytest.approx(0.9, abs=1e-9)

    def test_empty_records(self):
        assert qos([], 10.0, QOS) == 0.0

    def test_rebuffer_strictly_decreases(self):
        rec = make_record(ttft=1.0, n_tokens=10, rebuffer=2.0)
        assert qos([rec], 10.0, QOS) == pytest.approx(0.7, abs=1e-9)

    def test_incomplete_record_rejected(self):
        rec = make_record(n_tokens=5, output_len=10)
        with pytest.raises(MetricError):
            qos([rec], 10.0, QOS)


class TestEffectiveThroughput:
    def test_linear_interpolation_between_bounds(self):
        assert effective_token_weight(15, 100, EFF) == pytest.approx(0.5, abs=1e-9)

    def test_near_empty_buffer_equals_raw(self):
        rec = make_record(n_tokens=10, buffers=[1] * 10, output_len=100)
        rec.gen_times = rec.gen_times[:10]
        rec.output_len = 10
        assert effective_throughput([rec], 5.0, EFF) == pytest.approx(
            raw_throughput([rec], 5.0), abs=1e-9
        )

    def test_runahead_tokens_excluded(self):
        rec = make_record(n_tokens=10, buffers=[30] * 10, output_len=10)
        # tau2 = 2 tokens for L=10; buffer 30 is far past it.
        assert effective_throughput([rec], 5.0, EFF) == 0.0

    def test_never_exceeds_raw(self):
        rec = make_record(n_tokens=20, buffers=list(range(20)), output_len=20)
        assert effective_throughput([rec], 7.0, EFF) <= raw_throughput([rec], 7.0)


class TestTtftStats:
    def _records(self, ttfts):
        return [make_record(rid=i, ttft=t, n_tokens=1, output_len=1) for i, t in enumerate(ttfts)]

    def test_three_values(self):
        stats = ttft_stats(self._records([1.0, 2.0, 3.0]))
        assert stats == {"mean": 2.0, "p50": 2.0, "p99": 3.0}

    def test_single_record(self):
        stats = ttft_stats(self._records([0.5]))
        assert stats["mean"] == stats["p50"] == stats["p99"] == 0.5

    def test_p99_picks_outlier_of_100(self):
        ttfts = [1.0] * 99 + [20.0]
        assert ttft_stats(self._records(ttfts))["p99"] == 20.0

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            ttft_stats([])

    def test_nearest_rank_basics(self):
        assert nearest_rank([1, 2, 3, 4], 50.0) == 3
        assert nearest_rank([5], 99.0) == 5


class TestRawThroughput:
    def test_three_requests(self):
        recs = [make_record(rid=i, n_tokens=100, output_len=100) for i in range(3)]
        assert raw_throughput(recs, 10.0) == pytest.approx(30.0)

    def test_empty(self):
        assert raw_throughput([], 10.0) == 0.0

    def test_weight_one_envelope_identity(self):
        recs = [make_record(rid=0, n_tokens=50, buffers=[0] * 50, output_len=50)]
        assert effective_throughput(recs, 4.0, EFF) == pytest.approx(
            raw_throughput(recs, 4.0)
        )


class TestRebufferReplay:
    def test_no_stall(self):
        gen = [1.0 + 0.01 * j for j in range(20)]
        assert replay_rebuffer(1.0, gen, 20.0) == 0.0

    def test_known_stall(self):
        # Token 1 at t=1.0, token 2 delayed to t=2.0; reader wanted it at 1.05.
        gen = [1.0, 2.0, 2.02]
        assert replay_rebuffer(1.0, gen, 20.0) == pytest.approx(0.95)

    @given(seed=st.integers(min_value=0, max_value=200))
    def test_replay_nonnegative(self, seed):
        import random

        rng = random.Random(seed)
        t = 0.5
        gen = []
        for _ in range(rng.randint(1, 30)):
            t += rng.random() * 0.2
            gen.append(t)
        assert replay_rebuffer(0.5, gen, 10.0) >= 0.0
