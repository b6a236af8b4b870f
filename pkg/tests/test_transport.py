"""Collectives, ledger accounting, wire format, and backend behavior."""

import numpy as np
import pytest

from dslsr1 import (
    CommLedger,
    InvalidArgumentError,
    ProtocolError,
    SimCluster,
    TcpCluster,
    TransportError,
    floats_to_gb,
    predict_floats,
)
from dslsr1.problems import make_synthetic, merge_shards
from dslsr1.transport import (
    COMBINE_EQUAL,
    COMBINE_FIRST,
    FLAG_STOP,
    Frame,
    MasterCollectives,
    Section,
    WorkerCollectives,
    decode_frame,
    encode_frame,
)


class TestLedger:
    def test_log_and_totals(self):
        ledger = CommLedger()
        ledger.log(0, "eval", "iterate_w", "broadcast", 100)
        ledger.log(0, "pair", "gram_sy_reduce", "reduce", 16)
        ledger.log(0, "cg", "cg_direction_broadcast", "broadcast", 100)
        ledger.log(1, "step", "step_p", "broadcast", 100)
        assert ledger.total_floats() == 316
        assert ledger.common_total(0) == 100
        assert ledger.noncommon_delta(0) == 16
        assert ledger.cg_total(0) == 100
        assert ledger.noncommon_delta(1) == 100
        assert ledger.total_bytes(4) == 316 * 4
        assert ledger.total_bytes(8) == 316 * 8

    def test_csv_and_json_export(self, tmp_path):
        ledger = CommLedger()
        ledger.log(0, "eval", "grad_reduce", "reduce", 7)
        csv_path = tmp_path / "ledger.csv"
        ledger.to_csv(csv_path, bytes_per_float=4)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "iteration,phase,category,direction,floats,bytes"
        assert lines[1] == "0,eval,grad_reduce,reduce,7,28"
        import json

        json_path = tmp_path / "ledger.json"
        ledger.to_json(json_path, bytes_per_float=8)
        payload = json.loads(json_path.read_text())
        assert payload["total_floats"] == 7
        assert payload["total_bytes"] == 56

    def test_bad_keys_rejected(self):
        ledger = CommLedger()
        with pytest.raises(InvalidArgumentError):
            ledger.log(0, "bogus", "misc", "reduce", 1)
        with pytest.raises(InvalidArgumentError):
            ledger.total_bytes(2)


class TestPredict:
    def test_efficient_variant_formula(self):
        pred = predict_floats(d=100, m=4, j_accepted=4, cg_iters=0, variant="dslsr1")
        assert pred["noncommon_delta"] == 4 * 4 + 2 * 100 + 2 * 4 + 1
        assert pred["per_cg_iteration"] == 16 + 8 + 200

    def test_naive_variant_formula(self):
        pred = predict_floats(d=100, m=4, j_accepted=4, cg_iters=3, variant="naive")
        assert pred["noncommon_delta"] == 2 * 4 * 100 + 100 + 1
        assert pred["cg"] == 0

    def test_headline_large_problem_numbers(self):
        """The quoted large-scale costs: 18,466,049 floats (0.0688 GB at 4
        bytes) for the efficient variant and the 2md+d+1 count for the naive
        one."""
        d, m = 9_200_000, 256
        eff = predict_floats(d, m, m, 0, "dslsr1")["noncommon_delta"]
        assert eff == 18_466_049
        assert floats_to_gb(eff, 4) == pytest.approx(0.0688, rel=0.01)
        naive = predict_floats(d, m, m, 0, "naive")["noncommon_delta"]
        assert naive == 2 * m * d + d + 1

    def test_zero_memory_degenerates(self):
        eff = predict_floats(50, 0, 0, 0, "dslsr1")["noncommon_delta"]
        assert eff == 2 * 50 + 1
        naive = predict_floats(50, 0, 0, 0, "naive")["noncommon_delta"]
        assert naive == 50 + 1

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            predict_floats(10, 2, 3, 0, "dslsr1")
        with pytest.raises(InvalidArgumentError):
            predict_floats(10, 2, 2, 0, "serial")


class TestWireFormat:
    def test_round_trip(self):
        frame = Frame("gram_sy_reduce", "pair", "reduce", 0, (
            Section(np.arange(6.0)),
            Section(np.arange(4, dtype=np.int64), counted=False, combine=COMBINE_FIRST),
        ))
        out = decode_frame(encode_frame(frame)[4:])
        assert out.category == frame.category
        assert out.phase == frame.phase
        assert out.direction == frame.direction
        assert out.counted_floats == 6
        np.testing.assert_array_equal(out.sections[0].data, np.arange(6.0))
        assert out.sections[0].counted
        np.testing.assert_array_equal(out.sections[1].data, np.arange(4))
        assert out.sections[1].combine == COMBINE_FIRST

    def test_header_is_16_bytes_after_length_prefix(self):
        frame = Frame("misc", "pair", "broadcast", 0, ())
        raw = encode_frame(frame)
        # u32 length prefix + 16-byte header + u16 section count
        assert len(raw) == 4 + 16 + 2

    def test_bad_magic_rejected(self):
        frame = encode_frame(Frame("misc", "pair", "broadcast", 0, ()))
        corrupted = b"XXXX" + frame[8:]
        with pytest.raises(ProtocolError):
            decode_frame(corrupted)

    def test_counted_floats_excludes_ints_and_uncounted(self):
        frame = Frame("misc", "pair", "reduce", 0, (
            Section(np.ones(5)),
            Section(np.ones(7), counted=False),
            Section(np.ones(3, dtype=np.int64)),
        ))
        assert frame.counted_floats == 5


def _echo_worker(payload_by_category):
    """Worker that answers each broadcast with configured reduce payloads."""

    def loop(rank, endpoint, *args):
        wc = WorkerCollectives(endpoint)
        while True:
            frame = wc.recv()
            if frame.flag == FLAG_STOP:
                return
            spec = payload_by_category[frame.category]
            sections = [Section(np.asarray(data[rank], dtype=float), counted=counted,
                                combine=combine)
                        for data, counted, combine in spec]
            wc.send_reduce(frame.category, frame.phase, sections)

    return loop


class TestSimCollectives:
    def test_mean_of_scalars(self):
        cluster = SimCluster(2)
        ledger = CommLedger()
        mc = MasterCollectives(cluster, ledger)
        loop = _echo_worker({"fval_reduce": [([[1.0], [3.0]], True, "mean")]})
        cluster.start(loop, [(), ()])
        mc.broadcast("fval_reduce", "eval", ())
        out = mc.reduce("fval_reduce", "eval")
        assert out[0][0] == pytest.approx(2.0)
        mc.broadcast("fval_reduce", "eval", (), flag=FLAG_STOP)
        cluster.join()

    def test_gram_block_ledger_count(self):
        m = 8
        cluster = SimCluster(4)
        ledger = CommLedger()
        mc = MasterCollectives(cluster, ledger)
        blocks = [np.full(m * m, float(r)) for r in range(4)]
        loop = _echo_worker({"gram_sy_reduce": [(blocks, True, "mean")]})
        cluster.start(loop, [() for _ in range(4)])
        mc.broadcast("gram_sy_reduce", "pair", ())
        mc.reduce("gram_sy_reduce", "pair")
        assert ledger.noncommon_delta() == 64
        mc.broadcast("gram_sy_reduce", "pair", (), flag=FLAG_STOP)
        cluster.join()

    def test_shard_reduce_matches_merged_gradient(self):
        """Mean of three shard gradients agrees with the merged-data
        gradient to 1e-15 (fixed tree order, equal shards)."""
        prob = make_synthetic("logistic_l2", d=12, n=96, seed=21, n_shards=3)
        w = np.random.default_rng(5).standard_normal(12)
        grads = [s.gradient(w) for s in prob.shards]
        cluster = SimCluster(3)
        mc = MasterCollectives(cluster, CommLedger())
        loop = _echo_worker({"grad_reduce": [(grads, True, "mean")]})
        cluster.start(loop, [() for _ in range(3)])
        mc.broadcast("grad_reduce", "eval", ())
        out = mc.reduce("grad_reduce", "eval")[0]
        merged = merge_shards(list(prob.shards)).gradient(w)
        assert np.max(np.abs(out - merged)) < 1e-15
        mc.broadcast("grad_reduce", "eval", (), flag=FLAG_STOP)
        cluster.join()

    def test_shape_mismatch_is_protocol_error(self):
        cluster = SimCluster(2)
        mc = MasterCollectives(cluster, CommLedger())
        loop = _echo_worker({"misc": [([[1.0, 2.0], [1.0]], True, "mean")]})
        cluster.start(loop, [(), ()])
        mc.broadcast("misc", "pair", ())
        with pytest.raises(ProtocolError):
            mc.reduce("misc", "pair")

    def test_equal_combine_detects_divergence(self):
        cluster = SimCluster(2)
        mc = MasterCollectives(cluster, CommLedger())
        loop = _echo_worker({"misc": [([[5.0], [6.0]], False, COMBINE_EQUAL)]})
        cluster.start(loop, [(), ()])
        mc.broadcast("misc", "pair", ())
        with pytest.raises(ProtocolError):
            mc.reduce("misc", "pair")

    def test_worker_exception_surfaces_with_rank(self):
        def crashing(rank, endpoint):
            raise RuntimeError("boom")

        cluster = SimCluster(2, timeout=5.0)
        mc = MasterCollectives(cluster, CommLedger())
        cluster.start(crashing, [(), ()])
        with pytest.raises(TransportError) as err:
            mc.reduce("misc", "pair")
        assert err.value.rank is not None

    def test_first_combine_takes_rank_zero(self):
        cluster = SimCluster(2)
        mc = MasterCollectives(cluster, CommLedger())
        loop = _echo_worker({"misc": [([[9.0], [1.0]], False, COMBINE_FIRST)]})
        cluster.start(loop, [(), ()])
        mc.broadcast("misc", "pair", ())
        out = mc.reduce("misc", "pair")[0]
        assert out[0] == 9.0
        mc.broadcast("misc", "pair", (), flag=FLAG_STOP)
        cluster.join()


class TestTcpCluster:
    def test_worker_crash_surfaces_as_transport_error(self):
        def crashing(rank, endpoint):
            raise RuntimeError("worker down")

        hs = {"d": 1, "m": 1, "seed": 0}
        cluster = TcpCluster(1, hs, timeout=10.0)
        mc = MasterCollectives(cluster, CommLedger())
        cluster.start(crashing, [()])
        with pytest.raises(TransportError):
            mc.reduce("misc", "pair")
        cluster.close()

    def test_handshake_mismatch_detected(self):
        hs = {"d": 4, "m": 2, "seed": 1}
        cluster = TcpCluster(1, hs)
        good = cluster._handshake_bytes(0)
        tampered = TcpCluster(1, {"d": 5, "m": 2, "seed": 1})._handshake_bytes(0)
        cluster._check_handshake(good, 0)
        with pytest.raises(ProtocolError):
            cluster._check_handshake(tampered, 0)

    def test_round_trip_collective(self):
        hs = {"d": 4, "m": 2, "seed": 1}
        cluster = TcpCluster(2, hs, timeout=20.0)
        mc = MasterCollectives(cluster, CommLedger())
        data = [np.arange(4.0), np.arange(4.0) + 2.0]
        loop = _echo_worker({"grad_reduce": [(data, True, "mean")]})
        cluster.start(loop, [(), ()])
        mc.broadcast("grad_reduce", "eval", (Section(np.zeros(4)),))
        out = mc.reduce("grad_reduce", "eval")[0]
        np.testing.assert_allclose(out, np.arange(4.0) + 1.0)
        mc.broadcast("grad_reduce", "eval", (), flag=FLAG_STOP)
        cluster.join()
        cluster.close()
