import itertools
import random

import pytest

from tunfp.flows import Direction, FlowKind, FlowSequence, PacketRecord, ParallelFlowPair, Protocol
from tunfp.ingest import (
    CorrelationConfig,
    MappingEntry,
    MappingTable,
    apply_truth_labels,
    correlate,
    read_dataset,
    read_dataset_with_n,
    read_mapping,
    read_packets,
    reassemble,
    write_dataset,
    write_mapping,
    write_packets,
)

from oracles import correlation_oracle


def pkt(src_port, dst_port, ts, direction, payload, src="10.0.0.2", dst="1.2.3.4",
        proto=Protocol.TCP):
    if direction is Direction.OUTBOUND:
        return PacketRecord(src, src_port, dst, dst_port, proto, ts, direction, payload)
    return PacketRecord(dst, dst_port, src, src_port, proto, ts, direction, payload)


class TestReassemble:
    def test_single_flow_assembly(self):
        records = [
            pkt(50001, 443, 10.0, Direction.OUTBOUND, 517),
            pkt(50001, 443, 10.1, Direction.INBOUND, 1440),
            pkt(50001, 443, 10.2, Direction.OUTBOUND, 64),
        ]
        flows = reassemble(records, n=8, kind=FlowKind.TLS)
        assert len(flows) == 1
        f = flows[0]
        assert f.tokens[: f.true_len] == [517, 2940, 64]
        assert f.true_len == 3
        assert f.start_time == 10.0
        assert f.key.src_port == 50001

    def test_interleaved_flows_partition(self):
        records = [
            pkt(50001, 443, 1.0, Direction.OUTBOUND, 100),
            pkt(50002, 443, 1.1, Direction.OUTBOUND, 200),
            pkt(50001, 443, 1.2, Direction.INBOUND, 300),
            pkt(50002, 443, 1.3, Direction.INBOUND, 400),
        ]
        flows = reassemble(records, n=4, kind=FlowKind.TLS)
        assert len(flows) == 2
        by_port = {f.key.src_port: f for f in flows}
        assert by_port[50001].tokens[:2] == [100, 1800]
        assert by_port[50002].tokens[:2] == [200, 1900]

    def test_truncation_at_n(self):
        records = [pkt(50001, 443, 0.0, Direction.OUTBOUND, 10)]
        records += [pkt(50001, 443, 0.01 * i, Direction.INBOUND, 10) for i in range(1, 250)]
        flows = reassemble(records, n=200, kind=FlowKind.TLS)
        assert flows[0].true_len == 200
        assert len(flows[0].tokens) == 200

    def test_zero_payload_excluded(self):
        records = [
            pkt(50001, 443, 0.0, Direction.OUTBOUND, 100),
            pkt(50001, 443, 0.1, Direction.INBOUND, 0),
            pkt(50001, 443, 0.2, Direction.INBOUND, 55),
        ]
        flows = reassemble(records, n=4, kind=FlowKind.TLS)
        assert flows[0].tokens[: flows[0].true_len] == [100, 1555]

    def test_ack_only_flow_dropped_with_warning(self, caplog):
        records = [
            pkt(50001, 443, 0.0, Direction.OUTBOUND, 0),
            pkt(50001, 443, 0.1, Direction.INBOUND, 0),
            pkt(50002, 443, 0.0, Direction.OUTBOUND, 99),
        ]
        with caplog.at_level("WARNING"):
            flows = reassemble(records, n=4, kind=FlowKind.TLS)
        assert len(flows) == 1
        assert flows[0].key.src_port == 50002
        assert "dropped 1" in caplog.text

    def test_inbound_first_packet_rejected(self):
        records = [pkt(50001, 443, 0.0, Direction.INBOUND, 100)]
        with pytest.raises(ValueError, match="initiator"):
            reassemble(records, n=4, kind=FlowKind.TLS)

    def test_count_preservation(self):
        rng = random.Random(4)
        records = []
        expected = 0
        for port in range(50001, 50011):
            t = float(port)
            records.append(pkt(port, 443, t, Direction.OUTBOUND, rng.randint(1, 1500)))
            expected += 1
            for k in range(rng.randint(0, 30)):
                payload = rng.randint(0, 1500)
                d = rng.choice([Direction.OUTBOUND, Direction.INBOUND])
                records.append(pkt(port, 443, t + 0.01 * (k + 1), d, payload))
                if payload > 0:
                    expected += 1
        rng.shuffle(records)
        flows = reassemble(records, n=1000, kind=FlowKind.TLS)
        assert sum(f.true_len for f in flows) == expected


class TestPacketFileRoundTrip:
    def test_round_trip(self, tmp_path):
        records = [
            pkt(50001, 443, 10.125, Direction.OUTBOUND, 517),
            pkt(50001, 443, 10.3, Direction.INBOUND, 1440),
            PacketRecord("fe80::1", 1, "fe80::2", 2, Protocol.UDP, 0.1,
                         Direction.OUTBOUND, 0),
        ]
        path = tmp_path / "pkts.csv"
        assert write_packets(records, path) == 3
        assert list(read_packets(path)) == records

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "pkts.csv"
        path.write_text("# comment\n\n10.0.0.2,50001,1.2.3.4,443,tcp,1.0,out,99\n")
        records = list(read_packets(path))
        assert len(records) == 1
        assert records[0].payload_len == 99

    def test_malformed_line_names_location(self, tmp_path):
        path = tmp_path / "pkts.csv"
        path.write_text("10.0.0.2,50001,1.2.3.4,443,tcp,1.0,out,99\na,b\n")
        with pytest.raises(ValueError, match=":2"):
            list(read_packets(path))

    def test_bad_direction_named(self, tmp_path):
        path = tmp_path / "pkts.csv"
        path.write_text("10.0.0.2,50001,1.2.3.4,443,tcp,1.0,sideways,99\n")
        with pytest.raises(ValueError, match="direction"):
            list(read_packets(path))


class TestMappingFile:
    def test_round_trip_sorted(self, tmp_path):
        table = MappingTable([
            MappingEntry(50002, 40002, 5.0),
            MappingEntry(50001, 40001, 1.0),
        ])
        path = tmp_path / "mapping.csv"
        write_mapping(table, path)
        loaded = read_mapping(path)
        assert [e.created_at for e in loaded.entries] == [1.0, 5.0]
        assert loaded.entries[0].inbound == 50001

    def test_port_zero_rejected(self):
        with pytest.raises(ValueError):
            MappingEntry(0, 40001, 1.0)


def tls_flow(port, start, tokens=(100, 1600), label=None):
    from tunfp.flows import FlowKey
    fitted = list(tokens) + [0] * (6 - len(tokens))
    return FlowSequence(start, fitted, len(tokens), FlowKind.TLS, label,
                        FlowKey("10.0.0.2", port, "1.2.3.4", 443, Protocol.TCP))


def tun_flow(port, start, tokens=(110, 170), label=None):
    from tunfp.flows import FlowKey
    fitted = list(tokens) + [0] * (6 - len(tokens))
    return FlowSequence(start, fitted, len(tokens), FlowKind.TUNNEL, label,
                        FlowKey("10.0.0.2", port, "5.6.7.8", 8388, Protocol.TCP))


class TestCorrelate:
    def test_basic_match(self):
        pairs = correlate(
            [tls_flow(50001, 10.0)], [tun_flow(40001, 10.2)],
            MappingTable([MappingEntry(50001, 40001, 9.9)]),
            CorrelationConfig(epsilon=1.0),
        )
        assert len(pairs) == 1
        assert pairs[0].tls.start_time == 10.0
        assert pairs[0].tun.start_time == 10.2

    def test_threshold_excludes(self):
        pairs = correlate(
            [tls_flow(50001, 10.0)], [tun_flow(40001, 12.0)],
            MappingTable([MappingEntry(50001, 40001, 9.9)]),
            CorrelationConfig(epsilon=1.0),
        )
        assert pairs == []

    def test_port_mismatch_excludes(self):
        pairs = correlate(
            [tls_flow(50001, 10.0)], [tun_flow(40002, 10.1)],
            MappingTable([MappingEntry(50001, 40001, 9.9)]),
            CorrelationConfig(epsilon=1.0),
        )
        assert pairs == []

    def test_port_reuse_nearest_wins(self):
        tls = [tls_flow(50001, 0.0), tls_flow(50001, 100.0)]
        tun = [tun_flow(40001, 0.3), tun_flow(40001, 99.8)]
        table = MappingTable([MappingEntry(50001, 40001, 0.0),
                              MappingEntry(50001, 40001, 99.7)])
        pairs = correlate(tls, tun, table, CorrelationConfig(epsilon=5.0))
        assert len(pairs) == 2
        got = {(p.tls.start_time, p.tun.start_time) for p in pairs}
        assert got == {(0.0, 0.3), (100.0, 99.8)}

    def test_port_reuse_matches_bruteforce_oracle(self):
        tls = [tls_flow(50001, 0.0), tls_flow(50001, 100.0)]
        tun = [tun_flow(40001, 0.3), tun_flow(40001, 99.8)]
        optima = correlation_oracle(tls, tun, {(50001, 40001)}, epsilon=5.0)
        assert len(optima) == 1
        # tls[0]=0.0 matches tun[0]=0.3; tls[1]=100.0 matches tun[1]=99.8
        assert optima[0] == {(0, 0), (1, 1)}

    def test_exact_tie_earlier_tunnel_start_wins(self):
        tls = [tls_flow(50001, 10.0)]
        tun = [tun_flow(40001, 10.5), tun_flow(40001, 9.5)]
        table = MappingTable([MappingEntry(50001, 40001, 9.0)])
        pairs = correlate(tls, tun, table, CorrelationConfig(epsilon=1.0))
        assert len(pairs) == 1
        assert pairs[0].tun.start_time == 9.5

    def test_nearest_candidate_wins_even_when_blocking(self):
        # one tunnel flow within epsilon of two TLS flows: the nearer TLS flow
        # claims it, the other stays unmatched
        tls = [tls_flow(50001, 10.0), tls_flow(50001, 10.4)]
        tun = [tun_flow(40001, 10.3)]
        table = MappingTable([MappingEntry(50001, 40001, 9.9)])
        pairs = correlate(tls, tun, table, CorrelationConfig(epsilon=1.0))
        assert len(pairs) == 1
        assert pairs[0].tls.start_time == 10.4

    def test_partial_matching_no_flow_reused(self):
        rng = random.Random(11)
        tls, tun, entries = [], [], []
        for k in range(20):
            port_in = 50001 + (k % 5)   # heavy port reuse
            port_out = 40001 + (k % 5)
            t = 20.0 * k
            tls.append(tls_flow(port_in, t))
            tun.append(tun_flow(port_out, t + rng.uniform(0.0, 0.5)))
            entries.append(MappingEntry(port_in, port_out, t))
        pairs = correlate(tls, tun, MappingTable(entries), CorrelationConfig(epsilon=1.0))
        assert len(pairs) == 20
        assert len({id(p.tls) for p in pairs}) == 20
        assert len({id(p.tun) for p in pairs}) == 20

    def test_permutation_invariance(self):
        rng = random.Random(7)
        tls, tun, entries = [], [], []
        for k in range(12):
            port_in = 50001 + (k % 3)
            port_out = 40001 + (k % 3)
            t = 15.0 * k
            tls.append(tls_flow(port_in, t, tokens=(100 + k, 1600)))
            tun.append(tun_flow(port_out, t + 0.2, tokens=(110 + k, 170)))
            entries.append(MappingEntry(port_in, port_out, t))
        table = MappingTable(entries)
        cfg = CorrelationConfig(epsilon=1.0)
        baseline = {(p.tls.start_time, p.tun.start_time) for p in
                    correlate(tls, tun, table, cfg)}
        for _ in range(5):
            tls2, tun2 = tls[:], tun[:]
            rng.shuffle(tls2)
            rng.shuffle(tun2)
            got = {(p.tls.start_time, p.tun.start_time) for p in
                   correlate(tls2, tun2, table, cfg)}
            assert got == baseline

    def test_emitted_pairs_satisfy_both_conditions(self):
        rng = random.Random(3)
        tls, tun, entries = [], [], []
        for k in range(30):
            port_in = 50001 + (k % 7)
            port_out = 40001 + (k % 7)
            t = rng.uniform(0, 300)
            tls.append(tls_flow(port_in, t))
            tun.append(tun_flow(port_out, t + rng.uniform(-2, 2)))
            entries.append(MappingEntry(port_in, port_out, t))
        table = MappingTable(entries)
        cfg = CorrelationConfig(epsilon=1.0)
        port_pairs = {(e.inbound, e.outbound) for e in table.entries}
        for p in correlate(tls, tun, table, cfg):
            assert (p.tls.key.src_port, p.tun.key.src_port) in port_pairs
            assert abs(p.tls.start_time - p.tun.start_time) <= cfg.epsilon


class TestDatasetRoundTrip:
    def _pair(self, label, tls_start, tun_start, n=6):
        tls, tl = [517, 2940, 64], 3
        tun, ul = [110, 586, 2950], 3
        return ParallelFlowPair(
            tls=FlowSequence(tls_start, tls + [0] * (n - tl), tl, FlowKind.TLS, label),
            tun=FlowSequence(tun_start, tun + [0] * (n - ul), ul, FlowKind.TUNNEL, label),
            label=label,
        )

    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "pairs.txt"
        assert write_dataset([], path, n=6) == 0
        pairs, n = read_dataset_with_n(path)
        assert pairs == []
        assert n == 6

    def test_single_pair_identity(self, tmp_path):
        path = tmp_path / "pairs.txt"
        pair = self._pair(3, 10.25, 10.5)
        write_dataset([pair], path)
        loaded = read_dataset(path)
        assert loaded == [pair]

    def test_many_pairs_order_preserved(self, tmp_path):
        rng = random.Random(2)
        pairs = [self._pair(rng.randrange(5), float(i), i + rng.random()) for i in range(500)]
        path = tmp_path / "pairs.txt"
        assert write_dataset(pairs, path) == 500
        assert read_dataset(path) == pairs

    def test_unlabeled_pair_rejected(self, tmp_path):
        pair = self._pair(0, 0.0, 0.1)
        pair = ParallelFlowPair(tls=pair.tls.retruncated(6), tun=pair.tun.retruncated(6))
        with pytest.raises(ValueError, match="label"):
            write_dataset([pair], tmp_path / "x.txt")

    def test_malformed_row_names_line_and_field(self, tmp_path):
        path = tmp_path / "pairs.txt"
        write_dataset([self._pair(1, 0.0, 0.1)], path)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write("7|0.0|5 frog 6|0.1|7 8\n")
        with pytest.raises(ValueError, match=r":3.*tls_tokens"):
            read_dataset(path)

    def test_wrong_version_rejected(self, tmp_path):
        path = tmp_path / "pairs.txt"
        path.write_text("# tunfp-pairs schema_version=9 n=6\n")
        with pytest.raises(ValueError, match="schema_version"):
            read_dataset(path)


class TestTruthLabels:
    def test_recovery_accounting(self):
        truth = [
            ParallelFlowPair(
                tls=FlowSequence(0.0, [5, 0], 1, FlowKind.TLS, 2),
                tun=FlowSequence(0.1, [6, 0], 1, FlowKind.TUNNEL, 2),
                label=2,
            ),
            ParallelFlowPair(
                tls=FlowSequence(10.0, [7, 0], 1, FlowKind.TLS, 1),
                tun=FlowSequence(10.1, [8, 0], 1, FlowKind.TUNNEL, 1),
                label=1,
            ),
        ]
        got = [
            ParallelFlowPair(  # matches truth[0]
                tls=FlowSequence(0.0, [5, 0], 1, FlowKind.TLS),
                tun=FlowSequence(0.1, [6, 0], 1, FlowKind.TUNNEL),
            ),
            ParallelFlowPair(  # false: wrong tunnel side
                tls=FlowSequence(10.0, [7, 0], 1, FlowKind.TLS),
                tun=FlowSequence(0.1, [6, 0], 1, FlowKind.TUNNEL),
            ),
        ]
        labeled, report = apply_truth_labels(got, truth)
        assert [p.label for p in labeled] == [2]
        assert report.recovered == 1
        assert report.missed == 1
        assert report.false_pairs == 1
        assert report.truth_total == 2
