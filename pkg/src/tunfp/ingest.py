"""Packet-record ingestion, flow reassembly, and TLS/tunnel flow correlation.

File formats owned by this module (all UTF-8 text, ``#`` lines are comments):

* packet records — one packet per line::

      src_ip,src_port,dst_ip,dst_port,proto,timestamp,direction,payload_len

  ``proto`` is ``tcp``/``udp``, ``direction`` is ``out``/``in``.

* socket mapping table — one entry per line::

      inbound_port,outbound_port,created_at

* pair dataset — a header line then one pair per line::

      # tunfp-pairs schema_version=1 n=<n>
      label|tls_start|tls tokens (space-sep, pads omitted)|tun_start|tun tokens

The mapping table is what a tunnel client knows about its own forwarding: the
app connects to the local inbound port, the client opens an outbound
connection to the tunnel server, and the (inbound, outbound) port pair lands
in the table. A TLS flow and a tunnel flow are correlated into a training
pair when some table entry links their source ports and their start times
lie within ``epsilon`` seconds of each other.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .flows import (
    Direction,
    FlowKind,
    FlowSequence,
    PacketRecord,
    ParallelFlowPair,
    Protocol,
    pad_or_truncate,
    tokenize,
)

logger = logging.getLogger(__name__)

DATASET_MAGIC = "# tunfp-pairs"
DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MappingEntry:
    inbound: int
    outbound: int
    created_at: float

    def __post_init__(self) -> None:
        for name, port in (("inbound", self.inbound), ("outbound", self.outbound)):
            if not 1 <= port <= 65535:
                raise ValueError(f"{name} port out of range: {port}")


@dataclass
class MappingTable:
    entries: list[MappingEntry]

    def __post_init__(self) -> None:
        self.entries = sorted(self.entries, key=lambda e: e.created_at)


@dataclass
class CorrelationConfig:
    epsilon: float = 1.0
    n: int = 200

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")


# ---------------------------------------------------------------------------
# packet / mapping file IO

_DIRECTIONS = {"out": Direction.OUTBOUND, "in": Direction.INBOUND}
_PROTOCOLS = {"tcp": Protocol.TCP, "udp": Protocol.UDP}


def read_packets(path: str | Path) -> Iterator[PacketRecord]:
    """Stream packet records from a file, skipping comments and blank lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                proto = _PROTOCOLS[parts[4].lower()]
            except KeyError:
                raise ValueError(f"{path}:{lineno}: field 'proto': unknown value {parts[4]!r}") from None
            try:
                direction = _DIRECTIONS[parts[6].lower()]
            except KeyError:
                raise ValueError(f"{path}:{lineno}: field 'direction': unknown value {parts[6]!r}") from None
            try:
                yield PacketRecord(
                    src_ip=parts[0],
                    src_port=int(parts[1]),
                    dst_ip=parts[2],
                    dst_port=int(parts[3]),
                    protocol=proto,
                    timestamp=float(parts[5]),
                    direction=direction,
                    payload_len=int(parts[7]),
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None


def write_packets(records: Iterable[PacketRecord], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# src_ip,src_port,dst_ip,dst_port,proto,timestamp,direction,payload_len\n")
        for r in records:
            fh.write(
                f"{r.src_ip},{r.src_port},{r.dst_ip},{r.dst_port},"
                f"{r.protocol.value},{r.timestamp!r},{r.direction.value},{r.payload_len}\n"
            )
            count += 1
    return count


def read_mapping(path: str | Path) -> MappingTable:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                entries.append(MappingEntry(int(parts[0]), int(parts[1]), float(parts[2])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return MappingTable(entries)


def write_mapping(table: MappingTable, path: str | Path) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# inbound_port,outbound_port,created_at\n")
        for e in table.entries:
            fh.write(f"{e.inbound},{e.outbound},{e.created_at!r}\n")
    return len(table.entries)


# ---------------------------------------------------------------------------
# reassembly

def reassemble(records: Iterable[PacketRecord], n: int, kind: FlowKind) -> list[FlowSequence]:
    """Group packets by canonical 5-tuple into fixed-length flow sequences.

    The flow is oriented at its initiator: the first packet of every flow
    must be outbound, and each packet's direction field must agree with its
    endpoints relative to that initiator. Zero-payload packets contribute no
    token; flows consisting only of them are dropped (with a warning count).
    Flows are returned in order of first appearance.
    """
    groups: dict[tuple, list[PacketRecord]] = {}
    for rec in records:
        groups.setdefault(rec.key.canonical(), []).append(rec)

    flows: list[FlowSequence] = []
    dropped = 0
    for canon, packets in groups.items():
        packets.sort(key=lambda p: p.timestamp)  # stable: input order on ties
        first = packets[0]
        if first.direction is not Direction.OUTBOUND:
            raise ValueError(
                f"flow {canon} starts with an inbound packet; "
                "captures must begin at the flow initiator"
            )
        initiator = (first.src_ip, first.src_port)
        tokens: list[int] = []
        for p in packets:
            expected = Direction.OUTBOUND if (p.src_ip, p.src_port) == initiator else Direction.INBOUND
            if p.direction is not expected:
                raise ValueError(
                    f"flow {canon}: packet at t={p.timestamp} has direction "
                    f"{p.direction.value} but its endpoints say {expected.value}"
                )
            if p.payload_len == 0:
                continue
            tokens.append(tokenize(p.direction, p.payload_len))
        if not tokens:
            dropped += 1
            continue
        fitted, true_len = pad_or_truncate(tokens, n)
        flows.append(
            FlowSequence(
                start_time=first.timestamp,
                tokens=fitted,
                true_len=true_len,
                kind=kind,
                key=first.key,
            )
        )
    if dropped:
        logger.warning("dropped %d flow(s) carrying only zero-payload packets", dropped)
    return flows


# ---------------------------------------------------------------------------
# correlation

def _flow_sort_key(flow: FlowSequence) -> tuple:
    port = flow.key.src_port if flow.key is not None else -1
    return (flow.start_time, port, flow.tokens)


def correlate(
    tls_flows: list[FlowSequence],
    tun_flows: list[FlowSequence],
    table: MappingTable,
    cfg: CorrelationConfig,
) -> list[ParallelFlowPair]:
    """Match TLS flows with the tunnel flows that carried them.

    A candidate match requires a mapping entry (inbound, outbound) with
    tls.src_port == inbound, tun.src_port == outbound, and
    |tls.start_time - tun.start_time| <= epsilon. Among multiple candidates
    (port reuse over time) the smallest time gap wins, exact gap ties going
    to the earlier tunnel start; every flow ends up in at most one pair.
    The result is independent of input ordering.
    """
    for f in tls_flows:
        if f.kind is not FlowKind.TLS:
            raise ValueError("tls_flows contains a non-TLS flow")
        if f.key is None:
            raise ValueError("correlation needs flow keys; got a keyless TLS flow")
    for f in tun_flows:
        if f.kind is not FlowKind.TUNNEL:
            raise ValueError("tun_flows contains a non-tunnel flow")
        if f.key is None:
            raise ValueError("correlation needs flow keys; got a keyless tunnel flow")

    tls_sorted = sorted(tls_flows, key=_flow_sort_key)
    tun_sorted = sorted(tun_flows, key=_flow_sort_key)

    tls_by_port: dict[int, list[int]] = {}
    for i, f in enumerate(tls_sorted):
        tls_by_port.setdefault(f.key.src_port, []).append(i)
    tun_by_port: dict[int, list[int]] = {}
    for j, f in enumerate(tun_sorted):
        tun_by_port.setdefault(f.key.src_port, []).append(j)

    # candidate edges, deduplicated across table entries linking the same ports
    port_pairs = {(e.inbound, e.outbound) for e in table.entries}
    edges: list[tuple[float, float, float, int, int]] = []
    seen: set[tuple[int, int]] = set()
    for inbound, outbound in port_pairs:
        for i in tls_by_port.get(inbound, ()):
            t_tls = tls_sorted[i].start_time
            for j in tun_by_port.get(outbound, ()):
                gap = abs(t_tls - tun_sorted[j].start_time)
                if gap <= cfg.epsilon and (i, j) not in seen:
                    seen.add((i, j))
                    edges.append((gap, tun_sorted[j].start_time, t_tls, i, j))

    edges.sort()
    tls_taken = [False] * len(tls_sorted)
    tun_taken = [False] * len(tun_sorted)
    matched: list[tuple[int, int]] = []
    for _, _, _, i, j in edges:
        if tls_taken[i] or tun_taken[j]:
            continue
        tls_taken[i] = True
        tun_taken[j] = True
        matched.append((i, j))

    matched.sort(key=lambda ij: _flow_sort_key(tls_sorted[ij[0]]))
    pairs = []
    for i, j in matched:
        tls, tun = tls_sorted[i], tun_sorted[j]
        label = tls.label if tls.label is not None else tun.label
        pairs.append(ParallelFlowPair(tls=tls, tun=tun, label=label))
    unmatched_tls = len(tls_sorted) - len(pairs)
    unmatched_tun = len(tun_sorted) - len(pairs)
    if unmatched_tls or unmatched_tun:
        logger.info(
            "correlation leftovers: %d TLS flow(s) and %d tunnel flow(s) unmatched",
            unmatched_tls, unmatched_tun,
        )
    return pairs


# ---------------------------------------------------------------------------
# pair dataset IO

def write_dataset(pairs: list[ParallelFlowPair], path: str | Path, n: Optional[int] = None) -> int:
    """Write pairs as line-delimited records; returns the row count.

    Token pads are omitted on disk (the header's ``n`` restores them), so a
    row stores exactly the true-length prefixes.
    """
    if n is None:
        if not pairs:
            raise ValueError("writing an empty dataset requires an explicit n")
        n = pairs[0].tls.n
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{DATASET_MAGIC} schema_version={DATASET_SCHEMA_VERSION} n={n}\n")
        for idx, pair in enumerate(pairs):
            if pair.label is None:
                raise ValueError(f"pair {idx} has no label; dataset rows require labels")
            if pair.tls.n != n or pair.tun.n != n:
                raise ValueError(f"pair {idx} has sequence length != {n}")
            tls_toks = " ".join(map(str, pair.tls.tokens[: pair.tls.true_len]))
            tun_toks = " ".join(map(str, pair.tun.tokens[: pair.tun.true_len]))
            fh.write(
                f"{pair.label}|{pair.tls.start_time!r}|{tls_toks}|"
                f"{pair.tun.start_time!r}|{tun_toks}\n"
            )
    return len(pairs)


def read_dataset(path: str | Path) -> list[ParallelFlowPair]:
    pairs, _ = read_dataset_with_n(path)
    return pairs


def read_dataset_with_n(path: str | Path) -> tuple[list[ParallelFlowPair], int]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith(DATASET_MAGIC):
            raise ValueError(f"{path}:1: not a pair dataset (missing header)")
        fields = dict(
            kv.split("=", 1) for kv in header[len(DATASET_MAGIC):].split() if "=" in kv
        )
        try:
            version = int(fields["schema_version"])
            n = int(fields["n"])
        except (KeyError, ValueError):
            raise ValueError(f"{path}:1: header must carry schema_version and n") from None
        if version != DATASET_SCHEMA_VERSION:
            raise ValueError(
                f"{path}:1: schema_version {version} unsupported "
                f"(expected {DATASET_SCHEMA_VERSION})"
            )
        pairs = []
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("|")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            field = "label"
            try:
                label = int(parts[0])
                field = "tls_start"
                tls_start = float(parts[1])
                field = "tls_tokens"
                tls_tokens, tls_len = pad_or_truncate([int(t) for t in parts[2].split()], n)
                field = "tun_start"
                tun_start = float(parts[3])
                field = "tun_tokens"
                tun_tokens, tun_len = pad_or_truncate([int(t) for t in parts[4].split()], n)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: field '{field}': {exc}") from None
            pairs.append(
                ParallelFlowPair(
                    tls=FlowSequence(tls_start, tls_tokens, tls_len, FlowKind.TLS, label),
                    tun=FlowSequence(tun_start, tun_tokens, tun_len, FlowKind.TUNNEL, label),
                    label=label,
                )
            )
    return pairs, n


# ---------------------------------------------------------------------------
# ground-truth accounting

@dataclass
class CorrelationReport:
    recovered: int
    missed: int
    false_pairs: int

    @property
    def truth_total(self) -> int:
        return self.recovered + self.missed


def apply_truth_labels(
    pairs: list[ParallelFlowPair], truth: list[ParallelFlowPair]
) -> tuple[list[ParallelFlowPair], CorrelationReport]:
    """Label correlated pairs by matching them against ground-truth pairs.

    Identity is (tls.start_time, tun.start_time, both token prefixes); the
    generator guarantees unique start times. Returns the labeled pairs that
    exist in the truth set plus a recovery report.
    """
    def ident(p: ParallelFlowPair) -> tuple:
        return (
            p.tls.start_time,
            p.tun.start_time,
            tuple(p.tls.tokens[: p.tls.true_len]),
            tuple(p.tun.tokens[: p.tun.true_len]),
        )

    truth_by_id = {ident(p): p.label for p in truth}
    labeled: list[ParallelFlowPair] = []
    false_pairs = 0
    for p in pairs:
        label = truth_by_id.pop(ident(p), None)
        if label is None:
            false_pairs += 1
            continue
        labeled.append(ParallelFlowPair(tls=p.tls, tun=p.tun, label=label))
    report = CorrelationReport(
        recovered=len(labeled), missed=len(truth_by_id), false_pairs=false_pairs
    )
    return labeled, report
