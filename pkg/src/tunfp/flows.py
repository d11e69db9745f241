"""Core flow data model and the token transforms feeding the models.

A flow is the ordered sequence of packets sharing one transport 5-tuple.
The models never see raw bytes: each packet is reduced to a single integer
token encoding (direction, payload length), and each flow becomes a
fixed-length token sequence padded or truncated to ``n``.

Token layout (vocabulary size 3001):

    0                pad
    1 .. 1500        outbound payload of 1..1500 bytes (clamped at 1500)
    1501 .. 3000     inbound payload of 1..1500 bytes (clamped at 1500)

Zero-payload packets (pure ACKs and the like) carry no app-level signal and
are dropped before tokenization, so token 0 is reserved for padding only.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

MAX_PAYLOAD_TOKEN = 1500
VOCAB_SIZE = 2 * MAX_PAYLOAD_TOKEN + 1  # pad + outbound range + inbound range
PAD_TOKEN = 0


class Direction(enum.Enum):
    OUTBOUND = "out"
    INBOUND = "in"


class Protocol(enum.Enum):
    TCP = "tcp"
    UDP = "udp"


class FlowKind(enum.Enum):
    TLS = "tls"
    TUNNEL = "tunnel"


@dataclass(frozen=True)
class FlowKey:
    """Transport 5-tuple. Use :meth:`canonical` to group packets of both
    directions into the same flow."""

    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    protocol: Protocol

    def __post_init__(self) -> None:
        for name, port in (("src_port", self.src_port), ("dst_port", self.dst_port)):
            if not 0 <= port <= 65535:
                raise ValueError(f"{name} out of range: {port}")

    def canonical(self) -> tuple:
        """Endpoint-order-independent key: both directions of a connection
        canonicalize to the same tuple."""
        a = (self.src_ip, self.src_port)
        b = (self.dst_ip, self.dst_port)
        lo, hi = (a, b) if a <= b else (b, a)
        return (*lo, *hi, self.protocol)

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_ip, self.dst_port, self.src_ip, self.src_port, self.protocol)


@dataclass(frozen=True)
class PacketRecord:
    """One observed packet: the atom of ingestion."""

    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    protocol: Protocol
    timestamp: float
    direction: Direction
    payload_len: int

    def __post_init__(self) -> None:
        if not 0 <= self.src_port <= 65535:
            raise ValueError(f"src_port out of range: {self.src_port}")
        if not 0 <= self.dst_port <= 65535:
            raise ValueError(f"dst_port out of range: {self.dst_port}")
        if not 0 <= self.payload_len <= 65535:
            raise ValueError(f"payload_len out of range: {self.payload_len}")

    @property
    def key(self) -> FlowKey:
        return FlowKey(self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol)


@dataclass(frozen=True)
class AppLabel:
    id: int
    name: str

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"label id must be nonnegative, got {self.id}")


def tokenize(direction: Direction, payload_len: int) -> int:
    """Map (direction, payload length) to a vocabulary token.

    Outbound lengths map to 1..1500, inbound to 1501..3000; lengths above
    1500 clamp to the boundary. Never returns the pad token.
    """
    if payload_len < 1:
        raise ValueError(f"cannot tokenize zero/negative payload length {payload_len}; "
                         "zero-payload packets must be filtered upstream")
    clamped = min(payload_len, MAX_PAYLOAD_TOKEN)
    if direction is Direction.OUTBOUND:
        return clamped
    return MAX_PAYLOAD_TOKEN + clamped


def detokenize(token: int) -> tuple[Direction, int]:
    """Inverse of :func:`tokenize` up to length clamping."""
    if not 1 <= token <= 2 * MAX_PAYLOAD_TOKEN:
        raise ValueError(f"not a payload token: {token}")
    if token <= MAX_PAYLOAD_TOKEN:
        return Direction.OUTBOUND, token
    return Direction.INBOUND, token - MAX_PAYLOAD_TOKEN


def pad_or_truncate(tokens: list[int], n: int) -> tuple[list[int], int]:
    """Fit a raw token list to exactly ``n`` entries.

    Returns (fitted tokens, true_len). The first min(len, n) tokens are kept
    in order; the remainder is pad.
    """
    if not tokens:
        raise ValueError("cannot fit an empty token list")
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    true_len = min(len(tokens), n)
    fitted = list(tokens[:true_len]) + [PAD_TOKEN] * (n - true_len)
    return fitted, true_len


@dataclass
class FlowSequence:
    """An ordered, direction-signed, fixed-length token sequence: the model
    input for one flow."""

    start_time: float
    tokens: list[int]
    true_len: int
    kind: FlowKind
    label: Optional[int] = None
    key: Optional[FlowKey] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        n = len(self.tokens)
        if not 1 <= self.true_len <= n:
            raise ValueError(f"true_len {self.true_len} out of range for n={n}")
        body = self.tokens[: self.true_len]
        if min(body) < 1 or max(body) >= VOCAB_SIZE:
            raise ValueError("non-pad region contains out-of-vocabulary or pad tokens")
        tail = self.tokens[self.true_len :]
        if tail and (min(tail) != 0 or max(tail) != 0):
            raise ValueError("pad region contains non-pad tokens")

    @property
    def n(self) -> int:
        return len(self.tokens)

    def retruncated(self, n: int) -> "FlowSequence":
        """The same flow fitted to a different sequence length."""
        fitted, true_len = pad_or_truncate(self.tokens[: self.true_len], n)
        return FlowSequence(self.start_time, fitted, true_len, self.kind, self.label, self.key)


@dataclass
class ParallelFlowPair:
    """A correlated (TLS flow, tunnel flow) pair sharing one app label: the
    training unit.

    ``label`` may be None for pairs correlated from unlabeled captures;
    training and dataset serialization require it to be set.
    """

    tls: FlowSequence
    tun: FlowSequence
    label: Optional[int] = None

    def __post_init__(self) -> None:
        if self.tls.kind is not FlowKind.TLS:
            raise ValueError(f"tls side has kind {self.tls.kind}")
        if self.tun.kind is not FlowKind.TUNNEL:
            raise ValueError(f"tun side has kind {self.tun.kind}")
        for side in (self.tls, self.tun):
            if side.label is not None and self.label is not None and side.label != self.label:
                raise ValueError(f"flow label {side.label} disagrees with pair label {self.label}")
