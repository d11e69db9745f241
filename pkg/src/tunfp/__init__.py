"""App fingerprinting lab for encrypted tunnel traffic.

Synthesizes or ingests parallel (TLS, tunnel) flow pairs, trains a
dual-branch disentangling sequence model on them, and classifies apps from
tunnel-side flows alone.
"""

__version__ = "0.1.0"

from .flows import (
    AppLabel,
    Direction,
    FlowKey,
    FlowKind,
    FlowSequence,
    PacketRecord,
    ParallelFlowPair,
    Protocol,
)

__all__ = [
    "AppLabel",
    "Direction",
    "FlowKey",
    "FlowKind",
    "FlowSequence",
    "PacketRecord",
    "ParallelFlowPair",
    "Protocol",
    "__version__",
]
