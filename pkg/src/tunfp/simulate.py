"""Synthetic parallel-corpus generator.

Produces the ingredients a tunnel-traffic lab needs: per-app TLS flow
sequences, their re-encapsulated tunnel counterparts, the tunnel client's
socket mapping table, and ground-truth pairs.

The re-encapsulation model mirrors what forwarding clients actually do to
packet lengths: every forwarded record grows by a per-packet byte overhead
(cipher/protocol framing), anything exceeding the transport's payload
ceiling is split greedily head-first, a profile-specific control handshake
precedes the forwarded data, and chatty profiles interleave mid-flow
control packets (keepalives, rekeys, cover traffic) between forwarded
records. Overheads and control decisions are drawn by a counter-based hash
so a (seed, packet index, profile salt) triple always yields the same
bytes regardless of generation order or platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .flows import (
    AppLabel,
    Direction,
    FlowKind,
    FlowSequence,
    PacketRecord,
    ParallelFlowPair,
    Protocol,
    pad_or_truncate,
    tokenize,
)
from .ingest import MappingEntry, MappingTable, write_dataset, write_mapping, write_packets

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    """splitmix64 finalizer: a fast, stable 64-bit avalanche."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _hash64(*parts: int) -> int:
    h = 0
    for p in parts:
        h = _mix64(h ^ (p & _MASK64))
    return h


@dataclass(frozen=True)
class TunnelProfile:
    """Parameters of one synthetic re-encapsulation policy.

    ``control_prefix`` models the connection handshake; ``control_rate`` and
    ``control_span`` model mid-flow chatter: after each forwarded record the
    tunnel may emit one control packet (keepalive, rekey, cover traffic)
    with that probability, sized uniformly within the span, direction split
    evenly. Chatter draws come from the same counter-based hash as
    overheads, so a flow's control schedule is a pure function of
    (rng_seed, record index, salt) and never depends on payload sizes.
    """

    name: str
    overhead_min: int
    overhead_max: int
    mtu_payload: int
    control_prefix: tuple[tuple[Direction, int], ...] = ()
    latency: float = 0.125
    seed_salt: int = 0
    control_rate: float = 0.0
    control_span: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if not 0 <= self.overhead_min <= self.overhead_max:
            raise ValueError(
                f"profile {self.name}: need 0 <= overhead_min <= overhead_max, "
                f"got [{self.overhead_min}, {self.overhead_max}]"
            )
        if not 576 <= self.mtu_payload <= 1500:
            raise ValueError(f"profile {self.name}: mtu_payload {self.mtu_payload} outside [576, 1500]")
        for d, length in self.control_prefix:
            if length < 1:
                raise ValueError(f"profile {self.name}: control packet length {length} < 1")
        if self.latency < 0:
            raise ValueError(f"profile {self.name}: negative latency")
        if not 0.0 <= self.control_rate <= 0.5:
            raise ValueError(
                f"profile {self.name}: control_rate {self.control_rate} outside [0, 0.5]"
            )
        if self.control_rate > 0:
            lo, hi = self.control_span
            if not 1 <= lo <= hi <= self.mtu_payload:
                raise ValueError(
                    f"profile {self.name}: control_span {self.control_span} must satisfy "
                    f"1 <= lo <= hi <= mtu_payload"
                )


def overhead_draws(profile: TunnelProfile, rng_seed: int, count: int) -> list[int]:
    """The per-packet overhead bytes re-encapsulation will add, in order.

    Exposed so tests and audits can reproduce the exact draws.
    """
    lo, hi = profile.overhead_min, profile.overhead_max
    span = hi - lo + 1
    return [lo + _hash64(rng_seed, i, profile.seed_salt) % span for i in range(count)]


def control_draws(
    profile: TunnelProfile, rng_seed: int, count: int
) -> list[tuple[Direction, int] | None]:
    """The mid-flow control packet (if any) emitted after each forwarded
    record, in order: None, or a (direction, payload_len).

    Like overhead_draws, a pure function of (rng_seed, record index, salt) —
    exposed so tests and audits can reproduce the exact schedule. The gate
    threshold is quantized to 1/2**32, exact for dyadic rates.
    """
    if profile.control_rate == 0.0 or count == 0:
        return [None] * count
    lo, hi = profile.control_span
    span = hi - lo + 1
    threshold = round(profile.control_rate * 2**32)
    salt = profile.seed_salt
    draws: list[tuple[Direction, int] | None] = []
    for i in range(count):
        if _hash64(rng_seed, i, salt, 1) % 2**32 >= threshold:
            draws.append(None)
            continue
        size = lo + _hash64(rng_seed, i, salt, 2) % span
        direction = (
            Direction.OUTBOUND if _hash64(rng_seed, i, salt, 3) & 1 else Direction.INBOUND
        )
        draws.append((direction, size))
    return draws


def fragment(size: int, mtu_payload: int) -> list[int]:
    """Greedy head-fill split of one record into transport-sized pieces."""
    if size < 1:
        raise ValueError(f"cannot fragment a record of {size} bytes")
    pieces = []
    while size > mtu_payload:
        pieces.append(mtu_payload)
        size -= mtu_payload
    pieces.append(size)
    return pieces


def reencapsulate(
    tls_lengths: Sequence[tuple[Direction, int]],
    profile: TunnelProfile,
    rng_seed: int,
) -> list[tuple[Direction, int]]:
    """Transform a TLS-side (direction, payload_len) sequence into the
    tunnel-side sequence: control prefix, then per-record overhead and
    MTU fragmentation with directions preserved, plus interleaved mid-flow
    control packets on chatty profiles."""
    for _, length in tls_lengths:
        if length < 1:
            raise ValueError("re-encapsulation input contains a zero/negative payload")
    overheads = overhead_draws(profile, rng_seed, len(tls_lengths))
    chatter = control_draws(profile, rng_seed, len(tls_lengths))
    out: list[tuple[Direction, int]] = list(profile.control_prefix)
    for (direction, length), oh, ctl in zip(tls_lengths, overheads, chatter):
        for piece in fragment(length + oh, profile.mtu_payload):
            out.append((direction, piece))
        if ctl is not None:
            out.append(ctl)
    return out


# ---------------------------------------------------------------------------
# stock profiles

def stock_profiles() -> list[TunnelProfile]:
    """Five forwarding policies loosely themed on common tunnel stacks.

    Three use a fixed per-record overhead and stay silent mid-flow (their
    framing is constant-size and they forward without chatter); two draw
    overhead from a range and interleave mid-flow control packets sized
    like ordinary data — the padding/keepalive/cover-traffic behaviour of
    heavily obfuscated stacks. The trojan and vmess entries are deliberate
    near-twins — same hello packet, same MTU, overheads three bytes apart —
    so payloads three bytes apart collide across them token-for-token.
    Latencies are dyadic fractions so start-time offsets survive float
    arithmetic exactly; control rates are dyadic so gate thresholds are
    exact.
    """
    out, inb = Direction.OUTBOUND, Direction.INBOUND
    return [
        TunnelProfile("ss_like", 70, 70, 1448, ((out, 110),), latency=0.125, seed_salt=101),
        TunnelProfile("trojan_like", 69, 69, 1448, ((out, 58),), latency=0.15625, seed_salt=102),
        TunnelProfile("vmess_like", 72, 72, 1448, ((out, 58),), latency=0.1875, seed_salt=103),
        TunnelProfile("ssr_like", 50, 140, 1446, ((out, 120), (inb, 92)), latency=0.21875,
                      seed_salt=104, control_rate=0.375, control_span=(130, 820)),
        TunnelProfile("ovpn_like", 40, 180, 1400, ((out, 54), (inb, 54), (out, 42)),
                      latency=0.25, seed_salt=105, control_rate=0.3125, control_span=(100, 840)),
    ]


_PROFILE_KEYS = {"name", "overhead_min", "overhead_max", "mtu_payload",
                 "control_prefix", "latency", "seed_salt",
                 "control_rate", "control_span"}
_DIR_VALUES = {"out": Direction.OUTBOUND, "in": Direction.INBOUND}


def read_profiles(path: str | Path) -> list[TunnelProfile]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, list):
        raise ValueError(f"{path}: expected a list of profile blocks")
    profiles = []
    for i, block in enumerate(doc):
        if not isinstance(block, dict):
            raise ValueError(f"{path}: profile {i} is not a mapping")
        unknown = set(block) - _PROFILE_KEYS
        if unknown:
            raise ValueError(f"{path}: profile {i} has unknown keys: {sorted(unknown)}")
        prefix = []
        for j, item in enumerate(block.get("control_prefix", [])):
            d, length = item
            if d not in _DIR_VALUES:
                raise ValueError(f"{path}: profile {i} control packet {j}: bad direction {d!r}")
            prefix.append((_DIR_VALUES[d], int(length)))
        span = block.get("control_span", [0, 0])
        profiles.append(
            TunnelProfile(
                name=str(block["name"]),
                overhead_min=int(block["overhead_min"]),
                overhead_max=int(block["overhead_max"]),
                mtu_payload=int(block["mtu_payload"]),
                control_prefix=tuple(prefix),
                latency=float(block.get("latency", 0.125)),
                seed_salt=int(block.get("seed_salt", 0)),
                control_rate=float(block.get("control_rate", 0.0)),
                control_span=(int(span[0]), int(span[1])),
            )
        )
    return profiles


def write_profiles(profiles: Sequence[TunnelProfile], path: str | Path) -> None:
    doc = []
    for p in profiles:
        doc.append({
            "name": p.name,
            "overhead_min": p.overhead_min,
            "overhead_max": p.overhead_max,
            "mtu_payload": p.mtu_payload,
            "control_prefix": [[d.value, length] for d, length in p.control_prefix],
            "latency": p.latency,
            "seed_salt": p.seed_salt,
            "control_rate": p.control_rate,
            "control_span": list(p.control_span),
        })
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


# ---------------------------------------------------------------------------
# app traffic models

@dataclass
class AppTrafficModel:
    """Synthetic per-app traffic: a bank of direction-signed length templates
    plus per-packet jitter and a flow-size distribution.

    Template lengths are positive for outbound packets, negative for inbound.
    A flow instance picks a template, truncates it to a sampled size, and
    jitters each payload length within bounds.
    """

    label: AppLabel
    templates: list[list[int]]
    jitter: tuple[int, int] = (-1, 1)
    flow_len: tuple[int, int] = (18, 36)

    def __post_init__(self) -> None:
        if not self.templates or any(not t for t in self.templates):
            raise ValueError(f"app {self.label.name}: templates must be non-empty")
        for t in self.templates:
            if t[0] <= 0:
                raise ValueError(f"app {self.label.name}: templates must start outbound")
        lo, hi = self.jitter
        for t in self.templates:
            for signed in t:
                length = abs(signed)
                if length + lo < 1 or length + hi > 1500:
                    raise ValueError(
                        f"app {self.label.name}: jitter can push length {length} outside [1, 1500]"
                    )
        if not 1 <= self.flow_len[0] <= self.flow_len[1]:
            raise ValueError(f"app {self.label.name}: bad flow_len bounds {self.flow_len}")

    def sample_flow(self, gen: np.random.Generator) -> list[tuple[Direction, int]]:
        template = self.templates[int(gen.integers(len(self.templates)))]
        target = int(gen.integers(self.flow_len[0], self.flow_len[1] + 1))
        target = min(target, len(template))
        lo, hi = self.jitter
        flow = []
        for signed in template[:target]:
            length = abs(signed) + int(gen.integers(lo, hi + 1))
            direction = Direction.OUTBOUND if signed > 0 else Direction.INBOUND
            flow.append((direction, length))
        return flow


# payload-length state grids shared by every app: all apps emit exactly these
# sizes, so no single token value identifies an app. Gaps are narrower than
# the noisy profiles' overhead spans — after re-encapsulation adjacent states
# alias and only sequence context can tell them apart.
_OUT_GRID = [72, 123, 174, 225, 276, 327, 378, 429, 480, 531, 582, 633, 684]
_IN_GRID = [210, 282, 354, 426, 498, 570, 642, 714, 786, 858, 930,
            1002, 1074, 1146, 1218, 1290, 1362]


def make_stock_apps(
    num_apps: int = 10,
    seed: int = 7,
    templates_per_app: int = 256,
    template_len: int = 48,
    flow_len: tuple[int, int] = (24, 48),
    jitter: tuple[int, int] = (-1, 1),
) -> list[AppTrafficModel]:
    """Build ``num_apps`` traffic models that differ only in how they chain
    a shared bank of payload-length states.

    Every app walks the same outbound/inbound size grid and opens on the
    same state, so marginal token statistics carry no class signal at all.
    What separates apps is the transition matrix: each state has one global
    pool of five candidate successors, and each app weights three of those
    five its own way. Apps therefore share most of their bigram support and
    differ in conditional preferences — a signal that survives clean
    forwarding but that overhead smear, fragmentation, and interleaved
    control chatter garble badly on the noisy tunnel profiles.
    """
    if num_apps < 2:
        raise ValueError("need at least two apps")
    states = [g for g in _OUT_GRID] + [-g for g in _IN_GRID]
    S = len(states)
    pool_gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 31])))
    pools = [pool_gen.choice(S, size=5, replace=False) for _ in range(S)]

    apps: list[AppTrafficModel] = []
    for app_id in range(num_apps):
        agen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, 900 + app_id])))
        # sparse row-stochastic transitions, one matrix per app: three of the
        # state's five pooled successors get app-specific weights, plus a
        # uniform floor that keeps every state reachable
        trans = np.zeros((S, S))
        for s in range(S):
            picks = agen.choice(5, size=3, replace=False)
            weights = agen.dirichlet(np.ones(3)) + 0.05
            for j, w in zip(picks, weights):
                trans[s, pools[s][j]] = w
            trans[s] /= trans[s].sum()
        trans = 0.9 * trans + 0.1 / S
        templates = []
        for _ in range(templates_per_app):
            path = [0]  # every flow opens with the shared first outbound state
            for _ in range(template_len - 1):
                path.append(int(agen.choice(S, p=trans[path[-1]])))
            templates.append([states[s] for s in path])
        apps.append(
            AppTrafficModel(
                label=AppLabel(app_id, f"app_{app_id:02d}"),
                templates=templates,
                jitter=jitter,
                flow_len=flow_len,
            )
        )
    return apps


# ---------------------------------------------------------------------------
# corpus generation

@dataclass
class CorpusFiles:
    tls_packets: Path
    tun_packets: Path
    mapping: Path
    pairs: Path
    labels: Path
    pair_count: int


def write_labels(labels: Sequence[AppLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# id,name\n")
        for lbl in sorted(labels, key=lambda l: l.id):
            fh.write(f"{lbl.id},{lbl.name}\n")


def read_labels(path: str | Path) -> list[AppLabel]:
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields")
            labels.append(AppLabel(int(parts[0]), parts[1]))
    return labels


CLIENT_IP = "10.0.0.2"
TLS_DST_PORT = 443
TUN_DST_PORT = 8388
PKT_GAP = 0.01


def generate_corpus(
    apps: Sequence[AppTrafficModel],
    profiles: Sequence[TunnelProfile],
    pairs_per_app_per_profile: int,
    seed: int,
    out_dir: str | Path,
    n: int = 200,
    port_reuse_fraction: float = 0.0,
    reuse_spacing: float = 10.0,
    pair_spacing: float = 0.5,
) -> CorpusFiles:
    """Emit packet files for both sides, the mapping table, the ground-truth
    pair dataset, and the label table. Deterministic under a fixed seed.

    With ``port_reuse_fraction`` > 0, that fraction of pairs recycles the
    previous pair's (inbound, outbound) ports and all pairs are spaced at
    least ``reuse_spacing`` seconds apart, so reused ports are resolvable by
    start-time proximity alone.
    """
    if pairs_per_app_per_profile < 1:
        raise ValueError("need at least one pair per app per profile")
    if len(apps) < 2:
        raise ValueError("need at least two apps")
    if not 0.0 <= port_reuse_fraction <= 0.5:
        raise ValueError("port_reuse_fraction must be in [0, 0.5]")
    ids = sorted(a.label.id for a in apps)
    if ids != list(range(len(apps))):
        raise ValueError(f"app label ids must be dense 0..C-1, got {ids}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spacing = max(pair_spacing, reuse_spacing) if port_reuse_fraction > 0 else pair_spacing
    reuse_every = round(1.0 / port_reuse_fraction) if port_reuse_fraction > 0 else 0

    K = pairs_per_app_per_profile
    P = len(profiles)
    total = len(apps) * P * K
    if 10000 + total > 30000 or 35000 + total > 65535:
        raise ValueError(f"corpus of {total} pairs exceeds the port allocation plan")

    tls_records: list[PacketRecord] = []
    tun_records: list[PacketRecord] = []
    entries: list[MappingEntry] = []
    pairs: list[ParallelFlowPair] = []

    for a_idx, app in enumerate(apps):
        for p_idx, profile in enumerate(profiles):
            if profile.control_prefix and profile.control_prefix[0][0] is not Direction.OUTBOUND:
                raise ValueError(
                    f"profile {profile.name}: first control packet must be outbound"
                )
            for k in range(K):
                g = (a_idx * P + p_idx) * K + k
                gen = np.random.Generator(
                    np.random.PCG64(np.random.SeedSequence([seed, a_idx, p_idx, k]))
                )
                t0 = 1000.0 + g * spacing
                inbound = 10000 + g
                outbound = 35000 + g
                if reuse_every and g % reuse_every == 0 and g > 0:
                    inbound = 10000 + g - 1
                    outbound = 35000 + g - 1

                tls_lengths = app.sample_flow(gen)
                reencap_seed = int(gen.integers(1 << 62))
                tun_lengths = reencapsulate(tls_lengths, profile, reencap_seed)

                tls_dst = f"172.16.{(g // 250) % 250}.{g % 250}"
                tun_dst = f"203.0.113.{g % 7 + 1}"
                tun_t0 = t0 + profile.latency

                for i, (d, length) in enumerate(tls_lengths):
                    ts = t0 + i * PKT_GAP
                    if d is Direction.OUTBOUND:
                        tls_records.append(PacketRecord(CLIENT_IP, inbound, tls_dst,
                                                        TLS_DST_PORT, Protocol.TCP, ts, d, length))
                    else:
                        tls_records.append(PacketRecord(tls_dst, TLS_DST_PORT, CLIENT_IP,
                                                        inbound, Protocol.TCP, ts, d, length))
                for i, (d, length) in enumerate(tun_lengths):
                    ts = tun_t0 + i * PKT_GAP
                    if d is Direction.OUTBOUND:
                        tun_records.append(PacketRecord(CLIENT_IP, outbound, tun_dst,
                                                        TUN_DST_PORT, Protocol.TCP, ts, d, length))
                    else:
                        tun_records.append(PacketRecord(tun_dst, TUN_DST_PORT, CLIENT_IP,
                                                        outbound, Protocol.TCP, ts, d, length))

                entries.append(MappingEntry(inbound, outbound, t0 - 0.0625))

                tls_tokens, tls_len = pad_or_truncate(
                    [tokenize(d, l) for d, l in tls_lengths], n)
                tun_tokens, tun_len = pad_or_truncate(
                    [tokenize(d, l) for d, l in tun_lengths], n)
                pairs.append(ParallelFlowPair(
                    tls=FlowSequence(t0, tls_tokens, tls_len, FlowKind.TLS, app.label.id),
                    tun=FlowSequence(tun_t0, tun_tokens, tun_len, FlowKind.TUNNEL, app.label.id),
                    label=app.label.id,
                ))

    starts = {p.tls.start_time for p in pairs}
    if len(starts) != len(pairs):
        raise AssertionError("internal: TLS start times must be unique")

    files = CorpusFiles(
        tls_packets=out_dir / "tls_packets.csv",
        tun_packets=out_dir / "tun_packets.csv",
        mapping=out_dir / "mapping.csv",
        pairs=out_dir / "truth_pairs.txt",
        labels=out_dir / "labels.txt",
        pair_count=len(pairs),
    )
    write_packets(tls_records, files.tls_packets)
    write_packets(tun_records, files.tun_packets)
    write_mapping(MappingTable(entries), files.mapping)
    write_dataset(pairs, files.pairs, n=n)
    write_labels([a.label for a in apps], files.labels)
    return files
