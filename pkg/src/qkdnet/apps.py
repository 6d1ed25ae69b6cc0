"""One-time-pad sessions on pooled key, and the simultaneous-call capacity test."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import yaml

from .keymgmt import InsufficientKey, KeyPool, PairingSchedule, PoolSet, find_key_path, next_pairing, pair_key
from .topology import NetworkGraph, NodeKind, is_switched, path_budget, reference_rate_table

VOICE_BPS = 2400
FILE_BPS = 320_000
TEXT_MESSAGE_BITS = 2000
RELAY_CHUNK_BITS = 65_536


class SessionKind(enum.Enum):
    VOICE = "Voice"
    FILE = "File"
    TEXT = "Text"


@dataclass(frozen=True)
class SessionSpec:
    """One application session between two nodes.

    Voice and File run at fixed rates. Text sends ``message_bits`` every
    ``message_interval_s`` seconds.
    """

    kind: SessionKind
    pair: tuple
    start_s: float
    duration_s: float
    message_bits: int = TEXT_MESSAGE_BITS
    message_interval_s: float = 10.0

    def __post_init__(self):
        if self.duration_s < 0:
            raise ValueError("duration_s must be >= 0")
        if len(self.pair) != 2 or self.pair[0] == self.pair[1]:
            raise ValueError("a session joins two distinct nodes")

    @property
    def rate_bps(self) -> float:
        if self.kind is SessionKind.VOICE:
            return VOICE_BPS
        if self.kind is SessionKind.FILE:
            return FILE_BPS
        return self.message_bits / self.message_interval_s

    def chunk(self, k: int) -> int:
        """Key bits needed for content second ``k``."""
        if self.kind is SessionKind.TEXT:
            step = max(int(round(self.message_interval_s)), 1)
            return self.message_bits if k % step == 0 else 0
        last = self.duration_s - k
        return int(round(self.rate_bps * min(1.0, last)))

    @property
    def seconds(self) -> int:
        return int(math.ceil(self.duration_s))

    @property
    def demand_bits(self) -> int:
        return sum(self.chunk(k) for k in range(self.seconds))


# --- one-time pad ------------------------------------------------------------


@dataclass(frozen=True)
class OtpCiphertext:
    pair: tuple
    offset: int
    payload: np.ndarray
    sender: int


def encrypt(plaintext, pool: KeyPool, t: float = 0.0, sender: Optional[int] = None) -> OtpCiphertext:
    """XOR with the next unused key bits of ``sender``'s copy."""
    x = np.asarray(plaintext, dtype=np.uint8)
    sender = pool.pair[0] if sender is None else sender
    if not pool.material:
        raise ValueError("encryption needs a pool that carries key material")
    seg = pool.consume(x.size, t, "consumed_app")
    return OtpCiphertext(pool.pair, seg.offset, x ^ seg.keys[sender], sender)


def decrypt(ct: OtpCiphertext, pool: KeyPool, receiver: Optional[int] = None) -> np.ndarray:
    receiver = next(n for n in pool.pair if n != ct.sender) if receiver is None else receiver
    return ct.payload ^ pool.segment(ct.offset, ct.payload.size, receiver)


# --- key supply -------------------------------------------------------------


class KeyRouter:
    """Makes sure a pair's pool can cover a demand, relaying when it cannot.

    ``edges`` are node pairs that generate key directly and ``relays`` the
    nodes trusted to sit inside a path (any node when None). A shortfall is
    covered by relaying ``RELAY_CHUNK_BITS`` (or just the shortfall when no
    path carries a full chunk) along the fewest-hop path whose pools all
    hold enough.
    """

    def __init__(self, pools: PoolSet, edges: Sequence[tuple], relays: Optional[Sequence[int]] = None,
                 relay_chunk: int = RELAY_CHUNK_BITS, on_relay: Optional[Callable] = None):
        self.pools = pools
        self.relays = None if relays is None else set(relays)
        self.edges = [pair_key(*e) for e in edges]
        self.relay_chunk = relay_chunk
        self.on_relay = on_relay

    def ensure(self, a: int, b: int, bits: int, t: float) -> bool:
        from .keymgmt import relay_path

        have = self.pools.level(a, b)
        if have >= bits:
            return True
        short = bits - have
        edges = [e for e in self.edges if e != pair_key(a, b)]
        for size in (max(short, self.relay_chunk), short):
            path = find_key_path(edges, a, b, self.pools, size, self.relays)
            if path and len(path) > 2:
                relay_path(path, size, self.pools, t)
                if self.on_relay:
                    self.on_relay(t, path, size)
                return True
        return False


# --- sessions ---------------------------------------------------------------


@dataclass
class SessionReport:
    spec: SessionSpec
    consumed_bits: int = 0
    stalls: list = field(default_factory=list)  # [start_s, end_s) intervals
    completed: bool = False
    end_s: Optional[float] = None
    decrypt_failures: int = 0

    @property
    def stall_seconds(self) -> float:
        return float(sum(b - a for a, b in self.stalls))


class Session:
    """Event-loop actor: one content second per wall-clock second.

    A starved second is a stall; content does not advance, so the session
    pauses and resumes rather than dropping data.
    """

    def __init__(self, spec: SessionSpec, rng: Optional[np.random.Generator] = None):
        self.spec = spec
        self.report = SessionReport(spec)
        self.k = 0
        self.rng = rng
        if spec.seconds == 0:
            self.report.completed = True
            self.report.end_s = spec.start_s

    @property
    def done(self) -> bool:
        return self.report.completed

    def tick(self, t: float, pools: PoolSet, router: Optional[KeyRouter] = None) -> bool:
        """Try to send the next content second at time ``t``; False on stall."""
        if self.done or t < self.spec.start_s:
            return True
        a, b = self.spec.pair
        need = self.spec.chunk(self.k)
        ok = need == 0 or (router.ensure(a, b, need, t) if router else pools.level(a, b) >= need)
        if ok and need:
            try:
                self._send(pools(a, b), need, t)
            except InsufficientKey:
                ok = False
        rep = self.report
        if ok:
            rep.consumed_bits += need
            self.k += 1
            if self.k >= self.spec.seconds:
                rep.completed = True
                rep.end_s = t + 1.0
        elif rep.stalls and rep.stalls[-1][1] == t:
            rep.stalls[-1][1] = t + 1.0
        else:
            rep.stalls.append([t, t + 1.0])
        return ok

    def _send(self, pool: KeyPool, bits: int, t: float) -> None:
        if not pool.material:
            pool.consume(bits, t, "consumed_app")
            return
        rng = self.rng or np.random.default_rng(0)
        msg = rng.integers(0, 2, bits, dtype=np.uint8)
        ct = encrypt(msg, pool, t, sender=self.spec.pair[0])
        if not np.array_equal(decrypt(ct, pool), msg):
            self.report.decrypt_failures += 1


def run_session(spec: SessionSpec, pools: PoolSet, clock: Optional[float] = None,
                horizon_s: Optional[float] = None, router: Optional[KeyRouter] = None,
                on_tick: Optional[Callable[[float], None]] = None,
                rng: Optional[np.random.Generator] = None) -> SessionReport:
    """Run one session second by second from ``clock`` (default its start).

    ``on_tick(t)`` runs before each second, e.g. to credit generated key.
    Without a horizon the run stops at the nominal end time.
    """
    s = Session(spec, rng)
    t = float(spec.start_s if clock is None else clock)
    horizon = spec.start_s + spec.duration_s if horizon_s is None else horizon_s
    while not s.done and t < horizon:
        if on_tick:
            on_tick(t)
        s.tick(t, pools, router)
        t += 1.0
    return s.report


# --- session plans ----------------------------------------------------------


def parse_session_plan(text: str, graph: NetworkGraph) -> list:
    """YAML ``sessions:`` list of {kind, pair: [name, name], start_s, duration_s}."""
    doc = yaml.safe_load(text) or {}
    out = []
    for i, row in enumerate(doc.get("sessions", [])):
        try:
            a, b = (graph.node(n).id for n in row["pair"])
            extra = {k: row[k] for k in ("message_bits", "message_interval_s") if k in row}
            out.append(SessionSpec(SessionKind(row["kind"]), (a, b), float(row["start_s"]),
                                   float(row["duration_s"]), **extra))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"session {i}: {e}") from e
    return out


def load_session_plan(path: Union[str, Path], graph: NetworkGraph) -> list:
    return parse_session_plan(Path(path).read_text(), graph)


# Eleven simultaneous calls among 22 distinct users, spread over every
# subnetwork and including one cross-relay call.
CAPACITY_PAIRS = (
    ("UB-1", "UB-2"), ("UB-3", "UB-4"), ("UB-5", "UB-6"), ("UB-7", "UB-18"),
    ("UB-13", "UB-14"), ("UB-15", "UA-6"), ("UA-1", "UA-2"), ("UA-3", "UA-4"),
    ("UA-8", "UA-9"), ("UA-10", "UA-11"), ("UB-19", "UB-20"),
)
CAPACITY_WINDOW_S = 3000.0
CAPACITY_WARMUP_S = 7200.0
CAPACITY_CALL_START_S = 1200.0
CAPACITY_CALL_S = 360.0


def capacity_plan(graph: NetworkGraph, start_s: float = CAPACITY_CALL_START_S,
                  duration_s: float = CAPACITY_CALL_S) -> list:
    return [SessionSpec(SessionKind.VOICE, (graph.node(a).id, graph.node(b).id), start_s, duration_s)
            for a, b in CAPACITY_PAIRS]


def table_generation_rates(graph: NetworkGraph) -> dict:
    """Published per-link rates keyed by (transmitter id, receiver id), kbps."""
    return {(graph.node(a).id, graph.node(b).id): v for (a, b), v in reference_rate_table().items()}


def switch_schedules(graph: NetworkGraph, session_latency_s: float = 600.0,
                     switching_interval_s: float = 900.0) -> dict:
    return {
        sw.id: PairingSchedule(sw.id, [n.id for n in graph.switch_members(sw.id)], graph.fabrics[sw.id].capacity,
                               session_latency_s, switching_interval_s)
        for sw in graph.of_kind(NodeKind.OPTICAL_SWITCH)
    }


def key_edges(graph: NetworkGraph) -> list:
    """Node pairs with a direct quantum path in either direction."""
    ids = sorted(n.id for n in graph.nodes)
    out = []
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            na, nb = graph.node(a), graph.node(b)
            tx = (na.has_transmitter and nb.has_receiver) or (nb.has_transmitter and na.has_receiver)
            if tx and path_budget(graph, a, b):
                out.append((a, b))
    return out


@dataclass
class CapacityReport:
    sessions: list  # SessionReport per planned session
    trajectory: list  # (time_s, pair, pool_bits, stalled)
    names: dict

    @property
    def total_stall_s(self) -> float:
        return sum(r.stall_seconds for r in self.sessions)

    def stalls_by_pair(self) -> dict:
        return {self._label(r.spec.pair): r.stall_seconds for r in self.sessions}

    def _label(self, pair) -> str:
        return "-".join(self.names[n] for n in pair)

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["time_s", "pair", "pool_bits", "stalled"])
            for t, pair, bits, stalled in self.trajectory:
                w.writerow([f"{t:.6g}", self._label(pair), bits, int(stalled)])


def capacity_scenario(graph: NetworkGraph, pools: PoolSet, generation_rates: dict,
                      plan: Optional[list] = None, window_s: float = CAPACITY_WINDOW_S,
                      warmup_s: float = CAPACITY_WARMUP_S,
                      calibration_s: float = 120.0, session_latency_s: float = 600.0,
                      switching_interval_s: float = 900.0, sample_every_s: float = 10.0) -> CapacityReport:
    """Fixed-rate generation plus voice calls, one second per step.

    Links from user B nodes and relay trunks generate continuously. Links
    through an optical switch generate only while their pair is scheduled,
    after ``calibration_s`` of each session; the transmit direction
    alternates between sessions. ``generation_rates`` maps (tx id, rx id)
    to kbps; a missing direction falls back to the reverse one.

    The network runs for ``warmup_s`` before the window opens so pools hold
    the key a continuously operating network would have. Session start
    times are relative to the window.
    """
    plan = capacity_plan(graph) if plan is None else plan
    sessions = [Session(replace(s, start_s=s.start_s + warmup_s)) for s in plan]
    router = KeyRouter(pools, key_edges(graph), [n.id for n in graph.of_kind(NodeKind.TRUSTED_RELAY)])
    scheds = switch_schedules(graph, session_latency_s, switching_interval_s)
    names = {n.id: n.name for n in graph.nodes}

    def rate(a, b):
        return generation_rates.get((a, b), generation_rates.get((b, a), 0.0))

    always = []
    for a, b in key_edges(graph):
        if is_switched(graph, a, b) is None:
            both = generation_rates.get((a, b), 0.0) + generation_rates.get((b, a), 0.0)
            always.append(((a, b), both))
    sessions_run: dict = {}
    active: dict = {}  # pair -> (gen_start_s, gen_end_s, kbps)
    next_round = {sid: 0.0 for sid in scheds}
    acc: dict = {}
    traj = []
    t = 0.0
    while t < warmup_s + window_s:
        for sid, sch in scheds.items():
            if t >= next_round[sid]:
                for p in [p for p in active if p in sch.candidates]:
                    del active[p]
                for a, b in next_pairing(sch, pools):
                    k = sessions_run.get((a, b), 0)
                    sessions_run[(a, b)] = k + 1
                    kbps = rate(a, b) if k % 2 == 0 else rate(b, a)
                    active[(a, b)] = (t + calibration_s, t + calibration_s + session_latency_s, kbps)
                next_round[sid] = t + max(switching_interval_s, calibration_s + session_latency_s)
        gens = list(always) + [(p, v[2]) for p, v in active.items() if v[0] <= t < v[1]]
        for p, kbps in gens:
            acc[p] = acc.get(p, 0.0) + kbps * 1000.0
            whole = int(acc[p])
            if whole:
                pools(*p).credit(whole, t + 1.0)
                acc[p] -= whole
        stalled = {s.spec.pair: not s.tick(t + 1.0, pools, router) for s in sessions}
        t += 1.0
        if t > warmup_s and (t - warmup_s) % sample_every_s == 0:
            for s in sessions:
                traj.append((t - warmup_s, s.spec.pair, pools.level(*s.spec.pair), stalled[s.spec.pair]))
    return CapacityReport([s.report for s in sessions], traj, names)
