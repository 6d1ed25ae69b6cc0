"""Key pools, Roll-Call-Polling pairing, node join and trusted-relay relaying."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

CAUSES = ("generated", "consumed_app", "consumed_auth", "relayed")
AUTH_RESERVE_BITS = 32_768
AUTH_BITS_PER_ROUND_TRIP = 64
JOIN_ROUND_TRIPS = 4
HEARTBEAT_PERIOD_S = 30.0
AUTH_HANDSHAKE_S = 20.0
SESSION_LATENCIES_S = (600.0, 900.0, 1800.0)


class InsufficientKey(RuntimeError):
    def __init__(self, pair, needed, available):
        super().__init__(f"pool {pair} holds {available} bits, {needed} needed")
        self.pair = pair
        self.needed = needed
        self.available = available


class AuthFailure(RuntimeError):
    pass


def pair_key(a: int, b: int) -> tuple:
    if a == b:
        raise ValueError("a pair needs two distinct nodes")
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class LedgerEntry:
    time_s: float
    delta_bits: int
    cause: str
    note: str = ""


@dataclass(frozen=True)
class KeySegment:
    """Bits [offset, offset + length) of a pool's key stream.

    ``keys`` maps each endpoint to its own copy when the pool carries
    material, else it is None.
    """

    offset: int
    length: int
    keys: Optional[dict] = None


class KeyPool:
    """Key shared by two nodes, consumed first-in first-out.

    With ``material=True`` each endpoint keeps its own bit array so relay
    and one-time-pad code can be checked bit for bit. Without it only
    counts are tracked. Every change to ``stored_bits`` goes through
    :meth:`credit` or :meth:`consume` and lands in the ledger.
    """

    def __init__(self, a: int, b: int, material: bool = False, auth_reserve_bits: int = AUTH_RESERVE_BITS):
        self.pair = pair_key(a, b)
        self.material = material
        self.stored_bits = 0
        self.auth_reserve_bits = int(auth_reserve_bits)
        self.ledger: list = []
        self.head = 0  # stream offset of the oldest unconsumed bit
        self._keys = {n: np.zeros(0, dtype=np.uint8) for n in self.pair} if material else None
        self.history: list = []  # consumed segments, kept only with material

    def __repr__(self):
        return f"KeyPool({self.pair}, stored={self.stored_bits}, reserve={self.auth_reserve_bits})"

    def credit(self, bits: int, t: float, cause: str = "generated", material: Optional[dict] = None,
               note: str = "") -> None:
        bits = int(bits)
        if bits < 0:
            raise ValueError("credit must be >= 0")
        if cause not in ("generated", "relayed"):
            raise ValueError(f"credit cause must be generated or relayed, not {cause!r}")
        if self.material:
            if material is None:
                raise ValueError("material pool needs key bits on credit")
            for n in self.pair:
                k = np.asarray(material[n], dtype=np.uint8)
                if k.size != bits:
                    raise ValueError("material length differs from credited bits")
                self._keys[n] = np.concatenate([self._keys[n], k])
        self.stored_bits += bits
        self.ledger.append(LedgerEntry(float(t), bits, cause, note))

    def consume(self, bits: int, t: float, cause: str, note: str = "") -> KeySegment:
        """Take the oldest ``bits`` bits; all or nothing."""
        bits = int(bits)
        if cause not in CAUSES or cause == "generated":
            raise ValueError(f"bad consume cause {cause!r}")
        if bits < 0:
            raise ValueError("consume must be >= 0")
        if bits > self.stored_bits:
            raise InsufficientKey(self.pair, bits, self.stored_bits)
        keys = None
        if self.material:
            keys = {n: self._keys[n][:bits].copy() for n in self.pair}
            for n in self.pair:
                self._keys[n] = self._keys[n][bits:]
        seg = KeySegment(self.head, bits, keys)
        if self.material:
            self.history.append(seg)
        self.head += bits
        self.stored_bits -= bits
        self.ledger.append(LedgerEntry(float(t), -bits, cause, note))
        return seg

    def segment(self, offset: int, length: int, node: int) -> np.ndarray:
        """``node``'s copy of an already consumed segment (receiver side)."""
        for seg in self.history:
            if seg.offset <= offset and offset + length <= seg.offset + seg.length:
                lo = offset - seg.offset
                return seg.keys[node][lo: lo + length]
        raise KeyError(f"no consumed segment covers [{offset}, {offset + length})")

    def peek(self, node: int) -> np.ndarray:
        return self._keys[node].copy()

    # authentication reserve

    def spend_auth(self, bits: int) -> None:
        if bits > self.auth_reserve_bits:
            raise AuthFailure(f"authentication reserve of {self.pair} exhausted; manual reset needed")
        self.auth_reserve_bits -= int(bits)

    def replenish_auth(self, t: float) -> int:
        """Top the reserve back up from stored key when it is below half."""
        if self.auth_reserve_bits >= AUTH_RESERVE_BITS // 2:
            return 0
        take = min(AUTH_RESERVE_BITS - self.auth_reserve_bits, self.stored_bits)
        if take:
            self.consume(take, t, "consumed_auth", "reserve top-up")
            self.auth_reserve_bits += take
        return take

    def manual_reset(self) -> None:
        self.auth_reserve_bits = AUTH_RESERVE_BITS

    # accounting

    def replay(self) -> int:
        return sum(e.delta_bits for e in self.ledger)

    def totals(self) -> dict:
        out = {"generated": 0, "relayed_in": 0, "relayed_out": 0, "consumed_app": 0, "consumed_auth": 0}
        for e in self.ledger:
            if e.cause == "relayed":
                out["relayed_in" if e.delta_bits > 0 else "relayed_out"] += abs(e.delta_bits)
            else:
                out[e.cause] += abs(e.delta_bits)
        return out


class PoolSet:
    """All pools of a network, created on first use."""

    def __init__(self, material: bool = False):
        self.material = material
        self._pools: dict = {}

    def __call__(self, a: int, b: int) -> KeyPool:
        k = pair_key(a, b)
        if k not in self._pools:
            self._pools[k] = KeyPool(*k, material=self.material)
        return self._pools[k]

    def get(self, a: int, b: int) -> Optional[KeyPool]:
        return self._pools.get(pair_key(a, b))

    def level(self, a: int, b: int) -> int:
        p = self.get(a, b)
        return p.stored_bits if p else 0

    def __iter__(self):
        return iter(self._pools[k] for k in sorted(self._pools))

    def __len__(self):
        return len(self._pools)

    def export_ledger(self, path: Union[str, Path], names: Optional[dict] = None) -> None:
        """Append-only audit CSV: timestamp_s, pair, delta_bits, cause."""
        rows = []
        for p in self:
            label = "-".join(names[n] if names else str(n) for n in p.pair)
            rows.extend((e.time_s, label, e.delta_bits, e.cause) for e in p.ledger)
        rows.sort(key=lambda r: (r[0], r[1]))
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["timestamp_s", "pair", "delta_bits", "cause"])
            for t, label, d, c in rows:
                w.writerow([f"{t:.6g}", label, d, c])


# --- Roll-Call-Polling ------------------------------------------------------


def enumerate_pairs(users: Sequence[int]) -> list:
    return [tuple(p) for p in itertools.combinations(sorted(users), 2)]


@dataclass
class PairingSchedule:
    fabric: int
    users: list
    capacity: int
    session_latency_s: float = 600.0
    switching_interval_s: float = 900.0
    active: list = field(default_factory=list)

    def __post_init__(self):
        if not 600.0 <= self.switching_interval_s <= 3600.0:
            raise ValueError("switching_interval_s must lie in [600, 3600]")
        if self.session_latency_s <= 0:
            raise ValueError("session_latency_s must be > 0")
        self.users = sorted(self.users)

    @property
    def candidates(self) -> list:
        return enumerate_pairs(self.users)

    def queue(self, level) -> list:
        """Candidates ordered by stored key, then network ID."""
        return sorted(self.candidates, key=lambda p: (level(*p), p))


def _greedy(queue, capacity, skip=()):
    busy = set(skip)
    chosen = []
    for a, b in queue:
        if len(chosen) >= capacity:
            break
        if a in busy or b in busy:
            continue
        chosen.append((a, b))
        busy.update((a, b))
    return chosen


def next_pairing(schedule: PairingSchedule, pools, unavailable: Iterable[int] = ()) -> list:
    """Least-key-first disjoint matching up to fabric capacity.

    The head of the queue is always served. The remaining slots take the
    greedy queue-order fill unless some other disjoint fill of the same
    size holds strictly less stored key in total; then that one is used.
    Plain greedy can lock two users into a forced pairing every round and
    starve the rest. ``pools`` is a :class:`PoolSet` or a callable
    ``level(a, b)``. Pairs touching ``unavailable`` nodes are skipped.
    """
    import networkx as nx

    level = pools.level if isinstance(pools, PoolSet) else pools
    down = set(unavailable)
    queue = [p for p in schedule.queue(level) if p[0] not in down and p[1] not in down]
    if not queue or schedule.capacity <= 0:
        schedule.active = []
        return []
    head = queue[0]
    chosen = [head] + _greedy(queue, schedule.capacity - 1, skip=head)
    rest = [p for p in queue if head[0] not in p and head[1] not in p]
    users = {u for p in rest for u in p}
    if rest and len(users) // 2 <= schedule.capacity - 1:
        top = max(level(*p) for p in rest) + 1
        g = nx.Graph()
        g.add_weighted_edges_from((a, b, top - level(a, b)) for a, b in rest)
        best = nx.max_weight_matching(g, maxcardinality=True)
        alt = sorted((tuple(sorted(e)) for e in best), key=queue.index)
        if len(alt) == len(chosen) - 1 and sum(level(*p) for p in alt) < sum(level(*p) for p in chosen[1:]):
            chosen = [head] + alt
    schedule.active = chosen
    return chosen


# --- join ---------------------------------------------------------------


@dataclass(frozen=True)
class JoinOutcome:
    node: int
    hub: int
    heartbeat_s: float
    schedulable_s: float
    auth_bits: int


class Registry:
    """Control-centre view of which nodes have logged in."""

    def __init__(self):
        self.joined: dict = {}

    def join_node(self, node: int, hub: int, clock: float, pools: PoolSet) -> JoinOutcome:
        """Heartbeat then authentication against the hub's pre-shared reserve.

        The heartbeat goes out on the next 30 s tick after power-on and the
        handshake takes 20 s, so a node is schedulable within 50 s.
        """
        if node in self.joined:
            raise ValueError(f"node {node} already joined")
        heartbeat = (np.floor(clock / HEARTBEAT_PERIOD_S) + 1) * HEARTBEAT_PERIOD_S
        pool = pools(node, hub)
        cost = JOIN_ROUND_TRIPS * AUTH_BITS_PER_ROUND_TRIP
        pool.spend_auth(cost)
        out = JoinOutcome(node, hub, float(heartbeat), float(heartbeat + AUTH_HANDSHAKE_S), cost)
        self.joined[node] = out
        return out

    def leave(self, node: int) -> None:
        self.joined.pop(node, None)


# --- relaying -------------------------------------------------------------


@dataclass(frozen=True)
class RelayOutcome:
    a: int
    b: int
    length: int
    published: Optional[np.ndarray]
    key_a: Optional[np.ndarray]
    key_b: Optional[np.ndarray]


def relay_key(a: int, relay: int, b: int, length: int, pools: PoolSet, t: float = 0.0) -> RelayOutcome:
    """Trusted-relay XOR: the relay publishes K_ar xor K_rb and b unmasks K_ar.

    Both legs are checked before anything is debited.
    """
    leg1, leg2 = pools(a, relay), pools(relay, b)
    for leg in (leg1, leg2):
        if leg.stored_bits < length:
            raise InsufficientKey(leg.pair, length, leg.stored_bits)
    note = f"{a}>{relay}>{b}"
    s1 = leg1.consume(length, t, "relayed", note)
    s2 = leg2.consume(length, t, "relayed", note)
    target = pools(a, b)
    if pools.material:
        published = s1.keys[relay] ^ s2.keys[relay]
        key_a = s1.keys[a]
        key_b = published ^ s2.keys[b]
        target.credit(length, t, "relayed", {a: key_a, b: key_b}, note)
        return RelayOutcome(a, b, length, published, key_a, key_b)
    target.credit(length, t, "relayed", note=note)
    return RelayOutcome(a, b, length, None, None, None)


def relay_path(path: Sequence[int], length: int, pools: PoolSet, t: float = 0.0) -> RelayOutcome:
    """Relay along ``path`` one hop at a time, ending with key for (path[0], path[-1])."""
    if len(path) < 3:
        raise ValueError("a relay path needs at least one intermediate node")
    a = path[0]
    out = None
    for k in range(1, len(path) - 1):
        out = relay_key(a, path[k], path[k + 1], length, pools, t)
    return out


def find_key_path(graph_edges: Iterable[tuple], a: int, b: int, pools: PoolSet, bits: int,
                  relays: Optional[Iterable[int]] = None) -> Optional[list]:
    """Fewest-hop path from a to b over edges whose pools hold ``bits``.

    With ``relays`` given, only those nodes may sit inside the path. Ties
    are broken by comparing node ID sequences, so routing is deterministic.
    """
    import networkx as nx

    inner = None if relays is None else set(relays)
    g = nx.Graph()
    g.add_nodes_from((a, b))
    for u, v in graph_edges:
        if inner is not None and not all(n in inner or n in (a, b) for n in (u, v)):
            continue
        if pools.level(u, v) >= bits:
            g.add_edge(u, v)
    try:
        paths = list(nx.all_shortest_paths(g, a, b))
    except nx.NetworkXNoPath:
        return None
    return min(paths)
