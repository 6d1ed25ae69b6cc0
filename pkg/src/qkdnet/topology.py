"""Static network model: nodes, switch fabrics, quantum paths and validation."""

from __future__ import annotations

import csv
import enum
import io
import itertools
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .photonics import MAX_SWITCH_LOSS_DB, LinkBudget

SUBNETWORKS = ("USTC", "CityLibrary", "QuantumCTek")
MAX_DIRECT_KM = 18.0
ALLPASS_PORTS = 16
ALLPASS_MAX_PAIRS = 8
MATRIX_INPUTS = 4
MATRIX_OUTPUTS = 8


class NodeKind(enum.Enum):
    USER_A = "UserA"
    USER_B = "UserB"
    TRUSTED_RELAY = "TrustedRelay"
    OPTICAL_SWITCH = "OpticalSwitch"


class FabricKind(enum.Enum):
    MATRIX_4X8 = "Matrix4x8"
    ALLPASS_16 = "AllPass16"


class FabricError(RuntimeError):
    pass


class PortBusy(FabricError):
    pass


class CapacityExceeded(FabricError):
    pass


class SideMismatch(FabricError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    id: int
    name: str
    kind: NodeKind
    has_transmitter: bool
    has_receiver: bool
    attached_to: Optional[int] = None
    fiber_km: float = 0.0
    extra_loss_db: float = 0.0
    subnetwork: str = ""


@dataclass
class SwitchFabric:
    """Port-level state of one optical switch.

    AllPass16 ports are 1..16 and any two may be joined. Matrix4x8 ports
    1..4 are inputs (transmitter side) and 5..12 outputs (receiver side);
    a pair must join one of each.
    """

    kind: FabricKind
    insertion_loss_db: float = 1.0
    active_pairs: set = field(default_factory=set)

    @property
    def ports(self) -> int:
        return ALLPASS_PORTS if self.kind is FabricKind.ALLPASS_16 else MATRIX_INPUTS + MATRIX_OUTPUTS

    @property
    def capacity(self) -> int:
        return ALLPASS_MAX_PAIRS if self.kind is FabricKind.ALLPASS_16 else MATRIX_INPUTS

    def is_input(self, port: int) -> bool:
        return self.kind is FabricKind.ALLPASS_16 or port <= MATRIX_INPUTS

    def busy_ports(self) -> set:
        return {p for pair in self.active_pairs for p in pair}

    def connect(self, a: int, b: int) -> "SwitchFabric":
        for p in (a, b):
            if not 1 <= p <= self.ports:
                raise ValueError(f"port {p} outside 1..{self.ports}")
        if a == b:
            raise ValueError("cannot join a port to itself")
        if len(self.active_pairs) >= self.capacity:
            raise CapacityExceeded(f"{self.kind.value} already has {self.capacity} pairs")
        busy = self.busy_ports()
        for p in (a, b):
            if p in busy:
                raise PortBusy(f"port {p} already in use")
        if self.kind is FabricKind.MATRIX_4X8 and self.is_input(a) == self.is_input(b):
            raise SideMismatch(f"ports {a} and {b} are on the same side")
        self.active_pairs.add(frozenset((a, b)))
        return self

    def disconnect(self, a: int, b: int) -> "SwitchFabric":
        pair = frozenset((a, b))
        if pair not in self.active_pairs:
            raise KeyError(f"ports {a}-{b} not connected")
        self.active_pairs.remove(pair)
        return self


@dataclass(frozen=True)
class TrunkLink:
    a: int
    b: int
    fiber_km: float
    extra_loss_db: float = 0.0


@dataclass(frozen=True)
class Unreachable:
    reason: str

    def __bool__(self):
        return False


@dataclass
class NetworkGraph:
    nodes: list
    trunks: list
    fabrics: dict  # switch node id -> SwitchFabric
    base_budget: LinkBudget = field(default_factory=lambda: LinkBudget(0.0))

    def __post_init__(self):
        self._by_id = {n.id: n for n in self.nodes}
        self._by_name = {n.name: n for n in self.nodes}

    def node(self, key: Union[int, str]) -> NodeSpec:
        return self._by_name[key] if isinstance(key, str) else self._by_id[key]

    def has(self, key) -> bool:
        return key in (self._by_name if isinstance(key, str) else self._by_id)

    def of_kind(self, kind: NodeKind) -> list:
        return sorted((n for n in self.nodes if n.kind is kind), key=lambda n: n.id)

    def attached(self, hub: int) -> list:
        return sorted((n for n in self.nodes if n.attached_to == hub), key=lambda n: n.id)

    def switch_members(self, switch_id: int) -> list:
        """Nodes reachable through a switch: its users plus the uplink relay."""
        members = [n for n in self.attached(switch_id) if n.kind is NodeKind.USER_A]
        up = self.node(switch_id).attached_to
        if up is not None:
            members.append(self.node(up))
        return sorted(members, key=lambda n: n.id)

    def subnetwork(self, name: str) -> list:
        return sorted((n for n in self.nodes if n.subnetwork == name), key=lambda n: n.id)

    def trunk(self, a: int, b: int) -> Optional[TrunkLink]:
        for t in self.trunks:
            if {t.a, t.b} == {a, b}:
                return t
        return None

    def port_map(self, switch_id: int) -> dict:
        """(node id, 'tx' | 'rx') -> port for one switch.

        AllPass16 gives each member one bidirectional port in ID order.
        Matrix4x8 gives each member an input port and an output port.
        """
        members = self.switch_members(switch_id)
        fab = self.fabrics[switch_id]
        out = {}
        for k, n in enumerate(members):
            if fab.kind is FabricKind.ALLPASS_16:
                out[(n.id, "tx")] = out[(n.id, "rx")] = k + 1
            else:
                out[(n.id, "tx")] = k + 1
                out[(n.id, "rx")] = MATRIX_INPUTS + k + 1
        return out


def _budget(g: NetworkGraph, km: float, extra: float, switch_db: float = 0.0) -> LinkBudget:
    return replace(
        g.base_budget,
        fiber_km=km,
        switch_loss_db=switch_db,
        detector_inherent_loss_db=g.base_budget.detector_inherent_loss_db + extra,
    )


def path_budget(g: NetworkGraph, a, b) -> Union[LinkBudget, Unreachable]:
    """Loss budget of the direct quantum path between two nodes.

    Installation losses recorded per node or trunk are folded into the
    detector's inherent loss.
    """
    na, nb = g.node(a), g.node(b)
    if na.id == nb.id:
        return Unreachable("same node")
    kinds = {na.kind, nb.kind}
    if kinds == {NodeKind.TRUSTED_RELAY}:
        t = g.trunk(na.id, nb.id)
        if t is None:
            return Unreachable("no trunk between relays")
        return _budget(g, t.fiber_km, t.extra_loss_db)
    if kinds == {NodeKind.USER_B, NodeKind.TRUSTED_RELAY}:
        u, r = (na, nb) if na.kind is NodeKind.USER_B else (nb, na)
        if u.attached_to != r.id:
            return Unreachable(f"{u.name} is not attached to {r.name}")
        return _budget(g, u.fiber_km, u.extra_loss_db)
    if kinds == {NodeKind.USER_A}:
        if na.attached_to != nb.attached_to or na.attached_to is None:
            return Unreachable("users on different switches")
        sw = g.node(na.attached_to)
        fab = g.fabrics[sw.id]
        return _budget(g, na.fiber_km + nb.fiber_km, na.extra_loss_db + nb.extra_loss_db, fab.insertion_loss_db)
    if kinds == {NodeKind.USER_A, NodeKind.TRUSTED_RELAY}:
        u, r = (na, nb) if na.kind is NodeKind.USER_A else (nb, na)
        sw = g.node(u.attached_to) if u.attached_to is not None else None
        if sw is None or sw.attached_to != r.id:
            return Unreachable(f"{u.name}'s switch has no uplink to {r.name}")
        fab = g.fabrics[sw.id]
        return _budget(g, u.fiber_km + sw.fiber_km, u.extra_loss_db + sw.extra_loss_db, fab.insertion_loss_db)
    return Unreachable(f"no quantum path between {na.kind.value} and {nb.kind.value}")


def quantum_links(g: NetworkGraph) -> list:
    """Every directed (transmitter id, receiver id) pair with a direct path."""
    out = []
    for a, b in itertools.permutations(sorted(n.id for n in g.nodes), 2):
        na, nb = g.node(a), g.node(b)
        if na.has_transmitter and nb.has_receiver and path_budget(g, a, b):
            out.append((a, b))
    return out


def is_switched(g: NetworkGraph, a: int, b: int) -> Optional[int]:
    """Switch id if the a-b path runs through an optical switch."""
    for n in (g.node(a), g.node(b)):
        if n.kind is NodeKind.USER_A:
            return n.attached_to
    return None


# --- validation ----------------------------------------------------------


def validate(g: NetworkGraph) -> list:
    """Every invariant violation, as human-readable strings naming node ids."""
    v = []
    ids = [n.id for n in g.nodes]
    names = [n.name for n in g.nodes]
    for dup in sorted({i for i in ids if ids.count(i) > 1}):
        v.append(f"duplicate id {dup}")
    for dup in sorted({s for s in names if names.count(s) > 1}):
        v.append(f"duplicate name {dup}")
    by_id = {n.id: n for n in g.nodes}
    for n in sorted(g.nodes, key=lambda n: n.id):
        hub = by_id.get(n.attached_to) if n.attached_to is not None else None
        if n.attached_to is not None and hub is None:
            v.append(f"node {n.id} ({n.name}) attached to unknown id {n.attached_to}")
        if n.subnetwork not in SUBNETWORKS:
            v.append(f"node {n.id} ({n.name}) has unknown subnetwork {n.subnetwork!r}")
        if n.fiber_km < 0 or n.extra_loss_db < 0:
            v.append(f"node {n.id} ({n.name}) has negative fibre length or loss")
        if n.kind is NodeKind.USER_A:
            if not (n.has_transmitter and n.has_receiver):
                v.append(f"node {n.id} ({n.name}) UserA needs transmitter and receiver")
            if hub is None or hub.kind is not NodeKind.OPTICAL_SWITCH:
                v.append(f"node {n.id} ({n.name}) UserA must attach to an OpticalSwitch")
        elif n.kind is NodeKind.USER_B:
            if not n.has_transmitter or n.has_receiver:
                v.append(f"node {n.id} ({n.name}) UserB must hold a transmitter only")
            if hub is None or hub.kind is not NodeKind.TRUSTED_RELAY:
                v.append(f"node {n.id} ({n.name}) UserB must attach to a TrustedRelay")
            elif n.fiber_km > MAX_DIRECT_KM:
                v.append(f"node {n.id} ({n.name}) spoke {n.fiber_km} km exceeds {MAX_DIRECT_KM} km")
        elif n.kind is NodeKind.OPTICAL_SWITCH:
            if n.id not in g.fabrics:
                v.append(f"node {n.id} ({n.name}) OpticalSwitch has no fabric")
            if hub is not None and hub.kind is not NodeKind.TRUSTED_RELAY:
                v.append(f"node {n.id} ({n.name}) switch uplink must go to a TrustedRelay")
        elif n.kind is NodeKind.TRUSTED_RELAY:
            if not (n.has_transmitter and n.has_receiver):
                v.append(f"node {n.id} ({n.name}) TrustedRelay needs transmitter and receiver")
    for sid, fab in sorted(g.fabrics.items()):
        v.extend(_fabric_violations(g, sid, fab))
    relays = [n.id for n in g.nodes if n.kind is NodeKind.TRUSTED_RELAY]
    for a, b in itertools.combinations(sorted(relays), 2):
        if g.trunk(a, b) is None:
            v.append(f"relays {a} and {b} are not directly linked")
    for t in g.trunks:
        for end in (t.a, t.b):
            if end not in by_id or by_id[end].kind is not NodeKind.TRUSTED_RELAY:
                v.append(f"trunk {t.a}-{t.b} must join two TrustedRelays")
    return v


def _fabric_violations(g: NetworkGraph, sid: int, fab: SwitchFabric) -> list:
    v = []
    if fab.insertion_loss_db > MAX_SWITCH_LOSS_DB or fab.insertion_loss_db < 0:
        v.append(f"switch {sid} insertion loss {fab.insertion_loss_db} dB outside [0, {MAX_SWITCH_LOSS_DB}]")
    if len(fab.active_pairs) > fab.capacity:
        v.append(f"switch {sid} has {len(fab.active_pairs)} active pairs, limit {fab.capacity}")
    seen = set()
    for pair in fab.active_pairs:
        for p in pair:
            if p in seen:
                v.append(f"switch {sid} port {p} used by more than one pair")
            seen.add(p)
        if fab.kind is FabricKind.MATRIX_4X8 and len({fab.is_input(p) for p in pair}) != 2:
            v.append(f"switch {sid} pair {sorted(pair)} does not join an input to an output")
    if g.has(sid):
        members = g.switch_members(sid)
        if fab.kind is FabricKind.ALLPASS_16 and len(members) > ALLPASS_PORTS:
            v.append(f"switch {sid} has {len(members)} members on {ALLPASS_PORTS} ports")
        if fab.kind is FabricKind.MATRIX_4X8 and len(members) > MATRIX_INPUTS:
            v.append(f"switch {sid} has {len(members)} members on {MATRIX_INPUTS} input ports")
        for a, b in itertools.combinations(members, 2):
            if a.kind is NodeKind.USER_A and b.kind is NodeKind.USER_A:
                km = a.fiber_km + b.fiber_km
                if km > MAX_DIRECT_KM:
                    v.append(f"switch {sid} path {a.id}-{b.id} is {km:g} km, above {MAX_DIRECT_KM} km")
    return v


# --- reference layout ----------------------------------------------------

REFERENCE_ATTACHMENT = {
    "OS-1": [f"UA-{i}" for i in range(1, 6)],
    "OS-2": ["UA-6", "UA-7"],
    "OS-3": [f"UA-{i}" for i in range(8, 14)],
    "TR-1": [f"UB-{i}" for i in range(1, 13)],
    "TR-2": [f"UB-{i}" for i in range(13, 18)],
    "TR-3": [f"UB-{i}" for i in range(18, 28)],
}


def reference_layout_violations(g: NetworkGraph) -> list:
    """Differences from the published 46-node layout."""
    v = []
    counts = {k: len(g.of_kind(k)) for k in NodeKind}
    want = {NodeKind.USER_A: 13, NodeKind.USER_B: 27, NodeKind.TRUSTED_RELAY: 3, NodeKind.OPTICAL_SWITCH: 3}
    for k, n in want.items():
        if counts[k] != n:
            v.append(f"expected {n} {k.value} nodes, found {counts[k]}")
    if len(g.nodes) != 46:
        v.append(f"expected 46 nodes, found {len(g.nodes)}")
    for hub, users in REFERENCE_ATTACHMENT.items():
        if not g.has(hub):
            v.append(f"missing {hub}")
            continue
        got = sorted(n.name for n in g.attached(g.node(hub).id) if n.kind in (NodeKind.USER_A, NodeKind.USER_B))
        if got != sorted(users):
            v.append(f"{hub} users {got} differ from {sorted(users)}")
    return v


# --- file format ---------------------------------------------------------

_FIELDS = ("record", "name", "kind", "attached_to", "fiber_km", "extra_loss_db", "subnetwork", "fabric")


def loads(text: str, base_budget: Optional[LinkBudget] = None) -> NetworkGraph:
    """Parse the CSV topology format.

    Node records are numbered in file order starting at 1; that number is
    the network ID. ``node`` rows carry kind, hub, spoke fibre and
    installation loss; switches add ``fabric`` as ``<kind>:<loss dB>``.
    ``trunk`` rows join two relays (``name`` and ``attached_to``).
    """
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].lstrip().startswith("#")]
    if rows and rows[0][0].strip() == "record":
        rows = rows[1:]
    nodes, trunks, fabrics, pending = [], [], {}, []
    name_to_id = {}
    for r in rows:
        rec = dict(zip(_FIELDS, (c.strip() for c in r + [""] * (len(_FIELDS) - len(r)))))
        if rec["record"] == "node":
            name_to_id[rec["name"]] = len(name_to_id) + 1
            pending.append(rec)
        elif rec["record"] == "trunk":
            trunks.append(rec)
        else:
            raise ValueError(f"unknown record type {rec['record']!r}")
    for rec in pending:
        nid = name_to_id[rec["name"]]
        kind = NodeKind(rec["kind"])
        hub = rec["attached_to"]
        if hub and hub not in name_to_id:
            raise ValueError(f"{rec['name']} attached to unknown node {hub}")
        nodes.append(NodeSpec(
            id=nid,
            name=rec["name"],
            kind=kind,
            has_transmitter=kind is not NodeKind.OPTICAL_SWITCH,
            has_receiver=kind in (NodeKind.USER_A, NodeKind.TRUSTED_RELAY),
            attached_to=name_to_id[hub] if hub else None,
            fiber_km=float(rec["fiber_km"] or 0.0),
            extra_loss_db=float(rec["extra_loss_db"] or 0.0),
            subnetwork=rec["subnetwork"],
        ))
        if kind is NodeKind.OPTICAL_SWITCH:
            fk, _, loss = rec["fabric"].partition(":")
            fabrics[nid] = SwitchFabric(FabricKind(fk), float(loss or 1.0))
    links = [
        TrunkLink(name_to_id[t["name"]], name_to_id[t["attached_to"]], float(t["fiber_km"]),
                  float(t["extra_loss_db"] or 0.0))
        for t in trunks
    ]
    return NetworkGraph(nodes, links, fabrics, base_budget or LinkBudget(0.0))


def dumps(g: NetworkGraph) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_FIELDS)
    for n in sorted(g.nodes, key=lambda n: n.id):
        fab = g.fabrics.get(n.id)
        w.writerow([
            "node", n.name, n.kind.value,
            g.node(n.attached_to).name if n.attached_to is not None else "",
            f"{n.fiber_km:g}", f"{n.extra_loss_db:g}", n.subnetwork,
            f"{fab.kind.value}:{fab.insertion_loss_db:g}" if fab else "",
        ])
    for t in g.trunks:
        w.writerow(["trunk", g.node(t.a).name, "", g.node(t.b).name, f"{t.fiber_km:g}", f"{t.extra_loss_db:g}", "", ""])
    return buf.getvalue()


def load(path: Union[str, Path], base_budget: Optional[LinkBudget] = None) -> NetworkGraph:
    return loads(Path(path).read_text(), base_budget)


def reference_topology(base_budget: Optional[LinkBudget] = None) -> NetworkGraph:
    """The shipped 46-node Hefei layout."""
    text = resources.files("qkdnet").joinpath("data/hefei.topo.csv").read_text()
    return loads(text, base_budget)


def reference_topology_path() -> Path:
    return Path(str(resources.files("qkdnet").joinpath("data/hefei.topo.csv")))


def reference_rate_table() -> dict:
    """Published per-link key rates, (transmitter name, receiver name) -> kbps."""
    text = resources.files("qkdnet").joinpath("data/hefei_table_rates.csv").read_text()
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")][1:]
    return {(a, b): float(v) for a, b, v in rows}
