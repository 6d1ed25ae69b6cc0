"""Deterministic discrete-event network simulation, scenario files and CLI.

Links are advanced in fixed steps. Within a step a link completes
``gen_seconds / window_duration`` accumulation windows of 256 kbit sifted
signal detections; one seeded noisy window tally per step sets the key each
of those windows yields. Key is credited at the end of the step, so nothing
is consumed before the windows that produced it have closed.
"""

from __future__ import annotations

import argparse
import csv
import heapq
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from .apps import KeyRouter, Session, key_edges, parse_session_plan
from .keymgmt import AuthFailure, PairingSchedule, PoolSet, Registry, next_pairing
from .keyrate import ProtocolParameters, finite_key_length, table_tally
from .photonics import (
    WINDOW_BITS,
    CalibrationState,
    DriftProcess,
    Phase,
    evolve_qber,
    needs_recalibration,
    run_calibration,
    transmittance,
    window_tally,
)
from .postproc import AUTH_BITS_PER_ROUND_TRIP, SiftedBlock, compress_length, process_block
from .topology import NetworkGraph, NodeKind, is_switched, load, path_budget, quantum_links, validate

log = logging.getLogger(__name__)

EVENT_KINDS = ("join", "calibration", "pairing", "block_complete", "relay", "session", "stall", "failure",
               "recover")
# Winnow passes plus CRC and seed agreement, authenticated per window
AUTH_ROUND_TRIPS_PER_WINDOW = 8
MAX_STEP_S = 60.0
_PRIORITY = {"failure": 0, "recover": 0, "round": 1, "step": 2, "session": 3, "report": 4}


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def _clean(v):
    if isinstance(v, float):
        return float(f"{v:.6g}")
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return _clean(float(v))
    return v


# --- scenario ---------------------------------------------------------------


@dataclass(frozen=True)
class FabricSchedule:
    session_latency_s: float = 600.0
    switching_interval_s: float = 900.0


@dataclass(frozen=True)
class Failure:
    node: str
    at_s: float
    until_s: Optional[float] = None


@dataclass
class Scenario:
    """Everything one run needs.

    ``drift`` is a template; each link gets its own copy seeded from
    ``seed``. ``links`` restricts the run to the listed node pairs.
    ``start_hour`` is the time of day at t = 0.
    """

    graph: NetworkGraph
    protocol_params: ProtocolParameters = field(default_factory=ProtocolParameters)
    drift: Optional[DriftProcess] = None
    schedule_params: dict = field(default_factory=dict)  # switch name or "default" -> FabricSchedule
    sessions: list = field(default_factory=list)
    duration_s: float = 3600.0
    seed: int = 0
    report_interval_s: float = 30.0
    start_hour: float = 0.0
    failures: list = field(default_factory=list)
    links: Optional[list] = None
    postproc_mode: str = "analytic"
    window_bits: int = WINDOW_BITS
    topology_file: str = ""
    session_plan: str = ""

    def __post_init__(self):
        errs = validate(self.graph)
        if errs:
            raise ValueError("topology invalid: " + "; ".join(errs))
        if self.duration_s <= 0:
            raise ValueError("duration_s must be > 0")
        if self.report_interval_s <= 0:
            raise ValueError("report_interval_s must be > 0")
        if self.postproc_mode not in ("analytic", "full"):
            raise ValueError("postproc_mode must be analytic or full")
        for f in self.failures:
            self.graph.node(f.node)
        for name in self.schedule_params:
            if name != "default" and self.graph.node(name).kind is not NodeKind.OPTICAL_SWITCH:
                raise ValueError(f"schedule entry {name} is not a switch")

    def fabric_schedule(self, switch_id: int) -> FabricSchedule:
        name = self.graph.node(switch_id).name
        return self.schedule_params.get(name, self.schedule_params.get("default", FabricSchedule()))


def _resolve(ref: str, base: Path) -> Path:
    if ref.startswith("builtin:"):
        return Path(str(resources.files("qkdnet").joinpath("data", ref.split(":", 1)[1])))
    p = Path(ref)
    return p if p.is_absolute() else base / p


def _drift_from(cfg) -> Optional[DriftProcess]:
    if cfg in (None, "none", False):
        return None
    if cfg == "field_fitted":
        return DriftProcess.field_fitted()
    if isinstance(cfg, dict):
        allowed = {f.name for f in fields(DriftProcess) if f.init}
        bad = set(cfg) - allowed
        if bad:
            raise ValueError(f"unknown drift fields {sorted(bad)}")
        return DriftProcess(**cfg)
    raise ValueError(f"bad drift setting {cfg!r}")


def parse_scenario(text: str, base_dir: Union[str, Path] = ".") -> Scenario:
    """Build a :class:`Scenario` from YAML; relative paths resolve against ``base_dir``."""
    doc = yaml.safe_load(text) or {}
    base = Path(base_dir)
    known = {"topology", "protocol", "drift", "schedule", "session_plan", "sessions", "duration_s", "seed",
             "report_interval_s", "start_hour", "failures", "links", "postproc", "window_bits"}
    bad = set(doc) - known
    if bad:
        raise ValueError(f"unknown scenario keys {sorted(bad)}")
    topo_ref = doc.get("topology", "builtin:hefei.topo.csv")
    topo_path = _resolve(topo_ref, base)
    if not topo_path.exists():
        raise ValueError(f"topology file {topo_path} not found")
    graph = load(topo_path)
    params = ProtocolParameters(**(doc.get("protocol") or {}))
    sched = {k: FabricSchedule(**v) for k, v in (doc.get("schedule") or {}).items()}
    sessions = []
    plan_ref = doc.get("session_plan", "")
    if plan_ref:
        plan_path = _resolve(plan_ref, base)
        if not plan_path.exists():
            raise ValueError(f"session plan {plan_path} not found")
        sessions = parse_session_plan(plan_path.read_text(), graph)
    if doc.get("sessions"):
        sessions += parse_session_plan(yaml.safe_dump({"sessions": doc["sessions"]}), graph)
    failures = [Failure(f["node"], float(f["at_s"]), f.get("until_s")) for f in doc.get("failures") or []]
    links = [tuple(p) for p in doc["links"]] if doc.get("links") else None
    return Scenario(
        graph=graph, protocol_params=params, drift=_drift_from(doc.get("drift", "field_fitted")),
        schedule_params=sched, sessions=sessions, duration_s=float(doc.get("duration_s", 3600.0)),
        seed=int(doc.get("seed", 0)), report_interval_s=float(doc.get("report_interval_s", 30.0)),
        start_hour=float(doc.get("start_hour", 0.0)), failures=failures, links=links,
        postproc_mode=doc.get("postproc", "analytic"), window_bits=int(doc.get("window_bits", WINDOW_BITS)),
        topology_file=str(topo_ref), session_plan=str(plan_ref),
    )


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.parent)


def reference_scenario_path() -> Path:
    return Path(str(resources.files("qkdnet").joinpath("data/reference_scenario.yaml")))


# --- event log --------------------------------------------------------------


@dataclass
class EventLog:
    names: dict
    events: list = field(default_factory=list)  # (time_s, kind, payload)

    def add(self, t: float, event: str, **payload) -> None:
        if event not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {event}")
        if self.events and t < self.events[-1][0]:
            raise RuntimeError("event log must be time ordered")
        self.events.append((float(t), event, _clean(payload)))

    def of_kind(self, kind: str) -> list:
        return [e for e in self.events if e[1] == kind]

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["time_s", "kind", "payload"])
            for t, kind, payload in self.events:
                w.writerow([_fmt(t), kind, json.dumps(payload, sort_keys=True, separators=(",", ":"))])


# --- links ------------------------------------------------------------------


@dataclass
class Link:
    tx: int
    rx: int
    eta: float
    distance_km: float
    switch: Optional[int]
    drift: Optional[DriftProcess]
    rng: np.random.Generator
    qber: float
    enabled: bool = False
    ready_at: float = math.inf
    active_until: float = math.inf
    carry: float = 0.0
    interval_bits: int = 0

    @property
    def pair(self) -> tuple:
        return (self.tx, self.rx) if self.tx < self.rx else (self.rx, self.tx)


@dataclass
class SimResult:
    log: EventLog
    series: list  # (time_s, tx name, rx name, kbps, qber, active)
    pools: PoolSet
    sessions: list  # SessionReport
    scenario: Scenario


class Simulator:
    def __init__(self, sc: Scenario):
        self.sc = sc
        g = sc.graph
        self.g = g
        self.names = {n.id: n.name for n in g.nodes}
        self.log = EventLog(self.names)
        self.pools = PoolSet()
        self.registry = Registry()
        self.down: set = set()
        self.step_s = sc.report_interval_s / math.ceil(sc.report_interval_s / MAX_STEP_S)
        self.day0 = sc.start_hour * 3600.0
        allowed = None
        if sc.links is not None:
            allowed = {frozenset((g.node(a).id, g.node(b).id)) for a, b in sc.links}
        self.links: dict = {}
        for tx, rx in quantum_links(g):
            if allowed is not None and frozenset((tx, rx)) not in allowed:
                continue
            budget = path_budget(g, tx, rx)
            drift = None
            if sc.drift is not None:
                drift = replace(sc.drift, rng_seed=sc.seed * 1_000_003 + tx * 1009 + rx)
            self.links[(tx, rx)] = Link(tx, rx, transmittance(budget), budget.fiber_km, is_switched(g, tx, rx),
                                        drift, np.random.default_rng([sc.seed, tx, rx]),
                                        drift.baseline_qber if drift else 0.005)
        self.edges = sorted({l.pair for l in self.links.values()})
        self.all_edges = key_edges(g)
        self.relays = [n.id for n in g.of_kind(NodeKind.TRUSTED_RELAY)]
        self.schedules = {}
        for sw in g.of_kind(NodeKind.OPTICAL_SWITCH):
            fs = sc.fabric_schedule(sw.id)
            members = [n.id for n in g.switch_members(sw.id)]
            if allowed is not None:
                members = [m for m in members if any(m in p for p in allowed)]
            self.schedules[sw.id] = PairingSchedule(sw.id, members, g.fabrics[sw.id].capacity,
                                                    fs.session_latency_s, fs.switching_interval_s)
        self.session_count: dict = {}
        self.sessions = [Session(s, np.random.default_rng([sc.seed, 7, i])) for i, s in enumerate(sc.sessions)]
        self.series: list = []
        self._heap: list = []
        self._seq = 0
        self._key_cache: dict = {}

    # event queue

    def push(self, t: float, kind: str, data=None) -> None:
        heapq.heappush(self._heap, (t, _PRIORITY[kind], self._seq, kind, data))
        self._seq += 1

    # helpers

    def _hub(self, n) -> int:
        if n.kind is NodeKind.USER_A:
            return self.g.node(n.attached_to).attached_to
        if n.attached_to is not None:
            return n.attached_to
        others = [r for r in self.relays if r != n.id]
        return others[0] if others else n.id

    def _available(self, node: int) -> bool:
        return node not in self.down

    def _link_live(self, l: Link) -> bool:
        if not (self._available(l.tx) and self._available(l.rx)):
            return False
        return l.switch is None or self._available(l.switch)

    def _calibrate(self, t: float, l: Link, reason: str) -> float:
        """Run calibration until it succeeds; returns the total time taken."""
        total = 0.0
        attempts = 0
        while True:
            attempts += 1
            st = run_calibration(CalibrationState(distance_km=l.distance_km), l.drift or DriftProcess(0, 0.012),
                                 l.rng)
            total += st.elapsed_s
            if st.phase is Phase.DONE:
                break
            if attempts >= 20:
                log.warning("link %s-%s failed 20 calibrations", self.names[l.tx], self.names[l.rx])
                break
        self.log.add(t, "calibration", tx=self.names[l.tx], rx=self.names[l.rx], duration_s=total,
                     attempts=attempts, success=st.phase is Phase.DONE, last_run_s=st.elapsed_s, reason=reason)
        if l.drift is not None:
            l.qber = l.drift.baseline_qber
        return total if st.phase is Phase.DONE else math.inf

    def _window_key(self, l: Link, q: float):
        p = self.sc.protocol_params
        tally, dt = window_tally(l.eta, p, q, self.sc.window_bits, l.rng)
        res = finite_key_length(p, tally)
        return compress_length(self.sc.window_bits, res), dt

    # event handlers

    def start(self) -> None:
        for n in sorted(self.g.nodes, key=lambda n: n.id):
            if n.kind is NodeKind.OPTICAL_SWITCH:
                continue
            out = self.registry.join_node(n.id, self._hub(n), 0.0, self.pools)
            self.log.add(0.0, "join", node=n.name, schedulable_s=out.schedulable_s, auth_bits=out.auth_bits)
        ready = max(o.schedulable_s for o in self.registry.joined.values())
        for key in sorted(self.links):
            l = self.links[key]
            if l.switch is None:
                l.enabled = True
        self.push(ready, "round", "startup")
        for f in self.sc.failures:
            nid = self.g.node(f.node).id
            self.push(f.at_s, "failure", nid)
            if f.until_s is not None:
                self.push(float(f.until_s), "recover", nid)
        for i, s in enumerate(self.sessions):
            self.push(float(s.spec.start_s), "session", i)
        self.push(self.step_s, "step")
        self.push(self.sc.report_interval_s, "report")

    def on_startup(self, t: float) -> None:
        for key in sorted(self.links):
            l = self.links[key]
            if l.switch is None and self._link_live(l):
                l.ready_at = t + self._calibrate(t, l, "startup")
        for sid in sorted(self.schedules):
            self.push(t, "round", sid)

    def on_round(self, t: float, sid: int) -> None:
        sched = self.schedules[sid]
        for key in sorted(self.links):
            l = self.links[key]
            if l.switch == sid and l.enabled:
                l.enabled, l.carry = False, 0.0
        if not self._available(sid):
            self.log.add(t, "pairing", switch=self.names[sid], pairs=[], halted=True)
            return
        pairs = next_pairing(sched, self.pools, unavailable=self.down)
        self.log.add(t, "pairing", switch=self.names[sid], pairs=[[self.names[a], self.names[b]] for a, b in pairs])
        end = t + sched.switching_interval_s
        for a, b in pairs:
            k = self.session_count.get((a, b), 0)
            self.session_count[(a, b)] = k + 1
            link = self.links.get((a, b) if k % 2 == 0 else (b, a)) or self.links.get((b, a)) or self.links.get((a, b))
            if link is None:
                continue
            link.enabled = True
            link.carry = 0.0
            link.ready_at = t + self._calibrate(t, link, "pairing")
            link.active_until = link.ready_at + sched.session_latency_s
            end = max(end, link.active_until)
        self.push(end, "round", sid)

    def on_step(self, t1: float) -> None:
        t0 = t1 - self.step_s
        for key in sorted(self.links):
            l = self.links[key]
            if not l.enabled or not self._link_live(l):
                continue
            if l.drift is not None:
                l.qber = evolve_qber(l.drift, l.qber, self.step_s, self.day0 + t0)
            g = min(t1, l.active_until) - max(t0, l.ready_at)
            if g > 0:
                K, dt = self._window_key(l, l.qber)
                windows = l.carry + g / dt
                n = int(windows)
                l.carry = windows - n
                bits = n * K
                if n and self.sc.postproc_mode == "full" and K > 0:
                    bits = self._full_postproc(l, K, n)
                pool = self.pools(l.tx, l.rx)
                pool.credit(bits, t1, "generated")
                try:
                    pool.spend_auth(n * AUTH_ROUND_TRIPS_PER_WINDOW * AUTH_BITS_PER_ROUND_TRIP)
                except AuthFailure:
                    self.log.add(t1, "failure", node=self.names[l.tx], reason="auth reserve exhausted",
                                 rx=self.names[l.rx])
                pool.replenish_auth(t1)
                l.interval_bits += bits
                self.log.add(t1, "block_complete", tx=self.names[l.tx], rx=self.names[l.rx], windows=n,
                             bits=bits, gen_s=g, qber=l.qber)
            if l.drift is not None and needs_recalibration(l.drift, l.qber) and t1 < l.active_until:
                l.ready_at = t1 + self._calibrate(t1, l, "drift")
                if l.switch is not None:
                    l.active_until = max(l.active_until, l.ready_at)
        if t1 + self.step_s <= self.sc.duration_s + 1e-9:
            self.push(t1 + self.step_s, "step")

    def _full_postproc(self, l: Link, K: int, n: int) -> int:
        """Run one real block per step; a rejected block loses one window."""
        rng = l.rng
        a = rng.integers(0, 2, self.sc.window_bits, dtype=np.uint8)
        b = a ^ (rng.random(a.size) < l.qber).astype(np.uint8)
        out = process_block(SiftedBlock.from_bits(a, b), rng, qber_estimate=l.qber, keep_bits=K)
        return (n - (0 if out.accepted else 1)) * K

    def on_session(self, t: float, i: int) -> None:
        s = self.sessions[i]
        if s.done:
            return
        if s.k == 0 and not s.report.stalls:
            a, b = s.spec.pair
            self.log.add(t, "session", pair=[self.names[a], self.names[b]], kind=s.spec.kind.value, state="start")
        edges = [e for e in self.all_edges if e[0] not in self.down and e[1] not in self.down]
        relays = [r for r in self.relays if r not in self.down]
        router = KeyRouter(self.pools, edges, relays, on_relay=self._log_relay)
        a, b = s.spec.pair
        was_stalled = bool(s.report.stalls) and s.report.stalls[-1][1] == t
        ok = (a not in self.down and b not in self.down) and s.tick(t, self.pools, router)
        if not ok and (a in self.down or b in self.down):
            # an endpoint is down: record the second as stalled without touching pools
            rep = s.report
            if rep.stalls and rep.stalls[-1][1] == t:
                rep.stalls[-1][1] = t + 1.0
            else:
                rep.stalls.append([t, t + 1.0])
        label = [self.names[a], self.names[b]]
        if not ok and not was_stalled:
            self.log.add(t, "stall", pair=label, state="start")
        if ok and was_stalled:
            self.log.add(t, "stall", pair=label, state="end", stalled_s=s.report.stalls[-1][1] - s.report.stalls[-1][0])
        if s.done:
            self.log.add(t + 1.0, "session", pair=label, kind=s.spec.kind.value, state="complete",
                         consumed_bits=s.report.consumed_bits, stall_s=s.report.stall_seconds)
        elif t + 1.0 < self.sc.duration_s:
            self.push(t + 1.0, "session", i)

    def _log_relay(self, t: float, path: list, bits: int) -> None:
        self.log.add(t, "relay", path=[self.names[n] for n in path], bits=bits)

    def on_failure(self, t: float, nid: int) -> None:
        self.down.add(nid)
        self.log.add(t, "failure", node=self.names[nid])
        self.registry.leave(nid)
        for key in sorted(self.links):
            l = self.links[key]
            if not self._link_live(l):
                l.carry = 0.0

    def on_recover(self, t: float, nid: int) -> None:
        self.down.discard(nid)
        n = self.g.node(nid)
        sched_at = t
        if n.kind is not NodeKind.OPTICAL_SWITCH:
            out = self.registry.join_node(nid, self._hub(n), t, self.pools)
            sched_at = out.schedulable_s
            self.log.add(t, "recover", node=n.name, schedulable_s=sched_at)
        else:
            self.log.add(t, "recover", node=n.name)
        for key in sorted(self.links):
            l = self.links[key]
            if l.switch is None and l.enabled and nid in (l.tx, l.rx) and self._link_live(l):
                l.ready_at = sched_at + self._calibrate(t, l, "recover")

    def on_report(self, t: float) -> None:
        iv = self.sc.report_interval_s
        for key in sorted(self.links):
            l = self.links[key]
            active = l.enabled and self._link_live(l) and l.ready_at <= t and t - iv < l.active_until
            self.series.append((t, self.names[l.tx], self.names[l.rx], l.interval_bits / iv / 1e3, l.qber,
                                int(active)))
            l.interval_bits = 0
        if t + iv <= self.sc.duration_s + 1e-9:
            self.push(t + iv, "report")

    def run(self) -> SimResult:
        self.start()
        while self._heap:
            t, _, _, kind, data = heapq.heappop(self._heap)
            if t > self.sc.duration_s:
                break
            if kind == "round":
                if data == "startup":
                    self.on_startup(t)
                else:
                    self.on_round(t, data)
            elif kind == "step":
                self.on_step(t)
            elif kind == "session":
                self.on_session(t, data)
            elif kind == "failure":
                self.on_failure(t, data)
            elif kind == "recover":
                self.on_recover(t, data)
            elif kind == "report":
                self.on_report(t)
        return SimResult(self.log, self.series, self.pools, [s.report for s in self.sessions], self.sc)


def run(scenario: Scenario) -> SimResult:
    return Simulator(scenario).run()


# --- reports ----------------------------------------------------------------


def key_rate_table(log: EventLog) -> list:
    """(transmitter, receiver, kbps) averaged over active generation time."""
    acc: dict = {}
    for _, _, p in log.of_kind("block_complete"):
        k = (p["tx"], p["rx"])
        bits, secs = acc.get(k, (0, 0.0))
        acc[k] = (bits + p["bits"], secs + p["gen_s"])
    ids = {v: k for k, v in log.names.items()}
    rows = []
    for (tx, rx), (bits, secs) in sorted(acc.items(), key=lambda kv: (ids[kv[0][0]], ids[kv[0][1]])):
        if secs > 0:
            rows.append((tx, rx, bits / secs / 1e3))
    return rows


def emit_key_rate_table(log: EventLog, path: Union[str, Path]) -> list:
    rows = key_rate_table(log)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["transmitter", "receiver", "key_rate_kbps"])
        for tx, rx, v in rows:
            w.writerow([tx, rx, _fmt(v)])
    return rows


def robustness_series(log: EventLog, bucket_s: float, duration_s: Optional[float] = None) -> list:
    """Per-link bucketed averages with recalibration counts.

    Rows are (bucket_start_s, tx, rx, kbps, mean_qber, recalibrations).
    ``kbps`` is duty-cycled: bits in the bucket over the bucket length.
    """
    if bucket_s <= 0:
        raise ValueError("bucket_s must be > 0")
    acc: dict = {}
    for t, _, p in log.of_kind("block_complete"):
        b = int((t - 1e-9) // bucket_s)
        e = acc.setdefault((b, p["tx"], p["rx"]), [0, 0.0, 0, 0])
        e[0] += p["bits"]
        e[1] += p["qber"]
        e[2] += 1
    for t, _, p in log.of_kind("calibration"):
        b = int(max(t - 1e-9, 0) // bucket_s)
        e = acc.setdefault((b, p["tx"], p["rx"]), [0, 0.0, 0, 0])
        e[3] += 1
    ids = {v: k for k, v in log.names.items()}
    rows = []
    for (b, tx, rx), (bits, qsum, n, cal) in sorted(acc.items(), key=lambda kv: (kv[0][0], ids[kv[0][1]],
                                                                                   ids[kv[0][2]])):
        length = bucket_s
        if duration_s is not None:
            length = min(bucket_s, duration_s - b * bucket_s)
        rows.append((b * bucket_s, tx, rx, bits / length / 1e3, qsum / n if n else math.nan, cal))
    return rows


def emit_robustness_series(log: EventLog, bucket_s: float, path: Union[str, Path],
                           duration_s: Optional[float] = None) -> list:
    rows = robustness_series(log, bucket_s, duration_s)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bucket_start_s", "transmitter", "receiver", "key_rate_kbps", "mean_qber", "recalibrations"])
        for r in rows:
            w.writerow([_fmt(float(r[0])), r[1], r[2], _fmt(r[3]), _fmt(r[4]), r[5]])
    return rows


def emit_series(series: list, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["time_s", "transmitter", "receiver", "key_rate_kbps", "qber", "active"])
        for t, tx, rx, v, q, a in series:
            w.writerow([_fmt(float(t)), tx, rx, _fmt(float(v)), _fmt(float(q)), a])


def emit_sessions(result: SimResult, path: Union[str, Path]) -> None:
    names = result.log.names
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "pair", "start_s", "consumed_bits", "stall_s", "completed"])
        for r in result.sessions:
            w.writerow([r.spec.kind.value, "-".join(names[n] for n in r.spec.pair), _fmt(float(r.spec.start_s)),
                        r.consumed_bits, _fmt(r.stall_seconds), int(r.completed)])


def calibration_times(log: EventLog, tx: str, rx: str) -> list:
    """Start times of threshold-driven recalibrations on one link."""
    return [t for t, _, p in log.of_kind("calibration")
            if p["tx"] == tx and p["rx"] == rx and p["reason"] == "drift"]


def write_outputs(result: SimResult, out_dir: Union[str, Path], bucket_s: float = 3600.0) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("events", "key_rate_table", "key_rate_series", "robustness_series",
                                           "ledger", "sessions")}
    result.log.to_csv(paths["events"])
    emit_key_rate_table(result.log, paths["key_rate_table"])
    emit_series(result.series, paths["key_rate_series"])
    emit_robustness_series(result.log, bucket_s, paths["robustness_series"], result.scenario.duration_s)
    result.pools.export_ledger(paths["ledger"], result.log.names)
    emit_sessions(result, paths["sessions"])
    return paths


# --- CLI --------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    if args.duration is not None:
        sc.duration_s = args.duration
    if args.report_interval is not None:
        sc.report_interval_s = args.report_interval
    sc.__post_init__()
    t = time.perf_counter()
    res = run(sc)
    paths = write_outputs(res, args.out_dir, args.bucket)
    log.info("simulated %.0f s in %.1f s wall time", sc.duration_s, time.perf_counter() - t)
    for tx, rx, v in key_rate_table(res.log):
        print(f"{tx:>6} -> {rx:<6} {v:8.3f} kbps")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def _cmd_keyrate(args) -> int:
    doc = yaml.safe_load(Path(args.params).read_text()) or {}
    params = ProtocolParameters(**(doc.get("protocol") or {}))
    obs = doc.get("observables") or {}
    tally = table_tally(params, **obs)
    r = finite_key_length(params, tally)
    print(f"K_z = {r.K_z:.6g} bits")
    print(f"K_x = {r.K_x:.6g} bits")
    print(f"K_tot = {r.K_tot:.6g} bits")
    print(f"rate = {r.rate_bps / 1e3:.6g} kbps")
    for basis, est in sorted(r.estimates.items()):
        for f in fields(est):
            print(f"{basis}.{f.name} = {getattr(est, f.name):.6g}")
    for reason in r.reasons:
        print(f"note: {reason}", file=sys.stderr)
    return 0


def _cmd_validate(args) -> int:
    g = load(args.topology)
    v = validate(g)
    for line in v:
        print(line)
    if not v:
        print(f"ok: {len(g.nodes)} nodes, {len(g.trunks)} trunks, {len(g.fabrics)} switches")
    return 1 if v else 0


def _cmd_postproc_bench(args) -> int:
    from .keyrate import binary_entropy

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    print("ber,blocks,accepted,efficiency,seconds")
    for ber in args.ber:
        t = time.perf_counter()
        ok, fs = 0, []
        for _ in range(args.blocks):
            a = rng.integers(0, 2, args.n, dtype=np.uint8)
            b = a ^ (rng.random(args.n) < ber).astype(np.uint8)
            out = process_block(SiftedBlock.from_bits(a, b), rng, qber_estimate=ber, keep_bits=args.n // 4)
            ok += out.accepted and bool(np.array_equal(out.key_alice, out.key_bob))
            fs.append(out.disclosed_bits / (args.n * binary_entropy(ber)))
        print(f"{ber:g},{args.blocks},{ok},{np.mean(fs):.4f},{time.perf_counter() - t:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkdnet", description="Metropolitan QKD network simulator")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="run a scenario and write CSV reports")
    s.add_argument("scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float, help="simulated seconds")
    s.add_argument("--out-dir", default="out")
    s.add_argument("--report-interval", type=float)
    s.add_argument("--bucket", type=float, default=3600.0, help="robustness bucket in seconds")
    s.set_defaults(func=_cmd_simulate)
    k = sub.add_parser("keyrate", help="finite-key length for one parameter file")
    k.add_argument("params")
    k.set_defaults(func=_cmd_keyrate)
    v = sub.add_parser("validate", help="check a topology file")
    v.add_argument("topology")
    v.set_defaults(func=_cmd_validate)
    b = sub.add_parser("postproc-bench", help="Winnow, CRC and Toeplitz on random blocks")
    b.add_argument("--seed", type=int)
    b.add_argument("--n", type=int, default=256_000)
    b.add_argument("--blocks", type=int, default=5)
    b.add_argument("--ber", type=float, nargs="+", default=[0.005, 0.01, 0.02, 0.04])
    b.set_defaults(func=_cmd_postproc_bench)
    return p


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
