"""Build src/qkdnet/data/hefei.topo.csv from the published per-link key rates.

Spoke fibre lengths are not published. This script draws them (seeded) in
[2, 18] km for relay users and [1, 9] km for switch users, so every direct
path stays within 18 km. It then picks per-node installation losses so
that the modelled key rate at 40 MHz, averaged over the QBER a link sees
under the fitted drift process, matches the published rate. Switch users share
their spoke between several table rows, so their losses come from a
least-squares fit that keeps every row inside the target clamp.

Run from the repo root:  python3 tools/fit_reference_topology.py
"""

import csv
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, minimize

from qkdnet.keyrate import ProtocolParameters, finite_key_length
from qkdnet.photonics import DriftProcess, evolve_qber, needs_recalibration, window_tally
from qkdnet.topology import dumps, loads, validate

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "src" / "qkdnet" / "data"
PARAMS = ProtocolParameters(r0=40e6)


def drift_qbers(days=60, k=16, step_s=60.0):
    """Quantile midpoints of the QBER a drifting link sees over many days.

    Nights start wherever the evening left the QBER, so the time average
    sits well above the baseline.
    """
    d = DriftProcess.field_fitted(seed=1)
    q, t, samples = d.baseline_qber, 0.0, []
    while t < days * 86400.0:
        q = evolve_qber(d, q, step_s, t)
        t += step_s
        if needs_recalibration(d, q):
            q = d.baseline_qber
        samples.append(q)
    return np.quantile(samples, (np.arange(k) + 0.5) / k)


FIT_QBERS = drift_qbers()
# Switched pairs recalibrate at the start of every session, so they run
# close to baseline for its whole length.
FIT_QBERS_SWITCHED = np.linspace(0.005, 0.0065, 4)
SWITCH_LOSS = {"OS-1": 1.0, "OS-2": 1.2, "OS-3": 1.0}
TRUNK_KM = {("TR-1", "TR-2"): 15.0, ("TR-1", "TR-3"): 14.0, ("TR-2", "TR-3"): 16.0}
TARGET_CLAMP = (7.5, 33.0)
INHERENT = 3.0


def rate_kbps(total_loss_db, qbers=FIT_QBERS):
    eta = 10 ** (-total_loss_db / 10) * 0.10
    out = []
    for q in qbers:
        t, dt = window_tally(eta, PARAMS, q)
        out.append(finite_key_length(PARAMS, t).K_tot / dt / 1e3)
    return float(np.mean(out))


def loss_for(kbps, qbers=FIT_QBERS):
    return brentq(lambda L: rate_kbps(L, qbers) - kbps, 0.0, 30.0, xtol=1e-6)


def read_rates():
    with open(DATA / "hefei_table_rates.csv") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")][1:]
    return {(a, b): float(v) for a, b, v in rows}


def main():
    rates = read_rates()
    rng = np.random.default_rng(2017)
    clamp = lambda v: float(np.clip(v, *TARGET_CLAMP))  # noqa: E731
    recs = []
    sub = {"TR-1": "USTC", "TR-2": "CityLibrary", "TR-3": "QuantumCTek"}
    for tr in ("TR-1", "TR-2", "TR-3"):
        recs.append(["node", tr, "TrustedRelay", "", "0", "0", sub[tr], ""])
    uplink = {"OS-1": "TR-2", "OS-2": "TR-2", "OS-3": "TR-3"}
    fabric = {"OS-1": "AllPass16", "OS-2": "Matrix4x8", "OS-3": "AllPass16"}
    members = {"OS-1": range(1, 6), "OS-2": range(6, 8), "OS-3": range(8, 14)}

    # switch users: loss(i, j) = L_i + L_j + switch; loss(i, TR) = L_i + L_up + switch
    ua_loss = {}
    up_loss = {}
    for os_, idx in members.items():
        names = [f"UA-{i}" for i in idx] + ["UP"]
        col = {n: k for k, n in enumerate(names)}
        A, y = [], []
        for (a, b), v in rates.items():
            ends = [a, b]
            if not all(e in col or e == uplink[os_] for e in ends):
                continue
            if not any(e.startswith("UA-") and e in col for e in ends):
                continue
            row = np.zeros(len(names))
            for e in ends:
                row[col["UP" if e == uplink[os_] else e]] += 1
            A.append(row)
            y.append(loss_for(clamp(v), FIT_QBERS_SWITCHED) - INHERENT - SWITCH_LOSS[os_])
        A, y = np.array(A), np.array(y)
        # Shared spokes cannot match every row, so keep each row's modelled
        # rate inside the clamp while minimising the squared loss residual.
        lo = loss_for(TARGET_CLAMP[1], FIT_QBERS_SWITCHED) - INHERENT - SWITCH_LOSS[os_]
        hi = loss_for(TARGET_CLAMP[0], FIT_QBERS_SWITCHED) - INHERENT - SWITCH_LOSS[os_]
        start, *_ = np.linalg.lstsq(A, y, rcond=None)
        res = minimize(lambda L: float(np.sum((A @ L - y) ** 2)), start, method="SLSQP",
                       bounds=[(0.0 if n == "UP" else 0.25, None) for n in names],
                       constraints=[{"type": "ineq", "fun": lambda L: A @ L - lo},
                                    {"type": "ineq", "fun": lambda L: hi - A @ L}])
        assert res.success, res.message
        for n, L in zip(names, res.x):
            if n == "UP":
                up_loss[os_] = max(L, 0.0)
            else:
                ua_loss[n] = max(L, 0.25)
    for os_ in ("OS-1", "OS-2", "OS-3"):
        km = 0.5
        recs.append(["node", os_, "OpticalSwitch", uplink[os_], f"{km:g}",
                     f"{max(up_loss[os_] - 0.25 * km, 0):.3f}", sub[uplink[os_]],
                     f"{fabric[os_]}:{SWITCH_LOSS[os_]:g}"])
    for os_, idx in members.items():
        for i in idx:
            n = f"UA-{i}"
            km = min(round(float(rng.uniform(1.0, 9.0)), 1), round(ua_loss[n] / 0.25, 2))
            recs.append(["node", n, "UserA", os_, f"{km:g}", f"{max(ua_loss[n] - 0.25 * km, 0):.3f}",
                         sub[uplink[os_]], ""])
    hubs = {**{i: "TR-1" for i in range(1, 13)}, **{i: "TR-2" for i in range(13, 18)},
            **{i: "TR-3" for i in range(18, 28)}}
    for i, tr in hubs.items():
        n = f"UB-{i}"
        need = loss_for(clamp(rates[(n, tr)])) - INHERENT
        km = min(round(float(rng.uniform(2.0, 18.0)), 1), round(need / 0.25, 2))
        recs.append(["node", n, "UserB", tr, f"{km:g}", f"{max(need - 0.25 * km, 0):.3f}", sub[tr], ""])
    for (a, b), km in TRUNK_KM.items():
        # Trunks sit outside the intra-subnetwork envelope. The two fast
        # ones need less loss than the nominal fibre allows; they keep the
        # nominal length and no extra loss.
        need = np.mean([loss_for(rates[(a, b)]), loss_for(rates[(b, a)])]) - INHERENT
        recs.append(["trunk", a, "", b, f"{km:g}", f"{max(need - 0.25 * km, 0):.3f}", "", ""])

    header = "# Reference Hefei layout. Spoke lengths are seeded draws; extra_loss_db\n" \
             "# is fitted so modelled rates track the published per-link table.\n"
    lines = [",".join(("record", "name", "kind", "attached_to", "fiber_km", "extra_loss_db",
                       "subnetwork", "fabric"))]
    lines += [",".join(r) for r in recs]
    text = header + "\n".join(lines) + "\n"
    g = loads(text)
    assert validate(g) == [], validate(g)
    (DATA / "hefei.topo.csv").write_text(header + dumps(g))
    print(f"wrote {len(g.nodes)} nodes")


if __name__ == "__main__":
    main()
