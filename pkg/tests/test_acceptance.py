"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per criterion is
printed in the terminal summary.
"""

import time

import numpy as np
import pytest

import oracles
from qkdnet.apps import capacity_plan, capacity_scenario, table_generation_rates
from qkdnet.keymgmt import (
    InsufficientKey,
    PairingSchedule,
    PoolSet,
    find_key_path,
    next_pairing,
    relay_key,
    relay_path,
)
from qkdnet.keyrate import ProtocolParameters, binary_entropy, decoy_bounds, finite_key_length, table_tally
from qkdnet.photonics import DriftProcess, LinkBudget, interval_stats, simulate_pulses_detailed
from qkdnet.postproc import (
    NonConverging,
    SiftedBlock,
    ToeplitzSeed,
    crc_verify,
    toeplitz_hash,
    winnow_reconcile,
)
from qkdnet.simcli import (
    Scenario,
    calibration_times,
    key_rate_table,
    load_scenario,
    reference_scenario_path,
    run,
    write_outputs,
)
from qkdnet.topology import NodeKind, reference_layout_violations, reference_topology, validate


def detail(record_property, text):
    record_property("detail", text)


def oracle_params(p):
    return dict(mu=p.mu, nu=p.nu, Y0=p.Y0, q_s=p.q_s, q_d=p.q_d, f=p.f,
                delta_sigmas=p.delta_sigmas, eps_step=p.eps_step, delta_cost=p.delta_cost)


@pytest.mark.criterion(1, "key-rate oracle equivalence")
def test_c1_keyrate_oracle(record_property):
    p = ProtocolParameters(Y0=1e-6)
    tally = table_tally(p)
    t0 = time.perf_counter()
    r = finite_key_length(p, tally)
    Y1, e1 = decoy_bounds(p, 0.067, 0.022, 0.024)
    elapsed = time.perf_counter() - t0
    Kz, Kx = oracles.finite_key(oracle_params(p), tally.N_sent, tally.sent, tally.detected, tally.errors)
    Y1r, e1r = oracles.decoy(p.mu, p.nu, p.Y0, 0.067, 0.022, 0.022 * 0.024)
    errs = [abs(a - float(b)) / abs(float(b)) for a, b in ((r.K_z, Kz), (r.K_x, Kx), (Y1, Y1r), (e1, e1r))]
    detail(record_property, f"K_tot={r.K_tot:.6g} Y1_L={Y1:.4f} e1_U={e1:.4f} max rel err={max(errs):.1e}")
    assert r.K_tot > 0
    assert max(errs) <= 1e-9
    assert Y1 == pytest.approx(0.0998, abs=5e-5) and e1 == pytest.approx(0.0323, abs=5e-5)
    assert elapsed < 1.0


@pytest.mark.criterion(2, "decoy-bound statistical soundness")
def test_c2_decoy_soundness(record_property):
    # Short links with efficient detectors: at 1e6 pulses and 10 sigma the
    # bounds are only informative with enough detections.
    p = ProtocolParameters()
    rng = np.random.default_rng(2017)
    t0 = time.perf_counter()
    sound = bounded = aborted = 0
    while bounded < 500:
        budget = LinkBudget(float(rng.uniform(0, 10)), detector_efficiency=float(rng.uniform(0.3, 0.9)),
                            misalignment=float(rng.uniform(0.002, 0.03))).ideal_detector()
        tally, truth = simulate_pulses_detailed(budget, p, 1_000_000, seed=int(rng.integers(2**31)))
        est = finite_key_length(p, tally).estimates
        if "Z" not in est or "X" not in est:
            aborted += 1
            assert aborted < 100
            continue
        bounded += 1
        sound += all(est[b].Y1_L <= truth.yield_(b) and est[b].e1_psz >= truth.error_rate(b) for b in ("X", "Z"))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"sound {sound}/{bounded} runs, {aborted} runs aborted by the estimator")
    assert sound >= 0.99 * bounded
    assert elapsed < 300


@pytest.mark.criterion(3, "Winnow efficiency band")
def test_c3_winnow_band(record_property):
    t0 = time.perf_counter()
    means = {}
    for ber in (0.005, 0.01, 0.02, 0.04):
        rng = np.random.default_rng(int(ber * 1e4))
        fs = []
        for k in range(100):
            a = rng.integers(0, 2, 256_000, dtype=np.uint8)
            b = a ^ (rng.random(a.size) < ber).astype(np.uint8)
            try:
                r = winnow_reconcile(SiftedBlock.from_bits(a, b), rng_seed=k, qber_estimate=ber)
            except NonConverging:
                continue
            fs.append(r.disclosed_bits / (a.size * binary_entropy(ber)))
            if crc_verify(r.alice, r.bob):
                assert np.array_equal(r.alice, r.bob)
        assert len(fs) >= 100
        means[ber] = float(np.mean(fs))
    detail(record_property, " ".join(f"{b:.1%}:{m:.3f}" for b, m in means.items()))
    assert all(1.3 <= m <= 1.5 for m in means.values())
    assert time.perf_counter() - t0 < 300


def direct_gf2(seed, x):
    """Row-by-row T x mod 2 with T[i, j] = s[i - j + n - 1]."""
    n, m = seed.n, seed.m
    s = seed.seed_bits.astype(np.int64)
    xv = x.astype(np.int64)
    return np.array([int(s[i: i + n][::-1] @ xv) & 1 for i in range(m)], dtype=np.uint8)


@pytest.mark.criterion(4, "Toeplitz correctness")
def test_c4_toeplitz(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    for n in range(1, 17):
        X = ((np.arange(1 << n)[:, None] >> np.arange(n)) & 1).astype(np.uint8)
        for m in sorted({0, 1, n // 2, n - 1, n}):
            seed = ToeplitzSeed.random(n, m, rng)
            assert np.array_equal(toeplitz_hash(X, seed, "blockwise"), X @ seed.matrix().T % 2)
    for _ in range(100):
        n = 256_000
        m = int(rng.integers(1, 257))
        x = rng.integers(0, 2, n, dtype=np.uint8)
        seed = ToeplitzSeed.random(n, m, rng)
        got = toeplitz_hash(x, seed, "blockwise")
        assert np.array_equal(got, direct_gf2(seed, x))
        assert np.array_equal(got, oracles.toeplitz_bigint(seed.seed_bits, x, n, m))
    for _ in range(1000):
        n = int(rng.integers(1, 4097))
        seed = ToeplitzSeed.random(n, int(rng.integers(0, n + 1)), rng)
        x, y = rng.integers(0, 2, (2, n), dtype=np.uint8)
        assert np.array_equal(toeplitz_hash(x ^ y, seed), toeplitz_hash(x, seed) ^ toeplitz_hash(y, seed))
    elapsed = time.perf_counter() - t0
    detail(record_property, "exhaustive n<=16, 100 x 256 kbit, 1000 linearity triples")
    assert elapsed < 120


@pytest.mark.criterion(5, "topology fidelity")
def test_c5_topology(record_property):
    t0 = time.perf_counter()
    g = reference_topology()
    counts = {k.name: len(g.of_kind(k)) for k in NodeKind}
    detail(record_property, f"{len(g.nodes)} nodes {counts}")
    assert validate(g) == [] and reference_layout_violations(g) == []
    assert len(g.nodes) == 46
    assert counts["USER_A"] + counts["USER_B"] == 40
    assert counts["TRUSTED_RELAY"] == 3 and counts["OPTICAL_SWITCH"] == 3
    assert time.perf_counter() - t0 < 1.0


@pytest.mark.criterion(6, "scheduler invariants")
def test_c6_scheduler(record_property):
    t0 = time.perf_counter()
    sched = PairingSchedule(0, list(range(1, 17)), capacity=8)
    rng = np.random.default_rng(6)
    for _ in range(1000):
        levels = dict(zip(sched.candidates, rng.integers(0, 1000, len(sched.candidates))))
        chosen = next_pairing(sched, lambda a, b: levels[(a, b)])
        users = [u for pair in chosen for u in pair]
        assert len(users) == len(set(users)) and 0 < len(chosen) <= 8
        assert min(levels[p] for p in chosen) == min(levels.values())
    assert next_pairing(sched, PoolSet()) == [(2 * k + 1, 2 * k + 2) for k in range(8)]
    detail(record_property, "1000 random pool vectors, 16 users, capacity 8")
    assert time.perf_counter() - t0 < 60


def fill(pools, a, b, n, rng):
    k = rng.integers(0, 2, n, dtype=np.uint8)
    pools(a, b).credit(n, 0.0, material={a: k, b: k.copy()})


@pytest.mark.criterion(7, "relay correctness")
def test_c7_relay(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    pools = PoolSet(material=True)
    fill(pools, 1, 9, 4096, rng)
    fill(pools, 9, 2, 4096, rng)
    one = relay_key(1, 9, 2, 2048, pools)
    assert np.array_equal(one.key_a, one.key_b)
    for a, b in [(20, 1), (1, 3), (3, 37)]:
        fill(pools, a, b, 4096, rng)
    two = relay_path([20, 1, 3, 37], 1024, pools)
    assert np.array_equal(two.key_a, two.key_b)

    pools = PoolSet(material=True)
    edges = [(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (1, 6)]
    for _ in range(10_000):
        op = rng.integers(0, 3)
        a, b = edges[rng.integers(0, len(edges))]
        n = int(rng.integers(1, 64))
        try:
            if op == 0:
                fill(pools, a, b, n, rng)
            elif op == 1:
                pools(a, b).consume(n, 0.0, "consumed_app")
            else:
                x, y = (int(v) for v in rng.choice(6, 2, replace=False) + 1)
                path = find_key_path(edges, x, y, pools, n)
                if path and len(path) > 2:
                    out = relay_path(path, n, pools)
                    assert np.array_equal(out.key_a, out.key_b)
        except InsufficientKey:
            pass
    for p in pools:
        t = p.totals()
        assert t["generated"] + t["relayed_in"] == t["consumed_app"] + t["consumed_auth"] + t["relayed_out"] \
            + p.stored_bits
        assert p.replay() == p.stored_bits
        assert np.array_equal(p.peek(p.pair[0]), p.peek(p.pair[1]))
    detail(record_property, "1 and 2 hop keys identical, 10^4 ops conserved")
    assert time.perf_counter() - t0 < 60


@pytest.mark.criterion(8, "capacity scenario")
def test_c8_capacity(record_property):
    t0 = time.perf_counter()
    g = reference_topology()
    rep = capacity_scenario(g, PoolSet(), table_generation_rates(g), plan=capacity_plan(g))
    done = sum(r.completed for r in rep.sessions)
    detail(record_property, f"{done}/{len(rep.sessions)} calls complete, {rep.total_stall_s:g} s stalled")
    assert len(rep.sessions) == 11 and done == 11
    assert all(r.consumed_bits == 2400 * 360 for r in rep.sessions)
    assert rep.total_stall_s == 0
    assert time.perf_counter() - t0 < 120


@pytest.mark.criterion(9, "robustness behaviour")
def test_c9_robustness(record_property):
    t0 = time.perf_counter()
    g = reference_topology()
    drift = DriftProcess.field_fitted()
    long = run(Scenario(g, drift=drift, duration_s=25 * 86400, seed=31, start_hour=0, links=[("TR-2", "TR-3")]))
    stats = interval_stats(calibration_times(long.log, "TR-2", "TR-3"), drift)
    day_min = stats["day_mean_s"] / 60
    nights = np.array(stats["night_stretches_s"]) / 3600

    sc = load_scenario(reference_scenario_path())
    sc.duration_s = 86400
    day = run(sc)
    rows = key_rate_table(day.log)
    sub = {n.name: n.subnetwork for n in g.nodes}
    kinds = {n.name: n.kind for n in g.nodes}
    user_rows = [(a, b, v) for a, b, v in rows
                 if not (kinds[a] is NodeKind.TRUSTED_RELAY and kinds[b] is NodeKind.TRUSTED_RELAY)]
    ranges = {}
    for a, b, v in user_rows:
        s = sub[a] if kinds[a] is not NodeKind.TRUSTED_RELAY else sub[b]
        lo, hi = ranges.get(s, (v, v))
        ranges[s] = (min(lo, v), max(hi, v))
    cal = long.log.of_kind("calibration") + day.log.of_kind("calibration")
    worst = max(p["duration_s"] for _, _, p in cal)
    detail(record_property, f"day mean {day_min:.1f} min, night median {np.median(nights):.1f} h "
                            f"mean {nights.mean():.1f} h, worst calibration {worst:.0f} s, "
                            + " ".join(f"{s}:{lo:.1f}-{hi:.1f}" for s, (lo, hi) in sorted(ranges.items())))
    assert 0.8 * 56 <= day_min <= 1.2 * 56
    assert len(nights) >= 20 and np.median(nights) >= 10 and nights.mean() >= 10
    assert all(p["success"] for _, _, p in cal) and worst <= 300
    assert len(ranges) == 3 and all(6 <= lo and hi <= 37 for lo, hi in ranges.values())
    assert time.perf_counter() - t0 < 300


@pytest.mark.criterion(10, "determinism")
def test_c10_determinism(record_property, tmp_path):
    outs = []
    for tag in ("a", "b"):
        res = run(load_scenario(reference_scenario_path()))
        outs.append(write_outputs(res, tmp_path / tag))
    same = [k for k in outs[0] if outs[0][k].read_bytes() == outs[1][k].read_bytes()]
    detail(record_property, f"{len(same)}/{len(outs[0])} files byte-identical")
    assert len(same) == len(outs[0]) and "events" in same
