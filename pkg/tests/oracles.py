"""Independent high-precision reference evaluations used by the tests.

Nothing here imports from ``qkdnet``; inputs are plain numbers and arrays.
"""

import itertools

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def h(p):
    p = mp.mpf(p)
    if p <= 0 or p >= 1:
        return mp.mpf(0)
    return -p * mp.log(p, 2) - (1 - p) * mp.log(1 - p, 2)


def decoy(mu, nu, Y0, Q_mu, Q_nu, EQ_nu, e0=0.5):
    mu, nu, Y0 = mp.mpf(mu), mp.mpf(nu), mp.mpf(Y0)
    Q_mu, Q_nu, EQ_nu = mp.mpf(Q_mu), mp.mpf(Q_nu), mp.mpf(EQ_nu)
    Y1 = mu / (mu * nu - nu**2) * (
        Q_nu * mp.e**nu - Q_mu * mp.e**mu * nu**2 / mu**2 - (mu**2 - nu**2) / mu**2 * Y0
    )
    e1 = (EQ_nu * mp.e**nu - mp.mpf(e0) * Y0) / (Y1 * nu)
    return Y1, e1


def log2_sampling_bound(theta, e, nx, nz):
    theta, e, nx, nz = map(mp.mpf, (theta, e, nx, nz))
    n = nx + nz
    q = nx / n
    xi = h(e + theta - q * theta) - q * h(e) - (1 - q) * h(e + theta)
    return mp.log(mp.sqrt(n) / mp.sqrt(e * (1 - e)), 2) - n * xi


def theta_smallest(e, nx, nz, eps):
    target = mp.log(mp.mpf(eps), 2)
    lo, hi = mp.mpf(0), 1 - mp.mpf(e)
    if log2_sampling_bound(0, e, nx, nz) <= target:
        return mp.mpf(0)
    if log2_sampling_bound(hi, e, nx, nz) > target:
        return None
    while hi - lo > mp.mpf("1e-18"):
        mid = (lo + hi) / 2
        if log2_sampling_bound(mid, e, nx, nz) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def finite_key(p, N_sent, sent, detected, errors):
    """Reference finite-key pipeline. ``p`` is a dict of protocol constants.

    Returns ``(K_z, K_x)`` as mpf, with aborted components reported as 0.
    """
    d = mp.mpf(p["delta_sigmas"])
    mu, nu = mp.mpf(p["mu"]), mp.mpf(p["nu"])
    sent = [[mp.mpf(float(v)) for v in row] for row in sent]
    detected = [[mp.mpf(float(v)) for v in row] for row in detected]
    errors = [[mp.mpf(float(v)) for v in row] for row in errors]

    def up(x, n):
        return x + d * mp.sqrt(x) / mp.sqrt(n)

    def down(x, n):
        return max(x - d * mp.sqrt(x) / mp.sqrt(n), mp.mpf(0))

    per = {}
    for b in (0, 1):  # 0 = X, 1 = Z
        s_mu, s_nu = sent[b][0], sent[b][1]
        Q_mu, Q_nu = detected[b][0] / s_mu, detected[b][1] / s_nu
        EQ_mu, EQ_nu = errors[b][0] / s_mu, errors[b][1] / s_nu
        Y1, e1 = decoy(mu, nu, p["Y0"], up(Q_mu, s_mu), down(Q_nu, s_nu), up(EQ_nu, s_nu))
        if Y1 <= 0:
            return mp.mpf(0), mp.mpf(0)
        e1 = max(e1, mp.mpf(0))
        E_mu = min(up(EQ_mu, s_mu) / down(Q_mu, s_mu), mp.mpf("0.5"))
        n = sum(sent[b])
        sig1 = mp.mpf(p["q_s"]) * mu * mp.e**-mu
        all1 = sig1 + mp.mpf(p["q_d"]) * nu * mp.e**-nu
        M_s = n * Y1 * sig1
        M_a = n * Y1 * all1
        per[b] = dict(
            e1=e1,
            E_mu=E_mu,
            M1s=M_s - d * mp.sqrt(M_s),
            M1=M_a - d * mp.sqrt(M_a),
            Ms=detected[b][0],
        )
    out = {}
    for kb, tb in ((1, 0), (0, 1)):
        e = per[tb]["e1"]
        if e >= 0.5:
            out[kb] = mp.mpf(0)
            continue
        if e == 0:
            theta = mp.mpf(0)
        else:
            theta = theta_smallest(e, per[tb]["M1"], per[kb]["M1s"], p["eps_step"])
            if theta is None:
                out[kb] = mp.mpf(0)
                continue
        eps_ = min(e + theta, mp.mpf("0.5"))
        K = (
            per[kb]["M1s"] * (1 - h(eps_))
            - per[kb]["Ms"] * mp.mpf(p["f"]) * h(per[kb]["E_mu"])
            - mp.mpf(p["delta_cost"])
        )
        out[kb] = max(K, mp.mpf(0))
    return out[1], out[0]


def toeplitz_dense(seed_bits, n, m):
    """Explicit m x n Toeplitz matrix with T[i, j] = seed[i - j + n - 1]."""
    seed = np.asarray(seed_bits, dtype=np.uint8)
    T = np.empty((m, n), dtype=np.uint8)
    for i, j in itertools.product(range(m), range(n)):
        T[i, j] = seed[i - j + n - 1]
    return T


def toeplitz_bigint(seed_bits, x_bits, n, m):
    """T x over GF(2) by one big-integer product.

    Each bit sits in its own 32-bit field, so the integer product holds the
    plain convolution counts without carries between fields; output bit i
    is the parity of field i + n - 1.
    """
    import gmpy2

    s = np.asarray(seed_bits, dtype="<u4")
    x = np.asarray(x_bits, dtype="<u4")
    A = gmpy2.mpz(int.from_bytes(s.tobytes(), "little"))
    B = gmpy2.mpz(int.from_bytes(x.tobytes(), "little"))
    nfields = s.size + x.size
    raw = int(A * B).to_bytes(4 * nfields, "little")
    fields = np.frombuffer(raw, dtype="<u4")
    return (fields[n - 1: n - 1 + m] & 1).astype(np.uint8)
