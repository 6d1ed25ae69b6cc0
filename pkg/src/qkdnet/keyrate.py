"""Decoy-state BB84 key-rate engine (vacuum + weak decoy, finite size).

Everything here is a pure function of its inputs. Values are plain floats;
counts may be fractional when a tally holds expected rather than sampled
numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BASES = ("X", "Z")
INTENSITIES = ("signal", "decoy", "vacuum")


class KeyRateError(ValueError):
    """Base class for estimation failures that abort a block."""

    reason = "abort"


class NonPositiveYield(KeyRateError):
    reason = "non_positive_yield"


class NoFeasibleTheta(KeyRateError):
    reason = "no_feasible_theta"


@dataclass(frozen=True)
class ProtocolParameters:
    mu: float = 0.6
    nu: float = 0.2
    q_s: float = 0.75
    q_d: float = 0.125
    f: float = 1.5
    e0: float = 0.5
    Y0: float = 1e-6
    r0: float = 40e6
    delta_sigmas: float = 10.0
    eps_step: float = 1e-10
    delta_cost: float = 200.0

    def __post_init__(self):
        if not (0 < self.nu < self.mu):
            raise ValueError(f"need 0 < nu < mu, got nu={self.nu}, mu={self.mu}")
        if self.q_s < 0 or self.q_d < 0 or self.q_s + self.q_d > 1:
            raise ValueError("intensity probabilities must be >= 0 and sum to <= 1")
        if not (0 < self.eps_step < 1):
            raise ValueError("eps_step must lie in (0, 1)")
        if self.f < 1:
            raise ValueError("error-correction efficiency f must be >= 1")
        if self.Y0 < 0:
            raise ValueError("Y0 must be >= 0")
        if self.e0 != 0.5:
            raise ValueError("e0 is the dark-count error rate and must be 0.5")
        if self.delta_sigmas < 0 or self.delta_cost < 0 or self.r0 <= 0:
            raise ValueError("delta_sigmas, delta_cost must be >= 0 and r0 > 0")

    @property
    def q_v(self) -> float:
        return 1.0 - self.q_s - self.q_d

    @property
    def intensities(self) -> tuple[float, float, float]:
        return (self.mu, self.nu, 0.0)

    @property
    def intensity_probs(self) -> tuple[float, float, float]:
        return (self.q_s, self.q_d, self.q_v)


@dataclass(frozen=True)
class TransmissionTally:
    """Sifted counts per basis and intensity.

    ``sent``, ``detected`` and ``errors`` are (2, 3) arrays indexed by
    ``BASES`` and ``INTENSITIES``. ``sent`` counts basis-matched pulses, so
    ``sent.sum() <= N_sent``.
    """

    N_sent: float
    sent: np.ndarray
    detected: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        for name in ("sent", "detected", "errors"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (2, 3):
                raise ValueError(f"{name} must have shape (2, 3)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.errors < 0) or np.any(self.errors > self.detected) or np.any(
            self.detected > self.sent
        ):
            raise ValueError("tally needs 0 <= errors <= detected <= sent in every cell")
        if self.sent.sum() > self.N_sent * (1 + 1e-12):
            raise ValueError("sifted pulses exceed N_sent")

    @classmethod
    def from_observables(
        cls,
        N_sent: float,
        params: ProtocolParameters,
        gains,
        qbers,
        sift_fraction: float = 0.5,
    ) -> "TransmissionTally":
        """Expected-value tally for given per-intensity gains and QBERs.

        ``gains``/``qbers`` are (signal, decoy, vacuum) triples applied to both
        bases. Each basis receives half of the sifted pulses.
        """
        probs = np.asarray(params.intensity_probs)
        per_basis = N_sent * sift_fraction / 2.0 * probs
        sent = np.vstack([per_basis, per_basis])
        detected = sent * np.asarray(gains, dtype=float)
        errors = detected * np.asarray(qbers, dtype=float)
        return cls(N_sent, sent, detected, errors)

    def cell(self, basis: str, intensity: str) -> tuple[float, float, float]:
        b, i = BASES.index(basis), INTENSITIES.index(intensity)
        return self.sent[b, i], self.detected[b, i], self.errors[b, i]

    def gain(self, basis: str, intensity: str) -> float:
        s, d, _ = self.cell(basis, intensity)
        return d / s if s > 0 else 0.0

    def qber(self, basis: str, intensity: str) -> float:
        _, d, e = self.cell(basis, intensity)
        return e / d if d > 0 else 0.0


@dataclass(frozen=True)
class DecoyEstimate:
    Y1_L: float
    e1_U: float
    M1_zsL: float = 0.0
    M1_xL: float = 0.0
    theta: float = 0.0
    e1_psz: float = 0.0
    eps_ph: float = 0.0


@dataclass(frozen=True)
class KeyLengthResult:
    K_z: float
    K_x: float
    K_tot: float
    rate_bps: float
    per_pulse_rate: float
    estimates: dict = field(default_factory=dict)
    reasons: tuple = ()

    @property
    def aborted(self) -> bool:
        return self.K_tot <= 0 and bool(self.reasons)


def binary_entropy(p: float) -> float:
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"probability out of range: {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def _decoy_from_products(params: ProtocolParameters, Q_mu, Q_nu, EQ_nu):
    mu, nu, Y0 = params.mu, params.nu, params.Y0
    Y1_L = (mu / (mu * nu - nu**2)) * (
        Q_nu * math.exp(nu) - Q_mu * math.exp(mu) * nu**2 / mu**2 - (mu**2 - nu**2) / mu**2 * Y0
    )
    if Y1_L <= 0:
        raise NonPositiveYield(f"single-photon yield bound is {Y1_L:.3e}")
    num = EQ_nu * math.exp(nu) - params.e0 * Y0
    # tiny samples can push the numerator below zero
    e1_U = max(num, 0.0) / (Y1_L * nu)
    return Y1_L, e1_U


def decoy_bounds(params: ProtocolParameters, Q_mu: float, Q_nu: float, E_nu: float):
    """Lower bound on the single-photon yield and upper bound on its error rate.

    Returns ``(Y1_L, e1_U)``. Raises :class:`NonPositiveYield` when the yield
    bound is not positive, which means no key can be extracted from the block.
    """
    for name, v in (("Q_mu", Q_mu), ("Q_nu", Q_nu), ("E_nu", E_nu)):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{name}={v} outside [0, 1]")
    return _decoy_from_products(params, Q_mu, Q_nu, E_nu * Q_nu)


def asymptotic_rate(params: ProtocolParameters, Q_mu: float, E_mu: float, est: DecoyEstimate) -> float:
    """GLLP key rate per signal pulse; negative values mean no key."""
    single = est.Y1_L * params.mu * math.exp(-params.mu) * (1.0 - binary_entropy(min(est.e1_U, 0.5)))
    return -params.f * Q_mu * binary_entropy(E_mu) + single


def gaussian_bounds(chi: float, N: float, delta_sigmas: float) -> tuple[float, float]:
    """``chi -/+ delta * sqrt(chi / N)``, lower end clamped at zero.

    For raw counts pass ``N=1``, which gives ``chi -/+ delta * sqrt(chi)``.
    """
    if chi < 0 or N <= 0:
        raise ValueError("need chi >= 0 and N > 0")
    dev = delta_sigmas * math.sqrt(chi) / math.sqrt(N)
    return max(chi - dev, 0.0), chi + dev


def _xi(theta: float, e: float, q_x: float) -> float:
    h = binary_entropy
    return h(e + theta - q_x * theta) - q_x * h(e) - (1.0 - q_x) * h(min(e + theta, 1.0))


def phase_error_log2_bound(theta: float, e1_bx: float, n_x: float, n_z: float) -> float:
    """log2 of the random-sampling bound on Prob{e_phase >= e1_bx + theta}."""
    n = n_x + n_z
    q_x = n_x / n
    return 0.5 * math.log2(n) - 0.5 * math.log2(e1_bx * (1.0 - e1_bx)) - n * _xi(theta, e1_bx, q_x)


def phase_error_deviation(
    e1_bx: float, n_x: float, n_z: float, eps_target: float, tol: float = 1e-12
) -> float:
    """Smallest deviation ``theta`` whose sampling bound is at most ``eps_target``.

    The bound decreases monotonically in ``theta``, so plain bisection on
    ``(0, 1 - e1_bx)`` is used; the returned value is the upper end of the
    final bracket, which always satisfies the target.
    """
    if eps_target >= 1:
        return 0.0
    if not (0 < e1_bx < 1) or n_x <= 0 or n_z <= 0 or eps_target <= 0:
        raise ValueError("need 0 < e1_bx < 1, n_x, n_z > 0 and eps_target > 0")
    target = math.log2(eps_target)

    def ok(theta):
        return phase_error_log2_bound(theta, e1_bx, n_x, n_z) <= target

    if ok(0.0):
        return 0.0
    lo, hi = 0.0, 1.0 - e1_bx
    if not ok(hi):
        raise NoFeasibleTheta(
            f"no deviation meets eps={eps_target:g} with n_x={n_x:.3g}, n_z={n_z:.3g}"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _basis_bounds(params: ProtocolParameters, tally: TransmissionTally, basis: str):
    """Fluctuation-corrected decoy bounds and leak inputs for one basis."""
    d = params.delta_sigmas
    s_mu, d_mu, e_mu = tally.cell(basis, "signal")
    s_nu, d_nu, e_nu = tally.cell(basis, "decoy")
    if s_mu <= 0 or s_nu <= 0:
        raise NonPositiveYield(f"no signal/decoy pulses in basis {basis}")
    s_mu, d_mu, e_mu, s_nu, d_nu, e_nu = map(float, (s_mu, d_mu, e_mu, s_nu, d_nu, e_nu))
    Q_mu, Q_nu = d_mu / s_mu, d_nu / s_nu
    EQ_mu, EQ_nu = e_mu / s_mu, e_nu / s_nu
    Q_mu_U = gaussian_bounds(Q_mu, s_mu, d)[1]
    Q_mu_L = gaussian_bounds(Q_mu, s_mu, d)[0]
    Q_nu_L = gaussian_bounds(Q_nu, s_nu, d)[0]
    EQ_nu_U = gaussian_bounds(EQ_nu, s_nu, d)[1]
    EQ_mu_U = gaussian_bounds(EQ_mu, s_mu, d)[1]
    Y1_L, e1_U = _decoy_from_products(params, Q_mu_U, Q_nu_L, EQ_nu_U)
    # worst case: error numerator up, gain denominator down
    E_mu_U = min(EQ_mu_U / Q_mu_L, 0.5) if Q_mu_L > 0 else 0.5
    return Y1_L, e1_U, E_mu_U, d_mu


def finite_key_length(params: ProtocolParameters, tally: TransmissionTally) -> KeyLengthResult:
    """Finite-size secret key length from one accumulation window.

    Both bases generate key. Each basis' length uses its own single-photon
    yield bound and the other basis' single-photon error bound plus the
    sampling deviation. Estimation failures never raise: they zero the
    affected component(s) and record a reason string.
    """
    mu, nu = params.mu, params.nu
    signal_1 = params.q_s * mu * math.exp(-mu)
    any_1 = signal_1 + params.q_d * nu * math.exp(-nu)
    reasons = []
    bounds = {}
    for b in BASES:
        try:
            bounds[b] = _basis_bounds(params, tally, b)
        except NonPositiveYield as exc:
            reasons.append(f"{b}:{exc.reason}:{exc}")
    if len(bounds) < 2:
        return _zero_result(params, tally, reasons)

    n = {b: float(tally.sent[BASES.index(b)].sum()) for b in BASES}
    M1_sL, M1_L = {}, {}
    for b in BASES:
        Y1_L = bounds[b][0]
        M1_sL[b] = gaussian_bounds(n[b] * Y1_L * signal_1, 1.0, params.delta_sigmas)[0]
        M1_L[b] = gaussian_bounds(n[b] * Y1_L * any_1, 1.0, params.delta_sigmas)[0]

    K = {}
    estimates = {}
    for key_b, test_b in (("Z", "X"), ("X", "Z")):
        Y1_L, _, E_mu_U, M_s = bounds[key_b]
        e1_U_test = bounds[test_b][1]
        if e1_U_test >= 0.5:
            reasons.append(f"{key_b}:phase_error_too_high:e1_U={e1_U_test:.4f}")
            K[key_b] = 0.0
            continue
        if M1_sL[key_b] <= 0 or M1_L[test_b] <= 0:
            reasons.append(f"{key_b}:no_single_photon_detections")
            K[key_b] = 0.0
            continue
        if e1_U_test == 0.0:
            theta, log2_eps = 0.0, -math.inf
        else:
            try:
                theta = phase_error_deviation(
                    e1_U_test, M1_L[test_b], M1_sL[key_b], params.eps_step
                )
            except NoFeasibleTheta as exc:
                reasons.append(f"{key_b}:{exc.reason}:{exc}")
                K[key_b] = 0.0
                continue
            log2_eps = phase_error_log2_bound(theta, e1_U_test, M1_L[test_b], M1_sL[key_b])
        e1_ps = min(e1_U_test + theta, 0.5)
        raw = (
            M1_sL[key_b] * (1.0 - binary_entropy(e1_ps))
            - M_s * params.f * binary_entropy(E_mu_U)
            - params.delta_cost
        )
        if raw <= 0:
            reasons.append(f"{key_b}:negative_length:{raw:.1f}")
        K[key_b] = max(raw, 0.0)
        estimates[key_b] = DecoyEstimate(
            Y1_L=Y1_L,
            e1_U=e1_U_test,
            M1_zsL=M1_sL[key_b],
            M1_xL=M1_L[test_b],
            theta=theta,
            e1_psz=e1_ps,
            eps_ph=2.0**log2_eps,
        )

    K_tot = K["X"] + K["Z"]
    return KeyLengthResult(
        K_z=K["Z"],
        K_x=K["X"],
        K_tot=K_tot,
        rate_bps=params.r0 * K_tot / float(tally.N_sent),
        per_pulse_rate=K_tot / float(tally.N_sent),
        estimates=estimates,
        reasons=tuple(reasons),
    )


def _zero_result(params, tally, reasons):
    return KeyLengthResult(0.0, 0.0, 0.0, 0.0, 0.0, {}, tuple(reasons))


def table_tally(params: ProtocolParameters | None = None, N_sent: float = 6.3e7,
                Q_mu: float = 0.067, Q_nu: float = 0.022,
                E_mu: float = 0.01, E_nu: float = 0.024) -> TransmissionTally:
    """Tally built from the published single-link parameter set."""
    params = params or ProtocolParameters(Y0=1e-6)
    return TransmissionTally.from_observables(
        N_sent, params, (Q_mu, Q_nu, params.Y0), (E_mu, E_nu, params.e0)
    )
