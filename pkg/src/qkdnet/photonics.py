"""Physical layer: link budgets, channel observables, pulse Monte Carlo,
calibration state machine and polarization drift."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .keyrate import BASES, ProtocolParameters, TransmissionTally

MAX_SWITCH_LOSS_DB = 1.2
AFTERPULSE_WINDOW = 10


@dataclass(frozen=True)
class LinkBudget:
    fiber_km: float
    switch_loss_db: float = 0.0
    detector_inherent_loss_db: float = 3.0
    detector_efficiency: float = 0.10
    dark_rate: float = 1e-6
    dead_time_us: float = 2.0
    afterpulse_prob: float = 0.005
    gate_width_ps: float = 500.0
    misalignment: float = 0.005
    fiber_loss_db_per_km: float = 0.25

    def __post_init__(self):
        for name in ("detector_efficiency", "dark_rate", "afterpulse_prob", "misalignment"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} is not a probability")
        for name in ("fiber_km", "switch_loss_db", "detector_inherent_loss_db",
                     "dead_time_us", "gate_width_ps", "fiber_loss_db_per_km"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.switch_loss_db > MAX_SWITCH_LOSS_DB:
            raise ValueError(f"switch loss {self.switch_loss_db} dB exceeds {MAX_SWITCH_LOSS_DB} dB")

    @property
    def total_loss_db(self) -> float:
        return self.fiber_km * self.fiber_loss_db_per_km + self.switch_loss_db + self.detector_inherent_loss_db

    def ideal_detector(self) -> "LinkBudget":
        """Same optics with dead time and afterpulsing switched off."""
        return replace(self, dead_time_us=0.0, afterpulse_prob=0.0)


def transmittance(budget: LinkBudget) -> float:
    return 10 ** (-budget.total_loss_db / 10) * budget.detector_efficiency


def analytic_observables(eta: float, params: ProtocolParameters, misalignment: float):
    """Expected (gains, qbers) for (signal, decoy, vacuum) through a lossy channel.

    Standard model: a pulse of mean photon number x clicks with probability
    ``Y0 + 1 - exp(-eta x)``; dark clicks are wrong half the time and
    optical clicks with probability ``misalignment``.
    """
    gains = np.empty(3)
    qbers = np.empty(3)
    for k, x in enumerate(params.intensities):
        optical = 1.0 - math.exp(-eta * x)
        q = params.Y0 + optical
        gains[k] = q
        qbers[k] = (params.e0 * params.Y0 + misalignment * optical) / q if q > 0 else params.e0
    return gains, qbers


@dataclass(frozen=True)
class SinglePhotonTruth:
    """Ground-truth single-photon statistics from a pulse run, per basis."""

    sent: np.ndarray
    detected: np.ndarray
    errors: np.ndarray

    def yield_(self, basis: str) -> float:
        b = BASES.index(basis)
        return self.detected[b] / self.sent[b] if self.sent[b] else 0.0

    def error_rate(self, basis: str) -> float:
        b = BASES.index(basis)
        return self.errors[b] / self.detected[b] if self.detected[b] else 0.0


def _dead_time_veto(idx: np.ndarray, dead_gates: int) -> np.ndarray:
    """Boolean mask of accepted clicks on one detector (``idx`` sorted)."""
    keep = np.zeros(idx.size, dtype=bool)
    if idx.size == 0:
        return keep
    if dead_gates <= 0:
        keep[:] = True
        return keep
    pos = 0
    while pos < idx.size:
        keep[pos] = True
        pos = int(np.searchsorted(idx, idx[pos] + dead_gates, side="right"))
    return keep


def simulate_pulses_detailed(
    budget: LinkBudget,
    params: ProtocolParameters,
    n_pulses: int,
    seed: int,
    eta: Optional[float] = None,
) -> tuple[TransmissionTally, SinglePhotonTruth]:
    """Pulse-by-pulse BB84 run; returns the sifted tally and single-photon truth.

    Alice picks intensity, basis and bit; the photon number is Poisson, each
    photon survives with probability ``eta``; dark clicks occur with
    probability ``Y0``. Each of the four detectors (basis x bit) then applies
    afterpulsing and its dead time at the source repetition rate.
    """
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    rng = np.random.default_rng(seed)
    eta = transmittance(budget) if eta is None else eta
    n = int(n_pulses)
    inten = rng.choice(3, size=n, p=np.asarray(params.intensity_probs))
    a_basis = rng.integers(0, 2, size=n, dtype=np.int8)
    b_basis = rng.integers(0, 2, size=n, dtype=np.int8)
    a_bit = rng.integers(0, 2, size=n, dtype=np.int8)
    photons = rng.poisson(np.asarray(params.intensities)[inten])
    arrived = rng.binomial(photons, eta) > 0
    dark = rng.random(n) < params.Y0
    click = arrived | dark

    flip = rng.random(n) < budget.misalignment
    random_bit = rng.integers(0, 2, size=n, dtype=np.int8)
    match = a_basis == b_basis
    optical_bit = np.where(match, a_bit ^ flip, random_bit)
    b_bit = np.where(arrived, optical_bit, rng.integers(0, 2, size=n, dtype=np.int8))

    detector = (b_basis * 2 + b_bit).astype(np.int8)
    if budget.afterpulse_prob > 0:
        ap = _afterpulses(click, detector, budget.afterpulse_prob, rng)
        extra = ap >= 0
        extra &= ~click
        detector = np.where(extra, ap, detector).astype(np.int8)
        b_bit = np.where(extra, detector & 1, b_bit).astype(np.int8)
        # afterpulses register in the basis of the detector that fired
        b_basis = np.where(extra, detector >> 1, b_basis).astype(np.int8)
        match = a_basis == b_basis
        click = click | extra

    dead_gates = int(round(budget.dead_time_us * 1e-6 * params.r0))
    accepted = np.zeros(n, dtype=bool)
    for d in range(4):
        idx = np.flatnonzero(click & (detector == d))
        accepted[idx[_dead_time_veto(idx, dead_gates)]] = True

    err = b_bit != a_bit
    sent = np.zeros((2, 3))
    detected = np.zeros((2, 3))
    errors = np.zeros((2, 3))
    # rows follow BASES = ("X", "Z"); basis bit 0 -> X, 1 -> Z
    for b in (0, 1):
        base = match & (a_basis == b)
        for i in range(3):
            cell = base & (inten == i)
            sent[b, i] = np.count_nonzero(cell)
            hit = cell & accepted
            detected[b, i] = np.count_nonzero(hit)
            errors[b, i] = np.count_nonzero(hit & err)

    single = (photons == 1) & match
    t_sent = np.array([np.count_nonzero(single & (a_basis == b)) for b in (0, 1)], dtype=float)
    t_det = np.array([np.count_nonzero(single & accepted & (a_basis == b)) for b in (0, 1)], dtype=float)
    t_err = np.array(
        [np.count_nonzero(single & accepted & err & (a_basis == b)) for b in (0, 1)], dtype=float
    )
    return TransmissionTally(float(n), sent, detected, errors), SinglePhotonTruth(t_sent, t_det, t_err)


def _afterpulses(click, detector, prob, rng):
    """Detector index of an afterpulse landing on each gate, or -1."""
    n = click.size
    out = np.full(n, -1, dtype=np.int8)
    src = np.flatnonzero(click)
    fire = src[rng.random(src.size) < prob]
    if fire.size == 0:
        return out
    lag = rng.integers(1, AFTERPULSE_WINDOW + 1, size=fire.size)
    tgt = fire + lag
    ok = tgt < n
    out[tgt[ok]] = detector[fire[ok]]
    return out


def simulate_pulses(budget: LinkBudget, params: ProtocolParameters, n_pulses: int, seed: int) -> TransmissionTally:
    return simulate_pulses_detailed(budget, params, n_pulses, seed)[0]


WINDOW_BITS = 256_000


def window_tally(
    eta: float,
    params: ProtocolParameters,
    misalignment: float,
    window_bits: int = WINDOW_BITS,
    rng: Optional[np.random.Generator] = None,
) -> tuple[TransmissionTally, float]:
    """Tally of one accumulation window and its duration in seconds.

    The window closes once ``window_bits`` signal-state sifted detections
    are expected. Counts are the analytic expectation; with ``rng`` the
    detections are Poisson and the errors binomial around it.
    """
    gains, qbers = analytic_observables(eta, params, misalignment)
    n_pulses = window_bits / (0.5 * params.q_s * gains[0])
    t = TransmissionTally.from_observables(n_pulses, params, gains, qbers)
    if rng is None:
        return t, n_pulses / params.r0
    sent = np.round(t.sent)
    det = rng.poisson(sent * gains).astype(float)
    det = np.minimum(det, sent)
    err = rng.binomial(det.astype(np.int64), np.broadcast_to(qbers, det.shape)).astype(float)
    return TransmissionTally(float(sent.sum() * 2), sent, det, err), n_pulses / params.r0


# --- calibration -----------------------------------------------------------

GATE_VISIBILITY_MIN = 0.15
POLARIZATION_MIN_DB = 20.0
MAX_CONSECUTIVE_FAILURES = 3
CALIBRATION_LIMIT_S = 300.0
POLARIZATION_STATES = ("H", "V", "+", "-")


class Phase(enum.Enum):
    GATE_SCAN = "GateScan"
    POLARIZATION_FEEDBACK = "PolarizationFeedback"
    SYNCHRONIZATION = "Synchronization"
    DONE = "Done"
    ABORTED = "Aborted"


@dataclass
class CalibrationState:
    phase: Phase = Phase.GATE_SCAN
    consecutive_failures: int = 0
    elapsed_s: float = 0.0
    visibility: float = 0.0
    distance_km: float = 10.0
    trace: list = field(default_factory=list)


def _attempt_seconds(phase: Phase, distance_km: float) -> float:
    # Strong-pulse scans take longer on longer fibres. Worst case on success
    # (3 gate scans, 3 tries per polarization state, 3 syncs at 40 km) is
    # 78 + 144 + 12 = 234 s.
    d = min(distance_km, 40.0)
    if phase is Phase.GATE_SCAN:
        return 10.0 + 0.4 * d
    if phase is Phase.POLARIZATION_FEEDBACK:
        return 6.0 + 0.15 * d
    return 4.0


@dataclass
class DriftProcess:
    """Polarization-noise build-up on one link.

    ``qber_drift_rate`` is the night-time growth per hour; daytime growth is
    multiplied by ``diurnal_factor``. ``jitter`` is the Brownian spread per
    square-root effective hour.
    """

    qber_drift_rate: float
    recalibration_threshold: float
    diurnal_factor: float = 1.0
    rng_seed: int = 0
    jitter: float = 0.0
    baseline_qber: float = 0.005
    day_start_h: float = 8.0
    day_end_h: float = 20.0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.qber_drift_rate < 0 or self.jitter < 0 or self.diurnal_factor < 0:
            raise ValueError("drift rates must be >= 0")
        if not (self.baseline_qber < self.recalibration_threshold < 0.11):
            raise ValueError("threshold must lie between the baseline QBER and 0.11")
        self.rng = np.random.default_rng(self.rng_seed)

    @classmethod
    def field_fitted(cls, seed: int = 0) -> "DriftProcess":
        """Drift tuned to ~56 min daytime recalibration and >10 h quiet nights."""
        return cls(
            qber_drift_rate=FIELD_NIGHT_RATE,
            recalibration_threshold=FIELD_THRESHOLD,
            diurnal_factor=FIELD_DIURNAL_FACTOR,
            rng_seed=seed,
            jitter=FIELD_JITTER,
            baseline_qber=0.005,
        )

    def is_daytime(self, time_of_day_s: float) -> bool:
        h = (time_of_day_s % 86400.0) / 3600.0
        return self.day_start_h <= h < self.day_end_h

    def effective_hours(self, t0_s: float, dt_s: float) -> float:
        """Elapsed hours over [t0, t0+dt] with daytime stretched by the factor."""
        total = 0.0
        t, end = t0_s, t0_s + dt_s
        while t < end:
            tod = t % 86400.0
            day_a, day_b = self.day_start_h * 3600.0, self.day_end_h * 3600.0
            if tod < day_a:
                nxt = t - tod + day_a
            elif tod < day_b:
                nxt = t - tod + day_b
            else:
                nxt = t - tod + 86400.0
            step = min(nxt, end) - t
            total += step / 3600.0 * (self.diurnal_factor if self.is_daytime(t) else 1.0)
            t += step
        return total


# Fitted by simulation against the TR2-TR3 calibration log (see
# tests/test_photonics.py::test_field_fitted_day_interval).
FIELD_NIGHT_RATE = 0.0001875
FIELD_DIURNAL_FACTOR = 40.0
FIELD_THRESHOLD = 0.012
FIELD_JITTER = 0.00047


def evolve_qber(drift: DriftProcess, current_qber: float, dt_s: float, time_of_day: float) -> float:
    """Advance the link QBER by ``dt_s`` seconds starting at ``time_of_day``."""
    if dt_s < 0:
        raise ValueError("dt_s must be >= 0")
    if dt_s == 0 or (drift.qber_drift_rate == 0 and drift.jitter == 0):
        return current_qber
    h = drift.effective_hours(time_of_day, dt_s)
    step = drift.qber_drift_rate * h
    if drift.jitter > 0:
        step += drift.jitter * math.sqrt(h) * drift.rng.standard_normal()
    return min(max(current_qber + step, drift.baseline_qber), 0.5)


def needs_recalibration(drift: DriftProcess, qber: float) -> bool:
    return qber >= drift.recalibration_threshold


def run_calibration(
    state: CalibrationState,
    drift: DriftProcess,
    rng: np.random.Generator,
    measure: Optional[Callable[[Phase, str], float]] = None,
) -> CalibrationState:
    """Drive the three-step calibration to ``DONE`` or ``ABORTED``.

    ``measure(phase, label)`` overrides the random metric draw (gate
    visibility as a fraction, polarization extinction in dB, sync as 1/0).
    """
    if state.phase is Phase.DONE:
        raise ValueError("calibration already finished")
    noise = 1.0 + 50.0 * drift.qber_drift_rate * drift.diurnal_factor

    def draw(phase, label):
        if measure is not None:
            return measure(phase, label)
        if phase is Phase.GATE_SCAN:
            return float(rng.normal(0.45, 0.06 * noise))
        if phase is Phase.POLARIZATION_FEEDBACK:
            return float(rng.normal(26.0, 1.5 * noise))
        return float(rng.random() > 0.02 * noise)

    def attempt(phase, label, passed_fn):
        while True:
            value = draw(phase, label)
            state.visibility = value
            state.elapsed_s += _attempt_seconds(phase, state.distance_km)
            ok = passed_fn(value)
            state.trace.append((phase.value, label, value, ok))
            if ok:
                state.consecutive_failures = 0
                return True
            state.consecutive_failures += 1
            if state.consecutive_failures >= MAX_CONSECUTIVE_FAILURES:
                state.phase = Phase.ABORTED
                return False

    if state.phase is Phase.GATE_SCAN:
        if not attempt(Phase.GATE_SCAN, "gate", lambda v: v >= GATE_VISIBILITY_MIN):
            return state
        state.phase = Phase.POLARIZATION_FEEDBACK
    if state.phase is Phase.POLARIZATION_FEEDBACK:
        for label in POLARIZATION_STATES:
            if not attempt(Phase.POLARIZATION_FEEDBACK, label, lambda v: v >= POLARIZATION_MIN_DB):
                return state
        state.phase = Phase.SYNCHRONIZATION
    if state.phase is Phase.SYNCHRONIZATION:
        if not attempt(Phase.SYNCHRONIZATION, "sync", lambda v: v >= 0.5):
            return state
        state.phase = Phase.DONE
    return state


def simulate_drift_log(
    drift: DriftProcess,
    days: float,
    step_s: float = 60.0,
    calibration_s: float = 120.0,
    start_qber: Optional[float] = None,
) -> list[float]:
    """Times (s) at which the link was recalibrated over ``days`` days.

    QBER is stepped with :func:`evolve_qber`; crossing the threshold starts a
    calibration lasting ``calibration_s`` after which QBER is back at baseline.
    """
    t, end = 0.0, days * 86400.0
    q = drift.baseline_qber if start_qber is None else start_qber
    times = []
    while t < end:
        q = evolve_qber(drift, q, step_s, t)
        t += step_s
        if needs_recalibration(drift, q):
            times.append(t)
            t += calibration_s
            q = drift.baseline_qber
    return times


def interval_stats(times: list[float], drift: DriftProcess) -> dict:
    """Daytime mean interval and per-night quiet stretches from a calibration log.

    A night's stretch is the longest calibration-free interval overlapping
    that night's window (``day_end_h`` to the next ``day_start_h``).
    """
    day = []
    nights: dict[int, float] = {}
    night_len = (24.0 - drift.day_end_h + drift.day_start_h) * 3600.0
    for a, b in zip(times, times[1:]):
        if drift.is_daytime(a) and drift.is_daytime(b) and b - a < 12 * 3600:
            day.append(b - a)
        first = math.floor((a - drift.day_end_h * 3600.0) / 86400.0)
        last = math.floor((b - drift.day_end_h * 3600.0) / 86400.0)
        for k in range(first, last + 1):
            start = k * 86400.0 + drift.day_end_h * 3600.0
            if a < start + night_len and b > start and k >= 0:
                nights[k] = max(nights.get(k, 0.0), b - a)
    return {
        "day_mean_s": float(np.mean(day)) if day else math.nan,
        "day_count": len(day),
        "night_stretches_s": [nights[k] for k in sorted(nights)],
    }
