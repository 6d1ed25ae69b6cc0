"""Classical post-processing on bit arrays.

Bits are ``uint8`` numpy arrays holding 0/1. The pipeline is
sift -> Winnow -> CRC-32 check -> Toeplitz privacy amplification.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

ACCUMULATION_BITS = 256_000
TILE_BITS = 256
AUTH_BITS_PER_ROUND_TRIP = 64
DEFAULT_BER_CEILING = 0.11
# Initial Winnow block holds about this many expected errors.
WINNOW_ERRORS_PER_BLOCK = 0.32


class NonConverging(RuntimeError):
    """Winnow gave up on a block; the block must be discarded."""


def _bits(a, name="bits") -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError(f"{name} must hold 0/1 values")
    return arr.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class SiftedBlock:
    bits_alice: np.ndarray
    bits_bob: np.ndarray
    basis_labels: np.ndarray
    intensity_labels: np.ndarray

    def __post_init__(self):
        n = len(self.bits_alice)
        for name in ("bits_bob", "basis_labels", "intensity_labels"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from bits_alice")

    @property
    def length(self) -> int:
        return int(len(self.bits_alice))

    @property
    def error_rate(self) -> float:
        if self.length == 0:
            return 0.0
        return float(np.count_nonzero(self.bits_alice != self.bits_bob)) / self.length

    @classmethod
    def from_bits(cls, alice, bob) -> "SiftedBlock":
        a, b = _bits(alice, "alice"), _bits(bob, "bob")
        z = np.zeros(a.size, dtype=np.uint8)
        return cls(a, b, z, z)


def sift(raw_alice, raw_bob, bases_alice, bases_bob, detected=None, intensities=None) -> SiftedBlock:
    """Keep positions where the bases agree and Bob registered a click.

    Both bases generate key, so the basis tag travels with each kept bit.
    """
    a, b = _bits(raw_alice, "raw_alice"), _bits(raw_bob, "raw_bob")
    ba, bb = np.asarray(bases_alice), np.asarray(bases_bob)
    n = a.size
    if not (b.size == ba.size == bb.size == n):
        raise ValueError("sift inputs must have equal lengths")
    keep = ba == bb
    if detected is not None:
        det = np.asarray(detected, dtype=bool)
        if det.size != n:
            raise ValueError("detected mask length differs")
        keep &= det
    inten = np.zeros(n, dtype=np.uint8) if intensities is None else np.asarray(intensities)
    if inten.size != n:
        raise ValueError("intensity labels length differs")
    return SiftedBlock(a[keep], b[keep], ba[keep].astype(np.uint8), inten[keep].astype(np.uint8))


# --- Winnow ---------------------------------------------------------------


@dataclass(frozen=True)
class Reconciled:
    """Winnow output. Both parties drop the same privacy-maintenance bits,
    so the strings are shorter than the input block."""

    alice: np.ndarray
    bob: np.ndarray
    disclosed_bits: int
    passes: int
    corrections: int
    round_trips: int


def initial_block_exponent(qber: Optional[float]) -> int:
    """log2 of the first-pass block size.

    Without an estimate, 8-bit blocks. With one, the block is sized to hold
    about 0.32 expected errors, which keeps efficiency in the 1.3-1.5 band
    from 0.5% to 4% BER.
    """
    if qber is None:
        return 3
    if qber <= 0:
        return 12
    return int(np.clip(round(math.log2(WINNOW_ERRORS_PER_BLOCK / qber)), 2, 12))


def _hamming_columns(m: int) -> np.ndarray:
    pos = np.arange(1, 1 << m)
    return ((pos[:, None] >> np.arange(m)) & 1).astype(np.int64)


def _estimate_ber(odd_fraction: float, block: int) -> float:
    if odd_fraction >= 0.5:
        return 0.5
    return 0.5 * (1.0 - (1.0 - 2.0 * odd_fraction) ** (1.0 / block))


def winnow_reconcile(
    block: SiftedBlock,
    rng_seed: int,
    qber_estimate: Optional[float] = None,
    max_passes: int = 10,
    ber_ceiling: float = DEFAULT_BER_CEILING,
) -> Reconciled:
    """Winnow with privacy maintenance.

    Each pass shuffles both strings with a shared permutation and splits
    them into blocks of 2^k bits. Parities are exchanged and the first bit
    of every block dropped. Blocks with a parity mismatch then exchange a
    k-bit Hamming syndrome over the remaining 2^k - 1 bits; Bob flips the
    indicated bit and both drop the k syndrome positions. Block size
    doubles each pass until a pass sees no parity mismatch.
    """
    rng = np.random.default_rng(rng_seed)
    a = block.bits_alice.copy()
    b = block.bits_bob.copy()
    k = initial_block_exponent(qber_estimate)
    disclosed = passes = corrections = round_trips = 0
    while True:
        if passes >= max_passes:
            raise NonConverging(f"no clean pass within {max_passes} passes")
        size = 1 << k
        nb = a.size // size
        if nb == 0:
            if passes == 0:
                raise NonConverging("block shorter than the first Winnow block")
            raise NonConverging("ran out of bits before a clean pass")
        passes += 1
        perm = rng.permutation(a.size)
        a, b = a[perm], b[perm]
        A = a[: nb * size].reshape(nb, size)
        B = b[: nb * size].reshape(nb, size)
        bad = (A.sum(axis=1) & 1) != (B.sum(axis=1) & 1)
        nbad = int(np.count_nonzero(bad))
        disclosed += nb
        round_trips += 1
        if passes == 1 and _estimate_ber(nbad / nb, size) > ber_ceiling:
            raise NonConverging(f"estimated BER above ceiling {ber_ceiling}")
        A, B = A[:, 1:], B[:, 1:]
        rest_a, rest_b = a[nb * size:], b[nb * size:]
        if nbad:
            disclosed += k * nbad
            round_trips += 1
            Ab, Bb = A[bad], B[bad].copy()
            syn = ((Ab ^ Bb).astype(np.int64) @ _hamming_columns(k)) & 1
            where = syn @ (1 << np.arange(k))
            hit = np.flatnonzero(where > 0)
            Bb[hit, where[hit] - 1] ^= 1
            corrections += hit.size
            keep = np.ones(size - 1, dtype=bool)
            keep[(1 << np.arange(k)) - 1] = False
            a = np.concatenate([A[~bad].ravel(), Ab[:, keep].ravel(), rest_a])
            b = np.concatenate([B[~bad].ravel(), Bb[:, keep].ravel(), rest_b])
        else:
            a = np.concatenate([A.ravel(), rest_a])
            b = np.concatenate([B.ravel(), rest_b])
            return Reconciled(a, b, disclosed, passes, corrections, round_trips)
        k += 1


# --- CRC -----------------------------------------------------------------


def crc32_bits(bits) -> int:
    """CRC-32 (IEEE 802.3) of the bit array packed MSB-first."""
    return zlib.crc32(np.packbits(_bits(bits)).tobytes())


def crc_verify(bits_alice, bits_bob) -> bool:
    a, b = _bits(bits_alice), _bits(bits_bob)
    if a.size != b.size:
        raise ValueError("crc_verify needs equal-length inputs")
    return crc32_bits(a) == crc32_bits(b)


# --- Toeplitz hashing ----------------------------------------------------


@dataclass(frozen=True)
class ToeplitzSeed:
    """Defines the m x n matrix T[i, j] = seed_bits[i - j + n - 1]."""

    seed_bits: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        if self.n < 1 or self.m < 0 or self.m > self.n:
            raise ValueError("need 0 <= m <= n and n >= 1")
        if len(self.seed_bits) != self.n + self.m - 1:
            raise ValueError(f"seed must have n + m - 1 = {self.n + self.m - 1} bits")

    @classmethod
    def random(cls, n: int, m: int, rng: np.random.Generator) -> "ToeplitzSeed":
        return cls(rng.integers(0, 2, size=n + m - 1, dtype=np.uint8), n, m)

    def matrix(self) -> np.ndarray:
        i = np.arange(self.m)[:, None]
        j = np.arange(self.n)[None, :]
        return np.asarray(self.seed_bits, dtype=np.uint8)[i - j + self.n - 1]


def _hash_tiles(seed: np.ndarray, x: np.ndarray, n: int, m: int) -> np.ndarray:
    W = TILE_BITS
    nb, mb = -(-n // W), -(-m // W)
    N, M = nb * W, mb * W
    k = x.shape[0]
    X = np.zeros((k, N), dtype=np.float32)
    X[:, :n] = x
    X = X.reshape(k, nb, W)
    # ext[t] with T[i, j] = ext[i - j + N - 1] on the zero-padded matrix
    ext = np.zeros(M + N - 1, dtype=np.float32)
    off = n - N
    lo, hi = max(0, -off), min(M + N - 1, seed.size - off)
    ext[lo:hi] = seed[lo + off: hi + off]
    win = sliding_window_view(ext, W)
    Y = np.zeros((k, mb, W), dtype=np.float32)
    # Tiles on one block diagonal are identical. Each tile product is at
    # most 256 and there are far fewer than 2^16 tiles per output block,
    # so float32 sums stay exact below 2^24.
    for d in range(-(nb - 1), mb):
        base = d * W + N - W
        tile_t = win[base: base + W][:, ::-1].T
        r0, r1 = max(0, d), min(mb, nb + d)
        Y[:, r0:r1] += X[:, r0 - d: r1 - d] @ tile_t
    return (Y.reshape(k, M)[:, :m].astype(np.int64) & 1).astype(np.uint8)


def _hash_fft(seed: np.ndarray, x: np.ndarray, n: int, m: int) -> np.ndarray:
    size = 1 << int(math.ceil(math.log2(n + seed.size)))
    fx = np.fft.rfft(x.astype(float), size, axis=-1)
    c = np.fft.irfft(np.fft.rfft(seed.astype(float), size) * fx, size, axis=-1)
    y = c[:, n - 1: n - 1 + m]
    r = np.rint(y)
    if y.size and np.abs(y - r).max() > 0.25:
        raise ArithmeticError("FFT rounding too large for an exact GF(2) result")
    return (r.astype(np.int64) & 1).astype(np.uint8)


def toeplitz_hash(bits, seed: ToeplitzSeed, method: str = "auto") -> np.ndarray:
    """T x over GF(2). ``bits`` may be one input or a 2-D batch of rows.

    ``method="blockwise"`` multiplies 256-bit tiles; ``"fft"`` computes the
    same product as one integer convolution. ``"auto"`` uses tiles while
    m*n stays below 2^28.
    """
    x = np.asarray(bits)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or (x.size and (x.min() < 0 or x.max() > 1)):
        raise ValueError("input must be 0/1 bits, one row per input")
    if x.shape[1] != seed.n:
        raise ValueError(f"input has {x.shape[1]} bits, seed expects {seed.n}")
    s = np.asarray(seed.seed_bits, dtype=np.uint8)
    if method == "auto":
        method = "blockwise" if seed.m * seed.n < 1 << 28 else "fft"
    if method not in ("blockwise", "fft"):
        raise ValueError(f"unknown method {method!r}")
    if seed.m == 0:
        out = np.zeros((x.shape[0], 0), dtype=np.uint8)
    elif method == "blockwise":
        out = _hash_tiles(s, x, seed.n, seed.m)
    else:
        out = _hash_fft(s, x, seed.n, seed.m)
    return out[0] if single else out


# --- glue ----------------------------------------------------------------


def compress_length(sifted_len: int, keyrate_result) -> int:
    """Privacy-amplification output size for one accumulation window."""
    m = max(int(math.floor(keyrate_result.K_tot)), 0)
    if m > sifted_len:
        log.warning("K_tot=%d exceeds the %d available bits; clamping", m, sifted_len)
        m = int(sifted_len)
    return m


def auth_cost_bits(round_trips: int) -> int:
    return AUTH_BITS_PER_ROUND_TRIP * int(round_trips)


@dataclass(frozen=True)
class BlockOutcome:
    key_alice: Optional[np.ndarray]
    key_bob: Optional[np.ndarray]
    disclosed_bits: int
    auth_bits: int
    discarded: str = ""

    @property
    def accepted(self) -> bool:
        return not self.discarded


def process_block(
    block: SiftedBlock,
    rng: np.random.Generator,
    qber_estimate: Optional[float] = None,
    secret_fraction: Optional[float] = None,
    keep_bits: Optional[int] = None,
) -> BlockOutcome:
    """Reconcile, check and hash one block.

    The output length is ``keep_bits`` if given, otherwise the reconciled
    length times ``secret_fraction`` (default: one minus the disclosed
    fraction of the original block, a simple placeholder).
    """
    try:
        rec = winnow_reconcile(block, int(rng.integers(2**63)), qber_estimate)
    except NonConverging as exc:
        return BlockOutcome(None, None, 0, 0, f"winnow: {exc}")
    # CRC exchange plus seed agreement
    auth = auth_cost_bits(rec.round_trips + 2)
    if not crc_verify(rec.alice, rec.bob):
        return BlockOutcome(None, None, rec.disclosed_bits, auth, "crc mismatch")
    n = rec.alice.size
    if keep_bits is None:
        frac = 1.0 - rec.disclosed_bits / max(block.length, 1) if secret_fraction is None else secret_fraction
        keep_bits = int(max(frac, 0.0) * n)
    m = min(max(int(keep_bits), 0), n)
    if n == 0:
        return BlockOutcome(np.zeros(0, np.uint8), np.zeros(0, np.uint8), rec.disclosed_bits, auth)
    seed = ToeplitzSeed.random(n, m, rng)
    return BlockOutcome(toeplitz_hash(rec.alice, seed), toeplitz_hash(rec.bob, seed),
                        rec.disclosed_bits, auth)
