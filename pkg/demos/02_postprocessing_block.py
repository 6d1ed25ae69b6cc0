"""One 256 kbit block through reconciliation, verification and hashing.

Winnow corrects the errors while tracking every disclosed parity, a CRC
confirms both sides agree, and a Toeplitz hash compresses the result to the
length the finite-key bound allows.
"""

import numpy as np

from qkdnet.keyrate import binary_entropy
from qkdnet.postproc import SiftedBlock, ToeplitzSeed, crc_verify, toeplitz_hash, winnow_reconcile

rng = np.random.default_rng(7)
n, ber = 256_000, 0.012
alice = rng.integers(0, 2, n, dtype=np.uint8)
bob = alice ^ (rng.random(n) < ber).astype(np.uint8)
print(f"sifted block: {n} bits, {np.count_nonzero(alice != bob)} errors")

r = winnow_reconcile(SiftedBlock.from_bits(alice, bob), rng_seed=1, qber_estimate=ber)
print(f"winnow: {r.passes} passes, {r.round_trips} round trips, {r.disclosed_bits} bits disclosed")
print(f"  efficiency f = {r.disclosed_bits / (n * binary_entropy(ber)):.3f}")
print(f"  {r.alice.size} bits survive privacy maintenance, CRC match: {crc_verify(r.alice, r.bob)}")

m = r.alice.size // 3
seed = ToeplitzSeed.random(r.alice.size, m, rng)
ka, kb = toeplitz_hash(r.alice, seed), toeplitz_hash(r.bob, seed)
print(f"toeplitz: {r.alice.size} -> {m} bits, keys equal: {np.array_equal(ka, kb)}")
