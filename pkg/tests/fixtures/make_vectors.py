"""Regenerate the hex test vectors. Expected outputs come from tests/oracles.py.

Encoding: each field is ``<bit length>:<hex>`` with bits packed MSB-first.
"""

import sys
import zlib
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))
import oracles  # noqa: E402


def enc(bits):
    bits = np.asarray(bits, dtype=np.uint8)
    return f"{bits.size}:{np.packbits(bits).tobytes().hex()}"


def main():
    rng = np.random.default_rng(20240917)
    lines = []
    for n, m in [(1, 1), (4, 4), (7, 3), (16, 16), (64, 17), (255, 128), (256, 256), (257, 100), (1000, 512)]:
        seed = rng.integers(0, 2, n + m - 1, dtype=np.uint8)
        x = rng.integers(0, 2, n, dtype=np.uint8)
        y = oracles.toeplitz_dense(seed, n, m).astype(np.int64) @ x % 2
        lines.append(f"{enc(x)} {enc(seed)} {enc(y)}")
    (HERE / "toeplitz_vectors.txt").write_text("\n".join(lines) + "\n")

    lines = []
    # "123456789" is the standard CRC-32 check string, digest cbf43926
    check = np.unpackbits(np.frombuffer(b"123456789", dtype=np.uint8))
    lines.append(f"{enc(check)} cbf43926")
    for nbytes in (0, 1, 4, 33, 1000):
        data = rng.integers(0, 256, nbytes, dtype=np.uint8).tobytes()
        lines.append(f"{enc(np.unpackbits(np.frombuffer(data, dtype=np.uint8)))} {zlib.crc32(data):08x}")
    (HERE / "crc_vectors.txt").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
