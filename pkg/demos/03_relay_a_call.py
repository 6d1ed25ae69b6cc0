"""An encrypted call between two subnetworks.

UB-1 hangs off TR-1 and UB-18 off TR-3. Their key travels hop by hop: each
trusted relay publishes the XOR of its two link keys, so the endpoints end up
holding the same pad while the relays see it in the clear.
"""

import numpy as np

from qkdnet.apps import SessionKind, SessionSpec, decrypt, encrypt, run_session
from qkdnet.keymgmt import PoolSet, relay_path
from qkdnet.topology import reference_topology

g = reference_topology()
ub1, tr1, tr3, ub18 = (g.node(n).id for n in ("UB-1", "TR-1", "TR-3", "UB-18"))
rng = np.random.default_rng(3)
pools = PoolSet(material=True)
for a, b in [(ub1, tr1), (tr1, tr3), (tr3, ub18)]:
    k = rng.integers(0, 2, 1_000_000, dtype=np.uint8)
    pools(a, b).credit(k.size, 0.0, material={a: k, b: k.copy()})

out = relay_path([ub1, tr1, tr3, ub18], 900_000, pools, t=0.0)
print(f"relayed {out.length} bits; endpoint pads identical: {np.array_equal(out.key_a, out.key_b)}")

msg = np.frombuffer(b"meet at the library at nine", dtype=np.uint8)
bits = np.unpackbits(msg)
ct = encrypt(bits, pools(ub1, ub18), sender=ub1)
back = np.packbits(decrypt(ct, pools(ub1, ub18), receiver=ub18)).tobytes()
print(f"text message round trip: {back.decode()!r}")

rep = run_session(SessionSpec(SessionKind.VOICE, (ub1, ub18), 1.0, 360.0), pools)
print(f"6 minute voice call: consumed {rep.consumed_bits} bits, stalled {rep.stall_seconds:g} s")
t = pools(ub1, ub18).totals()
print(f"pool ledger: relayed in {t['relayed_in']}, consumed {t['consumed_app']}, left {pools(ub1, ub18).stored_bits}")
