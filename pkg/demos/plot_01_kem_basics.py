"""
KEM basics
==========

The KEM layer is a small registry of suites with a uniform
keygen / encaps / decaps interface. The built-in ``mock256`` suite is
deterministic and transparent, which makes it handy for testing.
"""

import os

from qkdkem import kem

print(kem.available_suites())

# a suite is just a record of lengths plus a backend
suite = kem.get_suite("mock256")
print(suite.name, suite.pk_len, suite.ct_len, suite.ss_len)

# keygen from a seed, encaps to the public key, decaps with the secret key
kp = kem.keypair("mock256", bytes(32))
ct, ss = kem.encaps("mock256", kp.pk, os.urandom(32))
assert kem.decaps("mock256", kp.sk, ct) == ss
print("mock256 shared secret", ss.hex())

# with the optional [pqc] extra installed, ML-KEM suites show up too
if "mlkem768" in kem.available_suites():
    kp = kem.keypair("mlkem768", os.urandom(32))
    ct, ss = kem.encaps("mlkem768", kp.pk, os.urandom(32))
    assert kem.decaps("mlkem768", kp.sk, ct) == ss
    print("mlkem768 pk/ct bytes:", len(kp.pk), len(ct))
