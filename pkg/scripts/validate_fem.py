"""Manufactured-solution convergence table for the P1 Poisson discretization."""
from mipdeco.fem import manufactured_l2_error

prev = None
for k in range(3, 8):
    err = manufactured_l2_error(2.0**-k)
    ratio = "" if prev is None else f"{prev / err:8.3f}"
    print(f"h=2^-{k}  L2 error {err:.6e}  {ratio}")
    prev = err
