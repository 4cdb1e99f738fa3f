"""
What replication costs
======================

Replicating m of the T/k sub-runs on n servers catches a backdoor inserted
in a single step with probability m k / T, at the price of m k (n - 1) extra
training steps plus the distance computations.
"""

from rttd.detector import cost_overhead, detection_probability

T = 90_000
for n, m, k in [(16, 3, 2000), (16, 9, 2000), (8, 3, 2000), (4, 1, 2000)]:
    c = cost_overhead(n, m, k, "zest", probe_batches_D=1, T=T, price_per_step=1e-5)
    print(f"n={n:2d} m={m} k={k}: catch prob {detection_probability(m, k, T):.4f}, "
          f"extra steps {c.replication_steps:6d} ({c.fraction_of_T:.2f} x T), cost ${c.money:.2f}")
