"""Graph convolution on a jittered diamond lattice, fused and unfused.

Run with ``python demos/fused_conv.py``.
"""
import time

import numpy as np

from cgforge import conv, tpspec

geo, g = conv.lattice_graph(cells=5, target_edges=158_000)
print(f"{len(geo)} atoms, {g.edge_count} directed edges, {g.edge_count / len(geo):.0f} neighbours per atom")

p = tpspec.validate("8x0e + 8x1o", "1x0e + 1x1o", "8x0e + 8x1o",
                    [(1, 1, 1, "B"), (2, 2, 1, "C"), (2, 1, 2, "B"), (1, 2, 2, "C")])
rng = np.random.default_rng(0)
x = rng.standard_normal((g.node_count, p.dim_x))
y = rng.standard_normal((g.edge_count, p.dim_y))
w = rng.standard_normal((g.edge_count, p.total_weights))

runs = {}
for name, fn in (("unfused", lambda c: conv.conv_forward_unfused(p, None, g, x, y, w, counters=c)),
                 ("deterministic", lambda c: conv.conv_forward(p, None, g, x, y, w, "deterministic", counters=c)),
                 ("atomic", lambda c: conv.conv_forward(p, None, g, x, y, w, "atomic", counters=c))):
    c = conv.ConvCounters()
    t0 = time.perf_counter()
    z = fn(c)
    runs[name] = z
    print(f"{name:>13}: {time.perf_counter() - t0:6.2f} s, node-output writes {c.node_store_ops:>6}, "
          f"duplicated node words {c.dup_words}")

ref = runs["unfused"]
for name in ("deterministic", "atomic"):
    print(f"{name} vs unfused: max abs diff {np.abs(runs[name] - ref).max():.1e}")

again = conv.conv_forward(p, None, g, x, y, w, "deterministic", workers=4)
print("deterministic output identical with 4 workers:", np.array_equal(again, runs["deterministic"]))
