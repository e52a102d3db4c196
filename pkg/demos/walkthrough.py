"""From an irreps description to a scheduled, generated and executed tensor product.

Run with ``python demos/walkthrough.py``.
"""
import numpy as np

from cgforge import engine, kernelgen, oracle, scheduler, tpspec
from cgforge.cg import block_sparsity, cg_block

p = tpspec.problem_from_dict(tpspec.EXAMPLE_PROBLEM)
print("x:", p.x_ir, " y:", p.y_ir, " z:", p.z_ir)
print("dims (x, y, z, weights):", tpspec.problem_dims(p))

for r in p.resolved:
    blk = cg_block(r.l1, r.l2, r.l3)
    print(f"  instruction {r.index}: kind {r.kind} ({r.l1},{r.l2},{r.l3}) "
          f"b={r.z_lanes} b'={r.x_lanes} nnz={blk.nnz} sparsity={block_sparsity(blk):.1%}")

# the same problem under two scratch budgets
for budget in (100_000, 1642):
    s = scheduler.build_schedule(p, budget)
    t = s.traffic
    print(f"budget {budget}: {s.strategy}, {len(s.phases)} phase(s), "
          f"loads={t.loads_words} stores={t.stores_words} flops={t.flops}")
naive = scheduler.naive_traffic(p)
print(f"one subkernel at a time: loads={naive.loads_words} stores={naive.stores_words}")

# generated code for the smallest kernel
r = scheduler.split_multiplicities(p).resolved[1]
ir = kernelgen.gen_forward(r, r.block)
listing = kernelgen.emit_text(ir).splitlines()
print(f"\n{kernelgen.golden_name(ir)}: {len(listing)} IR lines, {kernelgen.flop_count(ir)} FLOPs per row")
print("\n".join(listing[:6]), "\n  ...")

rng = np.random.default_rng(0)
x, y, w = rng.standard_normal((64, p.dim_x)), rng.standard_normal((64, p.dim_y)), rng.standard_normal((64, p.total_weights))
z = engine.tp_forward(p, None, (x, y, w))
ref = oracle.dense_forward(p, x, y, w)
print(f"\nengine vs dense oracle on 64 rows: max rel err {np.abs(z - ref).max() / np.abs(ref).max():.2e}")
