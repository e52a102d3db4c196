"""Backward and double-backward passes checked against finite differences.

Run with ``python demos/gradients.py``.
"""
import numpy as np

from cgforge import engine, tpspec
from cgforge.oracle import fd_gradient

p = tpspec.validate("8x1o + 4x2e", "1x1o", "8x0e + 8x2e + 4x1o",
                    [(1, 1, 1, "B"), (1, 1, 2, "B"), (2, 1, 3, "C")])
rng = np.random.default_rng(1)
x, y, w = rng.standard_normal((2, p.dim_x)), rng.standard_normal((2, p.dim_y)), rng.standard_normal((2, p.total_weights))
gz = rng.standard_normal((2, p.dim_z))

gx, gy, gw = engine.tp_backward(p, None, (x, y, w), gz)
flat = np.concatenate([x.ravel(), y.ravel(), w.ravel()])
nx, ny = x.size, y.size


def loss(v):
    parts = v[:nx].reshape(x.shape), v[nx:nx + ny].reshape(y.shape), v[nx + ny:].reshape(w.shape)
    return np.sum(gz * engine.tp_forward(p, None, parts))


dirs = rng.standard_normal((5, flat.size))
fd = fd_gradient(loss, flat, 1e-5, dirs)[0]
an = dirs @ np.concatenate([gx.ravel(), gy.ravel(), gw.ravel()])
print("directional derivatives, backward vs finite differences:")
for a, b in zip(an, fd):
    print(f"  {a:+.10f}  {b:+.10f}")

# second order: gradients of <da, gx> + <db, gy> + <dC, gw>
da, db, dC = rng.standard_normal(x.shape), rng.standard_normal(y.shape), rng.standard_normal(w.shape)
fused = engine.tp_double_backward(p, None, (x, y, w), gz, da, db, dC)
seven = engine.tp_double_backward(p, None, (x, y, w), gz, da, db, dC, fused=False)
for name, a, b in zip(("dx", "dy", "dW", "dgz"), fused, seven):
    print(f"{name}: fused vs seven separate calls differ by {np.abs(a - b).max():.1e}")
