# Momentum memories: a stored vector dragged toward a fixed input.
# Before re-normalization the gap shrinks by exactly m each step.
import numpy as np

from dsd.memory import InstanceMemory, momentum_blend, momentum_update_instance

rng = np.random.default_rng(2)
v = rng.normal(size=8)
v /= np.linalg.norm(v)

for m in (0.5, 0.9, 0.99):
    mem = InstanceMemory(np.eye(8)[:1].copy(), np.eye(8)[:1].copy())
    ratios, cosines = [], []
    for _ in range(20):
        c = mem.f[0].copy()
        ratios.append(np.linalg.norm(momentum_blend(c, v, m) - v) / np.linalg.norm(c - v))
        momentum_update_instance(mem, 0, v, v, m)
        cosines.append(mem.f[0] @ v)
    print(f"m={m}: gap ratio {min(ratios):.12f}..{max(ratios):.12f}  cosine to input after 1/5/20 steps "
          f"{cosines[0]:.3f} {cosines[4]:.3f} {cosines[19]:.3f}")
