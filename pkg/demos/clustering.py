# Choosing the number of unknown classes by silhouette.
# Four tight blobs on the sphere; candidates are scaled from |C_s| = 4.
import numpy as np

from dsd.detection import candidate_counts, kmeans, select_unknown_count, silhouette
from dsd.numerics import make_rng

rng = np.random.default_rng(3)
centers = rng.normal(size=(4, 8))
x = np.concatenate([c + 0.05 * rng.normal(size=(30, 8)) for c in centers])
x /= np.linalg.norm(x, axis=1, keepdims=True)

print("candidates:", candidate_counts(4, len(x)))
n_u, res, scores = select_unknown_count(x, 4, make_rng(0))
for k, s in scores.items():
    print(f"  k={k:2d} mean silhouette {s:.3f}")
print("selected n_u =", n_u, " inertia", round(res.inertia, 4))

# more restarts never make the best inertia worse
for r in (1, 5, 20):
    print(f"k=8 restarts={r:2d} inertia {kmeans(x, 8, make_rng(1), restarts=r).inertia:.4f}")
print("silhouette of true blobs:", round(silhouette(x, np.repeat(np.arange(4), 30)).mean, 3))
