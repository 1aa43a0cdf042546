# Graph-routed mixture of experts on a 3x3 patch grid.
# Compares the four routers on the same tokens and prints how evenly
# each one spreads work across experts.
import numpy as np

from dsd.grmoe import MoEConfig, build_patch_graph, init_experts, init_router, moe_forward
from dsd.numerics import squared_cv

rng = np.random.default_rng(0)
g = build_patch_graph(3, 3)  # 9 patches + class node
print(f"graph: {g.n_nodes} nodes, {len(g.edges)} edges")

x = rng.normal(size=(16, g.n_nodes, 32))  # batch of 16 token sets

for kind in ("graph_gat", "graph_gcn", "mhsa", "cosine"):
    cfg = MoEConfig(n_experts=6, top_k=2, token_dim=32, routing_dim=16, router_kind=kind)
    y, out, stats, r = moe_forward(x, cfg, init_router(cfg, rng), init_experts(cfg, rng), graph=g, noise=rng)
    nz = (out.weights != 0).sum(axis=1)
    print(f"{kind:10s} out {y.shape}  experts/token {nz.min()}-{nz.max()}  "
          f"sum imp {stats.imp.sum():.1f} (tokens {stats.n_tokens})  CV^2(imp) {squared_cv(stats.imp):.4f}  "
          f"routing feature {r.shape}")

# kept weights are the softmax scores themselves, not renormalized
row = out.weights[0]
print("token 0 weights:", np.round(row, 4), "sum", round(row.sum(), 4))
