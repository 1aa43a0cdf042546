"""Graph-Router Mixture-of-Experts layer.

Tokens of one image (patch tokens in row-major grid order, class token last)
are treated as nodes of a graph whose edges join 4-adjacent patches and tie
every patch to the class token. A single-head graph attention layer, layer
norm and a linear scoring head produce per-token expert logits; the
normalized class-token node is the sample's routing feature.

Parameters are plain ``dict[str, ndarray]``; forward functions accept arrays
or :class:`~dsd.autograd.Tensor` values so the same code serves inference and
gradient computation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .numerics import normal_cdf

ROUTER_KINDS = ("graph_gat", "graph_gcn", "mhsa", "cosine")
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int = 6
    top_k: int = 2
    token_dim: int = 32
    routing_dim: int = 16
    router_kind: str = "graph_gat"
    noise_std: float = 1e-2
    cosine_tau: float = 0.1
    # "row": each expert embedding normalized on its own; "frobenius": whole table
    cosine_norm: str = "row"

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k must lie in [1, n_experts={self.n_experts}], got {self.top_k}")
        if self.token_dim <= 0 or self.routing_dim <= 0:
            raise ValueError("token_dim and routing_dim must be positive")
        if self.router_kind not in ROUTER_KINDS:
            raise ValueError(f"unknown router_kind {self.router_kind!r}; expected one of {ROUTER_KINDS}")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if self.cosine_tau <= 0:
            raise ValueError("cosine_tau must be positive")
        if self.cosine_norm not in ("row", "frobenius"):
            raise ValueError(f"cosine_norm must be 'row' or 'frobenius', got {self.cosine_norm!r}")


# ---------------------------------------------------------------------------
# patch graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGraph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) directed pairs, both directions + self-loops
    grid_shape: tuple[int, int] = (0, 0)
    adjacency: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        adj[self.edges[:, 0], self.edges[:, 1]] = True
        object.__setattr__(self, "adjacency", adj)

    @classmethod
    def from_edges(cls, n_nodes: int, undirected_edges, grid_shape=(0, 0)) -> "PatchGraph":
        """Graph from undirected pairs; both directions and self-loops are added."""
        pairs = {(i, i) for i in range(n_nodes)}
        for i, j in undirected_edges:
            pairs.add((int(i), int(j)))
            pairs.add((int(j), int(i)))
        edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
        return cls(n_nodes, edges, tuple(grid_shape))

    @property
    def class_node(self) -> int:
        return self.n_nodes - 1

    def undirected_edges(self) -> set[tuple[int, int]]:
        return {(int(min(i, j)), int(max(i, j))) for i, j in self.edges if i != j}

    def patch_edge_count(self) -> int:
        c = self.class_node
        return sum(1 for i, j in self.undirected_edges() if c not in (i, j))

    def class_edge_count(self) -> int:
        c = self.class_node
        return sum(1 for i, j in self.undirected_edges() if c in (i, j))

    def self_loop_count(self) -> int:
        return int(np.sum(self.edges[:, 0] == self.edges[:, 1]))

    def permuted(self, perm) -> "PatchGraph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return PatchGraph(self.n_nodes, perm[self.edges], self.grid_shape)


def build_patch_graph(grid_rows: int, grid_cols: int) -> PatchGraph:
    if grid_rows < 1 or grid_cols < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {grid_rows}x{grid_cols}")
    n_patch = grid_rows * grid_cols
    cls_node = n_patch
    pairs = []
    for r in range(grid_rows):
        for c in range(grid_cols):
            i = r * grid_cols + c
            if c + 1 < grid_cols:
                pairs.append((i, i + 1))
            if r + 1 < grid_rows:
                pairs.append((i, i + grid_cols))
            pairs.append((i, cls_node))
    return PatchGraph.from_edges(n_patch + 1, pairs, (grid_rows, grid_cols))


def gcn_propagation(graph: PatchGraph) -> np.ndarray:
    """Symmetric-normalized adjacency D^-1/2 A D^-1/2 (self-loops included)."""
    a = graph.adjacency.astype(np.float64)
    d = a.sum(axis=1)
    inv = 1.0 / np.sqrt(d)
    return a * inv[:, None] * inv[None, :]


# ---------------------------------------------------------------------------
# routers
# ---------------------------------------------------------------------------


def init_router(cfg: MoEConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, r, n = cfg.token_dim, cfg.routing_dim, cfg.n_experts
    p: dict[str, np.ndarray] = {}
    if cfg.router_kind == "cosine":
        p["proj"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, r))
        p["embed"] = rng.normal(0.0, 1.0, (n, r))
        return p
    if cfg.router_kind == "mhsa":
        for name in ("q", "k", "v"):
            p[name] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, r))
        p["o"] = rng.normal(0.0, 1.0 / np.sqrt(r), (r, r))
    else:
        p["proj"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, r))
        if cfg.router_kind == "graph_gat":
            p["att"] = rng.normal(0.0, 1.0 / np.sqrt(2 * r), (2 * r,))
    p["norm_scale"] = np.ones(r)
    p["norm_shift"] = np.zeros(r)
    p["fc"] = rng.normal(0.0, 1.0 / np.sqrt(r), (r, n))
    return p


def gat_attention(graph: PatchGraph, node_feats, params) -> tuple[Tensor, Tensor]:
    """Return (attention coefficients, projected features W h)."""
    x = ag.as_tensor(node_feats)
    if x.shape[-2] != graph.n_nodes:
        raise ValueError(f"node_feats has {x.shape[-2]} rows but graph has {graph.n_nodes} nodes")
    w = ag.as_tensor(params["proj"])
    att = ag.as_tensor(params["att"])
    r = w.shape[1]
    wh = x @ w
    src = wh @ att[:r]
    dst = wh @ att[r:]
    pair = src.reshape(src.shape + (1,)) + dst.reshape(dst.shape[:-1] + (1,) + dst.shape[-1:])
    e = ag.leaky_relu(pair, LEAKY_SLOPE)
    alpha = ag.softmax(e, axis=-1, mask=graph.adjacency)
    return alpha, wh


def gat_layer(graph: PatchGraph, node_feats, params) -> Tensor:
    """Single-head graph attention: h'_i = sum_j alpha_ij W h_j over neighbours j."""
    alpha, wh = gat_attention(graph, node_feats, params)
    return alpha @ wh


def gcn_layer(graph: PatchGraph, node_feats, params) -> Tensor:
    x = ag.as_tensor(node_feats)
    if x.shape[-2] != graph.n_nodes:
        raise ValueError(f"node_feats has {x.shape[-2]} rows but graph has {graph.n_nodes} nodes")
    return ag.as_tensor(gcn_propagation(graph)) @ (x @ ag.as_tensor(params["proj"]))


def mhsa_mix(node_feats, params) -> Tensor:
    x = ag.as_tensor(node_feats)
    q = x @ ag.as_tensor(params["q"])
    k = x @ ag.as_tensor(params["k"])
    v = x @ ag.as_tensor(params["v"])
    att = ag.softmax((q @ k.T) * (1.0 / np.sqrt(q.shape[-1])), axis=-1)
    return (att @ v) @ ag.as_tensor(params["o"])


class RouteResult(NamedTuple):
    logits: Tensor  # (..., T, N) pre-softmax
    scores: Tensor  # (..., T, N) softmax
    node_features: Tensor  # (..., T, R) routing features per node
    routing_feature: Tensor  # (..., R) class-token node


def graph_route(tokens, graph: PatchGraph | None, params, cfg: MoEConfig) -> RouteResult:
    """FC(Norm(mix(tokens))) where mix is GAT, GCN or MHSA per ``cfg.router_kind``."""
    x = ag.as_tensor(tokens)
    if x.shape[-1] != cfg.token_dim:
        raise ValueError(f"token width {x.shape[-1]} != token_dim {cfg.token_dim}")
    kind = cfg.router_kind
    if kind == "cosine":
        return cosine_route(x, params, cfg)
    if kind == "graph_gat":
        h = gat_layer(graph, x, params)
    elif kind == "graph_gcn":
        h = gcn_layer(graph, x, params)
    else:
        h = mhsa_mix(x, params)
    h = ag.layer_norm(h, ag.as_tensor(params["norm_scale"]), ag.as_tensor(params["norm_shift"]))
    logits = h @ ag.as_tensor(params["fc"])
    return RouteResult(logits, ag.softmax(logits, axis=-1), h, h[..., -1, :])


def cosine_route(tokens, params, cfg: MoEConfig) -> RouteResult:
    """Cosine router: <E_i, Wx> / (tau ||Wx|| ||E||)."""
    x = ag.as_tensor(tokens)
    emb = ag.as_tensor(params["embed"])
    if emb.shape[0] != cfg.n_experts:
        raise ValueError(f"expert embedding has {emb.shape[0]} rows, expected {cfg.n_experts}")
    wx = x @ ag.as_tensor(params["proj"])
    wx_norm = ag.sqrt((wx * wx).sum(axis=-1, keepdims=True))
    if np.any(wx_norm.data == 0.0):
        raise ValueError("cosine router: projected token has zero norm")
    if cfg.cosine_norm == "row":
        e_norm = ag.sqrt((emb * emb).sum(axis=-1, keepdims=True))
    else:
        e_norm = ag.sqrt((emb * emb).sum())
    unit_wx = wx / wx_norm
    logits = (unit_wx @ (emb / e_norm).T) * (1.0 / cfg.cosine_tau)
    return RouteResult(logits, ag.softmax(logits, axis=-1), unit_wx, unit_wx[..., -1, :])


# ---------------------------------------------------------------------------
# gating and experts
# ---------------------------------------------------------------------------


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis; ties go to the lower index."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"K must lie in [1, {n}], got {k}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def top_k_mask(scores, k: int) -> np.ndarray:
    """Keep the ``k`` largest softmax values (no renormalization), zero the rest."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = top_k_indices(scores, k)
    out = np.zeros_like(scores)
    np.put_along_axis(out, idx, np.take_along_axis(scores, idx, axis=-1), axis=-1)
    return out


def inclusion_probability(clean_score, eta_k, sigma_noise: float):
    """P(expert stays in the top K under re-sampled gating noise)."""
    if sigma_noise <= 0:
        raise ValueError("sigma_noise must be positive")
    return 1.0 - normal_cdf((np.asarray(eta_k) - np.asarray(clean_score)) / sigma_noise)


def init_experts(cfg: MoEConfig, rng: np.random.Generator, hidden: int | None = None) -> dict[str, np.ndarray]:
    d, n = cfg.token_dim, cfg.n_experts
    h = 2 * d if hidden is None else hidden
    return {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(d), (n, d, h)),
        "b1": np.zeros((n, h)),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(h), (n, h, d)),
        "b2": np.zeros((n, d)),
    }


def expert_outputs(tokens, experts) -> Tensor:
    """Every expert applied to every token: (N, M, D) for tokens of shape (M, D)."""
    x = ag.as_tensor(tokens)
    w1, b1 = ag.as_tensor(experts["w1"]), ag.as_tensor(experts["b1"])
    w2, b2 = ag.as_tensor(experts["w2"]), ag.as_tensor(experts["b2"])
    n = w1.shape[0]
    h = ag.gelu(x.reshape((1,) + x.shape) @ w1 + b1.reshape(n, 1, -1))
    return h @ w2 + b2.reshape(n, 1, -1)


@dataclass
class RoutingOutcome:
    logits: np.ndarray  # (M, N)
    scores: np.ndarray  # (M, N) softmax
    weights: np.ndarray  # (M, N) top-K masked scores
    selected: np.ndarray  # (M, K) expert indices
    routing_feature: np.ndarray  # (B, R) class-token node of Norm(mix(.))


@dataclass
class BalanceStats:
    importance: Tensor  # (N,) sum of softmax scores over tokens
    load: Tensor  # (N,) sum of inclusion probabilities
    eta_k: np.ndarray  # (M,) K-th largest noisy score
    noise_std: float
    n_tokens: int

    @property
    def imp(self) -> np.ndarray:
        return self.importance.data

    @property
    def load_values(self) -> np.ndarray:
        return self.load.data


def moe_dispatch(tokens, logits, cfg: MoEConfig, experts, noise: np.random.Generator | None = None):
    """Gate flat tokens (M, D) with router logits (M, N); return (output, weights, scores, stats)."""
    x = ag.as_tensor(tokens)
    z = ag.as_tensor(logits)
    if experts["w1"].shape[0] != cfg.n_experts:
        raise ValueError(f"got {experts['w1'].shape[0]} experts, config says {cfg.n_experts}")
    scores = ag.softmax(z, axis=-1)
    idx = top_k_indices(scores.data, cfg.top_k)
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    weights = ag.where(mask, scores, 0.0)
    outs = expert_outputs(x, experts)  # (N, M, D)
    y = (outs * weights.T.reshape(weights.shape[1], weights.shape[0], 1)).sum(axis=0)

    # noise only perturbs the statistics path; the output above uses clean scores
    if noise is not None:
        noisy_scores = ag.softmax(z + cfg.noise_std * noise.standard_normal(z.shape), axis=-1)
    else:
        noisy_scores = scores
    kth = top_k_indices(noisy_scores.data, cfg.top_k)[:, -1]
    eta = noisy_scores[np.arange(scores.shape[0]), kth]
    p = 1.0 - ag.normal_cdf((eta.reshape(-1, 1) - scores) * (1.0 / cfg.noise_std))
    stats = BalanceStats(
        importance=scores.sum(axis=0),
        load=p.sum(axis=0),
        eta_k=eta.data,
        noise_std=cfg.noise_std,
        n_tokens=scores.shape[0],
    )
    return y, weights, scores, idx, stats


def moe_forward(
    tokens,
    cfg: MoEConfig,
    router,
    experts,
    graph: PatchGraph | None = None,
    noise: np.random.Generator | None = None,
):
    """GRMoE on tokens of shape (T, D) or (B, T, D).

    Returns (tokens_out, RoutingOutcome, BalanceStats, routing_feature tensor).
    """
    x = ag.as_tensor(tokens)
    if experts["w1"].shape[0] != cfg.n_experts:
        raise ValueError(f"got {experts['w1'].shape[0]} experts, config says {cfg.n_experts}")
    route = graph_route(x, graph, router, cfg)
    lead = x.shape[:-1]
    m = int(np.prod(lead))
    flat_x = x.reshape(m, cfg.token_dim)
    flat_z = route.logits.reshape(m, cfg.n_experts)
    y, weights, scores, idx, stats = moe_dispatch(flat_x, flat_z, cfg, experts, noise)
    rf = route.routing_feature
    outcome = RoutingOutcome(
        logits=flat_z.data,
        scores=scores.data,
        weights=weights.data,
        selected=idx,
        routing_feature=np.atleast_2d(rf.data),
    )
    return y.reshape(lead + (cfg.token_dim,)), outcome, stats, rf
