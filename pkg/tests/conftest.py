import dataclasses
import itertools
import time

import numpy as np
import pytest

from dsd.autograd import Tensor
from dsd.config import DetectConfig, RunConfig, TrainConfig
from dsd.data import SyntheticConfig
from dsd.encoder import EncoderConfig
from dsd.encoder import encode, init_params
from dsd.grmoe import MoEConfig
from dsd.losses import contrastive_loss_batch, importance_loss, load_loss
from dsd.numerics import finite_diff_gradient, relative_error


def tiny_encoder(depth=2, router_kind="graph_gat", n_experts=3, top_k=2, **kw) -> EncoderConfig:
    """1x4x4 images, 2x2 patches: 4 patch tokens plus the class token."""
    moe = MoEConfig(n_experts=n_experts, top_k=top_k, token_dim=8, routing_dim=4, router_kind=router_kind)
    layers = kw.pop("moe_layers", tuple(range(depth)))
    return EncoderConfig(
        image_shape=(1, 4, 4),
        patch_size=2,
        depth=depth,
        moe_layers=layers,
        routing_layer=kw.pop("routing_layer", layers[-1]),
        moe=moe,
        **kw,
    )


def small_run(pretrain=2, adapt=2, per_class=10, seed=0, **train_kw) -> RunConfig:
    """Fast end-to-end configuration: 2-layer encoder on the default 16x16 images."""
    data = SyntheticConfig(per_class=per_class, seed=seed)
    moe = MoEConfig(token_dim=16, routing_dim=8)
    model = EncoderConfig(depth=2, moe_layers=(0, 1), routing_layer=1, moe=moe)
    train = TrainConfig(pretrain_epochs=pretrain, adapt_epochs=adapt, seed=seed, **train_kw)
    return RunConfig(data, model, train, DetectConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def with_train(cfg: RunConfig, **kw) -> RunConfig:
    return cfg.replace(train=dataclasses.replace(cfg.train, **kw))


def fd_check(params, loss_fn, n_coords=12, seed=0):
    """Analytic gradient of ``loss_fn`` w.r.t. each parameter versus central differences."""
    tp = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss_fn(tp).backward()
    r = np.random.default_rng(seed)
    worst = 0.0
    for name, v in params.items():
        flat = v.reshape(-1)
        coords = r.choice(flat.size, size=min(n_coords, flat.size), replace=False)

        def f(sub, name=name, coords=coords):
            p = {k: a.copy() for k, a in params.items()}
            p[name].reshape(-1)[coords] = sub
            return float(loss_fn(p).data)

        fd = finite_diff_gradient(f, flat[coords])
        grad = tp[name].grad if tp[name].grad is not None else np.zeros_like(v)
        worst = max(worst, relative_error(grad.reshape(-1)[coords], fd))
    return worst


def unit(rows):
    rows = np.asarray(rows, dtype=float)
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def blobs(centers, per, spread, rng):
    """``per`` noisy unit vectors around each (normalized) centre, with their blob ids."""
    centers = unit(centers)
    pts = np.concatenate([c + spread * rng.normal(size=(per, centers.shape[1])) for c in centers])
    return unit(pts), np.repeat(np.arange(len(centers)), per)


def two_partition_optimum(x):
    """Minimum spherical inertia over every split of unit rows ``x`` into two nonempty parts."""
    n = len(x)
    best = np.inf
    for mask in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + mask)  # first point pinned to part 0
        if lab.min() == lab.max():
            continue
        # the best unit centroid of a part is its normalized sum, giving sum(x.c) = |sum x|
        inertia = n - sum(np.linalg.norm(x[lab == p].sum(axis=0)) for p in (0, 1))
        best = min(best, inertia)
    return best


def encoder_loss(kind, cfg, x, protos, pos, noise_seed=0):
    """Scalar loss of a 2-layer encoder; the noise stream is replayed on every call."""

    def loss(p):
        res = encode(x, cfg, p, noise=np.random.default_rng(noise_seed))
        if kind == "con":
            return contrastive_loss_batch(res.f, protos, pos)
        stats = res.stats
        fn = importance_loss if kind == "imp" else load_loss
        return sum((fn(s) for s in stats), Tensor(0.0)) * (1.0 / len(stats))

    return loss


def encoder_case(seed, router_kind="graph_gat"):
    r = np.random.default_rng(seed)
    cfg = tiny_encoder(router_kind=router_kind)
    p = init_params(cfg, r)
    # perturb the affine norms away from identity so their gradients are generic
    for k in p:
        if k.endswith(".scale") or k.endswith(".shift") or k.endswith("norm_scale") or k.endswith("norm_shift"):
            p[k] = p[k] + 0.1 * r.normal(size=p[k].shape)
    # at the 0.02 init scale the class token is nearly constant going into layer norm,
    # where central differences with eps=1e-5 carry truncation error above 1e-4
    p["cls"] = r.normal(0.0, 0.5, p["cls"].shape)
    p["pos"] = r.normal(0.0, 0.5, p["pos"].shape)
    x = r.normal(size=(3, 1, 4, 4))
    protos = r.normal(size=(5, 8))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return cfg, p, x, protos, r.integers(0, 5, size=3)


@pytest.fixture(scope="session")
def default_runs():
    """compare_detection on the default configuration for seeds 0-4, with wall time.

    Shared by the end-to-end, balance and pretraining checks; takes ~10 minutes.
    """
    from dsd.experiment import compare_detection

    t0 = time.perf_counter()
    runs = [compare_detection(RunConfig(), seed) for seed in range(5)]
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def gamma0_runs():
    """Full default runs with the balance weight set to 0, seeds 0-2."""
    from dsd.data import generate
    from dsd.pipeline import importance_cv_per_layer, train

    out = []
    for seed in range(3):
        cfg = with_train(RunConfig().with_seed(seed), gamma=0.0)
        split = generate(cfg.data)
        out.append(importance_cv_per_layer(train(cfg, split, evaluate_each_epoch=False), split.target_x))
    return out
