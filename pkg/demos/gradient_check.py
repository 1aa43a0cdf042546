# Central finite differences against the hand-written backward pass.
import numpy as np

from dsd.losses import contrastive_loss
from dsd.numerics import finite_diff_gradient, relative_error

rng = np.random.default_rng(1)
unit = lambda v: v / np.linalg.norm(v, axis=-1, keepdims=True)

known = unit(rng.normal(size=(4, 16)))
unknown = unit(rng.normal(size=(2, 16)))
f = unit(rng.normal(size=16))

loss, grad = contrastive_loss(f, known[2], known, unknown)
fd = finite_diff_gradient(lambda v: contrastive_loss(v, known[2], known, unknown)[0], f)
print(f"contrastive loss {loss:.4f}, rel err vs FD {relative_error(grad, fd):.2e}")

# same check through the whole encoder, using the autograd tensors
from dsd.encoder import EncoderConfig, encode, init_params
from dsd.grmoe import MoEConfig
from dsd.losses import contrastive_loss_batch

cfg = EncoderConfig(image_shape=(1, 4, 4), patch_size=2, depth=2, moe_layers=(0, 1), routing_layer=1,
                    moe=MoEConfig(n_experts=3, top_k=2, token_dim=8, routing_dim=4))
params = init_params(cfg, rng)
x = rng.normal(size=(3, 1, 4, 4))
protos = unit(rng.normal(size=(3, 8)))
pos = np.array([0, 1, 2])  # index of each sample's positive prototype


def loss_of(p):
    return contrastive_loss_batch(encode(x, cfg, p).f, protos, pos)


from dsd.autograd import Tensor

tp = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
loss_of(tp).backward()
for name in ("embed.w", "blk0.router.att", "blk1.experts.w1", "cls"):
    analytic = tp[name].grad
    numeric = finite_diff_gradient(lambda v: float(loss_of({**params, name: v}).data), params[name])
    print(f"encoder dL/d[{name}] rel err {relative_error(analytic, numeric):.2e}")
