"""Invertible flow: Haar squeeze + affine coupling stacks.

Layout conventions (N×C×H×W):

* ``haar_forward`` turns C channels into 4C: the C low-pass channels first,
  then three groups of C detail channels (horizontal, vertical, diagonal).
* A coupling layer splits channels into ``l`` (first ceil(C/2)) and ``h``
  (the rest).
* The latent code keeps the first 3/4 of its channels as clean content
  and the last 1/4 as noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCALE_CLAMP = 2.0
CLEAN_FRACTION = 0.75


# -- Haar squeeze ----------------------------------------------------------

def _haar_fwd_np(x: np.ndarray) -> np.ndarray:
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    return np.concatenate(
        [(a + b + c + d) * 0.5, (a - b + c - d) * 0.5, (a + b - c - d) * 0.5, (a - b - c + d) * 0.5],
        axis=1,
    )


def _haar_inv_np(u: np.ndarray) -> np.ndarray:
    n, c4, h, w = u.shape
    c = c4 // 4
    ll, d1, d2, d3 = u[:, :c], u[:, c:2 * c], u[:, 2 * c:3 * c], u[:, 3 * c:]
    x = np.empty((n, c, 2 * h, 2 * w), dtype=u.dtype)
    x[:, :, 0::2, 0::2] = (ll + d1 + d2 + d3) * 0.5
    x[:, :, 0::2, 1::2] = (ll - d1 + d2 - d3) * 0.5
    x[:, :, 1::2, 0::2] = (ll + d1 - d2 - d3) * 0.5
    x[:, :, 1::2, 1::2] = (ll - d1 - d2 + d3) * 0.5
    return x


def haar_forward(x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"haar_forward expects N×C×H×W, got shape {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"haar_forward: spatial extents must be even, got {x.shape[2]}×{x.shape[3]}")
    # orthonormal, so the adjoint is the inverse
    return Tensor._make(_haar_fwd_np(x.data), (x,), lambda g: (_haar_inv_np(g),))


def haar_inverse(u) -> Tensor:
    u = T.as_tensor(u)
    if u.ndim != 4:
        raise ValueError(f"haar_inverse expects N×4C×H×W, got shape {u.shape}")
    if u.shape[1] % 4:
        raise ValueError(f"haar_inverse: channel count {u.shape[1]} not divisible by 4")
    return Tensor._make(_haar_inv_np(u.data), (u,), lambda g: (_haar_fwd_np(g),))


# -- subnetworks -----------------------------------------------------------

@dataclass
class SubNet:
    """conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv3x3."""

    weights: list[Tensor]
    biases: list[Tensor]

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = T.conv2d(x, w, b, padding=(w.shape[-1] - 1) // 2)
            if i != last:
                x = T.relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def make_subnet(c_in: int, c_out: int, width: int, rng: np.random.Generator, *,
                zero_last: bool = True, last_scale: float = 0.1, dtype=np.float64, kernel: int = 3) -> SubNet:
    dims = [c_in, width, width, c_out]
    weights, biases = [], []
    for i in range(3):
        fan_in = dims[i] * kernel * kernel
        shape = (dims[i + 1], dims[i], kernel, kernel)
        if i == 2 and zero_last:
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if i == 2:
                w *= last_scale
        weights.append(Tensor(w.astype(dtype), requires_grad=True))
        biases.append(Tensor(np.zeros(dims[i + 1], dtype=dtype), requires_grad=True))
    return SubNet(weights, biases)


# -- coupling --------------------------------------------------------------

@dataclass
class CouplingParams:
    phi1: SubNet  # h -> shift for l
    phi2: SubNet  # l -> log-scale pre-activation for h
    phi3: SubNet  # l -> shift for h
    split_point: int

    def parameters(self) -> list[Tensor]:
        return self.phi1.parameters() + self.phi2.parameters() + self.phi3.parameters()


def positive_scale(pre: Tensor, clamp: float = SCALE_CLAMP) -> Tensor:
    """exp(c * tanh(pre / c)); every element lies in [e^-c, e^c]."""
    return T.exp(T.scale(T.tanh(T.scale(pre, 1.0 / clamp)), clamp))


def coupling_forward(u: Tensor, p: CouplingParams) -> Tensor:
    if u.shape[1] < 2:
        raise ValueError(f"coupling needs at least 2 channels, got {u.shape[1]}")
    l, h = T.channel_split(u, p.split_point)
    l_next = T.add(l, p.phi1(h))
    s = positive_scale(p.phi2(l_next))
    h_next = T.add(T.mul(s, h), p.phi3(l_next))
    return T.channel_concat([l_next, h_next])


def coupling_inverse(u_next: Tensor, p: CouplingParams) -> Tensor:
    l_next, h_next = T.channel_split(u_next, p.split_point)
    s = positive_scale(p.phi2(l_next))
    h = T.div(T.sub(h_next, p.phi3(l_next)), s)
    l = T.sub(l_next, p.phi1(h))
    return T.channel_concat([l, h])


# -- model -----------------------------------------------------------------

@dataclass
class FlowModel:
    input_channels: int
    num_blocks: int
    layers_per_block: int
    hidden_width: int
    blocks: list[list[CouplingParams]] = field(default_factory=list)
    dtype: type = np.float64

    @property
    def latent_channels(self) -> int:
        return self.input_channels * 4**self.num_blocks

    @property
    def clean_channels(self) -> int:
        return clean_channel_count(self.latent_channels)

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for b, block in enumerate(self.blocks):
            for k, cp in enumerate(block):
                for phi_name in ("phi1", "phi2", "phi3"):
                    net: SubNet = getattr(cp, phi_name)
                    for j, (w, bias) in enumerate(zip(net.weights, net.biases)):
                        named[f"block{b}.layer{k}.{phi_name}.conv{j}.weight"] = w
                        named[f"block{b}.layer{k}.{phi_name}.conv{j}.bias"] = bias
        for name, t in named.items():
            t.name = name
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())


def clean_channel_count(total: int) -> int:
    if total < 2:
        raise ValueError(f"latent needs at least 2 channels, got {total}")
    return min(max(int(round(CLEAN_FRACTION * total)), 1), total - 1)


def init_model(input_channels: int = 1, num_blocks: int = 2, layers_per_block: int = 4,
               hidden_width: int = 16, seed: int = 0, *, identity_init: bool = True,
               last_layer_scale: float = 0.1, dtype=np.float64) -> FlowModel:
    """Build a flow; with ``identity_init`` every coupling starts as the identity.

    Otherwise each subnetwork's final conv is He-initialized and multiplied
    by ``last_layer_scale``.
    """
    rng = np.random.default_rng(seed)
    model = FlowModel(input_channels, num_blocks, layers_per_block, hidden_width, dtype=dtype)
    channels = input_channels
    for _ in range(num_blocks):
        channels *= 4
        n_l = (channels + 1) // 2
        n_h = channels - n_l
        block = []
        for _ in range(layers_per_block):
            kw = dict(zero_last=identity_init, last_scale=last_layer_scale, dtype=dtype)
            block.append(CouplingParams(
                phi1=make_subnet(n_h, n_l, hidden_width, rng, **kw),
                phi2=make_subnet(n_l, n_h, hidden_width, rng, **kw),
                phi3=make_subnet(n_l, n_h, hidden_width, rng, **kw),
                split_point=n_l,
            ))
        model.blocks.append(block)
    model.named_parameters()
    return model


@dataclass
class LatentCode:
    z: Tensor
    clean_channels: int

    def __post_init__(self):
        if not 0 < self.clean_channels < self.z.shape[1]:
            raise ValueError(f"clean_channels={self.clean_channels} outside (0, {self.z.shape[1]})")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.z.shape

    def split(self) -> tuple[Tensor, Tensor]:
        return T.channel_split(self.z, self.clean_channels)

    @property
    def clean(self) -> Tensor:
        return self.split()[0]

    @property
    def noise(self) -> Tensor:
        return self.split()[1]

    @classmethod
    def join(cls, clean: Tensor, noise: Tensor) -> "LatentCode":
        return cls(T.channel_concat([clean, noise]), clean.shape[1])


def _check_divisible(shape, num_blocks: int) -> None:
    f = 2**num_blocks
    h, w = shape[2], shape[3]
    if h % f or w % f:
        ph, pw = (-h) % f, (-w) % f
        raise ValueError(
            f"input {h}×{w} not divisible by 2^{num_blocks}={f}; pad by ({ph}, {pw}) pixels "
            f"to {h + ph}×{w + pw} (reflect padding is applied by denoise())"
        )


def flow_forward(x, m: FlowModel) -> LatentCode:
    u = T.as_tensor(x)
    if u.ndim != 4:
        raise ValueError(f"flow_forward expects N×C×H×W, got shape {u.shape}")
    if u.shape[1] != m.input_channels:
        raise ValueError(f"flow_forward: input has {u.shape[1]} channels, model expects {m.input_channels}")
    _check_divisible(u.shape, m.num_blocks)
    for block in m.blocks:
        u = haar_forward(u)
        for cp in block:
            u = coupling_forward(u, cp)
    return LatentCode(u, m.clean_channels)


def flow_inverse(z, m: FlowModel) -> Tensor:
    u = z.z if isinstance(z, LatentCode) else T.as_tensor(z)
    if u.ndim != 4 or u.shape[1] != m.latent_channels:
        raise ValueError(f"flow_inverse: latent shape {u.shape} inconsistent with model "
                         f"({m.latent_channels} latent channels)")
    for block in reversed(m.blocks):
        for cp in reversed(block):
            u = coupling_inverse(u, cp)
        u = haar_inverse(u)
    return u


def latent_swap(a: LatentCode, b: LatentCode) -> tuple[LatentCode, LatentCode]:
    """(clean of a + noise of b, clean of b + noise of a)."""
    if a.shape != b.shape or a.clean_channels != b.clean_channels:
        raise ValueError(f"latent_swap: mismatched codes {a.shape}/{a.clean_channels} "
                         f"vs {b.shape}/{b.clean_channels}")
    ac, an = a.split()
    bc, bn = b.split()
    return LatentCode.join(ac, bn), LatentCode.join(bc, an)
