"""Central finite-difference audits of reverse-mode gradients.

The numerical side only ever calls the forward computation under
``no_grad``, so it shares nothing with the backward closures it checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .flow import FlowModel, init_model
from .objective import LossWeights
from .tensor import Tensor

DEFAULT_H = 1e-6
NORM_FLOOR = 1e-300


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||analytic - numeric||_2 / ||numeric||_2 over one parameter tensor.

    Taken norm-wise because a loss near 0.5 resolves central differences
    only to about ulp(0.5) / 2h ~ 5e-11 per entry, which swamps entries
    whose true gradient is below ~1e-5.  Identical zero gradients give 0.
    """
    diff = float(np.linalg.norm(analytic - numeric))
    if diff == 0.0:
        return 0.0
    return diff / max(float(np.linalg.norm(numeric)), NORM_FLOOR)


@dataclass
class GradAudit:
    worst: dict[str, float]  # norm-wise relative error per parameter tensor
    max_abs: dict[str, float]  # largest entry-wise absolute deviation
    checked: int

    @property
    def max_error(self) -> float:
        return max(self.worst.values()) if self.worst else 0.0

    def worst_parameter(self) -> str:
        return max(self.worst, key=self.worst.get)


def check_function(build: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = DEFAULT_H) -> GradAudit:
    """Compare ``build().backward()`` gradients of each tensor with finite differences."""
    for t in tensors.values():
        t.grad = None
    loss = build()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    def f() -> float:
        with T.no_grad():
            return build().item()

    worst, max_abs, count = {}, {}, 0
    for name, t in tensors.items():
        num = numerical_grad(f, t.data, h)
        worst[name] = relative_error(analytic[name], num)
        max_abs[name] = float(np.abs(analytic[name] - num).max())
        count += t.size
    return GradAudit(worst, max_abs, count)


def tiny_problem(seed: int = 0, *, num_blocks: int = 1, layers: int = 2, width: int = 4,
                 size: int = 8, channels: int = 1, batch: int = 2, sigma: float = 25 / 255):
    """Random-initialized model plus a fixed batch (x, y, n, sigmas, z_r) for audits."""
    model = init_model(channels, num_blocks, layers, width, seed=seed, identity_init=False)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(0.1, 0.9, size=(batch, channels, size, size))
    n = rng.standard_normal(x.shape) * sigma
    y = x + n
    lat = 2**num_blocks
    noise_c = model.latent_channels - model.clean_channels
    z_r = rng.standard_normal((batch, noise_c, size // lat, size // lat))
    return model, (x, y, n, np.full(batch, sigma), z_r)


def audit_full_loss(model: FlowModel, batch, weights: LossWeights | None = None, h: float = DEFAULT_H,
                    patch_edge: int = 4, stride: int = 2) -> GradAudit:
    """Gradient audit of the complete training objective over every model parameter."""
    from .trainer import compute_losses

    weights = weights or LossWeights()
    x, y, n, sigmas, z_r = batch

    def build() -> Tensor:
        total, _ = compute_losses(model, x, y, n, sigmas, z_r, weights, patch_edge=patch_edge, stride=stride)
        return total

    return check_function(build, model.named_parameters(), h)
