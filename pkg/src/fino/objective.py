"""Training losses: reconstruction, content alignment, regression, noise correlation.

All L1 terms are per-element means, so the default weights do not depend on
patch resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_PATCH_EDGE = 4
DEFAULT_PATCH_STRIDE = 2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # reconstruction
    beta: float = 1.0  # content alignment
    gamma: float = 0.1  # noise correlation
    use_rec: bool = True
    use_cnt: bool = True
    use_noise: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossParts:
    reg: Tensor
    rec: Tensor | None = None
    cnt: Tensor | None = None
    noise: Tensor | None = None


@dataclass
class PatchMatrix:
    values: Tensor  # m×M
    patch_edge: int
    stride: int

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]


def _l1(a: Tensor, b: Tensor, op: str) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return T.l1_mean(T.sub(a, b))


def loss_rec(n_hat, n, x_hat, x) -> Tensor:
    """|n_hat - n| + |x_hat - x| (each a mean absolute error)."""
    return T.add(_l1(T.as_tensor(n_hat), T.as_tensor(n), "loss_rec"),
                 _l1(T.as_tensor(x_hat), T.as_tensor(x), "loss_rec"))


def loss_cnt(zc_x, zc_y) -> Tensor:
    return _l1(T.as_tensor(zc_x), T.as_tensor(zc_y), "loss_cnt")


def loss_reg(y_tilde, x) -> Tensor:
    return _l1(T.as_tensor(y_tilde), T.as_tensor(x), "loss_reg")


@lru_cache(maxsize=64)
def patch_index(channels: int, height: int, width: int, patch_edge: int, stride: int,
                joint: bool = False) -> np.ndarray:
    """Flat indices into a C×H×W block; column j lists the pixels of patch j.

    By default columns enumerate channel-major, then patch row, then patch
    column, and rows enumerate a patch's pixels in row-major order.  With
    ``joint`` each column stacks all channels (m = C·edge²).
    """
    if patch_edge < 1 or stride < 1:
        raise ValueError(f"patch_edge and stride must be >= 1, got {patch_edge}, {stride}")
    if patch_edge > min(height, width):
        raise ValueError(f"patch_edge {patch_edge} larger than image {height}×{width}")
    rows = np.arange(0, height - patch_edge + 1, stride)
    cols = np.arange(0, width - patch_edge + 1, stride)
    di, dj = np.meshgrid(np.arange(patch_edge), np.arange(patch_edge), indexing="ij")
    offsets = (di * width + dj).reshape(-1)
    r, q = np.meshgrid(rows, cols, indexing="ij")
    starts = (r * width + q).reshape(-1)
    chan = np.arange(channels) * height * width
    if joint:
        offsets = (chan[:, None] + offsets[None, :]).reshape(-1)
    else:
        starts = (chan[:, None] + starts[None, :]).reshape(-1)
    idx = offsets[:, None] + starts[None, :]
    idx.setflags(write=False)
    return idx


def extract_patches(n_hat, patch_edge: int = DEFAULT_PATCH_EDGE, stride: int = DEFAULT_PATCH_STRIDE,
                    joint: bool = False) -> PatchMatrix:
    """Overlapping patches of a 1×C×H×W tensor as columns of an m×M matrix.

    Channels are independent noise realizations unless ``joint`` is set.
    """
    n_hat = T.as_tensor(n_hat)
    if n_hat.ndim == 3:
        n_hat = T.reshape(n_hat, (1,) + n_hat.shape)
    if n_hat.ndim != 4 or n_hat.shape[0] != 1:
        raise ValueError(f"extract_patches expects 1×C×H×W, got shape {n_hat.shape}")
    _, c, h, w = n_hat.shape
    idx = patch_index(c, h, w, patch_edge, stride, joint)
    return PatchMatrix(T.gather(n_hat, idx), patch_edge, stride)


def noise_correlation(patches: PatchMatrix) -> Tensor:
    """(1/M) * sum_j N_j N_j^T over patch columns."""
    v = patches.values
    if v.shape[1] < 1:
        raise ValueError("noise_correlation needs at least one patch")
    return T.scale(T.matmul(v, T.transpose2d(v)), 1.0 / v.shape[1])


def loss_noise(sigma_matrix, sigma: float) -> Tensor:
    """Squared Frobenius distance between the correlation matrix and sigma^2 I."""
    s = T.as_tensor(sigma_matrix)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"loss_noise expects a square matrix, got shape {s.shape}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    target = Tensor(np.eye(s.shape[0], dtype=s.dtype) * (sigma * sigma), dtype=s.dtype)
    return T.frobenius_sq(T.sub(s, target))


def batch_noise_loss(n_hat: Tensor, sigmas, patch_edge: int = DEFAULT_PATCH_EDGE,
                     stride: int = DEFAULT_PATCH_STRIDE, joint: bool = False) -> Tensor:
    """Mean over the batch of each sample's noise correlation loss at its own sigma."""
    sigmas = list(np.broadcast_to(np.asarray(sigmas, dtype=float), (n_hat.shape[0],)))
    pieces = T.batch_split(n_hat, [1] * n_hat.shape[0]) if n_hat.shape[0] > 1 else [n_hat]
    total = None
    for piece, sigma in zip(pieces, sigmas):
        term = loss_noise(noise_correlation(extract_patches(piece, patch_edge, stride, joint)), float(sigma))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(pieces))


def total_loss(parts: LossParts, w: LossWeights) -> Tensor:
    """reg + alpha*rec + beta*cnt + gamma*noise; disabled or missing terms add nothing."""
    total = parts.reg
    for part, weight, enabled in (
        (parts.rec, w.alpha, w.use_rec),
        (parts.cnt, w.beta, w.use_cnt),
        (parts.noise, w.gamma, w.use_noise),
    ):
        if enabled and part is not None:
            total = T.add(total, T.scale(part, weight))
    return total
