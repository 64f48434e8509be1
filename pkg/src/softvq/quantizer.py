"""Vector quantization over a learned codebook.

Latents are grouped into m-dimensional columns, each column is snapped to
its nearest codebook column (transmitted as the column index), and two soft
relaxations carry gradients: a softmax-weighted mixture of codebook columns
standing in for the hard snap, and the softmax weights themselves standing
in for the one-hot code assignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softvq import autodiff as ad
from softvq.autodiff import Tensor

NORM_EPS = 1e-12  # keeps the distance gradient finite when a column hits a center


@dataclass
class Codebook:
    """m x k matrix of quantization centers, one per column."""

    embed: Tensor

    def __post_init__(self):
        if self.embed.ndim != 2 or self.embed.shape[1] < 2:
            raise ValueError(f"codebook needs shape (m, k >= 2), got {self.embed.shape}")

    @property
    def m(self):
        return self.embed.shape[0]

    @property
    def k(self):
        return self.embed.shape[1]


def init_codebook(latent_cols, k, rng, dtype=np.float64):
    """Seed k centers from observed latent columns, k-means++ style.

    The first center is drawn uniformly; each further center is drawn with
    probability proportional to squared distance from the nearest one chosen
    so far. No Lloyd iterations; training moves the centers afterwards.
    """
    cols = np.asarray(latent_cols, dtype=np.float64)
    m, n = cols.shape
    centers = np.empty((m, k), dtype=np.float64)
    centers[:, 0] = cols[:, rng.integers(n)]
    d2 = ((cols - centers[:, [0]]) ** 2).sum(axis=0)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all columns coincide with chosen centers: jitter to keep k distinct
            centers[:, j] = centers[:, j - 1] + rng.normal(0, 1e-3, m)
        else:
            idx = rng.choice(n, p=d2 / total)
            centers[:, j] = cols[:, idx]
        d2 = np.minimum(d2, ((cols - centers[:, [j]]) ** 2).sum(axis=0))
    return Codebook(Tensor(centers.astype(dtype), requires_grad=True))


def reshape_latent(z, m):
    """Group a flat latent into an m x (d/m) matrix, consecutive entries
    forming columns: [1..6] with m=2 becomes [[1,3,5],[2,4,6]]."""
    d = z.size
    if d % m != 0:
        raise ValueError(f"latent length {d} not divisible by group size {m}")
    return z.reshape(d // m, m).transpose(1, 0)


def flatten_latent(Z):
    """Inverse of reshape_latent."""
    m, n = Z.shape
    return Z.transpose(1, 0).reshape(m * n)


def latent_to_columns(latent, m):
    """NCHW latent batch -> m x (N*H*W*C/m) column matrix.

    Channels vary fastest in the flattening, so each column holds m
    consecutive channels of one spatial position; with m equal to the
    channel count, a column is exactly one position's channel vector.
    """
    n, c, h, w = latent.shape
    if c % m != 0:
        raise ValueError(f"latent channels {c} not divisible by group size {m}")
    flat = latent.transpose(0, 2, 3, 1).reshape(n * h * w * c)
    return reshape_latent(flat, m)


def columns_to_latent(Z, batch_shape):
    """Inverse of latent_to_columns for the given NCHW shape."""
    n, c, h, w = batch_shape
    flat = flatten_latent(Z)
    return flat.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def _sq_distances(Z, E):
    """Differentiable (d/m) x k matrix of squared distances ||z_i - e_j||^2."""
    n = Z.shape[1]
    k = E.shape[1]
    zz = ad.sq_norm_cols(Z).reshape(n, 1)
    ee = ad.sq_norm_cols(E).reshape(1, k)
    ones_k = Tensor(np.ones((1, k), dtype=Z.dtype))
    ones_n = Tensor(np.ones((n, 1), dtype=Z.dtype))
    cross = ad.matmul(Z.transpose(1, 0), E)
    return ad.matmul(zz, ones_k) + ad.matmul(ones_n, ee) - ad.scale(cross, 2.0)


def _distances(Z, E, squared=False):
    d2 = _sq_distances(Z, E)
    if squared:
        return d2
    # relu guards the tiny negative residue that cancellation can leave
    return ad.sqrt(ad.relu(d2) + Tensor(np.asarray(NORM_EPS, dtype=Z.dtype)))


def _soft_weights(Z, codebook, sigma, squared=False):
    dist = _distances(Z, codebook.embed, squared=squared)
    return ad.softmax(ad.scale(dist, -float(sigma)), axis=1)


def quantize_hard(Z, codebook):
    """Nearest-center snap: codes plus the snapped column matrix.

    Ties break toward the lowest index. Not differentiable; callers pair it
    with straight_through for training.
    """
    Zv = Z.data if isinstance(Z, Tensor) else np.asarray(Z)
    Ev = codebook.embed.data
    zz = (Zv * Zv).sum(axis=0)[:, None]
    ee = (Ev * Ev).sum(axis=0)[None, :]
    d2 = zz + ee - 2.0 * (Zv.T @ Ev)
    codes = np.argmin(d2, axis=1)
    return codes, Ev[:, codes]


def quantize_soft(Z, codebook, sigma, squared=False):
    """Softmax-weighted mixture of codebook columns; differentiable in both."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    weights = _soft_weights(Z, codebook, sigma, squared=squared)
    return ad.matmul(codebook.embed, weights.transpose(1, 0))


def soft_assignment(Z, codebook, sigma, squared=False):
    """(d/m) x k row-stochastic soft code-assignment probabilities."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return _soft_weights(Z, codebook, sigma, squared=squared)


def straight_through(z_hat, z_tilde):
    """Hard values forward, soft-path gradient backward."""
    return ad.straight_through(z_hat, z_tilde)


def hard_assignment(codes, k):
    """One-hot rows for a code vector."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= k):
        raise ValueError(f"code out of range for k={k}")
    onehot = np.zeros((codes.size, k), dtype=np.float64)
    onehot[np.arange(codes.size), codes] = 1.0
    return onehot


def dequantize(codes, codebook):
    """Look the codes back up in the codebook: column i is E[:, codes[i]]."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= codebook.k):
        raise ValueError(f"code out of range for k={codebook.k}")
    return codebook.embed.data[:, codes]
