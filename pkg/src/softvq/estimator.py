"""scikit-learn flavored front door for the codec.

``fit`` trains the transform, codebook and code distribution on a stack of
uint8 images; ``transform`` maps images to compressed bitstreams and
``inverse_transform`` maps them back. Hyperparameters follow the estimator
contract (stored verbatim, learned state in trailing-underscore
attributes), so the class composes with sklearn tooling like ``clone`` and
``get_params``.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from softvq import codec
from softvq.checkpoint import load_checkpoint, model_checksum, save_checkpoint
from softvq.nets import NetConfig
from softvq.training import TrainConfig, train


def check_image_stack(X, folds=None, channels=None):
    """Validate and canonicalize a uint8 image stack to (n, H, W, C)."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected (n, H, W[, C]) images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image stack")
    if X.dtype != np.uint8:
        if not np.issubdtype(X.dtype, np.integer):
            raise ValueError(f"expected uint8 pixels, got dtype {X.dtype}")
        if X.min() < 0 or X.max() > 255:
            raise ValueError("integer pixels must lie in [0, 255]")
        X = X.astype(np.uint8)
    n, h, w, c = X.shape
    if folds is not None and (h % (1 << folds) or w % (1 << folds)):
        raise ValueError(f"{h}x{w} images are not divisible by 2^{folds}")
    if channels is not None and c != channels:
        raise ValueError(f"expected {channels}-channel images, got {c}")
    return X


def default_latent_channels(m):
    """Smallest multiple of m that is at least 8."""
    return m * max(1, math.ceil(8 / m))


class SoftVQCodec(BaseEstimator):
    """Learned transform codec: encoder, vector-quantized latent with k
    centers of dimension m, categorical entropy model and arithmetic coding.

    Parameters
    ----------
    k : codebook size (number of quantization centers).
    m : center dimension; m=1 is scalar quantization.
    folds : stride-2 downsampling stages in the transform.
    alpha : weight of the soft cross-entropy (rate pressure on the encoder
        and codebook); larger means lower bitrate, higher distortion.
    beta : weight of the hard cross-entropy training the entropy model.
    sigma : softmax sharpness of the quantization relaxation.
    latent_channels : channels of the latent image; must be divisible by m.
        Defaults to the smallest multiple of m that is at least 8.
    width : channels per transform stage.
    residual_blocks, skip_every : residual stack layout.
    epochs, batch_size, learning_rate, random_state : optimization knobs.

    Attributes
    ----------
    model_ : trained bundle used by transform / inverse_transform.
    history_ : per-epoch metric rows from fit.
    image_shape_ : (H, W, C) accepted by transform.
    """

    def __init__(self, k=32, m=8, folds=1, alpha=0.001, beta=1.0, sigma=1.0,
                 latent_channels=None, width=32, residual_blocks=2,
                 skip_every=3, epochs=15, batch_size=32, learning_rate=1e-3,
                 random_state=0):
        self.k = k
        self.m = m
        self.folds = folds
        self.alpha = alpha
        self.beta = beta
        self.sigma = sigma
        self.latent_channels = latent_channels
        self.width = width
        self.residual_blocks = residual_blocks
        self.skip_every = skip_every
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _net_config(self, h, w, c):
        latent = self.latent_channels
        if latent is None:
            latent = default_latent_channels(self.m)
        return NetConfig(
            height=h, width=w, channels=c,
            widths=(self.width,) * max(self.folds, 1),
            downsample_folds=self.folds,
            latent_channels=latent,
            num_residual_blocks=self.residual_blocks,
            skip_every=self.skip_every,
        )

    def _train_config(self):
        return TrainConfig(alpha=self.alpha, beta=self.beta, sigma=self.sigma,
                           k=self.k, m=self.m, epochs=self.epochs,
                           batch_size=self.batch_size,
                           base_lr=self.learning_rate, seed=self.random_state)

    def fit(self, X, y=None):
        """Train on a uint8 image stack of shape (n, H, W[, C])."""
        X = check_image_stack(X, folds=self.folds)
        n, h, w, c = X.shape
        net_cfg = self._net_config(h, w, c)
        self.model_, self.history_ = train(X, net_cfg, self._train_config())
        self.image_shape_ = (h, w, c)
        return self

    def _fitted_model(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this SoftVQCodec instance is not fitted yet")
        return self.model_

    def _check_fitted_stack(self, X):
        X = check_image_stack(X)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(
                f"images of shape {X.shape[1:]} do not match the fitted "
                f"shape {self.image_shape_}")
        return X

    def transform(self, X):
        """Compress each image; returns a list of bitstream byte strings."""
        model = self._fitted_model()
        X = self._check_fitted_stack(X)
        m32 = model.astype(np.float32)
        model_hash = model_checksum(m32)
        return [codec.compress(m32, img, model_hash) for img in X]

    def inverse_transform(self, blobs):
        """Decompress bitstreams back into a uint8 image stack."""
        model = self._fitted_model()
        m32 = model.astype(np.float32)
        model_hash = model_checksum(m32)
        images = [codec.decompress(m32, blob, model_hash) for blob in blobs]
        out = np.stack(images)
        return out if out.ndim == 4 else out[..., None]

    def evaluate(self, X):
        """Measured aggregate rate/distortion over an image stack."""
        model = self._fitted_model()
        X = check_image_stack(X, folds=self.folds, channels=self.image_shape_[2])
        return codec.evaluate_model(model, X)

    def score(self, X, y=None):
        """Negative mean squared error in 8-bit pixel units (higher is better)."""
        return -self.evaluate(X).mse

    def save(self, path):
        """Write the fitted model as a checkpoint."""
        return save_checkpoint(self._fitted_model(), path)

    @classmethod
    def from_checkpoint(cls, path):
        """Rebuild a fitted estimator around a saved checkpoint."""
        model = load_checkpoint(path)
        cfg = model.cfg
        est = cls(k=model.k, m=model.m, folds=cfg.downsample_folds,
                  sigma=model.sigma, latent_channels=cfg.latent_channels,
                  width=cfg.widths[-1],
                  residual_blocks=cfg.num_residual_blocks,
                  skip_every=cfg.skip_every)
        est.model_ = model
        est.history_ = []
        est.image_shape_ = (cfg.height, cfg.width, cfg.channels)
        return est
