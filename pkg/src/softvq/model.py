"""The trained artifact: networks, codebook and code distribution together.

Everything trainable lives in one ParamStore so the checkpoint format can
serialize the whole model as named tensors plus a small config block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softvq.entropy import CategoricalModel
from softvq.nets import Decoder, Encoder, NetConfig, ParamStore
from softvq.quantizer import Codebook

CODEBOOK_PARAM = "codebook"
LOGITS_PARAM = "entropy.logits"


@dataclass
class CodecModel:
    cfg: NetConfig
    k: int
    m: int
    sigma: float
    params: ParamStore
    encoder: Encoder
    decoder: Decoder
    codebook: Codebook
    entropy: CategoricalModel

    @property
    def codes_per_image(self):
        return self.cfg.latent_dim // self.m

    def astype(self, dtype):
        """Same model with every parameter cast to dtype (f32 inference)."""
        return assemble(self.cfg, self.k, self.m, self.sigma, self.params.astype(dtype))


def _validate(cfg, k, m):
    if k < 2:
        raise ValueError("k must be >= 2")
    if m < 1 or cfg.latent_channels % m != 0:
        raise ValueError(
            f"group size m={m} must divide latent channels {cfg.latent_channels}")


def new_model(cfg, k, m, sigma, seed):
    """Fresh model; the codebook starts as small noise and is re-seeded from
    data by the trainer before the first step."""
    _validate(cfg, k, m)
    rng = np.random.default_rng(seed)
    store = ParamStore()
    encoder = Encoder(cfg, store, rng)
    decoder = Decoder(cfg, store, rng)
    store.obtain(CODEBOOK_PARAM, (m, k), lambda s: rng.normal(0.0, 0.1, s))
    store.obtain(LOGITS_PARAM, (k,), np.zeros)
    return assemble(cfg, k, m, sigma, store)


def assemble(cfg, k, m, sigma, store):
    """Bind a model around an existing (e.g. checkpoint-loaded) store."""
    _validate(cfg, k, m)
    rng = np.random.default_rng(0)  # unused when the store is complete
    encoder = Encoder(cfg, store, rng)
    decoder = Decoder(cfg, store, rng)
    codebook = Codebook(store[CODEBOOK_PARAM])
    entropy = CategoricalModel(k, store[LOGITS_PARAM])
    return CodecModel(cfg=cfg, k=k, m=m, sigma=float(sigma), params=store,
                      encoder=encoder, decoder=decoder, codebook=codebook,
                      entropy=entropy)
