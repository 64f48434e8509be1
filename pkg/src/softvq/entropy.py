"""Learned categorical code distribution and its cross-entropy losses.

A single shared logit vector models all code positions identically, which
is exactly the i.i.d. assumption the downstream arithmetic coder needs. The
hard cross-entropy trains the logits; the soft cross-entropy treats them as
frozen and pushes its gradient back into whatever produced the soft
assignments (encoder and codebook).

All values are in nats; convert at reporting boundaries only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from softvq import autodiff as ad
from softvq.autodiff import Tensor
from softvq.quantizer import hard_assignment


class CategoricalModel:
    """Trainable logits over k code symbols."""

    def __init__(self, k, logits=None, dtype=np.float64):
        if k < 2:
            raise ValueError("need at least two symbols")
        if logits is None:
            logits = np.zeros(k, dtype=dtype)
        if not isinstance(logits, Tensor):
            logits = Tensor(np.asarray(logits, dtype=dtype), requires_grad=True)
        if logits.shape != (k,):
            raise ValueError(f"logits shape {logits.shape} != ({k},)")
        self.k = k
        self.logits = logits

    def probs(self):
        """Current q as a float64 probability vector (strictly positive)."""
        z = self.logits.data.astype(np.float64)
        z -= z.max()
        e = np.exp(z)
        return e / e.sum()

    def log_probs(self):
        """Differentiable log q as a (k, 1) column."""
        return ad.log_softmax(self.logits).reshape(self.k, 1)


def hard_xent(codes, model):
    """Mean -log q over the code elements; gradient reaches the logits only."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size == 0:
        raise ValueError("empty code vector")
    if codes.min() < 0 or codes.max() >= model.k:
        raise ValueError(f"code out of range for k={model.k}")
    onehot = Tensor(hard_assignment(codes, model.k).astype(model.logits.dtype))
    return ad.scale(ad.matmul(onehot, model.log_probs()).mean(), -1.0)


def soft_xent(assignments, model):
    """Mean -sum_a P[j,a] log q(a) with q frozen; gradient reaches the
    producers of the assignments, never the logits."""
    logq = ad.stop_gradient(model.log_probs())
    return ad.scale(ad.matmul(assignments, logq).mean(), -1.0)


def model_entropy(model):
    """H(q) in nats, with 0 log 0 taken as 0."""
    return entropy(model.probs())


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def cross_entropy(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(q[mask])))


def kl_divergence(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def xent_decomposition(p_emp, model):
    """(H(p), KL(p||q), H(p,q)) computed independently of one another."""
    q = model.probs()
    return entropy(p_emp), kl_divergence(p_emp, q), cross_entropy(p_emp, q)


def fit_histogram(code_vectors, k):
    """Normalized symbol counts over a sequence of code vectors."""
    counts = np.zeros(k, dtype=np.float64)
    total = 0
    for codes in code_vectors:
        codes = np.asarray(codes, dtype=np.int64)
        counts += np.bincount(codes, minlength=k)
        total += codes.size
    if total == 0:
        raise ValueError("no codes to fit")
    return counts / total


@dataclass
class RateReport:
    """Per-element rate diagnostics, nats unless suffixed otherwise."""

    hard_xent: float
    soft_xent: float
    model_entropy: float
    empirical_code_entropy: float
    kl_estimate: float

    @property
    def hard_xent_bits(self):
        return self.hard_xent / math.log(2.0)

    @property
    def model_entropy_bits(self):
        return self.model_entropy / math.log(2.0)


def rate_report(codes, assignments, model):
    """Evaluate the rate picture for one batch of codes."""
    with ad.no_grad():
        h = hard_xent(codes, model).item()
        s = soft_xent(assignments, model).item()
    p_emp = fit_histogram([codes], model.k)
    h_emp, kl, _ = xent_decomposition(p_emp, model)
    return RateReport(hard_xent=h, soft_xent=s, model_entropy=model_entropy(model),
                      empirical_code_entropy=h_emp, kl_estimate=kl)
