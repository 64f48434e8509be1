"""Training loop: composite rate-distortion loss, Adam, one-cycle LR.

The loss is distortion through the hard-forward/soft-backward quantization
path, plus an alpha-weighted soft cross-entropy (pushing the code
distribution itself toward low entropy) and a beta-weighted hard
cross-entropy (fitting the categorical model to the codes).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from softvq import autodiff as ad
from softvq import entropy as ent
from softvq import quantizer as vq
from softvq.autodiff import Tensor
from softvq.model import new_model

PIXEL_SCALE = 127.5  # [0, 255] <-> [-1, 1]


class TrainingDiverged(FloatingPointError):
    """Loss left the finite range; aborted with diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.001
    beta: float = 1.0
    sigma: float = 1.0
    k: int = 32
    m: int = 8
    epochs: int = 15
    batch_size: int = 32
    base_lr: float = 1e-3
    seed: int = 0
    distortion: str = "mse"
    sigma_final: float | None = None  # linear anneal hook; constant sigma when None

    def __post_init__(self):
        if min(self.alpha, self.beta, self.sigma) < 0:
            raise ValueError("alpha, beta, sigma must be non-negative")
        if self.k < 2 or self.m < 1:
            raise ValueError("need k >= 2 and m >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.distortion != "mse":
            raise ValueError(f"unsupported distortion {self.distortion!r}")


def adam_step(value, grad, exp_avg, exp_avg_sq, step, lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update; `step` is the 1-based update count."""
    exp_avg *= beta1
    exp_avg += (1.0 - beta1) * grad
    exp_avg_sq *= beta2
    exp_avg_sq += (1.0 - beta2) * grad * grad
    m_hat = exp_avg / (1.0 - beta1 ** step)
    v_hat = exp_avg_sq / (1.0 - beta2 ** step)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a fixed tensor list; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = [0] * len(self.params)
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.steps[i] += 1
            adam_step(p.data, p.grad, self.exp_avg[i], self.exp_avg_sq[i],
                      self.steps[i], lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def one_cycle_lr(step, total_steps, base_lr, warmup_frac=0.3, final_div=25.0):
    """Cosine ramp from base_lr/final_div up to base_lr at warmup_frac of the
    run, then cosine decay back down; strictly positive throughout."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    floor = base_lr / final_div
    warm = max(1, int(round(warmup_frac * total_steps)))
    if step < warm:
        t = step / warm
        return floor + (base_lr - floor) * 0.5 * (1.0 - math.cos(math.pi * t))
    t = (step - warm) / max(1, total_steps - warm)
    t = min(t, 1.0)
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class StepDiagnostics:
    loss: float
    distortion: float      # mse in normalized pixel units
    soft_xent: float       # nats per code element
    hard_xent: float       # nats per code element
    codes: np.ndarray


def total_loss(x, model, alpha, beta, sigma):
    """Composite loss over one normalized NCHW batch.

    Returns the scalar loss tensor plus diagnostics; raises
    TrainingDiverged on a non-finite value.
    """
    latent = model.encoder(x)
    Z = vq.latent_to_columns(latent, model.m)
    codes, z_hat = vq.quantize_hard(Z, model.codebook)
    assign = vq.soft_assignment(Z, model.codebook, sigma)
    z_tilde = ad.matmul(model.codebook.embed, assign.transpose(1, 0))
    st = vq.straight_through(z_hat, z_tilde)
    recon = model.decoder(vq.columns_to_latent(st, latent.shape))

    diff = x - recon
    dist = (diff * diff).mean()
    s = ent.soft_xent(assign, model.entropy)
    h = ent.hard_xent(codes, model.entropy)
    loss = dist + ad.scale(s, alpha) + ad.scale(h, beta)

    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss {value} (distortion={dist.item()}, "
            f"soft={s.item()}, hard={h.item()})")
    return loss, StepDiagnostics(loss=value, distortion=dist.item(),
                                 soft_xent=s.item(), hard_xent=h.item(),
                                 codes=codes)


def normalize_images(images):
    """uint8 HWC image stack -> float64 NCHW batch in [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(f"expected (n, H, W[, C]) images, got {arr.shape}")
    x = arr.astype(np.float64) / PIXEL_SCALE - 1.0
    return x.transpose(0, 3, 1, 2)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    distortion: float          # mse in 8-bit pixel units
    soft_xent: float           # nats per code element
    hard_xent: float           # nats per code element
    model_entropy_bits: float

    def row(self):
        return [self.epoch, self.loss, self.distortion, self.soft_xent,
                self.hard_xent, self.model_entropy_bits]


METRICS_HEADER = ["epoch", "loss", "distortion", "soft_xent", "hard_xent",
                  "model_entropy_bits"]


def _sigma_at(cfg, step, total_steps):
    if cfg.sigma_final is None:
        return cfg.sigma
    t = step / max(1, total_steps - 1)
    return cfg.sigma + (cfg.sigma_final - cfg.sigma) * t


def train(images, net_cfg, cfg, log_path=None, verbose=False):
    """Train a fresh model on a uint8 image stack.

    Deterministic for a fixed seed: the seed drives parameter init, codebook
    seeding and batch order, and every numeric op runs in float64.
    """
    x_all = normalize_images(images)
    n = x_all.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if (net_cfg.height, net_cfg.width) != x_all.shape[2:] or net_cfg.channels != x_all.shape[1]:
        raise ValueError(f"dataset shape {x_all.shape[1:]} does not match config")

    model = new_model(net_cfg, cfg.k, cfg.m, cfg.sigma, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    # data-dependent codebook seeding from the first batch's latent columns
    first = Tensor(x_all[:min(cfg.batch_size, n)])
    with ad.no_grad():
        latent0 = model.encoder(first)
        cols0 = vq.latent_to_columns(latent0, cfg.m).data
    seeded = vq.init_codebook(cols0, cfg.k, rng)
    model.codebook.embed.data[:] = seeded.embed.data

    opt = Adam(model.params.tensors())
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x = Tensor(x_all[idx])
            sigma = _sigma_at(cfg, step, total_steps)
            loss, diag = total_loss(x, model, cfg.alpha, cfg.beta, sigma)
            opt.zero_grad()
            loss.backward()
            opt.step(one_cycle_lr(step, total_steps, cfg.base_lr))
            step += 1
            sums += [diag.loss, diag.distortion, diag.soft_xent, diag.hard_xent]
        sums /= batches_per_epoch
        metrics = EpochMetrics(
            epoch=epoch,
            loss=sums[0],
            distortion=sums[1] * PIXEL_SCALE ** 2,
            soft_xent=sums[2],
            hard_xent=sums[3],
            model_entropy_bits=ent.model_entropy(model.entropy) / math.log(2.0),
        )
        history.append(metrics)
        if verbose:
            print(f"epoch {epoch}: loss={metrics.loss:.5f} "
                  f"mse={metrics.distortion:.2f} h={metrics.hard_xent:.4f} "
                  f"H(q)={metrics.model_entropy_bits:.3f} bits")

    if log_path is not None:
        write_metrics_csv(log_path, history)
    return model, history


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in history:
            writer.writerow(row.row())


@dataclass
class RDPoint:
    """One trained configuration's measured rate-distortion outcome."""

    k: int
    m: int
    alpha: float
    seed: int
    bpp: float             # actual coded bits per pixel, container included
    mse: float             # 8-bit pixel units
    hard_xent_bpp: float   # theoretical rate bound from the learned model
    model_entropy: float   # nats

    def row(self):
        return [self.k, self.m, self.alpha, self.seed, self.bpp, self.mse,
                self.hard_xent_bpp, self.model_entropy]


SWEEP_HEADER = ["k", "m", "alpha", "seed", "bpp", "mse", "hard_xent_bpp",
                "model_entropy"]


def rd_sweep(images, net_cfg, base_cfg, ks, alphas, seeds, out_csv=None,
             verbose=False):
    """Train the (k, alpha, seed) grid and measure each point end to end."""
    from softvq.codec import evaluate_model

    points = []
    for k in ks:
        for alpha in alphas:
            for seed in seeds:
                cfg = replace(base_cfg, k=k, alpha=alpha, seed=seed)
                if verbose:
                    print(f"sweep: k={k} alpha={alpha} seed={seed}")
                model, _ = train(images, net_cfg, cfg)
                agg = evaluate_model(model, images)
                points.append(RDPoint(
                    k=k, m=cfg.m, alpha=alpha, seed=seed,
                    bpp=agg.bpp, mse=agg.mse,
                    hard_xent_bpp=agg.hard_xent_bpp,
                    model_entropy=agg.model_entropy_bits * math.log(2.0),
                ))
    if out_csv is not None:
        write_sweep_csv(out_csv, points)
    return points


def write_sweep_csv(path, points):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for p in points:
            writer.writerow(p.row())
