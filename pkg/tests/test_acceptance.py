"""Acceptance suite: one test per release criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -s` to watch the lines appear;
criteria 6-9 share a session fixture that trains the full (k, alpha, seed)
grid at desk scale, so the module takes tens of minutes on one CPU.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import pytest

from conftest import directional_derivative, numerical_grad, rel_err

from softvq import autodiff as ad
from softvq import codec, coder
from softvq import entropy as ent
from softvq import quantizer as vq
from softvq.autodiff import Tensor
from softvq.datasets import synthetic_textures
from softvq.entropy import CategoricalModel
from softvq.model import new_model
from softvq.nets import NetConfig
from softvq.quantizer import Codebook
from softvq.training import TrainConfig, train


@contextmanager
def criterion(num, name):
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {num:2d} {name}: FAIL")
        raise
    print(f"\nACCEPTANCE {num:2d} {name}: PASS")


# -- shared desk-scale experiment grid (criteria 6-9) ---------------------------

SWEEP_SEEDS = (0, 1, 2)
ALPHA_GRID = (0.0, 0.001, 0.01)
K_GRID = (8, 32, 128)
SWEEP_NET = NetConfig(height=32, width=32, channels=3, widths=(32,),
                      downsample_folds=1, latent_channels=8,
                      num_residual_blocks=2, skip_every=3, latent_bound=2.0)
SWEEP_BATCH = 8
SWEEP_LR = 6e-3


@dataclass
class SweepRecord:
    k: int
    alpha: float
    seed: int
    bpp: float
    mse: float
    hard_xent_bpp: float
    model_entropy_bits: float


@pytest.fixture(scope="session")
def sweep():
    """Train the grid once: alpha sweep at k=32 plus k sweep at alpha=0.001."""
    images = synthetic_textures(512, seed=42)
    records = []
    keep_model = None
    jobs = [(32, a, s) for a in ALPHA_GRID for s in SWEEP_SEEDS]
    jobs += [(k, 0.001, s) for k in (8, 128) for s in SWEEP_SEEDS]
    for k, alpha, seed in jobs:
        cfg = TrainConfig(alpha=alpha, beta=1.0, sigma=1.0, k=k, m=8,
                          epochs=15, batch_size=SWEEP_BATCH, base_lr=SWEEP_LR,
                          seed=seed)
        model, _ = train(images, SWEEP_NET, cfg)
        agg = codec.evaluate_model(model, images)
        records.append(SweepRecord(k=k, alpha=alpha, seed=seed, bpp=agg.bpp,
                                   mse=agg.mse, hard_xent_bpp=agg.hard_xent_bpp,
                                   model_entropy_bits=agg.model_entropy_bits))
        if (k, alpha, seed) == (32, 0.001, 0):
            keep_model = model
        print(f"  trained k={k} alpha={alpha} seed={seed}: "
              f"bpp={agg.bpp:.4f} mse={agg.mse:.2f} "
              f"H(q)={agg.model_entropy_bits:.3f}b", flush=True)
    return images, records, keep_model


def med(records, key, **filt):
    vals = [getattr(r, key) for r in records
            if all(getattr(r, f) == v for f, v in filt.items())]
    assert len(vals) == len(SWEEP_SEEDS)
    return float(np.median(vals))


# -- criterion 1: gradient suite ------------------------------------------------

def test_c01_gradient_suite():
    with criterion(1, "gradient suite (ops <= 1e-4, composed loss <= 1e-3)"):
        _ops_match_finite_differences()
        _composed_loss_matches_finite_differences()


def _ops_match_finite_differences():
    rng = np.random.default_rng(0)
    c34 = Tensor(rng.uniform(-2, 2, (3, 4)))
    r35 = Tensor(rng.uniform(-1, 1, (3, 5)))
    b42 = Tensor(rng.uniform(-2, 2, (4, 2)))
    wc = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)))
    wd = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
    cases = [
        ("add", lambda t: (t + c34).sum(), (3, 4)),
        ("sub", lambda t: (t - c34).sum(), (3, 4)),
        ("mul", lambda t: (t * c34).sum(), (3, 4)),
        ("scale", lambda t: ad.scale(t, 0.7).sum(), (3, 4)),
        ("relu", lambda t: ad.relu(t).sum(), (17,)),
        ("leaky_relu", lambda t: ad.leaky_relu(t).sum(), (17,)),
        ("sqrt", lambda t: ad.sqrt(t + Tensor(np.full(t.shape, 3.0))).sum(), (9,)),
        ("tanh", lambda t: (ad.tanh(t) * c34).sum(), (3, 4)),
        ("softmax", lambda t: (ad.softmax(t, axis=1) * r35).sum(), (3, 5)),
        ("log_softmax", lambda t: (ad.log_softmax(t, axis=1) * r35).sum(), (3, 5)),
        ("matmul", lambda t: ad.matmul(t, b42).sum(), (3, 4)),
        ("mean", lambda t: t.mean(), (3, 4)),
        ("sq_norm_cols", lambda t: ad.sq_norm_cols(t).sum(), (3, 4)),
        ("conv2d", lambda t: ad.conv2d(t, wc, stride=1, pad=1).sum(), (1, 2, 5, 5)),
        ("conv2d_transpose",
         lambda t: ad.conv2d_transpose(t, wd, stride=2, pad=1).sum(), (1, 2, 4, 4)),
    ]
    for name, build, shape in cases:
        x0 = rng.uniform(-2, 2, shape)
        if "relu" in name:
            x0 = np.where(np.abs(x0) < 1e-3, 0.5, x0)
        t = Tensor(x0.copy(), requires_grad=True)
        build(t).backward()

        def forward(x, build=build):
            with ad.no_grad():
                return build(Tensor(x)).item()

        assert rel_err(t.grad, numerical_grad(forward, x0)) <= 1e-4, name


def _composed_loss_matches_finite_differences():
    # toy setup: 8x8 gray images, one downsampling fold, k=4, m=2. The tape's
    # gradient is that of the relaxed objective with detached quantities
    # (hard/soft gap, codes, frozen log q) held at their current values, so
    # that surrogate is what the finite differences perturb.
    net_cfg = NetConfig(height=8, width=8, channels=1, widths=(6,),
                        downsample_folds=1, latent_channels=2,
                        num_residual_blocks=1, skip_every=3)
    model = new_model(net_cfg, k=4, m=2, sigma=1.0, seed=0)
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, (4, 8, 8, 1), dtype=np.uint8)
    from softvq.training import normalize_images, total_loss
    x = Tensor(normalize_images(images))
    alpha, beta, sigma = 0.01, 1.0, 1.0

    loss, _ = total_loss(x, model, alpha, beta, sigma)
    loss.backward()

    with ad.no_grad():
        Z0 = vq.latent_to_columns(model.encoder(x), model.m)
        z_tilde0 = vq.quantize_soft(Z0, model.codebook, sigma)
    codes0, z_hat0 = vq.quantize_hard(Z0, model.codebook)
    delta0 = z_hat0 - z_tilde0.data
    logq0 = np.log(model.entropy.probs())

    def surrogate():
        with ad.no_grad():
            latent = model.encoder(x)
            Z = vq.latent_to_columns(latent, model.m)
            assign = vq.soft_assignment(Z, model.codebook, sigma)
            z_tilde = ad.matmul(model.codebook.embed, assign.transpose(1, 0))
            recon = model.decoder(vq.columns_to_latent(
                z_tilde + Tensor(delta0), latent.shape))
            diff = x - recon
            dist = (diff * diff).mean().item()
            s = -float(np.mean(assign.data @ logq0))
            h = -float(np.mean(ad.log_softmax(model.entropy.logits).data[codes0]))
        return dist + alpha * s + beta * h

    rng = np.random.default_rng(2)
    for name, t in model.params.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        v = rng.standard_normal(t.shape)
        v /= np.linalg.norm(v)

        def f(values, t=t):
            saved = t.data.copy()
            t.data[:] = values
            out = surrogate()
            t.data[:] = saved
            return out

        num = directional_derivative(f, t.data, v, h=1e-6)
        ana = float(np.sum(grad * v))
        assert abs(num - ana) / max(abs(num), abs(ana), 1e-8) <= 1e-3, name


# -- criterion 2: straight-through contract --------------------------------------

def test_c02_straight_through_contract():
    with criterion(2, "straight-through: hard forward bit-exact, soft backward 1e-12"):
        rng = np.random.default_rng(3)
        net_cfg = NetConfig(height=8, width=8, channels=1, widths=(6,),
                            downsample_folds=1, latent_channels=2,
                            num_residual_blocks=1, skip_every=3)

        def build(model, use_primitive):
            x = Tensor(xdata)
            latent = model.encoder(x)
            Z = vq.latent_to_columns(latent, model.m)
            codes, z_hat = vq.quantize_hard(Z, model.codebook)
            z_tilde = vq.quantize_soft(Z, model.codebook, 1.0)
            if use_primitive:
                st = vq.straight_through(z_hat, z_tilde)
            else:
                st = ad.stop_gradient(Tensor(z_hat) - z_tilde) + z_tilde
            recon = model.decoder(vq.columns_to_latent(st, latent.shape))
            diff = x - recon
            return st, z_hat, (diff * diff).mean()

        xdata = (np.random.default_rng(4).integers(0, 256, (2, 8, 8, 1))
                 .astype(np.float64) / 127.5 - 1.0).transpose(0, 3, 1, 2)

        model_a = new_model(net_cfg, k=4, m=2, sigma=1.0, seed=7)
        st, z_hat, loss_a = build(model_a, use_primitive=True)
        assert np.array_equal(st.data, z_hat)  # forward bit-exact

        # decoder applied to the straight-through output equals the decoder
        # applied to the hard-quantized latent, bit for bit
        with ad.no_grad():
            direct = model_a.decoder(vq.columns_to_latent(
                Tensor(z_hat), (2, 2, 4, 4)))
            via_st = model_a.decoder(vq.columns_to_latent(
                Tensor(st.data), (2, 2, 4, 4)))
        assert np.array_equal(direct.data, via_st.data)

        loss_a.backward()
        model_b = new_model(net_cfg, k=4, m=2, sigma=1.0, seed=7)
        _, _, loss_b = build(model_b, use_primitive=False)
        loss_b.backward()
        for name in model_a.params.names():
            ga = model_a.params[name].grad
            gb = model_b.params[name].grad
            ga = np.zeros(1) if ga is None else ga
            gb = np.zeros(1) if gb is None else gb
            assert rel_err(ga, gb) <= 1e-12, name


# -- criterion 3: cross-entropy decomposition ------------------------------------

def test_c03_entropy_identity():
    with criterion(3, "H(p,q) = KL(p||q) + H(p) over 1000 random pairs"):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            k = int(rng.integers(2, 33))
            p = rng.dirichlet(np.ones(k) * rng.uniform(0.3, 3.0))
            model = CategoricalModel(k, rng.uniform(-4, 4, k))
            hp, kl, hpq = ent.xent_decomposition(p, model)
            assert abs(hpq - kl - hp) <= 1e-10


# -- criterion 4: relaxation consistency ------------------------------------------

def test_c04_relaxation_consistency():
    with criterion(4, "one-hot soft xent == hard xent; sigma=1e6 assignment is one-hot"):
        rng = np.random.default_rng(6)
        for _ in range(50):
            k = int(rng.integers(2, 17))
            model = CategoricalModel(k, rng.uniform(-3, 3, k))
            codes = rng.integers(0, k, size=64)
            onehot = Tensor(vq.hard_assignment(codes, k))
            s = ent.soft_xent(onehot, model).item()
            h = ent.hard_xent(codes, model).item()
            assert abs(s - h) <= 1e-10

        for _ in range(20):
            m = int(rng.integers(2, 5))
            k = int(rng.integers(2, 9))
            cb = Codebook(Tensor(rng.uniform(-2, 2, (m, k))))
            Z = Tensor(rng.uniform(-2, 2, (m, 30)))
            codes, _ = vq.quantize_hard(Z, cb)
            P = vq.soft_assignment(Z, cb, sigma=1e6)
            np.testing.assert_allclose(P.data, vq.hard_assignment(codes, k),
                                       atol=1e-6)


# -- criterion 5: range coder -----------------------------------------------------

def test_c05_coder_roundtrips_and_length():
    with criterion(5, "coder: 1000 roundtrips bit-exact, near-optimal length"):
        rng = np.random.default_rng(7)
        for i in range(1000):
            k = int(rng.integers(2, 257))
            n = int(rng.integers(0, 10_001))
            p = rng.dirichlet(np.ones(k) * rng.uniform(0.2, 2.0))
            p = np.maximum(p, 1e-12)
            p /= p.sum()
            table = coder.quantize_model(p)
            syms = rng.choice(k, size=n, p=p)
            payload = coder.encode(syms, table)
            assert np.array_equal(coder.decode(payload, table, n), syms)
            if n >= 1000:
                bits = coder.payload_bits(payload)
                bound = coder.codelength_bound(syms, table)
                assert bits <= 1.01 * bound + 40
                assert bits >= bound - 1

        t = coder.quantize_model(np.full(4, 0.25))
        syms = np.random.default_rng(8).integers(0, 4, size=10_000)
        bits = coder.payload_bits(coder.encode(syms, t))
        assert 19_800 <= bits <= 20_240


# -- criteria 6-8: trained trade-off trends ----------------------------------------

def test_c06_alpha_sweep_trend(sweep):
    with criterion(6, "alpha sweep: bpp strictly falls, mse does not fall"):
        _, records, _ = sweep
        bpps = [med(records, "bpp", k=32, alpha=a) for a in ALPHA_GRID]
        mses = [med(records, "mse", k=32, alpha=a) for a in ALPHA_GRID]
        assert bpps[0] > bpps[1] > bpps[2], bpps
        assert mses[0] <= mses[1] <= mses[2], mses


def test_c07_histogram_concentration(sweep):
    with criterion(7, "model entropy drops >= 0.2 bits from alpha=0 to 0.01"):
        _, records, _ = sweep
        h0 = med(records, "model_entropy_bits", k=32, alpha=0.0)
        h2 = med(records, "model_entropy_bits", k=32, alpha=0.01)
        assert h0 - h2 >= 0.2, (h0, h2)


def test_c08_k_sweep_trend(sweep):
    with criterion(8, "k sweep: bpp does not fall, mse does not rise"):
        _, records, _ = sweep
        bpps = [med(records, "bpp", k=k, alpha=0.001) for k in K_GRID]
        mses = [med(records, "mse", k=k, alpha=0.001) for k in K_GRID]
        assert _monotone_with_one_slack(bpps, rising=True), bpps
        assert _monotone_with_one_slack(mses, rising=False), mses


def _monotone_with_one_slack(values, rising, slack=0.05):
    """Monotone trend allowing one adjacent inversion within 5% relative."""
    inversions = 0
    for a, b in zip(values, values[1:]):
        ok = b >= a if rising else b <= a
        if not ok:
            if abs(b - a) > slack * max(abs(a), abs(b)):
                return False
            inversions += 1
    return inversions <= 1


# -- criterion 9: uniform-model rate ceiling ---------------------------------------

def test_c09_rate_bound(sweep):
    with criterion(9, "hard cross-entropy never beats the uniform ceiling"):
        _, records, _ = sweep
        d_over_m = SWEEP_NET.latent_dim // 8
        pixels = SWEEP_NET.height * SWEEP_NET.width
        for r in records:
            ceiling = d_over_m * math.log2(r.k) / pixels
            assert r.hard_xent_bpp <= ceiling + 1e-6, (r.k, r.alpha, r.seed)


# -- criterion 10: pipeline integrity ----------------------------------------------

def test_c10_pipeline_integrity(sweep):
    with criterion(10, "compress/decompress: codes and pixels bit-exact for 100 images"):
        images, _, model = sweep
        m32 = model.astype(np.float32)
        lh, lw = m32.cfg.latent_hw
        for img in images[:100]:
            codes, table, payload = codec.encode_image(m32, img)
            blob = codec.build_container(m32, codes, table, payload)

            # decoded codes must equal the encoder-side codes
            parsed = codec.parse_bitstream(blob)
            decoded = coder.decode(parsed.payload, parsed.table, parsed.n_codes)
            assert np.array_equal(decoded, codes)

            # file-path reconstruction equals the in-memory decoder output
            z_hat = vq.dequantize(codes, m32.codebook)
            latent = vq.columns_to_latent(Tensor(z_hat, dtype=np.float32),
                                          (1, m32.cfg.latent_channels, lh, lw))
            with ad.no_grad():
                recon = m32.decoder(latent)
            manual = np.clip(np.rint((recon.data + 1.0) * 127.5), 0, 255)
            manual = manual.astype(np.uint8)[0].transpose(1, 2, 0)
            assert np.array_equal(codec.decompress(m32, blob), manual)
