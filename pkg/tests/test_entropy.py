import math

import numpy as np
import pytest

from softvq import autodiff as ad
from softvq import entropy as ent
from softvq import quantizer as vq
from softvq.autodiff import Tensor
from softvq.entropy import CategoricalModel
from softvq.quantizer import Codebook


def random_probs(rng, k):
    p = rng.dirichlet(np.ones(k))
    return np.maximum(p, 1e-12) / np.maximum(p, 1e-12).sum()


class TestHardXent:
    def test_uniform_model_gives_log_k(self):
        model = CategoricalModel(8)
        codes = np.array([0, 3, 7, 2, 2])
        h = ent.hard_xent(codes, model).item()
        assert abs(h - math.log(8)) <= 1e-12

    def test_certain_symbol_approaches_zero(self):
        logits = np.zeros(4)
        logits[0] = 40.0
        model = CategoricalModel(4, logits)
        h = ent.hard_xent(np.zeros(10, dtype=int), model).item()
        assert h <= 1e-10

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(0)
        model = CategoricalModel(5, rng.uniform(-2, 2, 5))
        codes = rng.integers(0, 5, size=37)

        logq = np.log(model.probs())
        expected = -np.mean(logq[codes])
        assert abs(ent.hard_xent(codes, model).item() - expected) <= 1e-12

    def test_out_of_range_code_rejected(self):
        with pytest.raises(ValueError):
            ent.hard_xent([5], CategoricalModel(5))

    def test_gradient_reaches_logits_only(self):
        rng = np.random.default_rng(1)
        model = CategoricalModel(4, rng.uniform(-1, 1, 4))
        ent.hard_xent([0, 1, 1, 3], model).backward()
        assert model.logits.grad is not None
        assert np.any(model.logits.grad != 0)


class TestSoftXent:
    def test_one_hot_assignments_match_hard_xent(self):
        rng = np.random.default_rng(2)
        model = CategoricalModel(6, rng.uniform(-2, 2, 6))
        codes = rng.integers(0, 6, size=50)
        onehot = Tensor(vq.hard_assignment(codes, 6))
        s = ent.soft_xent(onehot, model).item()
        h = ent.hard_xent(codes, model).item()
        assert abs(s - h) <= 1e-10

    def test_uniform_everything_gives_log_k(self):
        model = CategoricalModel(9)
        P = Tensor(np.full((12, 9), 1.0 / 9.0))
        assert abs(ent.soft_xent(P, model).item() - math.log(9)) <= 1e-12

    def test_gradient_isolation(self):
        # d s / d logits == 0 identically; d s / d codebook != 0
        rng = np.random.default_rng(3)
        model = CategoricalModel(5, rng.uniform(-1, 1, 5))
        cb = Codebook(Tensor(rng.uniform(-2, 2, (3, 5)), requires_grad=True))
        Z = Tensor(rng.uniform(-2, 2, (3, 10)), requires_grad=True)
        P = vq.soft_assignment(Z, cb, sigma=1.0)
        ent.soft_xent(P, model).backward()
        assert model.logits.grad is None or np.all(model.logits.grad == 0)
        assert np.any(cb.embed.grad != 0)
        assert np.any(Z.grad != 0)

    def test_hard_xent_gradient_isolation_mirror(self):
        # codes are constants inside h: nothing flows to codebook or encoder
        rng = np.random.default_rng(4)
        model = CategoricalModel(5, rng.uniform(-1, 1, 5))
        cb = Codebook(Tensor(rng.uniform(-2, 2, (3, 5)), requires_grad=True))
        Z = Tensor(rng.uniform(-2, 2, (3, 10)), requires_grad=True)
        codes, _ = vq.quantize_hard(Z, cb)
        ent.hard_xent(codes, model).backward()
        assert cb.embed.grad is None
        assert Z.grad is None


class TestModelEntropy:
    def test_uniform_k8(self):
        assert abs(ent.model_entropy(CategoricalModel(8)) - math.log(8)) <= 1e-12

    def test_one_hot_is_zero(self):
        assert ent.entropy([1.0, 0.0, 0.0]) == 0.0

    def test_half_quarter_quarter(self):
        # -0.5 log 0.5 - 2 * 0.25 log 0.25 = 1.5 log 2 = 1.0397...
        got = ent.entropy([0.5, 0.25, 0.25])
        assert abs(got - 1.5 * math.log(2)) <= 1e-12
        assert abs(got - 1.0397) <= 1e-4


class TestDecomposition:
    def test_equal_distributions(self):
        rng = np.random.default_rng(5)
        p = random_probs(rng, 10)
        model = CategoricalModel(10, np.log(p))
        hp, kl, hpq = ent.xent_decomposition(p, model)
        assert abs(kl) <= 1e-12
        assert abs(hpq - hp) <= 1e-12

    def test_one_hot_p(self):
        rng = np.random.default_rng(6)
        q = random_probs(rng, 6)
        model = CategoricalModel(6, np.log(q))
        p = np.zeros(6)
        p[3] = 1.0
        _, _, hpq = ent.xent_decomposition(p, model)
        assert abs(hpq - (-math.log(model.probs()[3]))) <= 1e-12

    def test_identity_holds_on_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            k = int(rng.integers(2, 17))
            p = random_probs(rng, k)
            model = CategoricalModel(k, rng.uniform(-3, 3, k))
            hp, kl, hpq = ent.xent_decomposition(p, model)
            assert abs(hpq - kl - hp) <= 1e-10
            assert hpq >= hp - 1e-12  # Gibbs

    def test_report_invariant(self):
        rng = np.random.default_rng(8)
        model = CategoricalModel(6, rng.uniform(-1, 1, 6))
        cb = Codebook(Tensor(rng.uniform(-2, 2, (2, 6))))
        Z = Tensor(rng.uniform(-2, 2, (2, 64)))
        codes, _ = vq.quantize_hard(Z, cb)
        P = vq.soft_assignment(Z, cb, sigma=1.0)
        rep = ent.rate_report(codes, P, model)
        assert rep.hard_xent >= rep.empirical_code_entropy - 1e-9
        for v in (rep.hard_xent, rep.soft_xent, rep.model_entropy,
                  rep.empirical_code_entropy, rep.kl_estimate):
            assert np.isfinite(v) and v >= -1e-12


class TestFitHistogram:
    def test_counts_normalized(self):
        hist = ent.fit_histogram([[0, 0, 1], [2, 0]], 4)
        np.testing.assert_allclose(hist, [0.6, 0.2, 0.2, 0.0])

    def test_training_logits_converges_to_histogram(self):
        # minimizing mean -log q over fixed codes lands q on the code histogram
        from softvq.training import Adam

        rng = np.random.default_rng(9)
        k = 32
        codes = rng.choice(k, size=4096, p=random_probs(rng, k))
        target = ent.fit_histogram([codes], k)

        model = CategoricalModel(k)
        opt = Adam([model.logits])
        for _ in range(2000):
            model.logits.zero_grad()
            ent.hard_xent(codes, model).backward()
            opt.step(5e-3)
        tv = 0.5 * np.abs(model.probs() - target).sum()
        assert tv <= 0.01
