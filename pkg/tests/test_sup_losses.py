import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sparse_ssl.sup_losses import (LossWeights, class_prototypes, entropy_loss, kl_divergence,
                                   mixup_batch, mixup_loss, mixup_pair, mutual_learning_loss,
                                   prototype_loss, supervised_total)

import oracles

T = torch.tensor


def onehot(labels, k):
    return torch.eye(k, dtype=torch.float64)[torch.as_tensor(labels)]


def log_of(probs):
    return torch.log(T(probs, dtype=torch.float64))


class TestPrototypes:
    def test_single_sample_per_class(self):
        protos = class_prototypes(T([[1.0, 0.0], [0.0, 1.0]]), onehot([0, 1], 2).float())
        assert torch.equal(protos, T([[1.0, 0.0], [0.0, 1.0]]))

    def test_mean_of_two(self):
        protos = class_prototypes(T([[0.8, 0.2], [0.6, 0.4]], dtype=torch.float64), onehot([0, 0], 2))
        np.testing.assert_allclose(protos[0].numpy(), [0.7, 0.3], atol=1e-12)
        assert torch.isnan(protos[1]).all()

    def test_duplication_invariance(self):
        rng = np.random.default_rng(0)
        p = torch.softmax(T(rng.normal(size=(6, 3))), 1)
        y = onehot([0, 1, 2, 0, 1, 2], 3)
        a = class_prototypes(p, y)
        b = class_prototypes(torch.cat([p, p]), torch.cat([y, y]))
        torch.testing.assert_close(a, b)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            class_prototypes(torch.zeros(0, 2), torch.zeros(0, 2))


class TestPrototypeLoss:
    def test_self_prototypes(self):
        loss = prototype_loss(T([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64), onehot([0, 1], 2))
        assert loss.item() == pytest.approx(0.1269280110, abs=1e-9)

    def test_identical_prototypes_give_log_k(self):
        probs = torch.softmax(T(np.random.default_rng(1).normal(size=(5, 4))), 1)
        protos = torch.full((4, 4), 0.25, dtype=torch.float64)
        loss = prototype_loss(probs, onehot([0, 1, 2, 3, 0], 4), protos)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_matching_prototype_beats_log_k(self):
        probs = T([[0.9, 0.1]], dtype=torch.float64)
        protos = T([[0.9, 0.1], [0.1, 0.9]], dtype=torch.float64)
        assert prototype_loss(probs, onehot([0], 2), protos).item() < math.log(2)

    def test_absent_class_excluded(self):
        # only class 0 present -> normaliser has a single term -> zero loss
        probs = T([[0.3, 0.3, 0.4], [0.5, 0.2, 0.3]], dtype=torch.float64)
        assert prototype_loss(probs, onehot([0, 0], 3)).item() == pytest.approx(0.0, abs=1e-12)

    def test_literal_sign_prefers_far_prototype(self):
        probs = T([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        literal = prototype_loss(probs, onehot([0, 1], 2), literal_sign=True)
        assert literal.item() == pytest.approx(math.log(1 + math.exp(2)), abs=1e-9)

    def test_gradient_is_finite_with_absent_class(self):
        logits = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        prototype_loss(torch.softmax(logits, 1), onehot([0, 1, 1], 4)).backward()
        assert torch.isfinite(logits.grad).all()


class TestMutual:
    def test_identical_models_reduce_to_ce(self):
        logits = T([[0.3, -1.0, 2.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
        y = onehot([2, 0], 3)
        ce = -(y * torch.log_softmax(logits, 1)).sum(1).mean()
        loss = mutual_learning_loss([logits] * 3, y, kl_weight=0.5)
        assert loss.item() == pytest.approx(3 * ce.item(), rel=1e-12)

    def test_disjoint_support_is_clamped(self):
        p = T([[1.0, 0.0]], dtype=torch.float64)
        q = T([[0.0, 1.0]], dtype=torch.float64)
        value = kl_divergence(q, p).item()
        assert math.isfinite(value) and value == pytest.approx(-math.log(1e-8), rel=1e-9)

    def test_closed_form_kl(self):
        p = T([[0.5, 0.5]], dtype=torch.float64)
        q = T([[0.625, 0.375]], dtype=torch.float64)
        assert kl_divergence(p, q).item() == pytest.approx(0.0322692606, abs=1e-9)

    def test_kl_member_values(self):
        # models [.5,.5], [.5,.5], [.75,.25]: each symmetric member sees mean [.625,.375]
        logits = [log_of([[0.5, 0.5]]), log_of([[0.5, 0.5]]), log_of([[0.75, 0.25]])]
        y = onehot([0], 2)
        expected = oracles.mutual_loss([l.tolist() for l in logits], [0], 2, 0.5)
        assert mutual_learning_loss(logits, y, 0.5).item() == pytest.approx(expected, rel=1e-12)


class TestEntropy:
    def test_onehot_is_zero(self):
        assert entropy_loss(T([[1.0, 0.0], [0.0, 1.0]])).item() == pytest.approx(0.0, abs=1e-6)

    @pytest.mark.parametrize("k, expected", [(2, 0.6931471806), (4, 1.3862943611)])
    def test_uniform(self, k, expected):
        assert entropy_loss(torch.full((3, k), 1.0 / k, dtype=torch.float64)).item() == pytest.approx(expected)

    def test_summed_over_models(self):
        u = torch.full((2, 2), 0.5, dtype=torch.float64)
        assert entropy_loss([u, u, u]).item() == pytest.approx(3 * math.log(2))

    @given(st.lists(st.floats(-8, 8), min_size=2, max_size=6))
    def test_bounds(self, row):
        p = torch.softmax(T([row], dtype=torch.float64), 1)
        h = entropy_loss(p).item()
        assert -1e-12 <= h <= math.log(len(row)) + 1e-12


class TestMixup:
    def test_endpoint(self):
        x_i, x_j = torch.ones(3), torch.zeros(3)
        x, y, lam = mixup_pair(x_i, T([1.0, 0.0]), x_j, T([0.0, 1.0]), 0.2, None, lam=1.0)
        assert torch.equal(x, x_i) and torch.equal(y, T([1.0, 0.0])) and lam == 1.0

    def test_midpoint(self):
        _, y, _ = mixup_pair(torch.ones(1), T([1.0, 0.0]), torch.zeros(1), T([0.0, 1.0]), 0.2, None, lam=0.5)
        assert torch.equal(y, T([0.5, 0.5]))

    def test_beta_mean(self):
        rng = np.random.default_rng(0)
        lams = [mixup_pair(0.0, 0.0, 0.0, 0.0, 0.2, rng)[2] for _ in range(100_000)]
        assert abs(np.mean(lams) - 0.5) < 0.01

    def test_batch_targets_stay_distributions(self):
        rng = np.random.default_rng(3)
        x = torch.randn(8, 1, 4, 4)
        y = torch.eye(3)[torch.tensor([0, 1, 2, 0, 1, 2, 0, 1])]
        mixed, my, lam, perm = mixup_batch(x, y, 0.2, rng)
        torch.testing.assert_close(my.sum(1), torch.ones(8))
        expected = lam[0] * x[0] + (1 - lam[0]) * x[perm[0]]
        torch.testing.assert_close(mixed[0], expected)

    def test_loss_at_target_is_entropy(self):
        y = T([[0.3, 0.7]], dtype=torch.float64)
        assert mixup_loss(torch.log(y), y).item() == pytest.approx(entropy_loss(y).item(), rel=1e-12)

    def test_onehot_is_standard_ce(self):
        logits = T([[2.0, -1.0, 0.5]], dtype=torch.float64)
        y = onehot([1], 3)
        ce = torch.nn.functional.cross_entropy(logits, torch.tensor([1]))
        assert mixup_loss(logits, y).item() == pytest.approx(ce.item(), rel=1e-9)

    def test_half_half(self):
        y = T([[0.5, 0.5]], dtype=torch.float64)
        assert mixup_loss(torch.zeros(1, 2, dtype=torch.float64), y).item() == pytest.approx(0.6931471806)


def _random_case(rng, b=6, k=3):
    labels = list(rng.integers(0, k, size=b))
    logits = [T(rng.normal(0, 2, size=(b, k))) for _ in range(3)]
    mixed = [T(rng.normal(0, 2, size=(b, k))) for _ in range(3)]
    lam = rng.beta(0.2, 0.2, size=b)
    perm = rng.permutation(b)
    y = onehot(labels, k)
    ymix = T(lam[:, None]) * y + T(1 - lam[:, None]) * y[perm]
    return labels, y, logits, mixed, ymix


class TestSupervisedTotal:
    def test_zero_weights_leave_prototype(self):
        labels, y, logits, mixed, ymix = _random_case(np.random.default_rng(0))
        w = LossWeights(mutual=0.0, entropy=0.0, mixup=0.0)
        total, parts = supervised_total(logits, y, mixed, ymix, w)
        assert total.item() == pytest.approx(parts["prototype"], rel=1e-12)

    def test_total_at_least_prototype(self):
        labels, y, logits, mixed, ymix = _random_case(np.random.default_rng(1))
        total, parts = supervised_total(logits, y, mixed, ymix)
        assert total.item() >= parts["prototype"]
        assert min(parts.values()) >= 0

    def test_linear_in_mixup_weight(self):
        labels, y, logits, mixed, ymix = _random_case(np.random.default_rng(2))
        w = LossWeights()
        t1, parts = supervised_total(logits, y, mixed, ymix, w)
        t2, _ = supervised_total(logits, y, mixed, ymix, LossWeights(mixup=2 * w.mixup))
        assert (t2 - t1).item() == pytest.approx(w.mixup * parts["mixup"], rel=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        labels, y, logits, mixed, ymix = _random_case(rng)
        perm = torch.from_numpy(rng.permutation(len(labels)))
        a, _ = supervised_total(logits, y, mixed, ymix)
        b, _ = supervised_total([l[perm] for l in logits], y[perm], [m[perm] for m in mixed], ymix[perm])
        assert a.item() == pytest.approx(b.item(), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        labels, y, logits, mixed, ymix = _random_case(rng, b=int(rng.integers(1, 9)), k=k)
        w = LossWeights()
        _, parts = supervised_total(logits, y, mixed, ymix, w)
        ref = oracles.supervised_total([l.tolist() for l in logits], labels,
                                       [m.tolist() for m in mixed], ymix.tolist(), k,
                                       w.mutual, w.entropy, w.mixup, w.kl, w.temperature)
        for key, value in ref.items():
            assert parts[key] == pytest.approx(value, rel=1e-6, abs=1e-12), key

    def test_gradient_matches_finite_differences(self):
        labels, y, logits, mixed, ymix = _random_case(np.random.default_rng(5), b=4, k=3)
        params = [l.clone().requires_grad_(True) for l in logits + mixed]

        def f(*ps):
            return supervised_total(list(ps[:3]), y, list(ps[3:]), ymix)[0]

        assert torch.autograd.gradcheck(f, params, eps=1e-6, atol=1e-7, rtol=1e-3)
