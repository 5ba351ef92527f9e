import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regiontta import numerics as nx
from regiontta.clusterstat import ClusterStats
from regiontta.losses import (
    LossWeights,
    loss_ccp,
    loss_clean_region,
    loss_div,
    loss_instance_contrast,
    loss_prototype_contrast,
    loss_total,
    make_mixup,
    negative_mask,
)
from regiontta.memory import KeyQueue
from regiontta.numerics import Tensor


def logits_for(probs):
    """Logits whose softmax is ``probs`` (rows strictly positive)."""
    return Tensor(np.log(np.asarray(probs, dtype=np.float64)))


class TestCleanRegion:
    def test_perfect_prediction(self):
        assert loss_clean_region(logits_for([[1 - 1e-300, 1e-300]]), [0], [True]).item() \
            == pytest.approx(0.0, abs=1e-12)

    def test_minus_log_inverse_e(self):
        p = np.exp(-1.0)
        assert loss_clean_region(logits_for([[p, 1 - p]]), [0], [True]).item() == pytest.approx(1.0)

    def test_masked_mean(self):
        probs = np.array([[0.7, 0.3], [0.2, 0.8], [0.9, 0.1]])
        got = loss_clean_region(logits_for(probs), [0, 1, 1], [True, True, False]).item()
        assert got == pytest.approx(-(np.log(0.7) + np.log(0.8)) / 2, abs=1e-14)

    def test_all_clean_is_plain_ce(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(6, 4))
        y = rng.integers(0, 4, 6)
        ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        got = loss_clean_region(Tensor(z), y, np.ones(6, bool)).item()
        assert got == pytest.approx(-ls[np.arange(6), y].mean(), abs=1e-12)

    def test_nothing_clean_is_zero(self):
        assert loss_clean_region(Tensor(np.zeros((3, 2))), [0, 1, 0], np.zeros(3, bool)).item() == 0.0


class TestMixup:
    X = np.arange(8.0).reshape(4, 2)

    def test_lambda_one_is_identity(self):
        m = make_mixup(self.X, [0, 1, 2, 0], [0.1, 0.2, 0.3, 0.4], 3,
                       np.random.default_rng(0), lam=1.0)
        assert m.mixed_input.tobytes() == self.X.tobytes()
        np.testing.assert_array_equal(m.mixed_clean, [0.1, 0.2, 0.3, 0.4])

    def test_hand_weight(self):
        m = make_mixup(self.X[:2], [0, 1], [0.8, 0.4], 2, lam=0.5, partner=np.array([1, 0]))
        assert m.mixed_clean[0] == pytest.approx(0.6, abs=1e-15)
        assert m.weight[0] == pytest.approx(np.exp(0.6), abs=1e-15)
        assert m.weight[0] == pytest.approx(1.82212, abs=1e-5)

    def test_zero_clean_gives_unit_weight(self):
        m = make_mixup(self.X, [0, 1, 0, 1], np.zeros(4), 2, np.random.default_rng(0))
        np.testing.assert_array_equal(m.weight, 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_weight_bounds_and_target_simplex(self, seed):
        rng = np.random.default_rng(seed)
        m = make_mixup(rng.normal(size=(5, 3)), rng.integers(0, 3, 5), rng.random(5), 3, rng)
        assert np.all((m.weight >= 1.0) & (m.weight <= np.e))
        np.testing.assert_allclose(m.mixed_target.sum(axis=1), 1.0, atol=1e-15)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError):
            make_mixup(self.X[:1], [0], [0.5], 2, np.random.default_rng(0))


class TestCCP:
    def _batch(self, seed=0, n=5, c=3):
        rng = np.random.default_rng(seed)
        return make_mixup(rng.normal(size=(n, 2)), rng.integers(0, c, n), rng.random(n), c, rng)

    def test_prediction_equal_target_gives_weighted_entropy(self):
        m = self._batch()
        t = np.clip(m.mixed_target, 1e-300, None)
        got = loss_ccp(logits_for(t), m).item()
        ent = -(m.mixed_target * np.log(t)).sum(axis=1)
        assert got == pytest.approx(np.mean(m.weight * ent), abs=1e-12)

    def test_unit_weight_one_hot_is_ce(self):
        m = self._batch()
        m.weight = np.ones(5)
        m.mixed_target = np.eye(3)[[0, 1, 2, 0, 1]]
        z = np.random.default_rng(1).normal(size=(5, 3))
        ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        assert loss_ccp(Tensor(z), m).item() == pytest.approx(-ls[np.arange(5), [0, 1, 2, 0, 1]].mean())

    def test_linear_in_weights(self):
        m = self._batch()
        z = Tensor(np.random.default_rng(2).normal(size=(5, 3)))
        a = loss_ccp(z, m).item()
        m.weight = 2 * m.weight
        assert loss_ccp(z, m).item() == pytest.approx(2 * a, rel=1e-15)


class TestDiv:
    def test_uniform_minimum(self):
        assert loss_div(Tensor(np.zeros((3, 4)))).item() == pytest.approx(-np.log(4), abs=1e-15)

    def test_one_hot_maximum(self):
        assert loss_div(logits_for(np.tile([1 - 1e-300, 1e-300], (3, 1)))).item() \
            == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        p = np.array([[1.0, 0.0], [0.5, 0.5]])
        got = loss_div(logits_for(np.clip(p, 1e-300, None))).item()
        assert got == pytest.approx(0.75 * np.log(0.75) + 0.25 * np.log(0.25), abs=1e-12)
        assert got == pytest.approx(-0.5623, abs=1e-4)


class TestPrototypeContrast:
    def test_hand_value(self):
        stats = ClusterStats(mu=np.eye(2), sigma=np.ones(2))
        got = loss_prototype_contrast(Tensor([[1.0, 0.0]]), [0], stats, 1.0).item()
        assert got == pytest.approx(-np.log(np.e / (np.e + 1)), abs=1e-15)
        assert got == pytest.approx(0.3133, abs=1e-4)

    def test_identical_prototypes_give_log_c(self):
        stats = ClusterStats(mu=np.tile([0.6, 0.8], (5, 1)), sigma=np.ones(5))
        q = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
        assert loss_prototype_contrast(q, [0, 3, 4], stats, 0.07).item() == pytest.approx(np.log(5))

    def test_monotone_in_alignment(self):
        stats = ClusterStats(mu=np.eye(3), sigma=np.ones(3))
        angles = np.linspace(0, np.pi / 2, 10)
        vals = [loss_prototype_contrast(Tensor([[np.cos(a), 0.0, np.sin(a)]]), [0], stats, 0.5).item()
                for a in angles]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_shift_invariance(self):
        # adding c * e_extra to every prototype/query pair shifts all similarities equally
        rng = np.random.default_rng(3)
        mu = np.hstack([rng.normal(size=(4, 3)), np.ones((4, 1))])
        q = np.hstack([rng.normal(size=(2, 3)), np.zeros((2, 1))])
        stats = ClusterStats(mu=mu, sigma=np.ones(4))
        a = loss_prototype_contrast(Tensor(q), [1, 2], stats, 0.3).item()
        q[:, 3] = 0.7
        b = loss_prototype_contrast(Tensor(q), [1, 2], stats, 0.3).item()
        assert a == pytest.approx(b, abs=1e-9)


class TestInstanceContrast:
    def test_hand_value(self):
        kq = KeyQueue(4, 2, 2).push([[0.0, 1.0]], [1])
        table = np.array([[True, False]])
        got = loss_instance_contrast(Tensor([[1.0, 0.0]]), np.array([[1.0, 0.0]]), kq, table, 1.0).item()
        assert got == pytest.approx(-np.log(np.e / (np.e + 1)), abs=1e-15)

    def test_no_negatives_gives_zero(self):
        kq = KeyQueue(4, 2, 2).push([[0.0, 1.0], [1.0, 0.0]], [0, 1])
        table = np.ones((1, 2), bool)
        got = loss_instance_contrast(Tensor([[1.0, 0.0]]), np.array([[1.0, 0.0]]), kq, table, 0.07).item()
        assert got == pytest.approx(0.0, abs=1e-15)

    def test_far_negative_is_negligible(self):
        q, k = np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])
        table = np.array([[True, False]])
        near = KeyQueue(4, 2, 2).push([[0.0, 1.0]], [1])
        far = KeyQueue(4, 2, 2).push([[0.0, 1.0], [-1.0, 0.0]], [1, 1])
        a = loss_instance_contrast(Tensor(q), k, near, table, 0.07).item()
        b = loss_instance_contrast(Tensor(q), k, far, table, 0.07).item()
        assert abs(a - b) < 1e-6

    def test_negative_mask(self):
        table = np.array([[True, False, True], [False, False, False]])
        np.testing.assert_array_equal(negative_mask(table, np.array([0, 1, 2, 1])),
                                      [[False, True, False, True], [True, True, True, True]])


class TestTotal:
    COMPS = {"cr": 1.0, "ccp": 2.0, "div": 3.0, "prt": 4.0, "inst": 5.0}

    def test_weighted_sum(self):
        total, rep = loss_total(self.COMPS, LossWeights())
        assert total.item() == 15.0 and rep.l_ctr == 9.0

    def test_gamma_two_off(self):
        total, _ = loss_total(self.COMPS, LossWeights.from_gammas([1, 0, 1, 1]))
        assert total.item() == 13.0

    def test_zero_components(self):
        total, rep = loss_total({}, LossWeights())
        assert total.item() == 0.0 and rep.total == 0.0

    def test_doubling_contrast_weight(self):
        base, _ = loss_total(self.COMPS, LossWeights.from_gammas([1, 1, 1, 0]))
        one, _ = loss_total(self.COMPS, LossWeights.from_gammas([1, 1, 1, 1]))
        two, _ = loss_total(self.COMPS, LossWeights.from_gammas([1, 1, 1, 2]))
        assert two.item() - base.item() == 2 * (one.item() - base.item())

    def test_toggles(self):
        total, rep = loss_total(self.COMPS, LossWeights(prt=False))
        assert rep.l_prt == 0.0 and total.item() == 11.0

    def test_gradient_flows_through_weights(self):
        x = Tensor([[0.2, -0.1]], requires_grad=True)
        total, _ = loss_total({"div": loss_div(x)}, LossWeights.from_gammas([0, 0, 2, 0]))
        nx.backward(total)
        assert x.grad is not None
