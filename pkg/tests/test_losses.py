import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgmd.graph import SymmetricGraph
from cgmd.losses import (
    BatchRelEdges,
    LossError,
    LossWeights,
    cls_loss,
    collect_batch_edges,
    prior_loss,
    rel_loss,
    total_loss,
)


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def numeric_grad(fn, z, eps=1e-6):
    out = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        out[idx] = (fn(zp) - fn(zm)) / (2 * eps)
    return out


class TestClsLoss:
    def test_symmetric_point(self):
        loss, grad = cls_loss([0.0], [1])
        assert loss == pytest.approx(math.log(2))
        assert grad[0] == pytest.approx(-0.5)

    def test_large_logit_stable(self):
        loss, grad = cls_loss([50.0, -800.0], [1, 0])
        assert 0 <= loss < 1e-20 and np.isfinite(grad).all()

    def test_two_point_mean(self):
        loss, grad = cls_loss([0.0, 0.0], [1, 0])
        assert loss == pytest.approx(math.log(2))
        np.testing.assert_allclose(grad, [-0.25, 0.25])

    def test_empty(self):
        with pytest.raises(LossError):
            cls_loss([], [])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-30, 30), st.integers(0, 1)), min_size=1, max_size=10))
    def test_nonnegative_and_gradient(self, pairs):
        logits = np.array([p[0] for p in pairs])
        labels = np.array([p[1] for p in pairs])
        loss, grad = cls_loss(logits, labels)
        assert loss >= 0
        num = numeric_grad(lambda l: cls_loss(l, labels)[0], logits)
        np.testing.assert_allclose(grad, num, atol=1e-7)


class TestPriorLoss:
    def test_cases(self, rng):
        p = unit_rows(rng, 5, 3)
        assert prior_loss(p, p)[0] == pytest.approx(0.0, abs=1e-15)
        assert prior_loss(-p, p)[0] == pytest.approx(2.0)
        assert prior_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))[0] == 1.0

    def test_gradient(self, rng):
        p = unit_rows(rng, 4, 3)
        _, grad = prior_loss(unit_rows(rng, 4, 3), p)
        np.testing.assert_allclose(grad, -p / 4)

    def test_rejects_non_unit(self, rng):
        with pytest.raises(LossError):
            prior_loss(2 * unit_rows(rng, 2, 3), unit_rows(rng, 2, 3))

    def test_range(self, rng):
        for _ in range(20):
            loss, _ = prior_loss(unit_rows(rng, 6, 4), unit_rows(rng, 6, 4))
            assert 0.0 <= loss <= 2.0


class TestRelLoss:
    def test_empty_edges(self, rng):
        loss, grad = rel_loss(unit_rows(rng, 3, 2), unit_rows(rng, 3, 2), BatchRelEdges.empty())
        assert loss == 0.0 and not grad.any()

    def test_identical_vanishes(self, rng):
        z = unit_rows(rng, 4, 3)
        edges = BatchRelEdges(np.array([0, 1]), np.array([2, 3]), np.array([0.3, 0.9]))
        loss, grad = rel_loss(z, z.copy(), edges)
        assert loss == 0.0 and not grad.any()

    def test_hand_evaluated(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        priors = np.array([[1.0, 0.0], [1.0, 0.0]])
        edges = BatchRelEdges(np.array([0]), np.array([1]), np.array([0.5]))
        assert rel_loss(z, priors, edges)[0] == pytest.approx(1.0)

    def test_weight_rescaling_invariant(self, rng):
        z, p = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
        e1 = BatchRelEdges(np.array([0, 1, 3]), np.array([2, 4, 4]), np.array([0.2, 0.5, 0.9]))
        e2 = BatchRelEdges(e1.u, e1.v, e1.weight * 7.0)
        assert rel_loss(z, p, e1)[0] == pytest.approx(rel_loss(z, p, e2)[0], rel=1e-12)

    def test_gradient_unnormalized_input(self, rng):
        z = rng.standard_normal((5, 3))
        p = unit_rows(rng, 5, 3)
        edges = BatchRelEdges(np.array([0, 1, 3]), np.array([2, 4, 4]), np.array([0.2, 0.5, 0.9]))
        _, grad = rel_loss(z, p, edges)
        num = numeric_grad(lambda zz: rel_loss(zz, p, edges)[0], z)
        np.testing.assert_allclose(grad, num, atol=1e-8)

    def test_unit_input_gradient_is_tangent(self, rng):
        z, p = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
        edges = BatchRelEdges(np.array([0, 2]), np.array([1, 3]), np.array([1.0, 1.0]))
        _, grad = rel_loss(z, p, edges)
        np.testing.assert_allclose(np.sum(grad * z, axis=1), 0.0, atol=1e-12)

    def test_bad_index(self, rng):
        edges = BatchRelEdges(np.array([0]), np.array([5]), np.array([1.0]))
        with pytest.raises(LossError):
            rel_loss(unit_rows(rng, 2, 2), unit_rows(rng, 2, 2), edges)


class TestTotalLoss:
    def test_cases(self):
        assert total_loss((0.4, 0.3, 0.2), LossWeights(1, 0, 0)) == 0.4
        assert total_loss((0.0, 0.0, 0.0), LossWeights()) == 0.0
        assert total_loss((0.7, 0.2, 0.1), LossWeights()) == pytest.approx(1.0)

    def test_linear(self):
        w = LossWeights(0.5, 2.0, 3.0)
        a, b = (0.1, 0.2, 0.3), (0.4, 0.5, 0.6)
        s = tuple(x + y for x, y in zip(a, b))
        assert total_loss(s, w) == pytest.approx(total_loss(a, w) + total_loss(b, w))

    def test_negative_weight(self):
        with pytest.raises(LossError):
            LossWeights(1.0, -0.1, 1.0)

    def test_nan_part(self):
        with pytest.raises(LossError):
            total_loss((float("nan"), 0.0, 0.0), LossWeights())


class TestCollectBatchEdges:
    def test_pair_in_batch(self):
        g = SymmetricGraph(edges=[(0, 1, 0.4)], n_nodes=2)
        e = collect_batch_edges(np.array([0, 1]), np.array([1, 1]), g)
        assert len(e) == 1 and e.weight[0] == 0.4

    def test_label_gate(self):
        g = SymmetricGraph(edges=[(0, 1, 0.4)], n_nodes=2)
        assert len(collect_batch_edges(np.array([0, 1]), np.array([0, 1]), g)) == 0

    def test_missing_endpoint(self):
        g = SymmetricGraph(edges=[(0, 1, 0.4), (1, 2, 0.7)], n_nodes=3)
        e = collect_batch_edges(np.array([2, 1]), np.array([0, 0, 0]), g)
        assert len(e) == 1
        # batch positions, not node ids
        assert (int(e.u[0]), int(e.v[0])) == (1, 0)
