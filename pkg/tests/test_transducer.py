import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avsr.errors import ImpossibleAlignment, InvalidLabel
from avsr.transducer import (
    blank_occupancy_per_frame,
    label_occupancy_per_row,
    logadd,
    transducer_loss,
    transducer_loss_torch,
    transducer_loss_with_lattice,
)


def random_log_probs(rng, t, u, v):
    logits = rng.standard_normal((t, u + 1, v))
    return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


def brute_force_log_likelihood(log_probs, labels, blank=0):
    """Sum over every explicit alignment: T blanks and U labels interleaved,
    final move forced to be the frame-exiting blank."""
    t_len, u_rows, _ = log_probs.shape
    u_len = len(labels)
    if t_len == 0:
        return float("-inf")
    moves = t_len + u_len  # last one is the final blank
    total = float("-inf")
    for label_positions in itertools.combinations(range(moves - 1), u_len):
        label_set = set(label_positions)
        t = u = 0
        score = 0.0
        ok = True
        for step in range(moves):
            if step in label_set:
                if u >= u_len or t >= t_len:
                    ok = False
                    break
                score += log_probs[t, u, labels[u]]
                u += 1
            else:
                if t >= t_len or u > u_len:
                    ok = False
                    break
                score += log_probs[t, u, blank]
                t += 1
        if ok and t == t_len and u == u_len:
            total = np.logaddexp(total, score)
    return float(total)


class TestLogadd:
    def test_equal_zero(self):
        assert abs(logadd(0.0, 0.0) - math.log(2.0)) < 1e-15

    def test_no_underflow(self):
        assert abs(logadd(-1000.0, -1000.0) - (-1000.0 + math.log(2.0))) < 1e-12

    def test_neg_inf_identity(self):
        assert logadd(-1.5, float("-inf")) == -1.5
        assert logadd(float("-inf"), float("-inf")) == float("-inf")

    @given(
        st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)
    )
    @settings(max_examples=200, deadline=None)
    def test_commutative_associative(self, a, b, c):
        assert abs(logadd(a, b) - logadd(b, a)) < 1e-12
        lhs = logadd(logadd(a, b), c)
        rhs = logadd(a, logadd(b, c))
        assert abs(lhs - rhs) < 1e-12


class TestTransducerLoss:
    def test_single_blank_lattice(self):
        rng = np.random.default_rng(0)
        lp = random_log_probs(rng, 1, 0, 3)
        loss, grad = transducer_loss(lp, [], blank=0)
        assert abs(loss + lp[0, 0, 0]) < 1e-12
        assert abs(grad[0, 0, 0] + 1.0) < 1e-12

    def test_two_frame_one_label_uniform(self):
        # Two valid alignments of three emissions each: (y, b, b) and (b, y, b).
        v = 2
        lp = np.full((2, 2, v), np.log(0.5))
        loss, _ = transducer_loss(lp, [1], blank=0)
        expected = -math.log(2 * 0.5**3)
        assert abs(loss - expected) < 1e-12
        oracle = brute_force_log_likelihood(lp, [1])
        assert abs(loss + oracle) < 1e-12

    def test_oracle_equivalence_sweep(self):
        rng = np.random.default_rng(42)
        for t in range(1, 5):
            for u in range(0, 4):
                for v in range(2, 5):
                    for _ in range(10):
                        lp = random_log_probs(rng, t, u, v)
                        labels = rng.integers(1, v, size=u).tolist()
                        loss, _ = transducer_loss(lp, labels, blank=0)
                        oracle = brute_force_log_likelihood(lp, labels)
                        assert abs(loss + oracle) < 1e-8

    def test_forward_backward_agree(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            t, u, v = rng.integers(1, 6), rng.integers(0, 5), rng.integers(2, 6)
            lp = random_log_probs(rng, t, u, v)
            labels = rng.integers(1, v, size=u).tolist()
            _, _, lattice = transducer_loss_with_lattice(lp, labels)
            assert lattice.log_alpha[0, 0] == 0.0
            assert abs(lattice.forward_total - lattice.backward_total) < 1e-8

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        eps = 1e-6
        for _ in range(20):
            lp = random_log_probs(rng, 3, 2, 4)
            labels = rng.integers(1, 4, size=2).tolist()
            _, grad = transducer_loss(lp, labels)
            fd = np.zeros_like(lp)
            for idx in np.ndindex(lp.shape):
                bump = np.zeros_like(lp)
                bump[idx] = eps
                up, _ = transducer_loss(lp + bump, labels)
                dn, _ = transducer_loss(lp - bump, labels)
                fd[idx] = (up - dn) / (2 * eps)
            scale = max(1.0, np.abs(fd).max())
            assert np.abs(grad - fd).max() / scale < 1e-6

    def test_occupancy_identities(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            t, u, v = rng.integers(1, 7), rng.integers(0, 5), rng.integers(2, 5)
            lp = random_log_probs(rng, t, u, v)
            labels = rng.integers(1, v, size=u).tolist()
            _, _, lattice = transducer_loss_with_lattice(lp, labels)
            np.testing.assert_allclose(
                blank_occupancy_per_frame(lattice), 1.0, atol=1e-8
            )
            np.testing.assert_allclose(
                label_occupancy_per_row(lattice), 1.0, atol=1e-8
            )

    def test_errors(self):
        with pytest.raises(ImpossibleAlignment):
            transducer_loss(np.zeros((0, 2, 3)), [1])
        lp = np.log(np.full((2, 2, 3), 1 / 3))
        with pytest.raises(InvalidLabel):
            transducer_loss(lp, [3])
        with pytest.raises(InvalidLabel):
            transducer_loss(lp, [0])  # blank among the labels


class TestTorchWrapper:
    def test_matches_numpy_loss_and_grad(self):
        rng = np.random.default_rng(11)
        lp_np = random_log_probs(rng, 4, 3, 5)
        labels = [1, 4, 2]
        loss_np, grad_np = transducer_loss(lp_np, labels)
        lp_t = torch.tensor(lp_np, dtype=torch.float64, requires_grad=True)
        loss_t = transducer_loss_torch(lp_t, labels)
        loss_t.backward()
        assert abs(loss_t.item() - loss_np) < 1e-12
        np.testing.assert_allclose(lp_t.grad.numpy(), grad_np, atol=1e-12)

    def test_upstream_scaling(self):
        rng = np.random.default_rng(12)
        lp_np = random_log_probs(rng, 2, 1, 3)
        lp_t = torch.tensor(lp_np, dtype=torch.float64, requires_grad=True)
        (2.5 * transducer_loss_torch(lp_t, [2])).backward()
        _, grad_np = transducer_loss(lp_np, [2])
        np.testing.assert_allclose(lp_t.grad.numpy(), 2.5 * grad_np, atol=1e-12)
