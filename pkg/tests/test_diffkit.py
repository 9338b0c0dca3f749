import math

import numpy as np
import pytest

from cldlab import cld_core, diffkit as dk, oracle
from cldlab.errors import NonFiniteActivation, ShapeMismatch
from cldlab.metrics import tabulate
from cldlab.objectives import DomainBatch, erm_loss, lam_regularizer, sd_penalty
from cldlab.pairgen import ContrastivePair


def linear_model(head, embedding=None, n_obs=4):
    emb = dk.make_embedding("bits" if embedding is None else embedding, n_obs)
    return dk.Model(emb, [], [], np.asarray(head, dtype=np.float64))


def test_zero_parameters_give_uniform_probs():
    model = linear_model(np.zeros((3, 2)))
    _, _, probs, _ = dk.forward(model, np.array([0, 1, 2, 3]))
    assert np.allclose(probs.val, 0.5)


def test_hand_set_linear_layer():
    # logits = [A, B] @ W + bias with W = [[1, -1], [2, 0]], bias = (0.5, -0.5)
    head = np.array([[1.0, -1.0], [2.0, 0.0], [0.5, -0.5]])
    model = linear_model(head)
    _, z, _, _ = dk.forward(model, np.array([3]))  # (A, B) = (1, 1)
    assert np.allclose(z.val, [[1 + 2 + 0.5, -1 + 0 - 0.5]])


def test_a_weighted_head_is_causal_invariant(canon_d):
    family, _, _ = canon_d
    # class-1 logit reads 10*A; class-0 logit stays 0
    head = np.array([[0.0, 10.0], [0.0, 0.0], [0.0, 0.0]])
    table = tabulate(linear_model(head), family)
    assert oracle.is_causal_invariant(family, table).invariant


def test_gradient_of_param_square_sum():
    model = dk.init_model(4, (3,), 2, embedding="bits", seed=1)
    tape = dk.Tape(model)
    loss = dk.nsum(dk.stack_list(
        [dk.nsum(dk.square(n)) for n in tape.param_nodes]))
    grad = dk.backward(tape, loss)
    assert np.allclose(grad, 2.0 * model.flat_params())


def test_gradient_of_constant_is_zero():
    model = dk.init_model(4, (3,), 2, embedding="bits", seed=1)
    tape = dk.Tape(model)
    grad = dk.backward(tape, dk.constant(np.array(7.0)))
    assert np.array_equal(grad, np.zeros(model.n_params()))


def test_log_softmax_shift_invariance():
    z = np.array([[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]])
    a = dk.log_softmax_rows(dk.constant(z)).val
    b = dk.log_softmax_rows(dk.constant(z + 1234.5)).val
    assert np.allclose(a, b, atol=1e-9)
    assert np.allclose(np.exp(a).sum(axis=1), 1.0)


def test_forward_is_deterministic():
    model = dk.init_model(4, (8, 8), 3, embedding="bits", seed=3)
    x = np.array([0, 1, 2, 3, 1])
    za = dk.forward(model, x)[1].val
    zb = dk.forward(model, x)[1].val
    assert np.array_equal(za, zb)


def test_forward_accepts_feature_nodes():
    model = dk.init_model(4, (8,), 2, embedding="bits", seed=3)
    raw = dk.init_raw_model(8, (4,), 2, seed=4)
    h = dk.forward(model, np.array([0, 1]))[0]
    _, z, _, _ = dk.forward(raw, h)
    assert z.val.shape == (2, 2)
    with pytest.raises(ShapeMismatch):
        dk.forward(raw, dk.constant(np.zeros((0, 8))))


def test_empty_batch_rejected():
    model = dk.init_model(4, (8,), 2, embedding="bits", seed=3)
    with pytest.raises(ShapeMismatch):
        dk.forward(model, np.array([], dtype=np.int64))


def test_overflowing_activation_raises():
    model = linear_model(np.full((3, 2), 1e308))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteActivation):
        dk.forward(model, np.array([3]))


class TestFiniteDiff:
    def batch(self):
        return DomainBatch("d", np.array([0, 1, 2, 3, 1]),
                           np.array([0, 1, 1, 0, 1]),
                           np.full(5, 0.2))

    def test_erm(self):
        model = dk.init_model(4, (6, 5), 2, embedding="bits", seed=11)
        err = dk.finite_diff_check(
            model, self.batch(), lambda m, b, t: erm_loss(m, b, t), eps=1e-4)
        assert err < 1e-4

    def test_sd_regularized(self):
        def loss(m, b, t):
            _, z, _, _ = dk.forward(m, b.inputs, t)
            return dk.add(erm_loss(m, b, t), sd_penalty(z, b.weights))
        model = dk.init_model(4, (6, 5), 2, embedding="bits", seed=11)
        assert dk.finite_diff_check(model, self.batch(), loss, eps=1e-4) < 1e-4

    def test_lam_regularized(self):
        pairs = [ContrastivePair(0, 2, 1, 0, 0, 1),
                 ContrastivePair(1, 3, 0, 0, 0, 1)]

        def loss(m, b, t):
            return dk.add(erm_loss(m, b, t), lam_regularizer(m, pairs, t))
        model = dk.init_model(4, (6, 5), 2, embedding="bits", seed=11)
        assert dk.finite_diff_check(model, self.batch(), loss, eps=1e-4) < 1e-4


class TestGradientReversal:
    def test_scale_zero_blocks_the_gradient(self):
        model = linear_model([[3.0]], embedding=np.zeros((1, 0)), n_obs=1)
        tape = dk.Tape(model)
        p = tape.node("head")
        loss = dk.nsum(dk.square(dk.gradient_reversal(p, 0.0)))
        assert np.array_equal(dk.backward(tape, loss), [0.0])

    def test_scale_one_negates(self):
        # loss = p**2 at p = 3: plain gradient 6, reversed gradient -6
        model = linear_model([[3.0]], embedding=np.zeros((1, 0)), n_obs=1)
        tape = dk.Tape(model)
        p = tape.node("head")
        loss = dk.nsum(dk.square(dk.gradient_reversal(p, 1.0)))
        assert loss.val == pytest.approx(9.0)
        assert np.allclose(dk.backward(tape, loss), [-6.0])

    def test_value_passes_through_unchanged(self):
        node = dk.constant(np.array([1.5, -2.0]))
        assert np.array_equal(dk.gradient_reversal(node, 0.3).val, node.val)


class TestOptimizers:
    def test_single_sgd_step_on_square(self):
        model = linear_model([[1.0]], embedding=np.zeros((1, 0)), n_obs=1)
        tape = dk.Tape(model)
        loss = dk.nsum(dk.square(tape.node("head")))
        stepped = dk.sgd_step(model, dk.backward(tape, loss), lr=0.1)
        assert stepped.head[0, 0] == pytest.approx(0.8)

    def test_adam_first_step_magnitude_is_lr(self):
        for scale in (1.0, 1e-3, 1e3):
            model = linear_model([[5.0]], embedding=np.zeros((1, 0)), n_obs=1)
            m2, _ = dk.adam_step(model, dk.AdamState(),
                                 np.array([scale]), lr=0.01)
            # the 1e-8 denominator floor shifts the step by O(eps/|g|)
            assert abs(m2.head[0, 0] - 5.0) == pytest.approx(0.01, rel=1e-4)

    def test_sgd_converges_on_convex_quadratic(self):
        # minimize (p - 2)**2; unique minimizer p = 2
        model = linear_model([[0.0]], embedding=np.zeros((1, 0)), n_obs=1)
        for _ in range(200):
            tape = dk.Tape(model)
            p = tape.node("head")
            loss = dk.nsum(dk.square(dk.sub(p, dk.constant(np.array([[2.0]])))))
            model = dk.sgd_step(model, dk.backward(tape, loss), lr=0.2)
        assert abs(model.head[0, 0] - 2.0) < 1e-6


def test_checkpoint_round_trip(tmp_path):
    model = dk.init_model(4, (7, 3), 2, embedding="bits", seed=9)
    path = str(tmp_path / "m.json")
    dk.save_checkpoint(model, path)
    back = dk.load_checkpoint(path)
    assert np.array_equal(back.head, model.head)
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, model.weights))
    assert all(np.array_equal(a, b) for a, b in zip(back.biases, model.biases))
    assert np.array_equal(back.embedding, model.embedding)
    x = np.array([0, 3, 2])
    assert np.array_equal(dk.forward(back, x)[1].val, dk.forward(model, x)[1].val)


def test_raw_checkpoint_keeps_missing_embedding(tmp_path):
    raw = dk.init_raw_model(5, (4,), 3, seed=2)
    path = str(tmp_path / "raw.json")
    dk.save_checkpoint(raw, path)
    back = dk.load_checkpoint(path)
    assert back.embedding is None
    assert np.array_equal(back.head, raw.head)


def test_feature_mask_mutes_units():
    model = dk.init_model(4, (6,), 2, embedding="bits", seed=0)
    mask = np.ones(6)
    mask[2] = 0.0
    h, _, _, _ = dk.forward(model, np.array([1, 2]), feature_mask=mask)
    assert np.array_equal(h.val[:, 2], [0.0, 0.0])
