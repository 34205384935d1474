"""Attention, layer norm, positional encoding, smoothed cross entropy."""

import math

import numpy as np
import pytest

from alignat.errors import FullyMaskedRowError, ShapeMismatchError
from alignat.numerics import (
    AttentionMask,
    MhaParams,
    Tensor,
    cross_entropy_label_smoothed,
    dropout,
    feed_forward,
    finite_difference_check,
    layer_norm,
    masked_attention,
    multi_head_attention,
    parameter,
    sinusoidal_positional_encoding,
    sum_all,
)

from oracles import scalar_masked_attention, scalar_smoothed_cross_entropy


def mha_params(rng, width, name="mha"):
    def w(shape, n):
        return parameter(rng.normal(size=shape) / math.sqrt(shape[0]), f"{name}.{n}")

    return MhaParams(
        wq=w((width, width), "wq"), bq=w((width,), "bq"),
        wk=w((width, width), "wk"), bk=w((width,), "bk"),
        wv=w((width, width), "wv"), bv=w((width,), "bv"),
        wo=w((width, width), "wo"), bo=w((width,), "bo"),
    )


class TestMaskedAttention:
    def test_single_pair_all_ones_returns_value_row(self):
        rng = np.random.default_rng(2)
        q, k = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))
        v = Tensor(rng.normal(size=(1, 3)))
        out = masked_attention(q, k, v, AttentionMask.ones(1, 1))
        assert np.array_equal(out.data, v.data)

    def test_one_hot_row_forces_single_key(self):
        rng = np.random.default_rng(3)
        q = Tensor(rng.normal(size=(2, 4)))
        k = Tensor(rng.normal(size=(5, 4)))
        v = Tensor(rng.normal(size=(5, 3)))
        bits = np.zeros((2, 5), dtype=bool)
        bits[0, 3] = True
        bits[1, 0] = True
        out = masked_attention(q, k, v, AttentionMask(bits))
        assert np.allclose(out.data[0], v.data[3], atol=0)
        assert np.allclose(out.data[1], v.data[0], atol=0)

    def test_matches_scalar_loop_reference(self):
        rng = np.random.default_rng(4)
        q = Tensor(rng.normal(size=(3, 3)))
        k = Tensor(rng.normal(size=(3, 3)))
        v = Tensor(rng.normal(size=(3, 3)))
        bits = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 1]], dtype=bool)
        out = masked_attention(q, k, v, AttentionMask(bits))
        want = scalar_masked_attention(q.data, k.data, v.data, bits)
        assert np.allclose(out.data, want, atol=1e-12)

    def test_rows_sum_to_one_and_blocked_exactly_zero(self):
        rng = np.random.default_rng(5)
        q, k = Tensor(rng.normal(size=(6, 8))), Tensor(rng.normal(size=(9, 8)))
        v = Tensor(rng.normal(size=(9, 8)))
        bits = rng.random((6, 9)) > 0.5
        bits[:, 0] = True
        _, w = masked_attention(q, k, v, AttentionMask(bits), return_weights=True)
        assert np.abs(w.data.sum(axis=1) - 1.0).max() < 1e-9
        assert np.all(w.data[~bits] == 0.0)

    def test_all_ones_mask_is_bit_identical_to_unmasked(self):
        rng = np.random.default_rng(6)
        q, k = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(5, 8)))
        v = Tensor(rng.normal(size=(5, 8)))
        masked = masked_attention(q, k, v, AttentionMask.ones(4, 5))
        # reference composed from the same primitives, without the fill step
        from alignat.numerics import matmul, mul, row_softmax, transpose

        scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(8))
        unmasked = matmul(row_softmax(scores), v)
        assert np.array_equal(masked.data, unmasked.data)

    def test_mask_modes_agree_on_argmax(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q, k = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(7, 6)))
            v = Tensor(rng.normal(size=(7, 6)))
            bits = rng.random((4, 7)) > 0.4
            bits[:, -1] = True
            _, w_pre = masked_attention(q, k, v, AttentionMask(bits), mode="presoftmax", return_weights=True)
            _, w_lit = masked_attention(q, k, v, AttentionMask(bits), mode="literal", return_weights=True)
            assert np.array_equal(w_pre.data.argmax(axis=1), w_lit.data.argmax(axis=1))

    def test_fully_masked_row_raises(self):
        q = Tensor(np.zeros((2, 3)))
        kv = Tensor(np.zeros((2, 3)))
        bits = np.array([[True, False], [False, False]])
        with pytest.raises(FullyMaskedRowError):
            masked_attention(q, kv, kv, AttentionMask(bits))

    def test_shape_mismatch_raises(self):
        q = Tensor(np.zeros((2, 3)))
        k = Tensor(np.zeros((2, 4)))
        with pytest.raises(ShapeMismatchError):
            masked_attention(q, k, k, AttentionMask.ones(2, 2))

    def test_gradients(self):
        rng = np.random.default_rng(8)
        q = parameter(rng.normal(size=(3, 4)), "q")
        k = parameter(rng.normal(size=(5, 4)), "k")
        v = parameter(rng.normal(size=(5, 4)), "v")
        bits = rng.random((3, 5)) > 0.3
        bits[:, 2] = True
        mask = AttentionMask(bits)
        for mode in ("presoftmax", "literal"):
            err = finite_difference_check(
                lambda: sum_all(masked_attention(q, k, v, mask, mode=mode)), [q, k, v]
            )
            assert err < 1e-4


class TestMultiHead:
    def test_single_head_reduces_to_masked_attention(self):
        rng = np.random.default_rng(9)
        width = 6
        params = mha_params(rng, width)
        x = Tensor(rng.normal(size=(4, width)))
        mask = AttentionMask.ones(4, 4)
        got = multi_head_attention(x, x, mask, params, n_heads=1)

        from alignat.numerics import matmul

        q = matmul(x, params.wq) + params.bq
        k = matmul(x, params.wk) + params.bk
        v = matmul(x, params.wv) + params.bv
        want = matmul(masked_attention(q, k, v, mask), params.wo) + params.bo
        assert np.array_equal(got.data, want.data)

    def test_two_tied_heads_match_single_head_reference(self):
        # H=2 with both heads using identical block weights equals H=1 whose
        # query projection is scaled by 1/sqrt(2) (compensating the per-head
        # scale) and whose value/key projections duplicate the block.
        rng = np.random.default_rng(10)
        width, half = 8, 4
        a_block = rng.normal(size=(width, half))
        b_block = rng.normal(size=(width, half))
        v_block = rng.normal(size=(width, half))
        wo = rng.normal(size=(width, width))
        zeros = np.zeros(width)

        tied = MhaParams(
            wq=Tensor(np.hstack([a_block, a_block])), bq=Tensor(zeros),
            wk=Tensor(np.hstack([b_block, b_block])), bk=Tensor(zeros),
            wv=Tensor(np.hstack([v_block, v_block])), bv=Tensor(zeros),
            wo=Tensor(wo), bo=Tensor(zeros),
        )
        single = MhaParams(
            wq=Tensor(np.hstack([a_block, a_block]) / math.sqrt(2)), bq=Tensor(zeros),
            wk=Tensor(np.hstack([b_block, b_block])), bk=Tensor(zeros),
            wv=Tensor(np.hstack([v_block, v_block])), bv=Tensor(zeros),
            wo=Tensor(wo), bo=Tensor(zeros),
        )
        x = Tensor(rng.normal(size=(5, width)))
        mask = AttentionMask.ones(5, 5)
        got = multi_head_attention(x, x, mask, tied, n_heads=2)
        want = multi_head_attention(x, x, mask, single, n_heads=1)
        assert np.allclose(got.data, want.data, atol=1e-12)

    def test_head_count_must_divide_width(self):
        rng = np.random.default_rng(11)
        params = mha_params(rng, 6)
        x = Tensor(rng.normal(size=(3, 6)))
        with pytest.raises(ShapeMismatchError):
            multi_head_attention(x, x, AttentionMask.ones(3, 3), params, n_heads=4)

    def test_gradients_all_parameters(self):
        rng = np.random.default_rng(12)
        width = 8
        params = mha_params(rng, width)
        x_q = parameter(rng.normal(size=(3, width)), "x_q")
        x_kv = parameter(rng.normal(size=(4, width)), "x_kv")
        bits = rng.random((3, 4)) > 0.3
        bits[:, 1] = True
        mask = AttentionMask(bits)
        tensors = [x_q, x_kv] + [getattr(params, f) for f in
                                 ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        err = finite_difference_check(
            lambda: sum_all(multi_head_attention(x_q, x_kv, mask, params, n_heads=2)),
            tensors,
            max_entries_per_param=6,
            rng=np.random.default_rng(0),
        )
        assert err < 1e-4


class TestLayerNormAndFriends:
    def test_constant_vector_normalises_to_zero(self):
        x = Tensor(np.full((3, 8), 2.5))
        out = layer_norm(x)
        assert np.allclose(out.data, 0.0, atol=1e-9)

    def test_gradients(self):
        rng = np.random.default_rng(13)
        x = parameter(rng.normal(size=(4, 6)), "x")
        gamma = parameter(rng.normal(size=6), "g")
        beta = parameter(rng.normal(size=6), "b")
        err = finite_difference_check(
            lambda: sum_all(layer_norm(x, gamma, beta) * layer_norm(x, gamma, beta)),
            [x, gamma, beta],
        )
        assert err < 1e-4

    def test_feed_forward_gradients(self):
        rng = np.random.default_rng(14)
        x = parameter(rng.normal(size=(3, 4)), "x")
        w1 = parameter(rng.normal(size=(4, 6)), "w1")
        b1 = parameter(rng.normal(size=6), "b1")
        w2 = parameter(rng.normal(size=(6, 4)), "w2")
        b2 = parameter(rng.normal(size=4), "b2")
        err = finite_difference_check(
            lambda: sum_all(feed_forward(x, w1, b1, w2, b2)), [x, w1, b1, w2, b2]
        )
        assert err < 1e-4

    def test_positional_encoding_position_zero_alternates(self):
        pe = sinusoidal_positional_encoding(3, 8)
        assert np.array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])

    def test_positional_encoding_values(self):
        pe = sinusoidal_positional_encoding(5, 4)
        assert pe[2, 0] == pytest.approx(math.sin(2.0))
        assert pe[2, 1] == pytest.approx(math.cos(2.0))
        assert pe[2, 2] == pytest.approx(math.sin(2.0 / 100.0))

    def test_positional_encoding_length_zero_raises(self):
        with pytest.raises(ShapeMismatchError):
            sinusoidal_positional_encoding(0, 8)

    def test_dropout_inverted_and_disabled_at_eval(self):
        rng = np.random.default_rng(15)
        x = Tensor(np.ones((100, 10)))
        out = dropout(x, 0.3, rng, training=True)
        kept = out.data != 0
        assert np.allclose(out.data[kept], 1.0 / 0.7)
        assert 0.5 < kept.mean() < 0.9
        assert dropout(x, 0.3, None, training=False) is x


class TestSmoothedCrossEntropy:
    def test_perfect_prediction_no_smoothing_near_zero(self):
        logits = Tensor(np.array([[100.0, 0.0, 0.0], [0.0, 100.0, 0.0]]))
        loss = cross_entropy_label_smoothed(logits, [0, 1], eps=0.0)
        assert loss.item() < 1e-12

    def test_uniform_prediction_loss_is_log_vocab(self):
        logits = Tensor(np.zeros((3, 4)))
        loss = cross_entropy_label_smoothed(logits, [0, 1, 2], eps=0.1)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_matches_scalar_loop_reference(self):
        rng = np.random.default_rng(16)
        logits_data = rng.normal(size=(2, 4)) * 2
        targets = [3, 1]
        loss = cross_entropy_label_smoothed(Tensor(logits_data), targets, eps=0.1)
        want = scalar_smoothed_cross_entropy(logits_data, targets, 0.1)
        assert loss.item() == pytest.approx(want, abs=1e-12)

    def test_target_out_of_range_raises(self):
        with pytest.raises(ShapeMismatchError):
            cross_entropy_label_smoothed(Tensor(np.zeros((2, 4))), [0, 4], eps=0.1)

    def test_gradients(self):
        rng = np.random.default_rng(17)
        logits = parameter(rng.normal(size=(4, 5)), "logits")
        err = finite_difference_check(
            lambda: cross_entropy_label_smoothed(logits, [1, 0, 4, 2], eps=0.1), [logits]
        )
        assert err < 1e-4
