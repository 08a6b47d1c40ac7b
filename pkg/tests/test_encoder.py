import math

import numpy as np
import pytest

from amnet import numerics as nx
from amnet.encoder import BlockWeights, EncoderConfig, encode, encoder_block, multi_head_attention
from amnet.errors import ConfigError
from amnet.numerics import Tape, Tensor, numeric_gradient, relative_error


def weights(config, seed=0, scale=None):
    w = BlockWeights.init(config, np.random.default_rng(seed))
    if scale is not None:
        for t in vars(w).values():
            if t.data.ndim == 2:
                t.data = t.data * scale
    return w


class TestConfig:
    def test_defaults(self):
        c = EncoderConfig()
        assert (c.n_blocks, c.d_model, c.n_heads, c.d_k, c.ffn_hidden, c.dropout_rate, c.input_length) == (
            2, 256, 8, 32, 1024, 0.2, 100,
        )

    def test_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            EncoderConfig(d_model=100, n_heads=8)

    @pytest.mark.parametrize("field", ["d_model", "n_heads", "ffn_hidden", "input_length"])
    def test_positive(self, field):
        with pytest.raises(ConfigError):
            EncoderConfig(**{field: 0})

    def test_dropout_range(self):
        with pytest.raises(ConfigError):
            EncoderConfig(dropout_rate=1.0)


def test_init_shapes_and_values():
    c = EncoderConfig(d_model=16, n_heads=4, ffn_hidden=24)
    w = BlockWeights.init(c, np.random.default_rng(0))
    assert w.w_q.shape == (16, 16) and w.w_o.shape == (16, 16)
    assert w.w1.shape == (16, 24) and w.w2.shape == (24, 16)
    assert np.all(w.b1.data == 0) and np.all(w.ln1_gain.data == 1)
    assert abs(w.w1.data.std() - 0.02) < 0.005


class TestAttention:
    def test_hand_computed(self):
        # B=1, T=3, h=1, d=2 checked against an explicit loop evaluation
        c = EncoderConfig(d_model=2, n_heads=1, ffn_hidden=2, input_length=3)
        w = weights(c)
        w.w_q.data = np.array([[1.0, 0.5], [0.0, 1.0]])
        w.w_k.data = np.array([[0.5, 0.0], [1.0, -1.0]])
        w.w_v.data = np.array([[2.0, 0.0], [0.0, 1.0]])
        w.w_o.data = np.array([[1.0, 1.0], [0.0, 1.0]])
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        out = multi_head_attention(Tensor(x[None]), w, None, 1).data[0]
        q = [[sum(x[t][i] * w.w_q.data[i][j] for i in range(2)) for j in range(2)] for t in range(3)]
        k = [[sum(x[t][i] * w.w_k.data[i][j] for i in range(2)) for j in range(2)] for t in range(3)]
        v = [[sum(x[t][i] * w.w_v.data[i][j] for i in range(2)) for j in range(2)] for t in range(3)]
        for t in range(3):
            s = [sum(q[t][j] * k[u][j] for j in range(2)) / math.sqrt(2) for u in range(3)]
            e = [math.exp(z) for z in s]
            a = [z / sum(e) for z in e]
            head = [sum(a[u] * v[u][j] for u in range(3)) for j in range(2)]
            want = [sum(head[i] * w.w_o.data[i][j] for i in range(2)) for j in range(2)]
            np.testing.assert_allclose(out[t], want, rtol=1e-12)

    def test_single_position(self):
        c = EncoderConfig(d_model=4, n_heads=1, ffn_hidden=4, input_length=1)
        w = weights(c, scale=10.0)
        x = np.random.default_rng(1).normal(size=(1, 1, 4))
        out = multi_head_attention(Tensor(x), w, None, 1).data
        np.testing.assert_allclose(out, x @ w.w_v.data @ w.w_o.data, rtol=1e-12)

    def test_identical_values_position_independent(self):
        c = EncoderConfig(d_model=4, n_heads=2, ffn_hidden=4)
        w = weights(c, scale=10.0)
        w.w_v.data = np.zeros((4, 4))
        w.w_v.data[0, :] = 1.0  # values depend only on feature 0, which is constant below
        x = np.random.default_rng(2).normal(size=(1, 5, 4))
        x[..., 0] = 0.7
        out = multi_head_attention(Tensor(x), w, None, 2).data[0]
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)

    def test_pad_isolation(self):
        c = EncoderConfig(d_model=8, n_heads=2, ffn_hidden=8)
        w = weights(c, scale=20.0)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 8))
        pad = np.zeros((2, 6), dtype=bool)
        pad[0, 4:] = True
        a = multi_head_attention(Tensor(x), w, pad, 2).data
        x2 = x.copy()
        x2[0, 4:] = rng.normal(size=(2, 8)) * 100
        b = multi_head_attention(Tensor(x2), w, pad, 2).data
        np.testing.assert_array_equal(a[0, :4], b[0, :4])

    def test_fully_padded_row_is_zero(self):
        c = EncoderConfig(d_model=4, n_heads=2, ffn_hidden=4)
        x = np.random.default_rng(4).normal(size=(1, 3, 4))
        out = multi_head_attention(Tensor(x), weights(c), np.ones((1, 3), dtype=bool), 2).data
        assert np.all(out == 0) and np.isfinite(out).all()


class TestBlock:
    def test_zero_weights_double_layer_norm(self):
        c = EncoderConfig(d_model=6, n_heads=2, ffn_hidden=5, dropout_rate=0.0)
        w = weights(c, scale=0.0)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 4, 6)))
        one = Tensor(np.ones(6))
        zero = Tensor(np.zeros(6))
        want = nx.layer_norm(nx.layer_norm(x, one, zero), one, zero).data
        np.testing.assert_allclose(encoder_block(x, w, c).data, want, atol=1e-12)

    @pytest.mark.parametrize("shape", [(1, 1, 4), (3, 7, 4), (2, 5, 4)])
    def test_shape_preserved(self, shape):
        c = EncoderConfig(d_model=4, n_heads=2, ffn_hidden=3)
        x = Tensor(np.random.default_rng(0).normal(size=shape))
        assert encoder_block(x, weights(c), c).shape == shape

    def test_gradient_matches_finite_differences(self):
        c = EncoderConfig(d_model=4, n_heads=2, ffn_hidden=6, dropout_rate=0.0)
        w = weights(c, seed=7, scale=20.0)
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        r = rng.normal(size=(2, 3, 4))
        pad = np.array([[False, False, True], [False, False, False]])

        def readout():
            return nx.tsum(nx.mul(encoder_block(x, w, c, pad_mask=pad), r))

        params = [x] + list(vars(w).values())
        for p in params:
            p.grad = None
        with Tape() as tape:
            loss = readout()
        nx.backward(loss, tape)
        for p in params:
            num = numeric_gradient(lambda: readout().item(), p.data, 1e-5)
            assert relative_error(p.grad, num) < 1e-4

    def test_dropout_only_in_training(self):
        c = EncoderConfig(d_model=4, n_heads=2, ffn_hidden=4, dropout_rate=0.5)
        w = weights(c, scale=10.0)
        x = Tensor(np.random.default_rng(9).normal(size=(1, 3, 4)))
        a = encoder_block(x, w, c, training=False).data
        b = encoder_block(x, w, c, training=False).data
        d = encoder_block(x, w, c, training=True, rng=np.random.default_rng(0)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, d)


class TestEncode:
    def test_zero_blocks_identity(self):
        c = EncoderConfig(n_blocks=0, d_model=4, n_heads=2)
        x = Tensor(np.arange(12.0).reshape(1, 3, 4))
        assert encode(x, [], c) is x

    def test_composition(self):
        c = EncoderConfig(n_blocks=2, d_model=4, n_heads=2, ffn_hidden=4, dropout_rate=0.0)
        ws = [weights(c, 1, 10.0), weights(c, 2, 10.0)]
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 4)))
        want = encoder_block(encoder_block(x, ws[0], c), ws[1], c).data
        np.testing.assert_array_equal(encode(x, ws, c).data, want)

    def test_permutation_equivariance(self):
        # positional information enters only through the input, so swapping
        # two positions (with their encodings) swaps the output rows
        c = EncoderConfig(n_blocks=2, d_model=8, n_heads=2, ffn_hidden=8, dropout_rate=0.0)
        ws = [weights(c, 3, 10.0), weights(c, 4, 10.0)]
        x = np.random.default_rng(1).normal(size=(1, 6, 8))
        perm = np.array([0, 4, 2, 3, 1, 5])
        a = encode(Tensor(x), ws, c).data
        b = encode(Tensor(x[:, perm]), ws, c).data
        np.testing.assert_allclose(b, a[:, perm], atol=1e-12)

    def test_future_position_influences_past(self):
        c = EncoderConfig(n_blocks=1, d_model=8, n_heads=2, ffn_hidden=8, dropout_rate=0.0)
        ws = [weights(c, 5, 10.0)]
        x = np.random.default_rng(2).normal(size=(1, 5, 8))
        a = encode(Tensor(x), ws, c).data
        x[0, 4] += 1.0
        b = encode(Tensor(x), ws, c).data
        assert np.abs(a[0, 0] - b[0, 0]).max() > 1e-9
