import numpy as np
import pytest

from core.errors import ConfigError, DimensionError
from core.gradcheck import gradcheck
from core.nn import (
    MASK_VALUE,
    Conv1d,
    ConvTranspose1d,
    Embedding,
    GQAttention,
    LayerNorm,
    Linear,
    MLP,
    Module,
    causal_mask,
    conv_output_length,
    gqa_attention,
    kv_group_index,
    linear_forward,
    multi_head_attention,
    sinusoidal_embedding,
    temporal_conv1d,
    temporal_conv_transpose1d,
)
from core.tensor import Tape, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestLinear:
    def test_identity(self):
        out = linear_forward(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            linear_forward(Tensor(np.ones((1, 3))), Tensor(np.eye(2)))

    def test_bias_shape_checked(self):
        with pytest.raises(DimensionError):
            linear_forward(Tensor(np.ones((1, 2))), Tensor(np.eye(2)), Tensor(np.zeros(3)))

    def test_module_gradients(self, rng):
        layer = Linear(3, 2, rng)
        x = Tensor(rng.standard_normal((4, 3)))
        ok, worst, _ = gradcheck(lambda: (layer(x) ** 2).sum(), layer.parameters(), tol=1e-6)
        assert ok, worst


class TestConvolution:
    def test_unit_kernel_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 3)))
        kernel = Tensor(np.eye(3)[None])
        np.testing.assert_allclose(temporal_conv1d(x, kernel).data, x.data)

    def test_strided_sum(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1))
        kernel = Tensor(np.ones((2, 1, 1)))
        out = temporal_conv1d(x, kernel, stride=2, pad=0)
        np.testing.assert_allclose(out.data.reshape(-1), [3.0, 7.0])

    def test_output_length(self):
        assert conv_output_length(32, 4, 2, 1) == 16
        with pytest.raises(DimensionError):
            conv_output_length(2, 5, 1, 0)
        with pytest.raises(ConfigError):
            conv_output_length(8, 2, 0, 0)

    def test_transpose_restores_length(self, rng):
        down = Conv1d(2, 4, 4, rng, stride=2, pad=1)
        up = ConvTranspose1d(4, 2, 4, rng, stride=2, pad=1)
        x = Tensor(rng.standard_normal((1, 16, 2)))
        h = down(x)
        assert h.shape == (1, 8, 4)
        assert up(h).shape == (1, 16, 2)

    def test_transpose_is_adjoint(self, rng):
        kernel = rng.standard_normal((3, 2, 4))
        x = rng.standard_normal((1, 9, 2))
        y = rng.standard_normal((1, 4, 4))
        fwd = temporal_conv1d(Tensor(x), Tensor(kernel), stride=2, pad=0).data
        back_kernel = np.transpose(kernel, (0, 2, 1))
        adj = temporal_conv_transpose1d(Tensor(y), Tensor(back_kernel), stride=2, pad=0).data
        assert np.sum(fwd * y) == pytest.approx(np.sum(x * adj))

    def test_conv_gradients(self, rng):
        conv = Conv1d(2, 3, 3, rng, stride=2, pad=1)
        tconv = ConvTranspose1d(3, 2, 4, rng, stride=2, pad=1)
        x = Tensor(rng.standard_normal((2, 6, 2)), requires_grad=True)
        fn = lambda: (tconv(conv(x)) ** 2).mean()
        ok, worst, _ = gradcheck(fn, [x] + conv.parameters() + tconv.parameters(), tol=1e-5)
        assert ok, worst

    def test_bad_output_padding(self, rng):
        with pytest.raises(ConfigError):
            temporal_conv_transpose1d(Tensor(np.ones((1, 4, 1))), Tensor(np.ones((2, 1, 1))), stride=2,
                                      output_padding=2)


class TestAttention:
    def test_group_index(self):
        np.testing.assert_array_equal(kv_group_index(8, 4), [0, 0, 1, 1, 2, 2, 3, 3])
        np.testing.assert_array_equal(kv_group_index(4, 4), [0, 1, 2, 3])
        with pytest.raises(ConfigError):
            kv_group_index(6, 4)

    def test_single_key_returns_values(self, rng):
        q = Tensor(rng.standard_normal((2, 3, 4, 5)))
        k = Tensor(rng.standard_normal((2, 1, 2, 5)))
        v = Tensor(rng.standard_normal((2, 1, 2, 5)))
        out = gqa_attention(q, k, v).data
        expected = np.repeat(v.data, 2, axis=2)
        for t in range(3):
            np.testing.assert_allclose(out[:, t], expected[:, 0])

    def test_gqa_equals_mha_with_repeated_heads(self, rng):
        q = Tensor(rng.standard_normal((1, 4, 4, 3)))
        k = rng.standard_normal((1, 6, 2, 3))
        v = rng.standard_normal((1, 6, 2, 3))
        gqa = gqa_attention(q, Tensor(k), Tensor(v)).data
        mha = multi_head_attention(q, Tensor(np.repeat(k, 2, axis=2)), Tensor(np.repeat(v, 2, axis=2))).data
        np.testing.assert_allclose(gqa, mha, atol=1e-12)

    def test_causal_mask_aligns_last_query(self):
        m = causal_mask(2, 4)
        assert m[0].tolist() == [0.0, 0.0, 0.0, MASK_VALUE]
        assert m[1].tolist() == [0.0, 0.0, 0.0, 0.0]

    def test_causal_output_ignores_future(self, rng):
        attn = GQAttention(8, 4, 2, rng)
        x = rng.standard_normal((1, 5, 8))
        full = attn(Tensor(x), causal=True).data
        y = x.copy()
        y[0, 4] += 10.0
        changed = attn(Tensor(y), causal=True).data
        np.testing.assert_allclose(full[0, :4], changed[0, :4], atol=1e-12)

    def test_kv_cache_matches_full_pass(self, rng):
        attn = GQAttention(8, 4, 2, rng)
        x = rng.standard_normal((1, 4, 8))
        full = attn(Tensor(x), causal=True).data
        cache = {}
        steps = [attn(Tensor(x[:, t:t + 1]), causal=True, cache=cache).data for t in range(4)]
        np.testing.assert_allclose(np.concatenate(steps, axis=1), full, atol=1e-10)

    def test_cross_attention_gradients(self, rng):
        attn = GQAttention(4, 2, 1, rng, source_dim=3)
        x = Tensor(rng.standard_normal((1, 3, 4)))
        src = Tensor(rng.standard_normal((1, 2, 3)), requires_grad=True)
        ok, worst, _ = gradcheck(lambda: (attn(x, source=src) ** 2).sum(), [src] + attn.parameters(), tol=1e-5)
        assert ok, worst


class TestModules:
    def test_named_parameters_order(self, rng):
        mlp = MLP(4, 8, rng)
        assert [n for n, _ in mlp.named_parameters()] == ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
        assert mlp.num_parameters() == 4 * 8 + 8 + 8 * 4 + 4

    def test_state_dict_roundtrip_and_strict(self, rng):
        a, b = MLP(3, 5, rng), MLP(3, 5, rng)
        b.load_state_dict(a.state_dict())
        x = Tensor(rng.standard_normal((2, 3)))
        np.testing.assert_array_equal(a(x).data, b(x).data)
        with pytest.raises(DimensionError):
            b.load_state_dict({"fc1.weight": np.zeros((3, 5))})

    def test_shape_mismatch_on_load(self, rng):
        layer = Linear(2, 2, rng)
        state = layer.state_dict()
        state["weight"] = np.zeros((3, 2))
        with pytest.raises(DimensionError):
            layer.load_state_dict(state)

    def test_freeze_and_unfreeze(self, rng):
        layer = LayerNorm(4)
        layer.freeze()
        assert not any(p.requires_grad for p in layer.parameters())
        layer.unfreeze()
        assert all(p.requires_grad for p in layer.parameters())

    def test_list_members_are_discovered(self, rng):
        class Stack(Module):
            def __init__(self):
                self.layers = [Linear(2, 2, rng), Linear(2, 2, rng, bias=False)]

        names = [n for n, _ in Stack().named_parameters()]
        assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight"]

    def test_layer_norm_statistics(self, rng):
        out = LayerNorm(6)(Tensor(rng.standard_normal((3, 6)) * 5 + 2)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_embedding_gradient_accumulates_repeats(self, rng):
        emb = Embedding(5, 3, rng)
        with Tape() as tape:
            loss = emb([1, 1, 4]).sum()
        (g,) = tape.backward(loss, [emb.table])
        np.testing.assert_allclose(g[1], [2.0, 2.0, 2.0])
        np.testing.assert_allclose(g[4], [1.0, 1.0, 1.0])
        np.testing.assert_allclose(g[0], 0.0)

    def test_sinusoidal_embedding(self):
        emb = sinusoidal_embedding([0.0, 0.5], 8)
        assert emb.shape == (2, 8)
        np.testing.assert_allclose(emb[0, :4], 0.0)
        np.testing.assert_allclose(emb[0, 4:], 1.0)
        assert sinusoidal_embedding([0.3], 7).shape == (1, 7)
