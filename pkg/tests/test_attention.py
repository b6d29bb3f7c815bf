import numpy as np
import pytest

from wattnet import ops
from wattnet.attention import (Attention, ChannelAttentionParams, SpatialAttentionParams, apply_attention,
                               attention_maps, channel_attention, spatial_attention)
from wattnet.errors import ConfigurationError
from wattnet.gradcheck import check_gradients
from wattnet.tensor import Tensor, tensor


def zero_params(c, r=2):
    cp = ChannelAttentionParams(tensor(np.zeros((c // r, c))), tensor(np.zeros((c, c // r))))
    sp = SpatialAttentionParams(tensor(np.zeros((1, 2, 7, 7))), tensor(np.zeros(1)))
    return cp, sp


class TestChannelGate:
    def test_zero_weights_half(self, rng):
        cp, _ = zero_params(4)
        np.testing.assert_array_equal(channel_attention(tensor(rng.standard_normal((2, 4, 3, 3))), cp).data, 0.5)

    @pytest.mark.parametrize("value,expected", [(0.0, 0.5), (1.0, 1 / (1 + np.exp(-2.0)))])
    def test_identity_mlp_hand_case(self, value, expected):
        cp = ChannelAttentionParams(tensor(np.eye(1)), tensor(np.eye(1)))
        gate = channel_attention(tensor(np.full((1, 1, 3, 3), value)), cp).item()
        assert gate == pytest.approx(expected, abs=1e-12)

    def test_channel_mismatch(self, rng):
        cp, _ = zero_params(4)
        with pytest.raises(ConfigurationError):
            channel_attention(tensor(rng.standard_normal((1, 6, 2, 2))), cp)

    def test_shared_mlp_branch_order_irrelevant(self, rng):
        att = Attention(8, 2, rng=rng)
        x = tensor(rng.standard_normal((2, 8, 4, 4)))
        avg = ops.global_avg_pool(x).reshape(2, 8)
        mx = ops.global_max_pool(x).reshape(2, 8)
        mlp = lambda v: (v @ att.omega0.T).relu() @ att.omega1.T
        np.testing.assert_allclose((mlp(avg) + mlp(mx)).data, (mlp(mx) + mlp(avg)).data, rtol=0, atol=0)
        np.testing.assert_allclose(att.maps(x).mc.data.reshape(2, 8), (mlp(avg) + mlp(mx)).sigmoid().data)


class TestSpatialGate:
    def test_zero_weights_half(self, rng):
        _, sp = zero_params(4)
        np.testing.assert_array_equal(spatial_attention(tensor(rng.standard_normal((2, 4, 5, 6))), sp).data, 0.5)

    def test_single_tap_hand_case(self):
        k = np.zeros((1, 2, 7, 7))
        k[0, :, 3, 3] = 1.0
        sp = SpatialAttentionParams(tensor(k), tensor(np.zeros(1)))
        x = np.array([0.2, -0.4, 1.0]).reshape(1, 3, 1, 1)
        v1, v2 = x.mean(), x.max()
        assert spatial_attention(tensor(x), sp).item() == pytest.approx(1 / (1 + np.exp(-(v1 + v2))), abs=1e-12)

    @pytest.mark.parametrize("h,w", [(1, 1), (3, 8), (9, 4)])
    def test_shape(self, rng, h, w):
        att = Attention(8, 8, rng=rng)
        assert spatial_attention(tensor(rng.standard_normal((2, 8, h, w))), att.spatial_params).shape == (2, 1, h, w)


class TestApplyAttention:
    def test_zero_input(self, rng):
        att = Attention(8, rng=rng)
        np.testing.assert_array_equal(att(tensor(np.zeros((1, 8, 4, 4)))).data, 0.0)

    def test_zero_weights_quarter(self, rng):
        cp, sp = zero_params(8)
        x = rng.standard_normal((2, 8, 5, 5))
        np.testing.assert_array_equal(apply_attention(tensor(x), cp, sp).data, 0.25 * x)

    def test_saturated_gates_pass_through(self, rng):
        x = rng.uniform(0.5, 1.0, (1, 8, 4, 4))
        cp = ChannelAttentionParams(tensor(np.full((4, 8), 50.0)), tensor(np.full((8, 4), 50.0)))
        sp = SpatialAttentionParams(tensor(np.full((1, 2, 7, 7), 50.0)), tensor(np.zeros(1)))
        np.testing.assert_allclose(apply_attention(tensor(x), cp, sp).data, x, rtol=1e-9)

    def test_gates_open_interval_and_attenuation(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            att = Attention(8, 4, rng=rng)
            x = tensor(rng.standard_normal((2, 8, 5, 5)))
            maps = att.maps(x)
            assert np.all((maps.mc.data > 0) & (maps.mc.data < 1))
            assert np.all((maps.ms.data > 0) & (maps.ms.data < 1))
            assert np.all(np.abs(att(x).data) <= np.abs(x.data))

    def test_channel_before_spatial(self, rng):
        att = Attention(8, 4, rng=rng)
        x = tensor(rng.standard_normal((1, 8, 4, 4)))
        maps = attention_maps(x, att.channel_params, att.spatial_params)
        np.testing.assert_allclose(att(x).data, (x.data * maps.mc.data) * maps.ms.data, rtol=1e-12)
        wrong_order = spatial_attention(x, att.spatial_params)
        assert not np.allclose(maps.ms.data, wrong_order.data)

    def test_reduction_must_divide(self):
        with pytest.raises(ConfigurationError):
            Attention(12, 8)

    def test_gradients(self, rng):
        att = Attention(4, 2, rng=rng)
        x = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
        w = tensor(rng.standard_normal((1, 4, 3, 3)))
        err = check_gradients(lambda: (att(x) * w).sum(), [x] + att.parameters())
        assert err < 1e-6
