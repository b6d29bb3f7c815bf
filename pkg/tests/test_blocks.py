import numpy as np
import pytest

from helpers import randomize_state
from wattnet.blocks import SEParams, SqueezeExcite, WattStage, WideMBConv, WideMBConvParams, se_block
from wattnet.errors import ConfigurationError
from wattnet.gradcheck import check_gradients
from wattnet.model import _count
from wattnet.tensor import Tensor, tensor


def params(**kw):
    base = dict(in_channels=8, out_channels=8, base_width=8, k=1, kernel_size=3, stride=1)
    base.update(kw)
    return WideMBConvParams(**base)


class TestSqueezeExcite:
    def test_zero_weights_half(self, rng):
        p = SEParams(tensor(np.zeros((2, 8))), tensor(np.zeros((8, 2))))
        x = rng.standard_normal((2, 8, 3, 3))
        np.testing.assert_array_equal(se_block(tensor(x), p).data, 0.5 * x)

    def test_zero_input(self, rng):
        se = SqueezeExcite(8, rng=rng)
        np.testing.assert_array_equal(se(tensor(np.zeros((1, 8, 3, 3)))).data, 0)

    def test_attenuates(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = tensor(rng.standard_normal((1, 8, 3, 3)))
            assert np.all(np.abs(SqueezeExcite(8, rng=rng)(x).data) <= np.abs(x.data))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            SqueezeExcite(8, rng=rng)(tensor(np.ones((1, 4, 2, 2))))


class TestWideMBConv:
    def test_internal_width_is_k_times_base(self, rng):
        for k in (1, 2, 3):
            blk = WideMBConv(params(k=k), rng=rng)
            assert blk.expand.conv.out_ch == 8 * k
            assert all(l.conv.out_ch == 8 * k for l in blk.depthwise_layers)
            assert blk.se.channels == 8 * k and blk.project.conv.in_ch == 8 * k

    def test_closed_form_count(self, rng):
        # per block: expand, depthwise layers, SE (with biases) and project, each conv with bias and
        # a 4-value-per-channel BN
        for cin, cout, base, k, ks in [(32, 16, 32, 2, 3), (16, 24, 96, 3, 3), (24, 40, 144, 1, 5)]:
            p = params(in_channels=cin, out_channels=cout, base_width=base, k=k, kernel_size=ks)
            c = k * base
            expected = (cin * c + c + 4 * c) + 2 * (ks * ks * c + c + 4 * c) \
                + (2 * c * (c // 4) + c // 4 + c) + (c * cout + cout + 4 * cout)
            assert _count(WideMBConv(p, rng=rng)) == expected

    def test_widening_changes_only_internal_channels(self, rng):
        x = tensor(rng.standard_normal((1, 8, 6, 6)))
        assert WideMBConv(params(k=1), rng=rng)(x).shape == WideMBConv(params(k=2), rng=rng)(x).shape

    def test_input_channel_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            WideMBConv(params(), rng=rng)(tensor(np.ones((1, 4, 4, 4))))

    def test_invalid_params(self):
        with pytest.raises(ConfigurationError):
            params(k=0).validate()
        with pytest.raises(ConfigurationError):
            params(base_width=6).validate()  # SE ratio 4 must divide the width

    def test_gradients(self, rng):
        p = params(in_channels=4, out_channels=4, base_width=4, k=2, kernel_size=3, stride=2)
        # inference-mode BN: a bias feeding a batch-statistics BN has an exactly zero gradient,
        # which the relative error cannot score; the batch-statistics backward has its own check
        blk = randomize_state(WideMBConv(p, rng=rng, dtype=np.float64), rng).eval()
        x = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        w = tensor(rng.standard_normal((2, 4, 2, 2)))
        assert check_gradients(lambda: (blk(x) * w).sum(), [x] + blk.parameters(), step=1e-5, samples=40, rng=rng) < 1e-4


class TestWattStage:
    def test_zeroed_path_reduces_to_skip(self, rng):
        stage = WattStage(params(), attention=True, rng=rng, dtype=np.float64)
        for p in stage.block.parameters():
            p.data[...] = 0.0
        x = rng.standard_normal((2, 8, 5, 5))
        np.testing.assert_array_equal(stage(tensor(x)).data, x)

    def test_attention_toggle_keeps_shape(self, rng):
        x = tensor(rng.standard_normal((1, 8, 6, 6)))
        on = WattStage(params(), attention=True, rng=np.random.default_rng(0))
        off = WattStage(params(), attention=False, rng=np.random.default_rng(0))
        a, b = on(x).data, off(x).data
        assert a.shape == b.shape and not np.allclose(a, b)

    def test_skip_modes(self, rng):
        assert WattStage(params(), rng=rng).skip_mode == "identity"
        assert WattStage(params(out_channels=16), rng=rng).skip_mode == "none"
        assert WattStage(params(stride=2), skip="project", rng=rng).skip_mode == "project"
        assert WattStage(params(), skip="none", rng=rng).skip_mode == "none"

    def test_identity_skip_impossible(self, rng):
        with pytest.raises(ConfigurationError):
            WattStage(params(out_channels=16), skip="identity", rng=rng)

    def test_unknown_skip(self, rng):
        with pytest.raises(ConfigurationError):
            WattStage(params(), skip="bogus", rng=rng)

    def test_projection_skip_shapes(self, rng):
        stage = WattStage(params(out_channels=16, stride=2), skip="project", rng=rng)
        assert stage(tensor(rng.standard_normal((1, 8, 6, 6)))).shape == (1, 16, 3, 3)

    def test_two_stages_compose(self, rng):
        s1 = WattStage(params(out_channels=16, stride=2), rng=rng, dtype=np.float64)
        s2 = WattStage(params(in_channels=16, out_channels=16), rng=rng, dtype=np.float64)
        x = tensor(rng.standard_normal((1, 8, 6, 6)))
        y1 = s1(x)
        # second stage adds its residual around the first stage's output
        y2 = s2(y1)
        inner = s2.attention(s2.block(y1))
        np.testing.assert_allclose(y2.data, y1.data + inner.data, rtol=1e-12)

    def test_gradients(self, rng):
        stage = WattStage(params(in_channels=8, out_channels=8, base_width=4, k=2), rng=rng, dtype=np.float64)
        randomize_state(stage, rng).eval()
        x = Tensor(rng.standard_normal((2, 8, 3, 3)), requires_grad=True)
        w = tensor(rng.standard_normal((2, 8, 3, 3)))
        err = check_gradients(lambda: (stage(x) * w).sum(), [x] + stage.parameters(), step=1e-5, samples=40, rng=rng)
        assert err < 1e-4
