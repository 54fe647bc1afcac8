import numpy as np
import pytest

from src.cross_fusion import (
    BranchNorm,
    CfConfig,
    CfLayerWeights,
    CspWeights,
    GOctConvWeights,
    ParamCount,
    StageSpec,
    cf_layer,
    count_params,
    csp_block,
    goctconv,
    stage_sizes,
)
from src.errors import ShapeError
from src.tensor_core import ConvLayer, GradTape, Tensor, add_scalars, affine, finite_diff_check, mse

THREE_STAGES = (StageSpec(8, 1), StageSpec(16, 2), StageSpec(32, 4))


def _unit_conv():
    return ConvLayer(weights=Tensor.ones((1, 1, 1, 1)), bias=Tensor.zeros((1,)))


def _inputs(rng, stages, base=32, batch=1):
    return [Tensor(rng.uniform(-1, 1, size=(batch, s.channels, base // s.scale, base // s.scale))) for s in stages]


class TestConfig:

    def test_stage_spec_validation(self):
        for channels, scale in [(0, 1), (4, 0), (4, 3), (4, 6)]:
            with pytest.raises(ValueError):
                StageSpec(channels, scale)
        assert StageSpec(4, 8).scale == 8

    def test_config_validation(self):
        stages = THREE_STAGES[:2]
        invalid = [
            dict(in_stages=(), out_stages=stages),
            dict(in_stages=(StageSpec(8, 2), StageSpec(8, 1)), out_stages=stages),
            dict(in_stages=(StageSpec(8, 2), StageSpec(8, 2)), out_stages=stages),
            dict(in_stages=stages, out_stages=stages, n=0),
            dict(in_stages=stages, out_stages=stages, K=2),
            dict(in_stages=stages, out_stages=stages, K=0),
        ]
        for kwargs in invalid:
            with pytest.raises(ValueError):
                CfConfig(**kwargs)

    def test_layer_stages(self):
        config = CfConfig(in_stages=THREE_STAGES[:2], out_stages=THREE_STAGES, n=3)

        assert config.layer_stages(0) == (THREE_STAGES[:2], THREE_STAGES)
        assert config.layer_stages(1) == (THREE_STAGES, THREE_STAGES)
        assert config.with_kernel(3).K == 3
        assert config.with_kernel(3).n == 3

    def test_stage_sizes(self):
        rng = np.random.default_rng(0)
        assert stage_sizes(_inputs(rng, THREE_STAGES, base=16), THREE_STAGES) == (16, 16)

        bad = _inputs(rng, THREE_STAGES, base=16)
        bad[2] = Tensor.zeros((1, 32, 8, 8))
        with pytest.raises(ShapeError, match='scale 4'):
            stage_sizes(bad, THREE_STAGES)
        with pytest.raises(ShapeError, match='channels'):
            stage_sizes([Tensor.zeros((1, 5, 16, 16))], THREE_STAGES[:1])
        with pytest.raises(ShapeError):
            stage_sizes(bad[:2], THREE_STAGES)


class TestGOctConv:

    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_identity(self):
        stages = (StageSpec(4, 1),)
        config = CfConfig(stages, stages, K=1)
        identity = ConvLayer(weights=Tensor(np.eye(4).reshape(4, 4, 1, 1)), bias=Tensor.zeros((4,)))
        weights = GOctConvWeights(stages, stages, {(0, 0): identity})
        x = _inputs(self.rng, stages, base=6)

        (y,) = goctconv(x, config, weights)

        np.testing.assert_array_equal(y.data, x[0].data)

    def test_shape_contract(self):
        config = CfConfig(THREE_STAGES, THREE_STAGES, K=3)
        weights = GOctConvWeights.create(self.rng, THREE_STAGES, THREE_STAGES, 3)

        outputs = goctconv(_inputs(self.rng, THREE_STAGES), config, weights)

        assert [y.shape for y in outputs] == [(1, 8, 32, 32), (1, 16, 16, 16), (1, 32, 8, 8)]

    def test_different_in_and_out_stages(self):
        in_stages = (StageSpec(4, 1), StageSpec(8, 4))
        out_stages = (StageSpec(6, 2), StageSpec(6, 4), StageSpec(10, 8))
        config = CfConfig(in_stages, out_stages)
        weights = GOctConvWeights.create(self.rng, in_stages, out_stages, 1)

        outputs = goctconv(_inputs(self.rng, in_stages, base=16), config, weights)

        assert [y.shape for y in outputs] == [(1, 6, 8, 8), (1, 6, 4, 4), (1, 10, 2, 2)]
        assert len(weights.convs) == 6

    def test_sums_every_input_scale(self):
        stages = (StageSpec(1, 1), StageSpec(1, 2))
        config = CfConfig(stages, (StageSpec(1, 1),))
        weights = GOctConvWeights(stages, (StageSpec(1, 1),), {(0, 0): _unit_conv(), (1, 0): _unit_conv()})
        fine = Tensor(np.zeros((1, 1, 4, 4)))
        coarse = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))

        (y,) = goctconv([fine, coarse], config, weights)

        expected = np.repeat(np.repeat(coarse.data, 2, axis=2), 2, axis=3)
        np.testing.assert_array_equal(y.data, expected)

    def test_conv_weight_count_matches_enumeration(self):
        for K in (1, 3, 5):
            weights = GOctConvWeights.create(self.rng, THREE_STAGES, THREE_STAGES, K)
            closed_form = sum(s.channels * t.channels * K * K for s in THREE_STAGES for t in THREE_STAGES)
            enumerated = sum(layer.weights.data.size for layer in weights.convs.values())

            assert weights.param_count().conv_weights == closed_form == enumerated

    def test_small_hand_count(self):
        stages = (StageSpec(4, 1),)
        count = GOctConvWeights.create(self.rng, stages, stages, 1).param_count()

        assert count.conv_weights == 16
        assert count.biases == 4

    def test_k_squared_law(self):
        k1 = GOctConvWeights.create(self.rng, THREE_STAGES, THREE_STAGES, 1).param_count().conv_weights
        k3 = GOctConvWeights.create(self.rng, THREE_STAGES, THREE_STAGES, 3).param_count().conv_weights

        assert k3 == 9 * k1

    def test_kernel_mismatch(self):
        config = CfConfig(THREE_STAGES, THREE_STAGES, K=3)
        weights = GOctConvWeights.create(self.rng, THREE_STAGES, THREE_STAGES, 1)
        with pytest.raises(ShapeError, match='K=1'):
            goctconv(_inputs(self.rng, THREE_STAGES), config, weights)

    def test_scale_mismatch(self):
        config = CfConfig(THREE_STAGES, THREE_STAGES)
        weights = GOctConvWeights.create(self.rng, THREE_STAGES, THREE_STAGES, 1)
        inputs = _inputs(self.rng, THREE_STAGES)
        inputs[1] = Tensor.zeros((1, 16, 8, 8))
        with pytest.raises(ShapeError):
            goctconv(inputs, config, weights)


class TestCspBlock:

    def setup_method(self):
        self.rng = np.random.default_rng(1)

    def test_zero_weights_give_zero(self):
        weights = CspWeights.create(self.rng, 4)
        for param in weights.parameters():
            param.data[...] = 0.0

        out = csp_block(Tensor(self.rng.uniform(-1, 1, size=(1, 4, 6, 6))), weights)

        np.testing.assert_array_equal(out.data, np.zeros((1, 4, 6, 6)))

    def test_preserves_shape(self):
        for channels in (2, 4, 16):
            out = csp_block(Tensor.ones((2, channels, 5, 5)), CspWeights.create(self.rng, channels))
            assert out.shape == (2, channels, 5, 5)

    def test_odd_channels(self):
        with pytest.raises(ShapeError, match='even'):
            CspWeights.create(self.rng, 3)
        with pytest.raises(ShapeError, match='odd'):
            csp_block(Tensor.ones((1, 3, 4, 4)), CspWeights.create(self.rng, 4))

    def test_biases_start_at_zero(self):
        weights = CspWeights.create(self.rng, 8)
        for layer in weights.layers():
            np.testing.assert_array_equal(layer.bias.data, np.zeros(layer.out_channels))

    def test_gradient_matches_finite_differences(self):
        x = Tensor(self.rng.uniform(-1, 1, size=(1, 4, 6, 6)))
        weights = CspWeights.create(self.rng, 4)
        target = Tensor(self.rng.uniform(-1, 1, size=(1, 4, 6, 6)))

        error = finite_diff_check(lambda: mse(csp_block(x, weights), target), [x, *weights.parameters()])

        assert error <= 1e-4

    def test_param_count(self):
        count = CspWeights.create(self.rng, 8).param_count()
        # two 8->4 splits, 4->4 1x1, 4->4 3x3, 8->8 fuse
        assert count.conv_weights == 2 * 32 + 16 + 144 + 64
        assert count.biases == 4 + 4 + 4 + 4 + 8


class TestCfLayer:

    def setup_method(self):
        self.rng = np.random.default_rng(2)
        self.stages = (StageSpec(2, 1), StageSpec(4, 2), StageSpec(4, 4))
        self.config = CfConfig(self.stages, self.stages, K=3)
        self.weights = CfLayerWeights.create(self.rng, self.config)

    def test_zero_inputs_give_zero(self):
        inputs = [Tensor.zeros((1, s.channels, 8 // s.scale, 8 // s.scale)) for s in self.stages]

        outputs = cf_layer(inputs, self.config, self.weights)

        for y in outputs:
            np.testing.assert_allclose(y.data, 0.0, atol=1e-12)

    def test_shape_preserved(self):
        outputs = cf_layer(_inputs(self.rng, self.stages, base=8, batch=2), self.config, self.weights)
        assert [y.shape for y in outputs] == [(2, 2, 8, 8), (2, 4, 4, 4), (2, 4, 2, 2)]

    def test_every_exit_reaches_every_entry(self):
        inputs = _inputs(self.rng, self.stages, base=8)
        for t in range(len(self.stages)):
            with GradTape() as tape:
                outputs = cf_layer(inputs, self.config, self.weights)
                target = Tensor(self.rng.uniform(-1, 1, size=outputs[t].shape))
                loss = mse(outputs[t], target)
            grads = tape.gradient(loss, inputs)
            for s, grad in enumerate(grads):
                assert np.abs(grad).max() > 0.0, f"exit {t} gets no gradient from entry {s}"

    def test_gradient_matches_finite_differences(self):
        inputs = _inputs(self.rng, self.stages, base=8)
        targets = [Tensor(self.rng.uniform(-1, 1, size=(1, s.channels, 8 // s.scale, 8 // s.scale)))
                   for s in self.stages]
        # conv biases ahead of batchnorm have an identically zero gradient, so only weights are checked there
        params = list(inputs) + [conv.weights for conv in self.weights.goct.convs.values()]
        for norm, csp in zip(self.weights.norms, self.weights.csps):
            params += norm.parameters() + csp.parameters()

        def loss():
            outputs = cf_layer(inputs, self.config, self.weights)
            return _mean_mse(outputs, targets)

        assert finite_diff_check(loss, params, sample=6, seed=0) <= 1e-4

    def test_inference_mode_uses_running_stats(self):
        inputs = _inputs(self.rng, self.stages, base=8)
        cf_layer(inputs, self.config, self.weights, training=True)

        outputs = cf_layer(inputs, self.config, self.weights, training=False)

        assert [y.shape for y in outputs] == [(1, 2, 8, 8), (1, 4, 4, 4), (1, 4, 2, 2)]
        assert not np.allclose(self.weights.norms[0].running_stats.mean, 0.0)

    def test_param_count_grows_with_k(self):
        k1 = CfLayerWeights.create(self.rng, self.config.with_kernel(1)).param_count()
        k3 = CfLayerWeights.create(self.rng, self.config.with_kernel(3)).param_count()

        assert k3.total > k1.total
        assert k3.bn == k1.bn == 2 * (2 + 4 + 4)
        assert k3.prelu == k1.prelu == 2 + 4 + 4


def _mean_mse(outputs, targets):
    return affine(add_scalars([mse(y, t) for y, t in zip(outputs, targets)]), 1.0 / len(outputs))


class TestCountParams:

    def test_conv_layer(self):
        layer = ConvLayer.create(np.random.default_rng(0), 4, 4, 1)
        assert count_params(layer) == ParamCount(conv_weights=16, biases=4)

    def test_building_blocks(self):
        rng = np.random.default_rng(0)
        csp = CspWeights.create(rng, 4)
        assert count_params(csp) == csp.param_count()
        with pytest.raises(TypeError):
            count_params(BranchNorm.create(4))
        layer = CfLayerWeights.create(rng, CfConfig((StageSpec(4, 1),), (StageSpec(4, 1),)))
        assert count_params(layer).total == 16 + 4 + 8 + 4 + csp.param_count().total

    def test_unknown_module(self):
        with pytest.raises(TypeError):
            count_params(object())

    def test_param_count_arithmetic(self):
        total = ParamCount(1, 2, 3, 4) + ParamCount(10, 20, 30, 40)
        assert total.as_dict() == {'conv_weights': 11, 'biases': 22, 'bn': 33, 'prelu': 44, 'total': 110}
