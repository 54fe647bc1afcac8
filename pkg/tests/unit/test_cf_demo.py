import numpy as np
import pytest

from src.cf_demo import (
    DEMO_STAGES,
    backbone_forward,
    build_backbone,
    default_demo_config,
    overfit_demo,
    smooth_targets,
)
from src.cross_fusion import CfConfig, StageSpec
from src.errors import TrainingDivergedError
from src.tensor_core import Tensor


class TestBackbone:

    def test_feature_shapes_follow_stages(self):
        layers = build_backbone(np.random.default_rng(0), DEMO_STAGES)
        features = backbone_forward(Tensor.ones((1, 3, 16, 16)), layers)

        assert [f.shape for f in features] == [(1, 8, 16, 16), (1, 16, 8, 8), (1, 32, 4, 4)]

    def test_smooth_targets(self):
        targets = smooth_targets(np.random.default_rng(0), [(1, 4, 8, 8), (1, 2, 4, 4)], std=0.2)

        for target in targets:
            assert abs(target.data.mean()) < 1e-12
            assert target.data.std() == pytest.approx(0.2)
        assert [t.shape for t in targets] == [(1, 4, 8, 8), (1, 2, 4, 4)]

    def test_more_blur_passes_are_smoother(self):
        shape = (1, 2, 16, 16)
        rough = smooth_targets(np.random.default_rng(3), [shape], passes=0)[0].data
        smooth = smooth_targets(np.random.default_rng(3), [shape], passes=2)[0].data

        def roughness(x):
            return np.abs(np.diff(x, axis=3)).mean()

        assert roughness(smooth) < 0.5 * roughness(rough)
        assert smooth.std() == pytest.approx(rough.std())


class TestOverfitDemo:

    def test_default_config(self):
        config = default_demo_config()
        assert config.n == 2
        assert config.K == 1
        assert default_demo_config(K=3).K == 3

    def test_no_steps(self):
        log = overfit_demo(steps=0)
        assert log.losses == []
        assert log.final_loss is None

    def test_zero_learning_rate_keeps_loss_flat(self):
        log = overfit_demo(steps=4, lr=0.0)

        assert len(log.losses) == 4
        assert log.losses == [log.losses[0]] * 4

    def test_deterministic(self):
        first = overfit_demo(seed=5, steps=6)
        second = overfit_demo(seed=5, steps=6)
        other = overfit_demo(seed=6, steps=6)

        assert first.losses == second.losses
        assert first.losses != other.losses
        assert first.seed == 5
        assert first.lr == 0.01

    def test_loss_goes_down(self):
        log = overfit_demo(steps=40)
        assert min(log.losses[1:]) < log.losses[0]

    def test_base_must_divide_deepest_scale(self):
        with pytest.raises(ValueError, match="divisible"):
            overfit_demo(base=18, steps=1)

    def test_non_finite_loss(self, mocker):
        mocker.patch("src.cf_demo.mse", side_effect=lambda y, t: Tensor(np.nan))
        with pytest.raises(TrainingDivergedError) as info:
            overfit_demo(steps=3)

        assert info.value.step == 0
        assert info.value.log.losses == []

    def test_custom_config(self):
        stages = (StageSpec(4, 1), StageSpec(4, 2))
        log = overfit_demo(CfConfig(stages, stages, n=1, K=3), steps=2, base=8)
        assert len(log.losses) == 2
        assert all(np.isfinite(log.losses))

    @pytest.mark.slow
    def test_overfits_fixed_targets(self):
        log = overfit_demo(seed=0)

        assert len(log.losses) == 500
        assert log.final_loss < 0.01
        assert log.final_loss < 0.5 * log.losses[0]
