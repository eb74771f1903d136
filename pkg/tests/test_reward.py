import importlib.util
import math

import pytest
import torch

from rfsr.errors import ConfigurationError
from rfsr.reward import (
    Caption,
    MeanPixelReward,
    RewardModel,
    RewardRegistry,
    RewardWeights,
    build_rewards,
    register_reward_model,
    reward_loss,
    reward_score,
)

from helpers import assert_grad_matches_fd, rand_image


def toy_registry() -> RewardRegistry:
    return build_rewards([{"id": "clipiqa", "kind": "toy"}, {"id": "iw", "kind": "toy"}])


class NanReward(RewardModel):
    def score(self, image, caption=None):
        return image.mean() * float("nan")


class TestRewardScore:
    def test_toy_mean_on_constant(self):
        model = MeanPixelReward()
        img = torch.full((8, 8, 3), 0.5)
        assert reward_score(model, img).item() == pytest.approx(0.5)

    def test_toy_mean_on_zero(self):
        assert reward_score(MeanPixelReward(), torch.zeros(8, 8, 3)).item() == 0.0

    def test_deterministic_bitwise(self):
        model = MeanPixelReward()
        img = rand_image(16, 16, seed=1).float()
        s1 = reward_score(model, img, Caption("x")).item()
        s2 = reward_score(model, img, Caption("x")).item()
        assert s1 == s2

    def test_caption_required_but_empty(self):
        model = MeanPixelReward(requires_caption=True)
        with pytest.raises(ConfigurationError):
            reward_score(model, torch.zeros(8, 8, 3), Caption(""))
        with pytest.raises(ConfigurationError):
            reward_score(model, torch.zeros(8, 8, 3), None)
        assert reward_score(model, torch.zeros(8, 8, 3), Caption("tags")).item() == 0.0


class TestRegistry:
    def test_register_then_score(self):
        reg = RewardRegistry()
        handle = register_reward_model(reg, "clipiqa", MeanPixelReward())
        assert handle.score(torch.full((4, 4, 3), 0.25)).item() == pytest.approx(0.25)
        assert "clipiqa" in reg

    def test_nan_adapter_rejected(self):
        reg = RewardRegistry()
        with pytest.raises(ConfigurationError):
            reg.register("bad", NanReward())
        assert "bad" not in reg

    def test_duplicate_id_replaces_with_warning(self):
        reg = RewardRegistry()
        first = MeanPixelReward()
        second = MeanPixelReward()
        reg.register("clipiqa", first)
        with pytest.warns(UserWarning):
            reg.register("clipiqa", second)
        assert reg.get("clipiqa") is second

    def test_unknown_kind_is_startup_error(self):
        with pytest.raises(ConfigurationError):
            build_rewards([{"id": "x", "kind": "mystery"}])

    def test_missing_model_lookup(self):
        with pytest.raises(ConfigurationError):
            RewardRegistry().get("clipiqa")


class TestRewardLoss:
    def test_zero_weights_give_zero(self):
        reg = RewardRegistry()  # deliberately empty
        img = rand_image(8, 8, seed=2)
        loss = reward_loss(img, Caption("c"), RewardWeights(0.0, 0.0), reg)
        assert float(loss) == 0.0

    def test_toy_rewards_unit_weights(self):
        # Two mean-pixel rewards at weight 1 on a constant 0.5 image:
        # loss = 1 * (-0.5) + 1 * (-0.5) = -1.0.
        reg = toy_registry()
        img = torch.full((8, 8, 3), 0.5, dtype=torch.float64)
        loss = reward_loss(img, Caption(""), RewardWeights(1.0, 1.0), reg)
        assert float(loss) == pytest.approx(-1.0, abs=1e-12)

    def test_default_weights_match_shipped_values(self):
        w = RewardWeights()
        assert w.lambda_clipiqa == 5e-5
        assert w.lambda_iw == 5e-6

    def test_missing_model_for_nonzero_weight(self):
        reg = RewardRegistry()
        with pytest.raises(ConfigurationError):
            reward_loss(rand_image(8, 8), Caption(""), RewardWeights(1.0, 0.0), reg)

    def test_monotone_in_brightness(self):
        reg = toy_registry()
        w = RewardWeights(1.0, 1.0)
        base = rand_image(8, 8, seed=3) * 0.5
        losses = [
            float(reward_loss(base + shift, Caption(""), w, reg)) for shift in (0.0, 0.1, 0.2)
        ]
        assert losses[0] > losses[1] > losses[2]

    def test_linearity_in_weights(self):
        reg = toy_registry()
        img = rand_image(8, 8, seed=4)
        a, b = 0.3, 0.7
        l1 = float(reward_loss(img, Caption(""), RewardWeights(2 * a, 2 * b), reg))
        l2 = float(reward_loss(img, Caption(""), RewardWeights(a, b), reg))
        assert l1 == pytest.approx(2 * l2, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        reg = toy_registry()
        w = RewardWeights(1.0, 0.5)
        img = rand_image(16, 16, seed=5)
        assert_grad_matches_fd(
            lambda x: reward_loss(x, Caption(""), w, reg), img, n_coords=20, seed=6
        )

    def test_caption_independent_when_iw_weight_zero(self):
        reg = toy_registry()
        w = RewardWeights(1.0, 0.0)
        img = rand_image(8, 8, seed=7)
        l1 = float(reward_loss(img, Caption("a photo"), w, reg))
        l2 = float(reward_loss(img, Caption(""), w, reg))
        l3 = float(reward_loss(img, None, w, reg))
        assert l1 == l2 == l3

    def test_loss_is_finite(self):
        reg = toy_registry()
        loss = reward_loss(rand_image(8, 8, seed=8), Caption(""), RewardWeights(1.0, 1.0), reg)
        assert math.isfinite(float(loss))


@pytest.mark.skipif(importlib.util.find_spec("piq") is None, reason="piq not installed")
class TestClipIqaAdapter:
    def test_deterministic(self):
        from rfsr.reward import ClipIqaReward

        adapter = ClipIqaReward()
        img = rand_image(64, 64, seed=9).float()
        assert float(adapter.score(img)) == float(adapter.score(img))
