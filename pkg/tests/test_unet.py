"""Тесты условного U-Net и функции шумоподавления с guidance."""
import numpy as np
import pytest

from src.config import RunConfig, apply_overrides
from src.diffusion import CASCADED, GuidanceWeights, ddim_sample, make_schedule
from src.exceptions import ConfigError, TensorShapeError
from src.tensor import Tensor, no_grad
from src.unet import ConditionalUNet, guided_denoiser, unet_forward


@pytest.fixture
def unet(tiny_config: RunConfig, rng) -> ConditionalUNet:
    return ConditionalUNet(tiny_config.unet, 2, 8, 8, 12, rng).eval()


@pytest.fixture
def conditions(rng):
    return {
        "x": rng.standard_normal((2, 2, 4, 12)).astype(np.float32),
        "scene": rng.standard_normal((2, 8)).astype(np.float32),
        "content": rng.standard_normal((2, 12, 8)).astype(np.float32),
    }


class TestConditionalUNet:
    """Тесты формы выхода и подстановки null-условий."""

    def test_attention_width_matches_bottleneck(self, tiny_config, rng):
        config = apply_overrides(tiny_config, {"unet.attn_width": 8}).unet
        with pytest.raises(ConfigError):
            ConditionalUNet(config, 2, 8, 8, 12, rng)

    def test_output_shape(self, unet, conditions):
        c = conditions
        assert unet(c["x"], 10, c["scene"], c["content"]).shape == (2, 2, 4, 12)

    def test_odd_size_is_padded_and_cropped(self, unet, rng):
        x = rng.standard_normal((1, 2, 4, 11))
        assert unet(x, np.array([3]), None, None).shape == (1, 2, 4, 11)

    def test_dropped_scene_equals_null(self, unet, conditions):
        c = conditions
        with no_grad():
            dropped = unet(c["x"], 5, c["scene"], c["content"],
                           drop_scene=np.array([True, True])).data
            null = unet(c["x"], 5, None, c["content"]).data
        np.testing.assert_allclose(dropped, null, atol=1e-6)

    def test_drop_is_per_item(self, unet, conditions):
        c = conditions
        with no_grad():
            mixed = unet(c["x"], 5, c["scene"], c["content"],
                         drop_content=np.array([True, False])).data
            kept = unet(c["x"], 5, c["scene"], c["content"]).data
            null = unet(c["x"], 5, c["scene"], None).data
        np.testing.assert_allclose(mixed[1], kept[1], atol=1e-5)
        np.testing.assert_allclose(mixed[0], null[0], atol=1e-5)

    def test_conditions_change_prediction(self, unet, conditions):
        c = conditions
        with no_grad():
            full = unet(c["x"], 5, c["scene"], c["content"]).data
            bare = unet(c["x"], 5, None, None).data
        assert not np.allclose(full, bare)

    def test_other_content_length(self, unet, conditions):
        c = conditions
        assert unet(c["x"], 5, c["scene"], c["content"][:, :6]).shape == (2, 2, 4, 12)

    def test_scene_shape_checked(self, unet, conditions):
        c = conditions
        with pytest.raises(TensorShapeError):
            unet(c["x"], 5, c["scene"][:, :4], c["content"])

    def test_latent_shape_checked(self, unet, conditions):
        with pytest.raises(TensorShapeError):
            unet(conditions["x"][:, :1], 5)

    def test_null_scene_is_learned(self, unet, conditions):
        c = conditions
        unet.train()
        out = unet(Tensor(c["x"]), np.array([3, 7]), c["scene"], c["content"],
                   drop_scene=np.array([True, False]))
        (out * out).mean().backward()
        assert unet.null_scene.grad is not None
        assert np.abs(unet.null_scene.grad).sum() > 0
        assert unet.null_content.grad is None

    def test_component_config_round_trip(self, unet, conditions):
        restored = ConditionalUNet.from_component_config(unet.component_config())
        restored.load_state_dict(unet.state_dict())
        c = conditions
        np.testing.assert_allclose(
            unet_forward(restored, c["x"][0], 9, c["scene"][0], c["content"][0]),
            unet_forward(unet, c["x"][0], 9, c["scene"][0], c["content"][0]),
            atol=1e-6,
        )


class TestGuidedDenoiser:
    """Тесты пакетного вычисления ветвей guidance."""

    def test_zero_weights_are_unconditional(self, unet, conditions):
        c = conditions
        denoise = guided_denoiser(unet, c["scene"][0], c["content"][0],
                                  GuidanceWeights(0.0, 0.0))
        np.testing.assert_allclose(denoise(c["x"][0], 7),
                                   unet_forward(unet, c["x"][0], 7, None, None),
                                   atol=1e-5)

    def test_reference_weight_only(self, unet, conditions):
        c = conditions
        denoise = guided_denoiser(unet, c["scene"][0], c["content"][0],
                                  GuidanceWeights(1.0, 0.0))
        np.testing.assert_allclose(denoise(c["x"][0], 7),
                                   unet_forward(unet, c["x"][0], 7, c["scene"][0], None),
                                   atol=1e-5)

    def test_cascaded_unit_weights_are_joint(self, unet, conditions):
        c = conditions
        denoise = guided_denoiser(unet, c["scene"][0], c["content"][0],
                                  GuidanceWeights(1.0, 1.0), mode=CASCADED)
        np.testing.assert_allclose(
            denoise(c["x"][0], 7),
            unet_forward(unet, c["x"][0], 7, c["scene"][0], c["content"][0]),
            atol=1e-5,
        )

    def test_unknown_mode(self, unet, conditions):
        c = conditions
        with pytest.raises(ConfigError):
            guided_denoiser(unet, c["scene"][0], c["content"][0], GuidanceWeights(),
                            mode="parallel")

    def test_drives_sampler(self, unet, conditions):
        c = conditions
        denoise = guided_denoiser(unet, c["scene"][0], c["content"][0], GuidanceWeights())
        out = ddim_sample(denoise, (2, 4, 12), make_schedule(50), steps=5, seed=0)
        assert out.shape == (2, 4, 12)
        assert np.isfinite(out).all()
