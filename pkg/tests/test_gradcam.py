"""Class-activation maps: contracts, zero-gradient case, rendering."""

import numpy as np
import pytest

from osteograde.autodiff import Tensor
from osteograde.backbone import NetworkConfig, build_network
from osteograde.errors import ConfigError, DataError
from osteograde.gradcam import DEFAULT_LAYER, Heatmap, gradcam, render_overlay
from osteograde.imageio import heat_colormap

RNG = np.random.default_rng(77)


@pytest.fixture(scope="module")
def model():
    cfg = NetworkConfig(
        base_width=4,
        input_size=64,
        blocks_per_stage=(1, 1, 1, 1),
        head_width=8,
        cbam_ratio=4,
    )
    return build_network(cfg, seed=0)


def rand_image(model, seed=0):
    cfg = model.config
    return Tensor(
        np.random.default_rng(seed)
        .normal(size=(cfg.in_channels, cfg.input_size, cfg.input_size))
        .astype(np.float32)
    )


def test_heatmap_contract_shape_and_range(model):
    capture = {}
    model.forward(rand_image(model), training=False, capture=capture)
    for layer in (DEFAULT_LAYER, "head.post_cbam", "stage4.branch1.out"):
        heat = gradcam(model, rand_image(model), target_class=2, layer=layer)
        assert heat.values.shape == capture[layer].shape[1:]
        assert np.all(heat.values >= 0.0) and np.all(heat.values <= 1.0)
        if heat.values.any():
            assert heat.values.max() == pytest.approx(1.0)


def test_unknown_layer_is_lookup_error(model):
    with pytest.raises(KeyError):
        gradcam(model, rand_image(model), target_class=0, layer="nonexistent.layer")


def test_bad_class_rejected(model):
    with pytest.raises(DataError):
        gradcam(model, rand_image(model), target_class=9)


def test_zero_gradient_gives_all_zero_map(model):
    # detach the head from class 3: its logit is then constant in every
    # feature map, so the map must be identically zero, not an error
    fc = model.params["head.fc.weight"]
    saved = fc.data.copy()
    fc.data[3, :] = 0.0
    try:
        heat = gradcam(model, rand_image(model), target_class=3)
        assert np.array_equal(heat.values, np.zeros_like(heat.values))
    finally:
        fc.data = saved


def test_scale_covariance_of_normalized_map(model):
    # scaling the class row scales all its gradients; the normalized map
    # is a quotient and must not move
    base = gradcam(model, rand_image(model, 4), target_class=1)
    fc = model.params["head.fc.weight"]
    saved = fc.data.copy()
    fc.data[1, :] *= 7.5
    try:
        scaled = gradcam(model, rand_image(model, 4), target_class=1)
    finally:
        fc.data = saved
    np.testing.assert_allclose(scaled.values, base.values, atol=1e-5)


def test_deterministic_for_fixed_inputs(model):
    a = gradcam(model, rand_image(model, 9), target_class=4)
    b = gradcam(model, rand_image(model, 9), target_class=4)
    np.testing.assert_array_equal(a.values, b.values)


def test_default_layer_is_merged_pre_attention(model):
    heat = gradcam(model, rand_image(model), target_class=0)
    assert heat.layer == "head.merged"


# -- overlay rendering -------------------------------------------------------------


def flat_heatmap(h=4, w=4):
    values = np.linspace(0, 1, h * w).reshape(h, w)
    return Heatmap(values=values, layer="head.merged", target_class=2)


def test_overlay_alpha_zero_returns_base():
    base = RNG.integers(0, 255, size=(16, 16)).astype(np.uint8)
    out = render_overlay(flat_heatmap(), base, alpha=0.0)
    assert np.array_equal(out, np.repeat(base[:, :, None], 3, axis=2))


def test_overlay_alpha_one_returns_colormap():
    base = np.zeros((8, 8), dtype=np.uint8)
    heat = flat_heatmap(8, 8)
    out = render_overlay(heat, base, alpha=1.0)
    assert np.array_equal(out, heat_colormap(heat.values))


def test_overlay_deterministic():
    base = RNG.integers(0, 255, size=(12, 10)).astype(np.uint8)
    heat = flat_heatmap(3, 3)
    a = render_overlay(heat, base, alpha=0.4)
    b = render_overlay(heat, base, alpha=0.4)
    assert np.array_equal(a, b)


def test_overlay_resamples_heatmap_to_image_size():
    base = np.zeros((32, 24), dtype=np.uint8)
    out = render_overlay(flat_heatmap(4, 4), base, alpha=1.0)
    assert out.shape == (32, 24, 3)


def test_overlay_input_validation():
    base = np.zeros((4, 4), dtype=np.uint8)
    with pytest.raises(ConfigError):
        render_overlay(flat_heatmap(), base, alpha=1.5)
    with pytest.raises(DataError):
        render_overlay(flat_heatmap(), np.zeros((0, 4), dtype=np.uint8), alpha=0.5)
    with pytest.raises(DataError):
        render_overlay(flat_heatmap(), np.zeros((4, 4), dtype=np.float32), alpha=0.5)
