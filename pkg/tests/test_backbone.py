import numpy as np
import pytest

from mitos_rcnn.backbone import (MIN_DETECTABLE_SIZE_PX, VGG16_CONVS_PER_STAGE, VGG16_STAGE_CHANNELS, BackboneConfig,
                                backbone_forward, build_backbone)
from mitos_rcnn.tensor import ShapeError, Tensor


def test_desk_parameter_count_by_hand():
    b = build_backbone(BackboneConfig(), rng_seed=0)
    # (C_out * C_in * 9 + C_out) for 3->8, 8->16, 16->32, 32->64
    assert b.parameter_count() == (8 * 3 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64)
    assert b.parameter_count() == 24528


def test_general_parameter_count_formula():
    cfg = BackboneConfig((4, 6, 8, 10), (2, 1, 3, 1))
    b = build_backbone(cfg, rng_seed=1)
    expected, c_in = 0, 3
    for width, depth in zip(cfg.stage_channels, cfg.convs_per_stage):
        for _ in range(depth):
            expected += width * c_in * 9 + width
            c_in = width
    assert b.parameter_count() == expected


def test_same_seed_is_byte_identical():
    a = build_backbone(BackboneConfig(), 7)
    b = build_backbone(BackboneConfig(), 7)
    assert list(a.params) == list(b.params)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_parameter_names_and_gaussian_init():
    b = build_backbone(BackboneConfig(VGG16_STAGE_CHANNELS, VGG16_CONVS_PER_STAGE, init="gaussian"), 0)
    assert "backbone/stage4/conv3/weight" in b.params
    assert b.params["backbone/stage1/conv1/weight"].shape == (64, 3, 3, 3)
    w = np.concatenate([t.data.ravel() for k, t in b.params.items() if k.endswith("weight")])
    assert abs(w.std() - 0.01) < 5e-4 and abs(w.mean()) < 1e-4
    assert all(np.all(t.data == 0) for k, t in b.params.items() if k.endswith("bias"))


def test_he_init_scales_with_fan_in():
    b = build_backbone(BackboneConfig.vgg16(), 0)
    for name, c_in in [("stage1/conv1", 3), ("stage3/conv2", 256), ("stage4/conv1", 256)]:
        w = b.params[f"backbone/{name}/weight"].data
        assert abs(w.std() / np.sqrt(2 / (9 * c_in)) - 1) < 0.05


def test_unknown_init_rejected():
    with pytest.raises(ValueError, match="init"):
        BackboneConfig(init="uniform")


def test_full_scale_widths_accepted():
    cfg = BackboneConfig.vgg16()
    assert cfg.stage_channels == (64, 128, 256, 512) and cfg.convs_per_stage == (2, 2, 3, 3)


@pytest.mark.parametrize("stages", [(8, 16, 32, 64, 128), (8, 16, 32)])
def test_conv5_not_constructible(stages):
    with pytest.raises(ValueError, match="exactly 4 stages"):
        BackboneConfig(stages, (1,) * len(stages))


def test_forward_shapes():
    b = build_backbone(BackboneConfig(), 0)
    conv3, conv4 = backbone_forward(b, Tensor(np.random.default_rng(0).uniform(size=(3, 299, 299))))
    assert conv3.shape == (32, 74, 74)
    assert conv4.shape == (64, 37, 37)
    assert BackboneConfig().map_sizes() == (74, 37)


def test_zero_input_gives_zero_maps():
    b = build_backbone(BackboneConfig(), 0)
    conv3, conv4 = backbone_forward(b, Tensor(np.zeros((3, 299, 299))))
    assert not conv3.data.any() and not conv4.data.any()


def test_wrong_input_shape_message():
    b = build_backbone(BackboneConfig(), 0)
    with pytest.raises(ShapeError, match=r"\(3, 299, 299\).*\(3, 300, 300\)"):
        backbone_forward(b, Tensor(np.zeros((3, 300, 300))))


def test_eight_pixel_shift_moves_conv4_one_cell():
    cfg = BackboneConfig(input_size=96)
    b = build_backbone(cfg, 3, sigma=0.3)
    rng = np.random.default_rng(5)
    img = np.zeros((3, 96, 96))
    img[:, 30:50, 30:50] = rng.uniform(size=(3, 20, 20))
    shifted = np.zeros_like(img)
    shifted[:, 38:58, 38:58] = img[:, 30:50, 30:50]
    _, a = backbone_forward(b, Tensor(img))
    _, s = backbone_forward(b, Tensor(shifted))
    assert a.data.any()
    # interior cells, away from the zero-padded border
    np.testing.assert_allclose(s.data[:, 2:10, 2:10], a.data[:, 1:9, 1:9], rtol=0, atol=1e-12)


def test_min_size_table():
    assert MIN_DETECTABLE_SIZE_PX == {"conv_3": 15, "conv_4": 22, "conv_5": 44}
