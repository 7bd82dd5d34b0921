import numpy as np
import pytest
from numpy.testing import assert_array_equal

from dirnet.gradcheck import E2E_TOL, case_end_to_end
from dirnet.lossmetrics import ncc
from dirnet.network import (ConfigError, NetConfig, Preset, build, layer_plan, pipeline, preset_config,
                            register_batch, register_pair, regress)
from dirnet.tensorcore import DownsampleKind, ShapeError
from dirnet.transformer import SplineOrder


def pair(rng, h, w):
    return rng.uniform(size=(h, w)), rng.uniform(size=(h, w))


def test_mnist_plan_drops_last_two_downsamplings():
    kinds = [l.kind for l in layer_plan(preset_config("mnist"))]
    assert kinds == ["conv3", "down", "conv3", "down", "conv3", "conv3", "conv1", "conv1", "out"]


def test_c1_plan_wraps_final_downsampling():
    names = [l.name for l in layer_plan(preset_config("c1"))]
    i = names.index("down3")
    assert names[i - 1].endswith("_c1pre") and names[i + 1].endswith("_c1post")
    assert sum(l.kind == "conv3" for l in layer_plan(preset_config("c1"))) == 6


def test_variant_presets():
    assert preset_config("a1").downsample_kind is DownsampleKind.MAX_POOL
    assert preset_config("a2").downsample_kind is DownsampleKind.STRIDED_CONV
    assert preset_config("b1").spline_order is SplineOrder.QUADRATIC
    with pytest.raises(ConfigError):
        preset_config("c2")
    with pytest.raises(ConfigError):
        NetConfig(kernels_per_layer=0)


def test_no_batch_norm_on_output_layer():
    params = build(preset_config("mnist"), 0)
    assert not any(k.startswith("out.bn") for k, _ in params)
    assert_array_equal(params["out.kernel"].data, 0.0)
    assert params["out.kernel"].shape == (2, 16, 1, 1)
    assert params["conv0.kernel"].shape == (16, 2, 3, 3)


def test_build_is_deterministic():
    a, b = build(preset_config("baseline"), 42), build(preset_config("baseline"), 42)
    for (ka, ta), (kb, tb) in zip(a, b):
        assert ka == kb
        assert_array_equal(ta.data, tb.data)


def test_mnist_grid_shape(rng):
    f, m = pair(rng, 28, 28)
    grid = regress(build(preset_config("mnist"), 0), preset_config("mnist"), f, m)
    assert grid.disp.shape == (2, 7, 7)
    assert (grid.spacing_y, grid.spacing_x) == (4.0, 4.0)
    assert_array_equal(grid.disp, 0.0)


@pytest.mark.parametrize("preset", ["baseline", "a1", "a2", "b1", "c1"])
def test_four_downsampling_presets_on_256(rng, preset):
    cfg = preset_config(preset, kernels_per_layer=2)
    params = build(cfg, 0)
    params["out.bias"].data[...] = [0.5, -0.25]
    f, m = pair(rng, 256, 256)
    grid = regress(params, cfg, f, m)
    assert grid.disp.shape == (2, 16, 16)
    assert grid.spacing_y == 16.0
    assert np.all(grid.disp[0] == 0.5)


@pytest.mark.parametrize("size", [16, 28, 32, 64])
def test_fully_convolutional(rng, size):
    for preset, k in (("mnist", 2), ("baseline", 4)):
        cfg = preset_config(preset, kernels_per_layer=k)
        out = regress(build(cfg, 1), cfg, *pair(rng, size, size))
        assert out.disp.shape == (2, -(-size // 2 ** k), -(-size // 2 ** k))


def test_regress_errors(rng):
    cfg = preset_config("baseline")
    with pytest.raises(ConfigError):
        regress(build(cfg, 0), cfg, *pair(rng, 8, 8))
    with pytest.raises(ShapeError):
        regress(build(cfg, 0), cfg, np.zeros((16, 16)), np.zeros((16, 17)))


def test_untrained_net_is_identity(rng):
    cfg = preset_config("mnist")
    params = build(cfg, 3)
    for _ in range(5):
        f, m = pair(rng, 28, 28)
        res = register_pair(params, cfg, f, m)
        assert_array_equal(res.warped, m)
        assert res.loss == -ncc(f, m)


def test_swapping_inputs_runs(rng):
    cfg = preset_config("mnist")
    params = build(cfg, 0)
    params["out.kernel"].data[...] = rng.standard_normal(params["out.kernel"].shape)
    f, m = pair(rng, 28, 28)
    a = register_pair(params, cfg, f, m)
    b = register_pair(params, cfg, m, f)
    assert a.control.disp.shape == b.control.disp.shape


def test_inference_is_deterministic_and_batch_consistent(rng):
    cfg = preset_config("mnist")
    params = build(cfg, 0)
    params["out.kernel"].data[...] = rng.standard_normal(params["out.kernel"].shape) * 0.05
    f, m = rng.uniform(size=(2, 4, 28, 28))
    first = [register_pair(params, cfg, f[i], m[i]) for i in range(4)]
    again = [register_pair(params, cfg, f[i], m[i]) for i in range(4)]
    for a, b in zip(first, again):
        assert_array_equal(a.warped, b.warped)
        assert_array_equal(a.dvf.d, b.dvf.d)
    batch = register_batch(params, cfg, f, m)
    for a, b in zip(first, batch):
        assert np.abs(a.dvf.d - b.dvf.d).max() <= 1e-12


def test_train_mode_updates_running_stats_infer_does_not(rng):
    cfg = preset_config("mnist", kernels_per_layer=4)
    params = build(cfg, 0)
    f, m = rng.uniform(size=(2, 3, 16, 16))
    pipeline(params, cfg, f, m, train=False)
    assert_array_equal(params["conv0.bn_mean"].data, 0.0)
    pipeline(params, cfg, f, m, train=True)
    assert np.any(params["conv0.bn_mean"].data != 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient(seed):
    assert case_end_to_end(seed) <= E2E_TOL
