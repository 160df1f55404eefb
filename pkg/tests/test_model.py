import itertools

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import ValidationError

from app.core.errors import ConfigurationError, ShapeError
from app.core.schemas import ModelConfig
from app.models import ShuffleUNet, UNet3D, build_model, count_parameters
from app.models.shuffle_unet import ConvDecomposition, DoubleConv, init_weights

NORM_LAYERS = (nn.modules.batchnorm._BatchNorm, nn.GroupNorm, nn.LayerNorm, nn.modules.instancenorm._InstanceNorm)


def _meta_model(config: ModelConfig = ModelConfig()) -> ShuffleUNet:
    with torch.device("meta"):
        return ShuffleUNet(config)


# ============ Structure ============

def test_default_channel_schedule():
    model = _meta_model()
    seen = {}

    def record(name):
        def hook(module, inputs, output):
            seen[name] = (inputs[0].shape[1], output.shape[1], tuple(output.shape[2:]))
        return hook

    for level, block in enumerate(model.contraction, start=1):
        block.double_conv.register_forward_hook(record(f"down{level}.conv"))
        block.unshuffle.register_forward_hook(record(f"down{level}.unshuffle"))
    model.latent.register_forward_hook(record("latent"))
    for level, block in zip(range(4, 0, -1), model.expansion):
        block.shuffle.register_forward_hook(record(f"up{level}.shuffle"))
        block.double_conv.register_forward_hook(record(f"up{level}.conv"))

    out = model(torch.empty(4, 1, 96, 96, 48, device="meta"))

    assert out.shape == (4, 1, 96, 96, 48)
    assert seen["down1.conv"] == (1, 64, (96, 96, 48))
    assert [seen[f"down{l}.conv"][1] for l in range(1, 5)] == [64, 128, 256, 512]
    assert [seen[f"down{l}.unshuffle"][1] for l in range(1, 5)] == [512, 1024, 2048, 4096]
    assert seen["latent"] == (4096, 1024, (6, 6, 3))
    assert [seen[f"up{l}.shuffle"][1] for l in range(4, 0, -1)] == [128, 64, 32, 16]
    assert [seen[f"up{l}.conv"][:2] for l in range(4, 0, -1)] == [(2560, 512), (1280, 256), (640, 128), (320, 64)]


def test_level_shapes_of_default_patch():
    shapes = _meta_model().level_shapes((96, 96, 48))
    assert shapes[0] == (96, 96, 48)
    assert shapes[-1] == (6, 6, 3)


def test_decomposition_branch_shapes():
    decomposition = ConvDecomposition(64, 64, ModelConfig())
    outputs = decomposition(torch.zeros(1, 64, 8, 8, 8))
    assert len(outputs) == 4
    assert all(out.shape == (1, 64, 8, 8, 8) for out in outputs)


def test_no_normalization_layers():
    model = _meta_model()
    assert not any(isinstance(module, NORM_LAYERS) for module in model.modules())


def test_unet_baseline_has_batch_norm_and_same_size_output():
    config = ModelConfig(architecture="unet", levels=2, base_filters=8)
    model = UNet3D(config)
    assert any(isinstance(module, nn.BatchNorm3d) for module in model.modules())
    assert model(torch.randn(2, 1, 8, 8, 12)).shape == (2, 1, 8, 8, 12)


def test_build_model_dispatches_on_architecture(tiny_config):
    assert isinstance(build_model(tiny_config), ShuffleUNet)
    assert isinstance(build_model(tiny_config.model_copy(update={"architecture": "unet"})), UNet3D)
    with pytest.raises(ConfigurationError):
        ShuffleUNet(tiny_config.model_copy(update={"architecture": "unet"}))


@pytest.mark.parametrize("update", [{"base_filters": 12}, {"levels": 0}, {"conv_kernel": 4}, {"scale_per_level": 3}])
def test_invalid_model_configs(update):
    with pytest.raises(ValidationError):
        ModelConfig(**update)


def test_global_residual_needs_matching_channels():
    with pytest.raises(ValidationError):
        ModelConfig(global_residual=True, out_channels=2)


# ============ Blocks ============

def test_double_conv_zero_input_gives_zero_output():
    block = DoubleConv(1, 8, ModelConfig())
    init_weights(block, seed=0)
    assert not block(torch.zeros(1, 1, 4, 4, 4)).any()


def test_double_conv_single_voxel_matches_direct_computation():
    config = ModelConfig()
    block = DoubleConv(1, 8, config).double()
    with torch.no_grad():
        for param in block.parameters():
            param.normal_(generator=torch.Generator().manual_seed(param.numel()))
    x = torch.tensor([[[[[1.5]]]]], dtype=torch.float64)

    # on a 1-voxel input only the kernel centre sees data
    w1 = block.conv1.weight[:, :, 1, 1, 1]
    w2 = block.conv2.weight[:, :, 1, 1, 1]
    hidden = F.leaky_relu(w1 @ x.reshape(1) + block.conv1.bias, config.negative_slope)
    expected = F.leaky_relu(w2 @ hidden + block.conv2.bias, config.negative_slope)

    assert torch.allclose(block(x).reshape(-1), expected, atol=1e-12)


def test_double_conv_rejects_wrong_channels():
    with pytest.raises(ShapeError, match="expects 1 channels"):
        DoubleConv(1, 8, ModelConfig())(torch.zeros(1, 2, 4, 4, 4))


def test_identical_decomposition_branches_give_identical_outputs():
    decomposition = ConvDecomposition(2, 3, ModelConfig())
    source = decomposition.branches[0].state_dict()
    for branch in decomposition.branches[1:]:
        branch.load_state_dict(source)
    outputs = decomposition(torch.randn(1, 2, 4, 4, 4))
    assert all(torch.equal(outputs[0], out) for out in outputs[1:])


def test_zeroed_branch_outputs_its_bias():
    decomposition = ConvDecomposition(2, 3, ModelConfig())
    x = torch.randn(1, 2, 4, 4, 4)
    before = decomposition(x)
    with torch.no_grad():
        decomposition.branches[1].weight.zero_()
        decomposition.branches[1].bias.copy_(torch.tensor([0.5, -1.0, 2.0]))
    after = decomposition(x)

    expected = torch.tensor([0.5, -1.0, 2.0]).reshape(1, 3, 1, 1, 1).expand(1, 3, 4, 4, 4)
    assert torch.equal(after[1], expected)
    for i in (0, 2, 3):
        assert torch.equal(after[i], before[i])


# ============ Forward ============

def test_minimum_divisible_patch_keeps_its_size():
    model = ShuffleUNet(ModelConfig(levels=4, base_filters=8))
    assert model(torch.randn(1, 1, 16, 16, 16)).shape == (1, 1, 16, 16, 16)


def test_same_size_over_divisible_shapes(tiny_config):
    model = ShuffleUNet(tiny_config)
    for shape in itertools.product((4, 8, 12), (4, 8), (4, 12)):
        x = torch.randn(1, 1, *shape)
        assert model(x).shape == x.shape


def test_indivisible_patch_is_a_configuration_error(tiny_config):
    model = ShuffleUNet(tiny_config)
    with pytest.raises(ConfigurationError, match="divisible by 4"):
        model(torch.randn(1, 1, 10, 8, 8))


def test_wrong_input_channels_is_a_shape_error(tiny_config):
    with pytest.raises(ShapeError):
        ShuffleUNet(tiny_config)(torch.randn(1, 2, 8, 8, 8))


def test_forward_is_deterministic(tiny_config):
    model = ShuffleUNet(tiny_config).eval()
    x = torch.randn(2, 1, 8, 8, 8)
    with torch.no_grad():
        assert torch.equal(model(x), model(x))


def test_batch_permutation_permutes_outputs(tiny_config):
    model = ShuffleUNet(tiny_config).double()
    x = torch.randn(4, 1, 8, 8, 8, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        assert torch.allclose(model(x)[perm], model(x[perm]), atol=1e-12)


def test_every_parameter_receives_a_gradient(tiny_config):
    model = ShuffleUNet(tiny_config)
    x = torch.randn(2, 1, 8, 8, 8)
    F.l1_loss(model(x), torch.randn_like(x)).backward()
    for name, param in model.named_parameters():
        assert param.grad is not None, name
        assert torch.isfinite(param.grad).all(), name


def test_global_residual_adds_the_input(tiny_config):
    model = ShuffleUNet(tiny_config.model_copy(update={"global_residual": True}))
    with torch.no_grad():
        model.output.weight.zero_()
    x = torch.randn(1, 1, 8, 8, 8)
    assert torch.equal(model(x), x)


def test_model_gradients_match_directional_differences(tiny_config):
    model = ShuffleUNet(tiny_config).double()
    gen = torch.Generator().manual_seed(11)
    x = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64, generator=gen)
    target = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64, generator=gen)

    def loss() -> torch.Tensor:
        return F.l1_loss(model(x), target)

    model.zero_grad()
    loss().backward()
    step = 1e-6
    for name, param in model.named_parameters():
        direction = torch.randn(param.shape, dtype=torch.float64, generator=gen)
        analytic = float((param.grad * direction).sum())
        original = param.data.clone()
        with torch.no_grad():
            param.copy_(original + step * direction)
            plus = float(loss())
            param.copy_(original - step * direction)
            minus = float(loss())
            param.copy_(original)
        numeric = (plus - minus) / (2 * step)
        assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), 1e-4), name


@pytest.mark.slow
def test_every_parameter_gradient_matches_central_differences(tiny_config):
    model = ShuffleUNet(tiny_config).double()
    gen = torch.Generator().manual_seed(5)
    x = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64, generator=gen)
    target = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64, generator=gen)

    def loss() -> float:
        return float(F.l1_loss(model(x), target))

    model.zero_grad()
    F.l1_loss(model(x), target).backward()
    step = 1e-6
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat, grad = param.view(-1), param.grad.view(-1)
            for k in range(flat.numel()):
                original = float(flat[k])
                flat[k] = original + step
                plus = loss()
                flat[k] = original - step
                minus = loss()
                flat[k] = original
                numeric = (plus - minus) / (2 * step)
                assert abs(numeric - float(grad[k])) <= 1e-6 + 1e-3 * abs(float(grad[k])), f"{name}[{k}]"


# ============ Initialization ============

def test_equal_seeds_give_equal_weights(tiny_config):
    a = ShuffleUNet(tiny_config).state_dict()
    b = ShuffleUNet(tiny_config).state_dict()
    c = ShuffleUNet(tiny_config.model_copy(update={"init_seed": 1})).state_dict()
    assert all(torch.equal(a[key], b[key]) for key in a)
    assert not all(torch.equal(a[key], c[key]) for key in a if key.endswith("weight"))


def test_kaiming_normal_standard_deviation():
    decomposition = ConvDecomposition(64, 64, ModelConfig())
    init_weights(decomposition, seed=3)
    weight = decomposition.branches[0].weight
    assert weight.numel() >= 10 ** 5
    expected = (2 / (27 * 64)) ** 0.5
    assert abs(weight.std().item() - expected) < 0.1 * expected
    assert abs(weight.mean().item()) < 0.05 * expected


def test_biases_are_zero_after_init(tiny_config):
    model = ShuffleUNet(tiny_config)
    for module in model.modules():
        if isinstance(module, nn.Conv3d):
            assert not module.bias.any()


def test_parameter_count_is_positive_and_stable(tiny_config):
    assert count_parameters(ShuffleUNet(tiny_config)) == count_parameters(ShuffleUNet(tiny_config)) > 0


@pytest.mark.slow
def test_default_model_forward_on_default_patch():
    model = ShuffleUNet(ModelConfig()).eval()
    with torch.no_grad():
        assert model(torch.randn(4, 1, 96, 96, 48)).shape == (4, 1, 96, 96, 48)
