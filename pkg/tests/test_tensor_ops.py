import itertools

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from pydantic import ValidationError

from app.core.errors import ShapeError
from app.core.schemas import ShuffleSpec
from app.models.tensor_ops import (
    LearnedShuffle,
    LearnedUnshuffle,
    learned_shuffle,
    learned_unshuffle,
    pixel_shuffle_3d,
    pixel_unshuffle_3d,
)

R2 = ShuffleSpec(factor=2)
R3 = ShuffleSpec(factor=3)


def _oracle_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    n, c, h, w, d = x.shape
    out = torch.empty(n, c * r ** 3, h // r, w // r, d // r, dtype=x.dtype)
    for b, ci, hh, ww, dd in itertools.product(range(n), range(c), range(h // r), range(w // r), range(d // r)):
        for dh, dw, dz in itertools.product(range(r), repeat=3):
            channel = ci * r ** 3 + (dh * r + dw) * r + dz
            out[b, channel, hh, ww, dd] = x[b, ci, hh * r + dh, ww * r + dw, dd * r + dz]
    return out


def _oracle_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct zero-padded same-size convolution (cross-correlation), float64"""
    n, c, h, w, d = x.shape
    out_c, _, k, _, _ = weight.shape
    p = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    out = np.zeros((n, out_c, h, w, d))
    for b, o, i, j, l in itertools.product(range(n), range(out_c), range(h), range(w), range(d)):
        out[b, o, i, j, l] = np.sum(padded[b, :, i : i + k, j : j + k, l : l + k] * weight[o]) + bias[o]
    return out


def test_unshuffle_default_patch_dims():
    x = torch.empty(1, 64, 96, 96, 48, device="meta")
    assert pixel_unshuffle_3d(x, R2).shape == (1, 512, 48, 48, 24)


def test_shuffle_default_patch_dims():
    x = torch.empty(1, 512, 48, 48, 24, device="meta")
    assert pixel_shuffle_3d(x, R2).shape == (1, 64, 96, 96, 48)


def test_unshuffle_preserves_multiset_of_small_cube():
    x = torch.arange(8, dtype=torch.float32).reshape(1, 1, 2, 2, 2)
    y = pixel_unshuffle_3d(x, R2)
    assert y.shape == (1, 8, 1, 1, 1)
    assert sorted(y.flatten().tolist()) == list(range(8))


def test_unshuffle_channel_index_map():
    x = torch.arange(8, dtype=torch.float32).reshape(1, 1, 2, 2, 2)
    y = pixel_unshuffle_3d(x, R2).flatten()
    # offset (dh, dw, dd) -> channel (dh * 2 + dw) * 2 + dd, and x[dh, dw, dd] = 4 dh + 2 dw + dd
    assert y.tolist() == list(range(8))


def test_unshuffle_matches_brute_force_factor_three():
    x = torch.randn(2, 3, 6, 6, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = pixel_unshuffle_3d(x, R3)
    assert y.shape == (2, 81, 2, 2, 2)
    assert torch.equal(y, _oracle_unshuffle(x, 3))


def test_shuffle_matches_brute_force_factor_three():
    y = torch.randn(1, 27, 2, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    x = pixel_shuffle_3d(y, R3)
    assert x.shape == (1, 1, 6, 6, 6)
    assert torch.equal(_oracle_unshuffle(x, 3), y)


def test_round_trips_are_bitwise_identity():
    rng = np.random.default_rng(7)
    for _ in range(500):
        r = int(rng.choice([2, 3]))
        spec = ShuffleSpec(factor=r)
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h, w, d = (r * int(k) for k in rng.integers(1, 4, size=3))
        x = torch.from_numpy(rng.standard_normal((n, c, h, w, d)))

        y = pixel_unshuffle_3d(x, spec)
        assert y.shape == (n, c * r ** 3, h // r, w // r, d // r)
        assert torch.equal(pixel_shuffle_3d(y, spec), x)
        assert torch.equal(torch.sort(y.flatten()).values, torch.sort(x.flatten()).values)
        assert torch.equal(pixel_unshuffle_3d(pixel_shuffle_3d(y, spec), spec), y)


def test_repeated_unshuffle_shape_algebra():
    x = torch.empty(1, 1, 32, 32, 16, device="meta")
    for _ in range(4):
        x = pixel_unshuffle_3d(x, R2)
    assert x.shape == (1, 8 ** 4, 2, 2, 1)


def test_batch_items_are_independent():
    x = torch.randn(3, 2, 4, 4, 4)
    full = pixel_unshuffle_3d(x, R2)
    for i in range(3):
        assert torch.equal(full[i : i + 1], pixel_unshuffle_3d(x[i : i + 1], R2))


def test_unshuffle_names_the_indivisible_axis():
    with pytest.raises(ShapeError, match="axis W"):
        pixel_unshuffle_3d(torch.zeros(1, 1, 4, 5, 4), R2)


def test_shuffle_rejects_indivisible_channels():
    with pytest.raises(ShapeError, match="channel count 12"):
        pixel_shuffle_3d(torch.zeros(1, 12, 2, 2, 2), R2)


def test_rank_and_empty_dims_are_rejected():
    with pytest.raises(ShapeError):
        pixel_unshuffle_3d(torch.zeros(1, 4, 4, 4), R2)
    with pytest.raises(ShapeError):
        pixel_unshuffle_3d(torch.zeros(0, 1, 2, 2, 2), R2)


def test_factor_below_two_is_invalid():
    with pytest.raises(ValidationError):
        ShuffleSpec(factor=1)


def test_learned_unshuffle_identity_kernel_is_pure_unshuffle():
    x = torch.randn(1, 1, 4, 4, 4)
    weight = torch.ones(1, 1, 1, 1, 1)
    assert torch.equal(learned_unshuffle(x, weight, torch.zeros(1), R2), pixel_unshuffle_3d(x, R2))


def test_learned_shuffle_identity_kernel_is_pure_shuffle():
    x = torch.randn(1, 8, 2, 2, 2)
    weight = torch.eye(8).reshape(8, 8, 1, 1, 1)
    assert torch.allclose(learned_shuffle(x, weight, torch.zeros(8), R2), pixel_shuffle_3d(x, R2), atol=0, rtol=0)


def test_zero_kernels_give_zero_outputs():
    down = learned_unshuffle(torch.randn(1, 2, 4, 4, 4), torch.zeros(3, 2, 3, 3, 3), torch.zeros(3), R2)
    up = learned_shuffle(torch.randn(1, 2, 2, 2, 2), torch.zeros(8, 2, 3, 3, 3), torch.zeros(8), R2)
    assert down.shape == (1, 24, 2, 2, 2) and not down.any()
    assert up.shape == (1, 1, 4, 4, 4) and not up.any()


def test_learned_unshuffle_matches_direct_convolution():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    weight = rng.standard_normal((3, 2, 3, 3, 3))
    bias = rng.standard_normal(3)
    expected = pixel_unshuffle_3d(torch.from_numpy(_oracle_conv(x, weight, bias)), R2)
    got = learned_unshuffle(torch.from_numpy(x), torch.from_numpy(weight), torch.from_numpy(bias), R2)
    assert torch.allclose(got, expected, atol=1e-10)


def test_learned_shuffle_matches_direct_convolution():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 2, 2, 2))
    weight = rng.standard_normal((8, 3, 3, 3, 3))
    bias = rng.standard_normal(8)
    expected = pixel_shuffle_3d(torch.from_numpy(_oracle_conv(x, weight, bias)), R2)
    got = learned_shuffle(torch.from_numpy(x), torch.from_numpy(weight), torch.from_numpy(bias), R2)
    assert torch.allclose(got, expected, atol=1e-10)


def test_kernel_channel_mismatch_is_a_shape_error():
    with pytest.raises(ShapeError, match="input channels"):
        learned_unshuffle(torch.zeros(1, 2, 4, 4, 4), torch.zeros(1, 3, 3, 3, 3), None, R2)


@pytest.mark.parametrize("op, in_shape, out_channels", [
    (learned_unshuffle, (1, 1, 2, 2, 2), 1),
    (learned_shuffle, (1, 1, 1, 1, 1), 8),
])
def test_learned_op_gradients_match_central_differences(op, in_shape, out_channels):
    gen = torch.Generator().manual_seed(5)
    x = torch.randn(*in_shape, dtype=torch.float64, generator=gen)
    weight = torch.randn(out_channels, in_shape[1], 3, 3, 3, dtype=torch.float64, generator=gen, requires_grad=True)
    bias = torch.randn(out_channels, dtype=torch.float64, generator=gen, requires_grad=True)
    target = torch.randn_like(op(x, weight, bias, R2).detach())

    def loss_fn():
        return F.l1_loss(op(x, weight, bias, R2), target)

    loss_fn().backward()
    step = 1e-4
    for param in (weight, bias):
        analytic = param.grad.flatten()
        flat = param.data.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + step
            plus = loss_fn().item()
            flat[i] = original - step
            minus = loss_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * step)
            assert abs(numeric - analytic[i].item()) <= 1e-3 * max(1.0, abs(numeric))


def test_learned_modules_expose_their_convolution():
    down = LearnedUnshuffle(4, 4)
    up = LearnedShuffle(32, 32)
    assert down(torch.zeros(1, 4, 4, 4, 4)).shape == (1, 32, 2, 2, 2)
    assert up(torch.zeros(1, 32, 2, 2, 2)).shape == (1, 4, 4, 4, 4)
    assert down.conv.kernel_size == (3, 3, 3)
    with pytest.raises(ShapeError):
        LearnedShuffle(4, 12)
