import math

import pytest
import torch

from lib.datapipe import StereoImagePair, bicubic_upsample
from lib.errors import ConfigError, DimensionError
from models.sirn import (CIB, SIRN, CibParams, PositionEncoding, SirnConfig, channel_attention, cib_forward,
                         encode_position, modulate, restore)


def _cib(channels=8, heads=2, guided=True, **kwargs):
    return CIB(CibParams(channels=channels, heads=heads, **kwargs), guided=guided).double()


def _x(*shape):
    return torch.randn(*shape, dtype=torch.float64)


def test_hand_computed_attention() -> None:
    cib = _cib(channels=2, heads=1)
    with torch.no_grad():
        cib.attn.qkv.weight.copy_(torch.cat([torch.eye(2)] * 3).view(6, 2, 1, 1))
        cib.attn.qkv_dwconv.weight.zero_()
        cib.attn.qkv_dwconv.weight[:, :, 1, 1] = 1.0
    u_l = torch.tensor([1.0, 0.0], dtype=torch.float64).view(1, 2, 1, 1)
    u_r = torch.tensor([0.0, 1.0], dtype=torch.float64).view(1, 2, 1, 1)
    y_l, y_r, attn = cib.attn.attend(u_l, u_r)

    hi, lo = math.e / (1 + math.e), 1 / (1 + math.e)
    expected = torch.tensor([[hi, lo], [lo, hi]], dtype=torch.float64)
    assert torch.allclose(attn[0, 0], expected, atol=1e-12)
    assert torch.allclose(y_l.flatten(), torch.tensor([hi, lo], dtype=torch.float64), atol=1e-12)
    assert torch.allclose(y_r.flatten(), torch.tensor([lo, hi], dtype=torch.float64), atol=1e-12)


def test_equal_scores_average_the_values() -> None:
    cib = _cib(channels=4, heads=1)
    with torch.no_grad():
        cib.attn.qkv.weight[4:8].zero_()  # K = 0
    u_l, u_r = _x(1, 4, 3, 5), _x(1, 4, 3, 5)
    y_l, _, attn = cib.attn.attend(u_l, u_r)
    assert torch.allclose(attn, torch.full_like(attn, 0.25))
    v_l = cib.attn.qkv_dwconv(cib.attn.qkv(u_l)).chunk(3, dim=1)[2]
    assert torch.allclose(y_l, v_l.mean(1, keepdim=True).expand_as(v_l), atol=1e-12)


def test_attention_rows_and_view_swap() -> None:
    cib = _cib()
    for _ in range(100):
        x_l, x_r = _x(1, 8, 4, 12), _x(1, 8, 4, 12)
        with torch.no_grad():
            y_l, y_r, attn = channel_attention(x_l, x_r, cib)
            s_l, s_r, attn_swapped = channel_attention(x_r, x_l, cib)
        assert attn.shape == (1, 2, 4, 4)
        assert (attn.sum(-1) - 1).abs().max().item() < 1e-6
        assert (attn - attn_swapped).abs().max().item() < 1e-6
        assert (y_l - s_r).abs().max().item() < 1e-6
        assert (y_r - s_l).abs().max().item() < 1e-6


def test_channel_relabeling_leaves_the_output_unchanged() -> None:
    cib = _cib()
    x_l, x_r, z_l, z_r = _x(1, 8, 4, 12), _x(1, 8, 4, 12), _x(1, 8, 4, 12), _x(1, 8, 4, 12)
    with torch.no_grad():
        for p in cib.parameters():
            p.copy_(_x(*p.shape) * 0.3)
        expected = cib(x_l, x_r, z_l, z_r)

        # relabel channels inside each head, for Q, K and V alike
        gen = torch.Generator().manual_seed(5)
        perm = torch.cat([torch.randperm(4, generator=gen), 4 + torch.randperm(4, generator=gen)])
        rows = torch.cat([perm, 8 + perm, 16 + perm])
        cib.attn.qkv.weight.copy_(cib.attn.qkv.weight[rows])
        cib.attn.qkv_dwconv.weight.copy_(cib.attn.qkv_dwconv.weight[rows])
        cib.attn.project_out.weight.copy_(cib.attn.project_out.weight[:, perm])
        out = cib(x_l, x_r, z_l, z_r)

    assert not torch.equal(perm, torch.arange(8))
    for a, b in zip(out, expected):
        assert (a - b).abs().max().item() < 1e-6


def test_qk_l2norm_keeps_rows_stochastic() -> None:
    cib = _cib(qk_l2norm=True)
    _, _, attn = channel_attention(_x(2, 8, 4, 12), _x(2, 8, 4, 12), cib)
    assert (attn.sum(-1) - 1).abs().max().item() < 1e-6


def test_cib_view_swap_equivariance() -> None:
    cib = _cib()
    x_l, x_r, z_l, z_r = _x(1, 8, 4, 12), _x(1, 8, 4, 12), _x(1, 8, 4, 12), _x(1, 8, 4, 12)
    with torch.no_grad():
        y_l, y_r = cib_forward(x_l, x_r, z_l, z_r, cib)
        s_l, s_r = cib_forward(x_r, x_l, z_r, z_l, cib)
    assert torch.allclose(y_l, s_r, atol=1e-6)
    assert torch.allclose(y_r, s_l, atol=1e-6)


def test_modulation() -> None:
    cib = _cib()
    x, zp = _x(1, 8, 4, 4), _x(1, 8, 4, 4)
    with torch.no_grad():
        expected = cib.modulation.w1(zp) * cib.norm1(x) + cib.modulation.w2(zp)
        assert torch.allclose(modulate(x, zp, cib), expected)
        cib.modulation.w1.weight.zero_()
        cib.modulation.w2.weight.zero_()
        assert torch.equal(modulate(x, zp, cib), torch.zeros_like(x))


def test_modulation_shape_mismatch() -> None:
    with pytest.raises(DimensionError):
        modulate(_x(1, 8, 4, 4), _x(1, 8, 4, 5), _cib())


def test_cib_with_zeroed_outputs_is_identity() -> None:
    cib = _cib()
    with torch.no_grad():
        cib.attn.project_out.weight.zero_()
        cib.ffn.project_out.weight.zero_()
    x_l, x_r = _x(1, 8, 4, 12), _x(1, 8, 4, 12)
    y_l, y_r = cib_forward(x_l, x_r, _x(1, 8, 4, 12), _x(1, 8, 4, 12), cib)
    assert torch.equal(y_l, x_l) and torch.equal(y_r, x_r)


def test_unguided_cib_rejects_guidance() -> None:
    cib = _cib(guided=False)
    assert cib.modulation is None
    with pytest.raises(ConfigError):
        cib_forward(_x(1, 8, 4, 4), _x(1, 8, 4, 4), _x(1, 8, 4, 4), _x(1, 8, 4, 4), cib)
    with pytest.raises(ConfigError):
        _cib()(_x(1, 8, 4, 4), _x(1, 8, 4, 4), _x(1, 8, 4, 4), None)


def test_encode_position_shapes_and_index() -> None:
    pe = PositionEncoding(8).double()
    z = _x(5, 7)
    first = encode_position(z, 0, 8, pe)
    assert first.shape == (8, 5, 7)
    assert not torch.allclose(first, encode_position(z, 3, 8, pe))
    assert torch.equal(encode_position(torch.zeros(5, 7, dtype=torch.float64), 0, 8, pe),
                       torch.zeros(8, 5, 7, dtype=torch.float64))


def test_encode_position_without_index_ignores_depth() -> None:
    pe = PositionEncoding(8, use_pe=False).double()
    z = _x(1, 1, 5, 7)
    assert torch.equal(encode_position(z, 0, 8, pe), encode_position(z, 6, 8, pe))


def test_config_validation() -> None:
    with pytest.raises(ConfigError):
        SirnConfig(channels=30, heads=4)
    with pytest.raises(ConfigError):
        SirnConfig(block_type="swin")
    with pytest.raises(ConfigError):
        SirnConfig(scale=3)


@pytest.mark.parametrize("scale", [1, 4])
def test_sirn_output_shape(scale) -> None:
    sirn = SIRN(SirnConfig(num_cibs=2, channels=8, heads=2, scale=scale))
    lq = torch.rand(2, 3, 6, 10)
    out = sirn(lq, lq.flip(-1), torch.randn(2, 1, 6, 10), torch.randn(2, 1, 6, 10))
    assert out.left.shape == (2, 3, 6 * scale, 10 * scale)
    assert out.feat_left.shape == (2, 8, 6, 10)


@pytest.mark.parametrize("scale", [1, 4])
def test_zero_weights_reduce_to_skip(scale) -> None:
    sirn = SIRN(SirnConfig(num_cibs=2, channels=8, heads=2, scale=scale)).double()
    with torch.no_grad():
        for p in sirn.parameters():
            p.zero_()
    lq_l, lq_r = torch.rand(1, 3, 6, 10, dtype=torch.float64), torch.rand(1, 3, 6, 10, dtype=torch.float64)
    z = _x(1, 1, 6, 10)
    out = sirn(lq_l, lq_r, z, z)
    assert torch.allclose(out.left, bicubic_upsample(lq_l, scale), atol=1e-12)
    assert torch.allclose(out.right, bicubic_upsample(lq_r, scale), atol=1e-12)


def test_sirn_without_lhfr_builds_no_guidance_path() -> None:
    sirn = SIRN(SirnConfig(num_cibs=2, channels=8, heads=2, scale=1, use_lhfr=False))
    assert sirn.pe is None
    assert all(block.modulation is None for block in sirn.blocks)
    out = sirn(torch.rand(1, 3, 6, 10), torch.rand(1, 3, 6, 10))
    assert out.left.shape == (1, 3, 6, 10)


def test_sirn_requires_latents_when_guided() -> None:
    sirn = SIRN(SirnConfig(num_cibs=1, channels=8, heads=2, scale=1))
    with pytest.raises(ConfigError):
        sirn(torch.rand(1, 3, 6, 10), torch.rand(1, 3, 6, 10))
    with pytest.raises(DimensionError):
        sirn(torch.rand(1, 3, 6, 10), torch.rand(1, 3, 6, 10), torch.rand(1, 1, 5, 10), torch.rand(1, 1, 5, 10))


@pytest.mark.parametrize("block_type", ["rdb", "nafb"])
def test_ablation_blocks(block_type) -> None:
    sirn = SIRN(SirnConfig(num_cibs=2, channels=8, heads=2, scale=1, block_type=block_type)).double()
    lq_l, lq_r = torch.rand(1, 3, 6, 10, dtype=torch.float64), torch.rand(1, 3, 6, 10, dtype=torch.float64)
    z_l, z_r = _x(1, 1, 6, 10), _x(1, 1, 6, 10)
    with torch.no_grad():
        out = sirn(lq_l, lq_r, z_l, z_r)
        swapped = sirn(lq_r, lq_l, z_r, z_l)
    assert out.left.shape == (1, 3, 6, 10)
    assert torch.allclose(out.left, swapped.right, atol=1e-10)


def test_vector_guidance() -> None:
    sirn = SIRN(SirnConfig(num_cibs=1, channels=8, heads=2, scale=1, guidance="vector"))
    out = sirn(torch.rand(2, 3, 6, 10), torch.rand(2, 3, 6, 10), torch.randn(2, 1, 1, 8), torch.randn(2, 1, 1, 8))
    assert out.right.shape == (2, 3, 6, 10)


def test_restore_clamps_and_keeps_single_layout() -> None:
    sirn = SIRN(SirnConfig(num_cibs=1, channels=8, heads=2, scale=4))
    with torch.no_grad():
        sirn.head.bias.fill_(5.0)
    lq = StereoImagePair(torch.rand(3, 6, 10), torch.rand(3, 6, 10), "x")
    out = restore(lq, torch.randn(6, 10), torch.randn(6, 10), sirn)
    assert out.left.shape == (3, 24, 40)
    assert out.left.max().item() <= 1.0 and out.id == "x"
    assert sirn.training


def test_gradients_match_finite_differences(param_gradcheck) -> None:
    sirn = SIRN(SirnConfig(num_cibs=1, channels=8, heads=2, scale=1))
    lq_l, lq_r = torch.rand(1, 3, 4, 12, dtype=torch.float64), torch.rand(1, 3, 4, 12, dtype=torch.float64)
    z_l, z_r = _x(1, 1, 4, 12), _x(1, 1, 4, 12)
    target = torch.rand(1, 3, 4, 12, dtype=torch.float64)

    def loss(call):
        out = call(lq_l, lq_r, z_l, z_r)
        return (out.left - target).pow(2).mean() + (out.right - target).pow(2).mean()

    assert param_gradcheck(sirn, loss, eps=1e-3)
