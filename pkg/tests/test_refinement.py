import math

import pytest
import torch

from amodalseg.gradcheck import check_gradient
from amodalseg.refinement import DataIntegrityError, RefineNet, downsample_mask, refine_loss, semantic_attention


def test_semantic_attention_by_hand():
    # two positions, d=2
    feats = torch.tensor([[1.0, 0.0], [0.0, 2.0]]).T.reshape(1, 2, 1, 2)  # v_0=(1,0), v_1=(0,2)
    m = torch.tensor([[[1.0, 0.0]]])
    A, w = semantic_attention(m, feats)
    q = torch.tensor([1.0, 0.0])
    scores = torch.tensor([q @ torch.tensor([1.0, 0.0]), q @ torch.tensor([0.0, 2.0])]) / math.sqrt(2)
    expected_w = torch.softmax(scores, 0)
    assert torch.allclose(w.flatten(), expected_w)
    assert torch.allclose(A[0, :, 0, 0], expected_w[0] * torch.tensor([1.0, 0.0]))
    assert torch.allclose(A[0, :, 0, 1], expected_w[1] * torch.tensor([0.0, 2.0]))


def test_semantic_attention_weights_sum_to_one():
    torch.manual_seed(0)
    A, w = semantic_attention(torch.rand(3, 4, 4), torch.randn(3, 8, 4, 4))
    assert A.shape == (3, 8, 4, 4)
    assert torch.allclose(w.flatten(1).sum(1), torch.ones(3))


def test_empty_mask_gives_uniform_attention():
    _, w = semantic_attention(torch.zeros(1, 2, 3), torch.randn(1, 4, 2, 3))
    assert torch.allclose(w, torch.full((1, 2, 3), 1 / 6))


def test_semantic_attention_shape_mismatch():
    with pytest.raises(ValueError):
        semantic_attention(torch.zeros(1, 3, 3), torch.zeros(1, 4, 2, 2))


def test_downsample_is_area_average():
    m = torch.zeros(1, 4, 4)
    m[0, :2, :2] = 1
    m[0, 2, 2] = 1
    out = downsample_mask(m, 2)
    assert torch.allclose(out, torch.tensor([[[1.0, 0.0], [0.0, 0.25]]]))
    with pytest.raises(ValueError):
        downsample_mask(m, 3)


def test_refine_output_shapes_and_variants():
    feats = torch.randn(2, 16, 8, 8)
    coarse = torch.rand(2, 32, 32)
    full = RefineNet(16, 4)
    out = full(feats, coarse)
    assert out.amodal_logits.shape == (2, 32, 32)
    assert out.visible_logits.shape == (2, 32, 32)
    assert out.attention.shape == (2, 8, 8)
    single = RefineNet(16, 4, two_branch=False)
    assert single(feats, coarse).visible_logits is None
    no_attn = RefineNet(16, 4, attention=False)
    assert no_attn(feats, coarse).attention is None
    count = lambda m: sum(p.numel() for p in m.parameters())  # noqa: E731
    # each flag removes exactly its own parameters
    assert count(full) - count(single) == sum(p.numel() for p in full.visible_head.parameters())
    assert count(full) - count(no_attn) == 16 * full.trunk[0].weight.shape[0] * 9


def test_refine_rejects_misaligned_coarse():
    with pytest.raises(ValueError):
        RefineNet(16, 4)(torch.randn(1, 16, 8, 8), torch.rand(1, 30, 30))


def test_refine_loss_terms_and_integrity():
    torch.manual_seed(0)
    net = RefineNet(8, 2)
    out = net(torch.randn(2, 8, 4, 4), torch.rand(2, 8, 8))
    amodal = torch.zeros(2, 8, 8)
    amodal[:, 2:6, 2:6] = 1
    visible = amodal.clone()
    visible[:, 2:4] = 0
    losses = refine_loss(out, amodal, visible)
    assert set(losses.terms) == {"amodal", "visible"}
    with pytest.raises(DataIntegrityError):
        refine_loss(out, visible, amodal)
    single = RefineNet(8, 2, two_branch=False)
    assert set(refine_loss(single(torch.randn(2, 8, 4, 4), torch.rand(2, 8, 8)), amodal, visible).terms) == {"amodal"}


def test_refine_bce_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = RefineNet(8, 2, width=16).double()
    feats = torch.randn(2, 8, 4, 4, dtype=torch.float64, requires_grad=True)
    coarse = torch.rand(2, 8, 8, dtype=torch.float64)
    amodal = (torch.rand(2, 8, 8) > 0.4).double()
    visible = amodal * (torch.rand(2, 8, 8) > 0.5).double()
    fn = lambda: refine_loss(net(feats, coarse), amodal, visible).total  # noqa: E731
    assert check_gradient(fn, feats) < 1e-3
    assert check_gradient(fn, net.amodal_head.weight) < 1e-3
