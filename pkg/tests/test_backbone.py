import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from amodalseg.backbone import (
    ConvBackbone,
    TokenEmbedding,
    crop_roi,
    enlarged_window,
    flatten_grid,
    resize_nearest,
    unflatten_grid,
)


def test_enlarged_window_examples():
    assert enlarged_window((10, 10, 4, 6), 64, 64) == (8, 7, 16, 19)
    assert enlarged_window((0, 0, 4, 4), 64, 64) == (0, 0, 6, 6)  # clamped at the border
    assert enlarged_window((60, 60, 4, 4), 64, 64) == (58, 58, 64, 64)
    assert enlarged_window((10, 10, 4, 4), 64, 64, scale=1.0) == (10, 10, 14, 14)
    with pytest.raises(ValueError):
        enlarged_window((3, 3, 0, 2), 64, 64)


@given(
    x=st.integers(0, 60), y=st.integers(0, 60), w=st.integers(1, 30), h=st.integers(1, 30)
)
def test_enlarged_window_contains_box(x, y, w, h):
    H = W = 64
    w, h = min(w, W - x), min(h, H - y)
    x0, y0, x1, y1 = enlarged_window((x, y, w, h), H, W)
    assert 0 <= x0 <= x and x + w <= x1 <= W
    assert 0 <= y0 <= y and y + h <= y1 <= H


def test_resize_nearest_keeps_binary_and_containment():
    rng = np.random.default_rng(0)
    amodal = rng.random((13, 17)) > 0.4
    vis = amodal & (rng.random((13, 17)) > 0.5)
    a, v = resize_nearest(amodal, 32), resize_nearest(vis, 32)
    assert a.dtype == bool and a.shape == (32, 32)
    assert not (v & ~a).any()


def test_resize_nearest_identity_and_upsample():
    m = np.arange(16).reshape(4, 4)
    assert np.array_equal(resize_nearest(m, 4), m)
    assert np.array_equal(resize_nearest(m, 8), np.repeat(np.repeat(m, 2, 0), 2, 1))


def test_crop_roi_example():
    image = np.zeros((64, 64, 3), np.float32)
    mask = np.zeros((64, 64), bool)
    mask[20:28, 30:34] = True  # x=30, y=20, w=4, h=8
    image[mask] = 1.0
    img, (m,), window = crop_roi(image, [mask], (30, 20, 4, 8), 32)
    assert window == (28, 16, 36, 32)
    assert img.shape == (32, 32, 3) and m.shape == (32, 32)
    # the box fills exactly the central half of the window along each axis
    expected = np.zeros((32, 32), bool)
    expected[8:24, 8:24] = True
    assert np.array_equal(m, expected)
    assert np.allclose(img[10:22, 12:20], 1.0)  # bilinear blurs only the edges
    assert img[:4].max() == 0.0


def test_grid_roundtrip():
    x = torch.randn(2, 5, 3, 4)
    f = flatten_grid(x)
    assert f.shape == (2, 12, 5)
    assert torch.equal(f[:, 1], x[:, :, 0, 1])  # row-major
    assert torch.equal(unflatten_grid(f, 3, 4), x)


def test_backbone_output_matches_latent_grid():
    net = ConvBackbone(d=16, stages=2)
    assert net(torch.randn(2, 3, 32, 32)).shape == (2, 16, 8, 8)
    with pytest.raises(ValueError):
        net(torch.randn(1, 3, 30, 30))


def test_token_embedding_sentinel_and_range():
    emb = TokenEmbedding(8, 4, 16)
    assert emb.mask_id == 8
    assert emb(torch.full((2, 4, 4), 8)).shape == (2, 16, 4)
    with pytest.raises(ValueError):
        emb(torch.full((1, 16), 9))
    with pytest.raises(ValueError):
        emb(torch.zeros(1, 9, dtype=torch.long))
