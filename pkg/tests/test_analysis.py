import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from featguard.analysis import (
    channel_correlations,
    feature_panel,
    grad_cam,
    grad_cam_pair,
    gradcam_shift,
    max_softmax,
    normalize_map,
    save_heatmap_overlay,
    softmax_histogram,
)
from featguard.imaging import ImageTensor
from featguard.models import ClassifierHandle


def pointwise_toy(conv_w, conv_b, head_w, head_b, size=5):
    """One 1x1 conv (no activation) on a grey image, global average pool, linear head."""
    cout = len(conv_b)
    arch = {"family": "toyconv", "num_classes": len(head_b), "in_channels": 1, "channels": [1, cout],
            "kernel": 1, "activation": "none", "input_size": [size, size, 1]}
    h = ClassifierHandle.from_arch("toy", arch, dtype=torch.float64, mean=(0.0,), std=(1 / 255.0,))
    conv = h.net.stages[0][0]
    conv.weight.copy_(torch.tensor(conv_w, dtype=torch.float64).reshape(cout, 1, 1, 1))
    conv.bias.copy_(torch.tensor(conv_b, dtype=torch.float64))
    h.net.head[2].weight.copy_(torch.tensor(head_w, dtype=torch.float64))
    h.net.head[2].bias.copy_(torch.tensor(head_b, dtype=torch.float64))
    return h


def test_identity_net_on_flat_image_gives_uniform_map():
    toy = pointwise_toy([1.0], [0.0], [[1.0]], [0.0])
    hm = grad_cam(toy, ImageTensor(np.full((5, 5, 1), 90.0)), 0)
    np.testing.assert_allclose(hm.values, np.ones((5, 5)))


def test_grad_cam_closed_form():
    conv_w, conv_b = [1.0, -0.5], [3.0, 100.0]
    head_w, head_b = [[0.2, 0.7], [-0.3, 0.1]], [0.0, 0.0]
    toy = pointwise_toy(conv_w, conv_b, head_w, head_b)
    x = ImageTensor(np.random.default_rng(0).uniform(0, 255, (5, 5, 1)))
    for c in (0, 1):
        acts = [conv_w[k] * x.pixels[:, :, 0] + conv_b[k] for k in range(2)]
        weights = [head_w[c][k] / 25.0 for k in range(2)]
        cam = np.maximum(weights[0] * acts[0] + weights[1] * acts[1], 0)
        expect = cam / cam.max() if cam.max() > 0 else cam
        np.testing.assert_allclose(grad_cam(toy, x, c, 0).values, expect, atol=1e-12)


def test_fully_negative_map_is_zero():
    toy = pointwise_toy([1.0], [10.0], [[-1.0]], [0.0])
    hm = grad_cam(toy, ImageTensor(np.full((5, 5, 1), 50.0)), 0)
    assert np.all(hm.values == 0)


def test_grad_cam_deterministic_and_bounded(tiny_zoo, blobs):
    x = blobs[1].items[0].image
    for m in tiny_zoo:
        a, b = grad_cam(m, x, 1), grad_cam(m, x, 1)
        assert np.array_equal(a.values, b.values)
        assert a.values.shape == (16, 16)
        assert a.values.min() >= 0 and a.values.max() <= 1
        assert a.values.max() in (0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-10, 10)))
def test_normalization_idempotent(cam):
    once = normalize_map(cam)
    assert once.min() >= 0 and once.max() <= 1
    np.testing.assert_array_equal(normalize_map(once), once)


def test_pair_emits_both_targets(tiny_zoo, blobs):
    it = blobs[1].items[0]
    out = grad_cam_pair(tiny_zoo[0], it.image, it.image, it.label)
    assert {"original", "protected_label", "protected_prediction", "prediction"} <= set(out)
    assert out["original"].l1(out["protected_label"]) == 0.0


def test_gradcam_shift_zero_for_identical(tiny_zoo, blobs):
    imgs = [it.image for it in blobs[1].items[:3]]
    labels = [it.label for it in blobs[1].items[:3]]
    assert all(v == 0.0 for v in gradcam_shift(tiny_zoo, imgs, imgs, labels).values())


def test_overlay_written(tiny_zoo, blobs, tmp_path):
    x = blobs[1].items[0].image
    p = save_heatmap_overlay(grad_cam(tiny_zoo[1], x, 0), x, tmp_path / "cam.png")
    assert p.exists() and p.stat().st_size > 0


def test_channel_correlation_matches_brute_force():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3, 3))
    b = a * 0.5 + rng.normal(size=a.shape)
    b[3] = 2.0
    got = channel_correlations(a, b)
    for c in range(3):
        x, y = a[c].ravel(), b[c].ravel()
        r = sum((xi - x.mean()) * (yi - y.mean()) for xi, yi in zip(x, y)) / np.sqrt(
            sum((xi - x.mean()) ** 2 for xi in x) * sum((yi - y.mean()) ** 2 for yi in y))
        assert got[c] == pytest.approx(r, rel=1e-12)
    assert np.isnan(got[3])


def test_feature_panel_identity(tiny_zoo, blobs, tmp_path):
    x = blobs[1].items[2].image
    out = feature_panel(tiny_zoo[0], x, x, path=tmp_path / "panel.png")
    assert out["mean_correlation"] == pytest.approx(1.0)
    from PIL import Image

    img = np.asarray(Image.open(out["path"]), dtype=float)
    half = (img.shape[0] - 4) // 2  # one gap row, scaled by 4
    np.testing.assert_array_equal(img[:half], img[half + 4 :])
    assert json.loads((tmp_path / "panel.json").read_text())["tap"] == out["tap"]


def test_uniform_logits_give_flat_softmax():
    arch = {"family": "linear", "num_classes": 5, "in_features": 12, "input_size": [2, 2, 3]}
    h = ClassifierHandle.from_arch("flat", arch)
    h.net.head[1].weight.zero_()
    h.net.head[1].bias.zero_()
    imgs = np.random.default_rng(0).uniform(0, 255, (7, 2, 2, 3))
    np.testing.assert_allclose(max_softmax(h, imgs), np.full(7, 0.2))


def test_histogram_counts_match_brute_force(tiny_zoo, blobs, tmp_path):
    x, _ = blobs[1].arrays()
    xs = np.clip(x + 9.0, 0, 255)
    stats = softmax_histogram(tiny_zoo, x, xs, path=tmp_path / "hist.png", bins=10)
    assert (tmp_path / "hist.png").exists()
    for m in tiny_zoo:
        v = max_softmax(m, xs)
        counts = [0] * 10
        for s in v:
            counts[min(int(s * 10), 9)] += 1
        e = stats["models"][m.model_id]["protected"]
        assert e["counts"] == counts
        assert e["mean"] == pytest.approx(float(np.mean(v)))
        assert e["median"] == pytest.approx(float(np.median(v)))
