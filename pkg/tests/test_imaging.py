import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image
from skimage.metrics import structural_similarity

from featguard.errors import ContractError, FormatError
from featguard.imaging import (
    ImageTensor,
    LabeledImage,
    linf_distance,
    load_image,
    save_image_lossless,
    ssim,
)


def _rand_image(rng, h=24, w=24, c=3):
    return ImageTensor(rng.uniform(0, 255, (h, w, c)))


def test_image_tensor_rejects_out_of_range():
    with pytest.raises(ContractError):
        ImageTensor(np.full((4, 4, 3), 255.5))
    with pytest.raises(ContractError):
        ImageTensor(np.full((4, 4, 3), -0.01))
    with pytest.raises(FormatError):
        ImageTensor(np.zeros((4, 4, 2)))


def test_image_tensor_is_immutable():
    img = ImageTensor(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1.0
    assert (img.height, img.width, img.channels) == (4, 4, 3)


def test_grayscale_promoted_to_one_channel():
    assert ImageTensor(np.zeros((5, 6))).shape == (5, 6, 1)


def test_labeled_image_negative_label():
    with pytest.raises(ContractError):
        LabeledImage(ImageTensor(np.zeros((2, 2, 1))), -1, "x")


def test_load_rgb_png(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.png")
    img = load_image(tmp_path / "a.png", (224, 224))
    assert img.shape == (224, 224, 3)
    assert img.pixels.min() >= 0 and img.pixels.max() <= 255
    np.testing.assert_array_equal(img.pixels, arr)


def test_load_black_png_and_resize(tmp_path):
    Image.fromarray(np.zeros((40, 50, 3), np.uint8)).save(tmp_path / "b.png")
    img = load_image(tmp_path / "b.png", (32, 32))
    assert img.shape == (32, 32, 3)
    assert np.all(img.pixels == 0.0)


def test_load_truncated_file(tmp_path):
    Image.fromarray(np.full((64, 64, 3), 7, np.uint8)).save(tmp_path / "c.png")
    data = (tmp_path / "c.png").read_bytes()
    (tmp_path / "t.png").write_bytes(data[: len(data) // 2])
    with pytest.raises(OSError):
        load_image(tmp_path / "t.png")


def test_load_rgba_rejected(tmp_path):
    Image.fromarray(np.zeros((8, 8, 4), np.uint8), mode="RGBA").save(tmp_path / "d.png")
    with pytest.raises(FormatError):
        load_image(tmp_path / "d.png")


def test_save_roundtrip_integer_pixels(tmp_path):
    rng = np.random.default_rng(1)
    img = ImageTensor(rng.integers(0, 256, (16, 16, 3)).astype(float))
    save_image_lossless(img, tmp_path / "r.png")
    assert load_image(tmp_path / "r.png") == img


def test_save_rounds_to_nearest(tmp_path):
    px = np.full((4, 4, 1), 10.0)
    px[1, 2, 0] = 127.6
    save_image_lossless(ImageTensor(px), tmp_path / "q.png")
    back = load_image(tmp_path / "q.png")
    assert back.pixels[1, 2, 0] == 128.0


def test_save_rejects_jpeg(tmp_path):
    with pytest.raises(FormatError):
        save_image_lossless(ImageTensor(np.zeros((4, 4, 3))), tmp_path / "x.jpg")


def test_save_unwritable(tmp_path):
    # parent is a regular file, so the write fails even when running as root
    (tmp_path / "a_file").write_text("")
    with pytest.raises(OSError):
        save_image_lossless(ImageTensor(np.zeros((4, 4, 3))), tmp_path / "a_file" / "x.png")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 5, 3), elements=st.floats(0, 255)))
def test_save_load_within_half(tmp_path_factory, px):
    path = tmp_path_factory.mktemp("rt") / "p.png"
    img = ImageTensor(px)
    save_image_lossless(img, path)
    assert np.max(np.abs(load_image(path).pixels - px)) <= 0.5


def test_linf_basic():
    a = ImageTensor(np.full((3, 3, 3), 10.0))
    b = ImageTensor(np.full((3, 3, 3), 26.0))
    assert linf_distance(a, a) == 0.0
    assert linf_distance(a, b) == 16.0
    with pytest.raises(ContractError):
        linf_distance(a, ImageTensor(np.zeros((3, 4, 3))))


def test_linf_matches_loop():
    rng = np.random.default_rng(2)
    a, b = _rand_image(rng, 7, 5), _rand_image(rng, 7, 5)
    best = 0.0
    for i in range(7):
        for j in range(5):
            for c in range(3):
                best = max(best, abs(a.pixels[i, j, c] - b.pixels[i, j, c]))
    assert linf_distance(a, b) == best


_img = arrays(np.float64, (4, 4, 1), elements=st.floats(0, 255))


@settings(max_examples=50, deadline=None)
@given(_img, _img, _img)
def test_linf_metric_properties(x, y, z):
    a, b, c = ImageTensor(x), ImageTensor(y), ImageTensor(z)
    assert linf_distance(a, b) == linf_distance(b, a)
    assert linf_distance(a, c) <= linf_distance(a, b) + linf_distance(b, c) + 1e-9


def test_ssim_identity_and_errors():
    rng = np.random.default_rng(3)
    a = _rand_image(rng)
    assert ssim(a, a) == 1.0
    with pytest.raises(ContractError):
        ssim(a, _rand_image(rng, 24, 23))
    small = _rand_image(rng, 10, 10)
    with pytest.raises(ContractError):
        ssim(small, small)


def _reference_ssim(a, b):
    return structural_similarity(
        a.pixels, b.pixels, data_range=255, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, channel_axis=2,
    )


def test_ssim_constant_shift_matches_reference():
    rng = np.random.default_rng(4)
    a = ImageTensor(rng.uniform(20, 230, (32, 32, 3)))
    b = ImageTensor(a.pixels + 16.0)
    assert ssim(a, b) == pytest.approx(_reference_ssim(a, b), abs=1e-6)


def test_ssim_random_pairs_match_reference():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = _rand_image(rng, 30, 27)
        b = ImageTensor.clipped(a.pixels + rng.uniform(-16, 16, a.shape))
        assert ssim(a, b) == pytest.approx(_reference_ssim(a, b), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (12, 12, 1), elements=st.floats(0, 255)),
       arrays(np.float64, (12, 12, 1), elements=st.floats(0, 255)))
def test_ssim_symmetric(x, y):
    a, b = ImageTensor(x), ImageTensor(y)
    assert ssim(a, b) == ssim(b, a)
    assert -1.0 <= ssim(a, b) <= 1.0
