import numpy as np
import pytest
import torch

from featguard.datasets import DatasetSplit
from featguard.imaging import ImageTensor, LabeledImage
from featguard.models import train_reference_model

TINY_ARCHS = {
    "vgg": {"family": "vgg", "layout": [8, "M", 16, "M", 16]},
    "resnet": {"family": "resnet", "layout": [[8, 1], [16, 2]], "stem": 8},
    "separable": {"family": "separable", "layout": [[16, 2], [16, 1]], "stem": 8},
}


def colour_blobs(n_per, classes=3, size=16, seed=0, tag="train"):
    """Easy RGB task: each class is a square of its own colour on a noisy grey field."""
    rng = np.random.default_rng(seed)
    palette = np.array([[220, 40, 40], [40, 200, 40], [40, 60, 220], [220, 200, 40]], dtype=float)
    items = []
    for c in range(classes):
        for k in range(n_per):
            img = rng.normal(128, 20, (size, size, 3))
            y0, x0 = rng.integers(1, size // 2, 2)
            img[y0 : y0 + size // 2, x0 : x0 + size // 2] = palette[c] + rng.normal(0, 10, 3)
            items.append(LabeledImage(ImageTensor(np.clip(np.rint(img), 0, 255)), c, f"blob-{tag}-{c}-{k}"))
    return DatasetSplit(items, classes, "test" if tag == "test" else "train", f"blobs{classes}")


@pytest.fixture(scope="session")
def blobs():
    return colour_blobs(40, seed=0), colour_blobs(10, seed=1, tag="test")


@pytest.fixture(scope="session")
def tiny_checkpoints(blobs):
    train, test = blobs
    out = []
    for i, (name, arch) in enumerate(TINY_ARCHS.items()):
        arch = dict(arch, num_classes=3, in_channels=3, input_size=[16, 16, 3])
        out.append(train_reference_model(arch, train, epochs=15, seed=i, test_split=test, model_id=name))
    return out


@pytest.fixture()
def tiny_zoo(tiny_checkpoints):
    torch.manual_seed(0)
    return [c.handle() for c in tiny_checkpoints]


_CRITERIA = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
