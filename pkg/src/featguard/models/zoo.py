"""Desk-scale reference architectures with explicit feature taps.

Every network here maps a *normalized* NCHW batch to logits and can also return
the activations at its taps. A tap is the output of a convolution after its
activation function (for residual nets, the block output after the skip-add),
taken before any following pooling. Taps are produced by ``forward`` itself,
not by hooks, so one module can serve concurrent callers.
"""

from __future__ import annotations

import copy

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ContractError

# 13 convolutions in the VGG16 arrangement, 4 pools for 32 px inputs.
VGG16_LAYOUT = (8, 8, "M", 16, 16, "M", 32, 32, 32, "M", 48, 48, 48, "M", 64, 64, 64)
VGG11_LAYOUT = (8, "M", 16, "M", 32, 32, "M", 48, 48, "M", 64, 64)
RESNET_LAYOUT = ((16, 1), (32, 2), (64, 2), (64, 2))
SEPARABLE_LAYOUT = ((24, 2), (24, 1), (48, 2), (48, 1), (96, 2), (96, 1))

# Per-family taps chosen with harness.select_taps on held-out glyph-task images.
STANDARD_TAPS = {"vgg": 2, "resnet": 2, "separable": 2}


class TappedNet(nn.Module):
    """Base: ``stages`` run in order, stage *i* output is tap *i*; ``head`` maps the last one to logits."""

    tap_names: list[str]

    def __init__(self):
        super().__init__()
        self.stages = nn.ModuleList()
        self.head = nn.Identity()

    @property
    def num_taps(self):
        return len(self.stages)

    def forward(self, x, taps=None, stop_early=False):
        want = set(taps or ())
        bad = [t for t in want if not 0 <= t < len(self.stages)]
        if bad:
            raise ContractError(f"unknown tap indices {bad}; model has {len(self.stages)} taps")
        last = max(want) if (want and stop_early) else None
        collected = {}
        h = x
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i in want:
                collected[i] = h
            if last is not None and i == last:
                return None, collected
        logits = self.head(h)
        if taps is None:
            return logits
        return logits, collected

    def replace_head(self, num_classes):
        """Swap the final linear layer for a freshly initialized one with ``num_classes`` outputs."""
        old = self.head[-1] if isinstance(self.head, nn.Sequential) else self.head
        if not isinstance(old, nn.Linear):
            raise ContractError("model head is not a linear layer")
        new = nn.Linear(old.in_features, num_classes).to(old.weight.dtype)
        if isinstance(self.head, nn.Sequential):
            self.head[-1] = new
        else:
            self.head = new
        return new


class _PoolThen(nn.Module):
    def __init__(self, pool, body):
        super().__init__()
        self.pool = pool
        self.body = body

    def forward(self, x):
        return self.body(self.pool(x))


class VGGStyle(TappedNet):
    """Plain stacked 3x3 convolutions with batch norm; a tap after each ReLU."""

    def __init__(self, num_classes, in_channels=3, layout=VGG16_LAYOUT):
        super().__init__()
        cin = in_channels
        pending_pool = 0
        self.tap_names = []
        for v in layout:
            if v == "M":
                pending_pool += 1
                continue
            body = nn.Sequential(nn.Conv2d(cin, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU())
            if pending_pool:
                body = _PoolThen(nn.MaxPool2d(2 ** pending_pool), body)
                pending_pool = 0
            self.stages.append(body)
            self.tap_names.append(f"conv{len(self.tap_names)}")
            cin = v
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(cin, num_classes))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.b1 = nn.BatchNorm2d(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.b2 = nn.BatchNorm2d(cout)
        if stride == 1 and cin == cout:
            self.short = nn.Identity()
        else:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        h = F.relu(self.b1(self.c1(x)))
        return F.relu(self.b2(self.c2(h)) + self.short(x))


class ResidualNet(TappedNet):
    def __init__(self, num_classes, in_channels=3, layout=RESNET_LAYOUT, stem=16):
        super().__init__()
        self.stages.append(nn.Sequential(nn.Conv2d(in_channels, stem, 3, 1, 1, bias=False),
                                         nn.BatchNorm2d(stem), nn.ReLU()))
        self.tap_names = ["stem"]
        cin = stem
        for i, (cout, stride) in enumerate(layout):
            self.stages.append(BasicBlock(cin, cout, stride))
            self.tap_names.append(f"block{i}")
            cin = cout
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(cin, num_classes))


def _separable(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cin, 3, stride, 1, groups=cin, bias=False), nn.BatchNorm2d(cin), nn.ReLU6(),
        nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU6(),
    )


class SeparableNet(TappedNet):
    """Depthwise-separable stack in the MobileNet-v1 style."""

    def __init__(self, num_classes, in_channels=3, layout=SEPARABLE_LAYOUT, stem=16):
        super().__init__()
        self.stages.append(nn.Sequential(nn.Conv2d(in_channels, stem, 3, 1, 1, bias=False),
                                         nn.BatchNorm2d(stem), nn.ReLU6()))
        self.tap_names = ["stem"]
        cin = stem
        for i, (cout, stride) in enumerate(layout):
            self.stages.append(_separable(cin, cout, stride))
            self.tap_names.append(f"sep{i}")
            cin = cout
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(cin, num_classes))


class LinearProbe(TappedNet):
    """Affine map of the flattened input. Its single tap is the input itself."""

    def __init__(self, num_classes, in_features):
        super().__init__()
        self.stages.append(nn.Identity())
        self.tap_names = ["input"]
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(in_features, num_classes))


class ToyConv(TappedNet):
    """Chain of same-padded convolutions for hand-checkable tests."""

    def __init__(self, num_classes, channels=(3, 3), kernel=1, activation="relu"):
        super().__init__()
        act = {"relu": nn.ReLU, "none": nn.Identity, "tanh": nn.Tanh}[activation]
        self.tap_names = []
        for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            self.stages.append(nn.Sequential(nn.Conv2d(cin, cout, kernel, padding=kernel // 2), act()))
            self.tap_names.append(f"conv{i}")
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(channels[-1], num_classes))


def build(arch: dict) -> TappedNet:
    """Instantiate a network from a JSON-serializable architecture descriptor."""
    arch = copy.deepcopy(arch)
    family = arch.pop("family", None)
    nc = arch.pop("num_classes")
    in_ch = arch.pop("in_channels", 3)
    if family == "vgg":
        layout = tuple(arch.pop("layout", VGG16_LAYOUT))
        net = VGGStyle(nc, in_ch, layout)
    elif family == "resnet":
        layout = tuple(tuple(x) for x in arch.pop("layout", RESNET_LAYOUT))
        net = ResidualNet(nc, in_ch, layout, arch.pop("stem", 16))
    elif family == "separable":
        layout = tuple(tuple(x) for x in arch.pop("layout", SEPARABLE_LAYOUT))
        net = SeparableNet(nc, in_ch, layout, arch.pop("stem", 16))
    elif family == "linear":
        net = LinearProbe(nc, arch.pop("in_features"))
    elif family == "toyconv":
        net = ToyConv(nc, tuple(arch.pop("channels", (in_ch, in_ch))), arch.pop("kernel", 1),
                      arch.pop("activation", "relu"))
    else:
        raise ContractError(f"unknown architecture family {family!r}")
    arch.pop("input_size", None)
    arch.pop("default_tap", None)
    if arch:
        raise ContractError(f"unexpected architecture fields {sorted(arch)}")
    return net


def standard_arch(family: str, num_classes: int, input_size=(32, 32, 3)) -> dict:
    """Descriptor for one of the three reference families (plus ``vgg11``)."""
    h, w, c = input_size
    if family == "vgg11":
        return {"family": "vgg", "num_classes": num_classes, "in_channels": c,
                "input_size": list(input_size), "layout": list(VGG11_LAYOUT)}
    if family not in ("vgg", "resnet", "separable"):
        raise ContractError(f"unknown reference family {family!r}")
    return {"family": family, "num_classes": num_classes, "in_channels": c, "input_size": list(input_size),
            "default_tap": STANDARD_TAPS[family]}
