"""Uniform differentiable-classifier handle over the reference networks.

Callers always speak in 0-255 pixel space (H x W x C for single images,
N x H x W x C for batches). The handle owns the per-model mean/std
normalization and applies it inside every forward pass, so gradients come
back in pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..errors import ContractError
from ..imaging import ImageTensor
from .zoo import TappedNet, build

DEFAULT_TAP_DEPTH = 0.55


@dataclass(frozen=True)
class TapId:
    name: str
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ContractError(f"tap index must be non-negative, got {self.index}")


@dataclass(eq=False)
class ClassifierHandle:
    """A frozen classifier in inference mode plus the metadata the engine needs."""

    model_id: str
    net: TappedNet
    num_classes: int
    input_size: tuple[int, int, int]
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)
    arch: dict = field(default_factory=dict)
    taps: list[TapId] = field(init=False)

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.input_size = tuple(int(v) for v in self.input_size)
        c = self.input_size[2]
        if len(self.mean) != c or len(self.std) != c:
            raise ContractError("normalization constants must have one entry per channel")
        self.taps = [TapId(n, i) for i, n in enumerate(self.net.tap_names)]
        if not self.taps:
            raise ContractError("a classifier must expose at least one tap")
        dtype = self.dtype
        self._mean = torch.tensor(self.mean, dtype=dtype).view(1, c, 1, 1)
        self._std = torch.tensor(self.std, dtype=dtype).view(1, c, 1, 1)

    @classmethod
    def from_arch(cls, model_id, arch, state_dict=None, mean=None, std=None, dtype=torch.float32):
        net = build(arch).to(dtype)
        if state_dict is not None:
            net.load_state_dict(state_dict)
        h, w, c = arch.get("input_size", (32, 32, arch.get("in_channels", 3)))
        mean = tuple(mean) if mean is not None else (0.5,) * c
        std = tuple(std) if std is not None else (0.25,) * c
        return cls(model_id, net, arch["num_classes"], (h, w, c), mean, std, dict(arch))

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def to(self, dtype) -> "ClassifierHandle":
        """A copy of this handle whose network computes in ``dtype``."""
        import copy

        net = copy.deepcopy(self.net).to(dtype)
        return ClassifierHandle(self.model_id, net, self.num_classes, self.input_size,
                                self.mean, self.std, dict(self.arch))

    def clone(self) -> "ClassifierHandle":
        return self.to(self.dtype)

    def resolve_tap(self, tap) -> TapId:
        """Accept a TapId, an index, or a tap name."""
        if isinstance(tap, TapId):
            if tap.index >= len(self.taps) or self.taps[tap.index] != tap:
                raise ContractError(f"tap {tap} does not belong to model {self.model_id}")
            return tap
        if isinstance(tap, (int, np.integer)) and not isinstance(tap, bool):
            if not 0 <= int(tap) < len(self.taps):
                raise ContractError(f"tap index {tap} out of range for {self.model_id} ({len(self.taps)} taps)")
            return self.taps[int(tap)]
        if isinstance(tap, str):
            for t in self.taps:
                if t.name == tap:
                    return t
        raise ContractError(f"unknown tap {tap!r} for model {self.model_id}")

    def default_tap(self) -> TapId:
        """The architecture's ``default_tap`` if it names one, else the tap at relative depth 0.55."""
        if self.arch.get("default_tap") is not None:
            return self.resolve_tap(self.arch["default_tap"])
        return self.taps[int(round(DEFAULT_TAP_DEPTH * (len(self.taps) - 1)))]

    # -- batched tensor path used by the engine and harness --

    def to_input(self, pixels) -> torch.Tensor:
        """N x H x W x C pixel array/tensor -> N x C x H x W tensor in model dtype (graph-preserving)."""
        t = pixels if isinstance(pixels, torch.Tensor) else torch.tensor(np.asarray(pixels))
        if t.dim() == 3:
            t = t.unsqueeze(0)
        if tuple(t.shape[1:]) != self.input_size:
            raise ContractError(f"input shape {tuple(t.shape[1:])} does not match {self.input_size}")
        return t.to(self.dtype).permute(0, 3, 1, 2)

    def forward(self, pixels, taps: Sequence[int] = (), stop_early=False):
        """Logits and requested tap activations for a pixel-space batch."""
        x = self.to_input(pixels)
        x = (x / 255.0 - self._mean) / self._std
        logits, feats = self.net(x, taps=list(taps), stop_early=stop_early)
        return logits, feats

    def predict(self, pixels, batch_size=256) -> np.ndarray:
        arr = pixels if isinstance(pixels, torch.Tensor) else torch.tensor(np.asarray(pixels))
        if arr.dim() == 3:
            arr = arr.unsqueeze(0)
        out = []
        with torch.no_grad():
            for i in range(0, arr.shape[0], batch_size):
                logits, _ = self.forward(arr[i : i + batch_size])
                out.append(logits.argmax(1).numpy())
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def softmax(self, pixels, batch_size=256) -> np.ndarray:
        arr = torch.as_tensor(np.asarray(pixels))
        out = []
        with torch.no_grad():
            for i in range(0, arr.shape[0], batch_size):
                logits, _ = self.forward(arr[i : i + batch_size])
                out.append(torch.softmax(logits.double(), 1).numpy())
        return np.concatenate(out)


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)


def list_taps(model: ClassifierHandle) -> list[TapId]:
    return list(model.taps)


def logits(model: ClassifierHandle, x) -> np.ndarray:
    """Class scores for one image, as a float64 vector of length ``num_classes``."""
    with torch.no_grad():
        out, _ = model.forward(_pixels(x))
    return out[0].double().numpy()


def features(model: ClassifierHandle, x, tap) -> np.ndarray:
    """Activation tensor (C x h x w) at ``tap`` for one image."""
    t = model.resolve_tap(tap)
    with torch.no_grad():
        _, feats = model.forward(_pixels(x), taps=[t.index], stop_early=True)
    return feats[t.index][0].double().numpy()


def input_gradient(model: ClassifierHandle, scalar_loss: Callable, x) -> np.ndarray:
    """Gradient of ``scalar_loss`` with respect to the pixels of ``x``.

    ``scalar_loss`` receives the H x W x C pixel tensor (0-255 domain, model
    dtype, requires_grad) and may call ``model.forward`` on it. It must return
    a single-element tensor.
    """
    px = torch.tensor(_pixels(x), dtype=model.dtype, requires_grad=True)
    loss = scalar_loss(px)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ContractError("scalar_loss must return a single-element tensor")
    (grad,) = torch.autograd.grad(loss.reshape(()), px, allow_unused=True)
    if grad is None:
        return np.zeros(px.shape)
    return grad.double().numpy()
