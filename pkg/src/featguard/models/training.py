"""Reference model training and checkpoint persistence.

A checkpoint is a ``.pt`` container (architecture descriptor, parameters,
normalization constants, training metadata) with a human-readable ``.json``
sidecar carrying the same manifest and the container's SHA-256.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ContractError, FormatError, TrainingError
from .adapter import ClassifierHandle
from .zoo import build

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_id: str
    arch: dict
    state_dict: dict
    mean: tuple
    std: tuple
    meta: dict = field(default_factory=dict)

    def handle(self, dtype=torch.float32) -> ClassifierHandle:
        return ClassifierHandle.from_arch(self.model_id, self.arch, self.state_dict,
                                          self.mean, self.std, dtype=dtype)

    @property
    def accuracy(self):
        return self.meta.get("final_accuracy")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``<path>.pt`` plus ``<path>.json``; returns the ``.pt`` path."""
    path = Path(path)
    if path.suffix != ".pt":
        path = path.with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in ckpt.state_dict.items()}
    blob = {
        "format_version": FORMAT_VERSION,
        "model_id": ckpt.model_id,
        "arch": ckpt.arch,
        "mean": list(ckpt.mean),
        "std": list(ckpt.std),
        "meta": ckpt.meta,
        "state_dict": state,
    }
    torch.save(blob, path)
    sidecar = {k: v for k, v in blob.items() if k != "state_dict"}
    sidecar["sha256"] = sha256_file(path)
    sidecar["parameter_count"] = int(sum(v.numel() for v in state.values()))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists() and path.with_suffix(".pt").exists():
        path = path.with_suffix(".pt")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    if blob.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    return Checkpoint(blob["model_id"], blob["arch"], blob["state_dict"],
                      tuple(blob["mean"]), tuple(blob["std"]), blob.get("meta", {}))


def channel_stats(x: np.ndarray):
    """Per-channel mean/std of an N x H x W x C pixel array, in [0, 1] units."""
    flat = x.reshape(-1, x.shape[-1]) / 255.0
    std = flat.std(0)
    return tuple(float(v) for v in flat.mean(0)), tuple(float(max(v, 1e-3)) for v in std)


def _batches(n, bs, gen):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, bs):
        yield perm[i : i + bs]


def _shift(xb, max_shift, gen):
    # one random translation per batch, reflect-padded at the borders
    pad = F.pad(xb.permute(0, 3, 1, 2), (max_shift,) * 4, mode="reflect")
    dy, dx = torch.randint(0, 2 * max_shift + 1, (2,), generator=gen).tolist()
    h, w = xb.shape[1], xb.shape[2]
    return pad[:, :, dy : dy + h, dx : dx + w].permute(0, 2, 3, 1)


def _fit(handle, params, x, y, epochs, seed, lr, batch_size, noise_aug, train_mode_net=True, shift_aug=0):
    net = handle.net
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(params, lr=lr)
    steps = max(1, epochs * math.ceil(len(x) / batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, lr, total_steps=steps)
    xt = torch.as_tensor(x)
    yt = torch.as_tensor(y, dtype=torch.long)
    for p in params:
        p.requires_grad_(True)
    for epoch in range(epochs):
        net.train(train_mode_net)
        total = 0.0
        for idx in _batches(len(xt), batch_size, gen):
            xb = xt[idx]
            if shift_aug > 0:
                xb = _shift(xb, shift_aug, gen)
            if noise_aug > 0:
                amp = torch.rand(len(xb), 1, 1, 1, generator=gen, dtype=xb.dtype) * noise_aug
                xb = (xb + (torch.rand(xb.shape, generator=gen, dtype=xb.dtype) * 2 - 1) * amp).clamp(0, 255)
            logits, _ = handle.forward(xb)
            loss = F.cross_entropy(logits, yt[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
        log.debug("%s epoch %d loss %.4f", handle.model_id, epoch, total / len(xt))
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)


def accuracy(handle: ClassifierHandle, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(handle.predict(x) == np.asarray(y)) * 100.0)


def train_reference_model(arch: dict, train_split, epochs: int, seed: int, test_split=None,
                          model_id=None, lr=3e-3, batch_size=64, noise_aug=0.0, shift_aug=3) -> Checkpoint:
    """Train a network from scratch and return a checkpoint.

    Held-out accuracy (``meta['final_accuracy']``, percent) is measured on
    ``test_split`` when given, else on the training data. ``noise_aug`` adds
    uniform pixel noise of a random per-sample amplitude up to that value,
    so the models are not broken by unstructured noise alone. ``shift_aug``
    translates each batch by up to that many pixels.
    """
    if train_split.class_count < 2:
        raise ContractError("training needs at least two classes")
    if arch["num_classes"] != train_split.class_count:
        raise ContractError("architecture class count differs from the dataset's")
    torch.manual_seed(seed)
    x, y = train_split.arrays(np.float32)
    mean, std = channel_stats(x)
    model_id = model_id or f"{arch['family']}-{train_split.dataset_id}-s{seed}"
    handle = ClassifierHandle.from_arch(model_id, arch, mean=mean, std=std)
    if epochs > 0:
        _fit(handle, list(handle.net.parameters()), x, y, epochs, seed, lr, batch_size, noise_aug,
             shift_aug=shift_aug)
    eval_split = test_split if test_split is not None else train_split
    ex, ey = eval_split.arrays(np.float32)
    acc = accuracy(handle, ex, ey)
    meta = {
        "dataset_id": train_split.dataset_id,
        "epochs": epochs,
        "seed": seed,
        "final_accuracy": acc,
        "accuracy_split": eval_split.split_tag,
        "train_size": len(train_split),
        "noise_aug": noise_aug,
        "shift_aug": shift_aug,
        "lr": lr,
        "batch_size": batch_size,
    }
    log.info("trained %s: %.2f%% on %s", model_id, acc, eval_split.split_tag)
    return Checkpoint(model_id, dict(arch), {k: v.clone() for k, v in handle.net.state_dict().items()},
                      mean, std, meta)


def retrain_head(ckpt: Checkpoint, train_split, epochs: int, seed: int, test_split=None,
                 lr=1e-2, batch_size=64, noise_aug=0.0) -> Checkpoint:
    """Replace only the final linear layer to fit a new label set; the backbone is frozen."""
    torch.manual_seed(seed)
    handle = ckpt.handle()
    head = handle.net.replace_head(train_split.class_count)
    x, y = train_split.arrays(np.float32)
    # backbone statistics stay frozen: train() is never enabled on the backbone
    _fit(handle, list(head.parameters()), x, y, epochs, seed, lr, batch_size, noise_aug, train_mode_net=False)
    arch = dict(ckpt.arch, num_classes=train_split.class_count)
    eval_split = test_split if test_split is not None else train_split
    ex, ey = eval_split.arrays(np.float32)
    meta = dict(ckpt.meta, dataset_id=train_split.dataset_id, head_epochs=epochs, head_seed=seed,
                final_accuracy=accuracy(handle, ex, ey), accuracy_split=eval_split.split_tag,
                backbone_of=ckpt.model_id)
    model_id = f"{ckpt.model_id}-head{train_split.class_count}"
    return Checkpoint(model_id, arch, {k: v.clone() for k, v in handle.net.state_dict().items()},
                      ckpt.mean, ckpt.std, meta)
