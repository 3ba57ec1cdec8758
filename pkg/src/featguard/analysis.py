"""Inspection tools: Grad-CAM maps, feature panels and max-softmax histograms.

All plotting uses the non-interactive Agg backend; every figure has a JSON
sidecar with the numbers behind it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from PIL import Image  # noqa: E402

from .errors import ContractError  # noqa: E402
from .imaging import ImageTensor  # noqa: E402
from .models.adapter import ClassifierHandle, TapId  # noqa: E402


@dataclass
class HeatMap:
    values: np.ndarray  # H x W in [0, 1]
    model_id: str
    class_idx: int
    tap: TapId

    def l1(self, other: "HeatMap") -> float:
        """Mean absolute difference between two maps of the same size."""
        if self.values.shape != other.values.shape:
            raise ContractError("heat maps differ in size")
        return float(np.abs(self.values - other.values).mean())


def normalize_map(cam: np.ndarray) -> np.ndarray:
    """Scale a non-negative map so its maximum is 1; an all-zero map stays zero.

    Rectified maps have floor 0, so dividing by the maximum is the min-max
    normalization with the minimum pinned at 0. Idempotent.
    """
    cam = np.maximum(np.asarray(cam, dtype=np.float64), 0.0)
    top = cam.max() if cam.size else 0.0
    return cam / top if top > 0 else np.zeros_like(cam)


def grad_cam(model: ClassifierHandle, x: ImageTensor, class_idx: int, tap=None) -> HeatMap:
    """Gradient-weighted class activation map at ``tap`` (default: the last tap).

    Channel weights are the spatially averaged gradients of the class logit;
    the weighted activation sum is rectified, bilinearly resized to the input
    and normalized.
    """
    t = model.taps[-1] if tap is None else model.resolve_tap(tap)
    if not 0 <= int(class_idx) < model.num_classes:
        raise ContractError(f"class {class_idx} outside [0, {model.num_classes})")
    with torch.enable_grad():
        logits, feats = model.forward(torch.tensor(x.pixels).requires_grad_(True), taps=[t.index])
        act = feats[t.index]
        if act.dim() != 4:
            raise ContractError(f"tap {t.name} has no spatial layout")
        (g,) = torch.autograd.grad(logits[0, int(class_idx)], act)
    weights = g.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(1, keepdim=True)).detach().to(torch.float64)
    if cam.shape[-2:] != (x.height, x.width):
        cam = F.interpolate(cam, size=(x.height, x.width), mode="bilinear", align_corners=False)
    return HeatMap(normalize_map(cam[0, 0].numpy()), model.model_id, int(class_idx), t)


def grad_cam_pair(model: ClassifierHandle, x: ImageTensor, x_star: ImageTensor, label: int, tap=None) -> dict:
    """Maps for the original and protected image.

    For the protected image both targets are produced: the original label and
    the model's new prediction.
    """
    pred = int(model.predict(x_star.pixels[None])[0])
    return {
        "original": grad_cam(model, x, label, tap),
        "protected_label": grad_cam(model, x_star, label, tap),
        "protected_prediction": grad_cam(model, x_star, pred, tap),
        "prediction": pred,
    }


def gradcam_shift(models: Sequence[ClassifierHandle], originals: Sequence[ImageTensor],
                  protected: Sequence[ImageTensor], labels: Sequence[int], tap=None) -> dict:
    """Mean L1 distance between each model's maps for original and protected images (label target)."""
    if not len(originals) == len(protected) == len(labels):
        raise ContractError("originals, protected images and labels differ in length")
    out = {}
    for m in models:
        d = [grad_cam(m, a, y, tap).l1(grad_cam(m, b, y, tap)) for a, b, y in zip(originals, protected, labels)]
        out[m.model_id] = float(np.mean(d)) if d else float("nan")
    return out


def save_heatmap_overlay(hm: HeatMap, image: ImageTensor, path, alpha=0.45) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = image.pixels / 255.0
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)
    colour = plt.get_cmap("jet")(hm.values)[..., :3]
    blend = (1 - alpha) * base + alpha * colour
    Image.fromarray(np.uint8(np.rint(np.clip(blend, 0, 1) * 255))).save(path)
    return path


# -- feature panels ------------------------------------------------------------

def channel_correlations(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlation per channel between two C x h x w maps (nan for constant channels)."""
    a = a.reshape(a.shape[0], -1).astype(np.float64)
    b = b.reshape(b.shape[0], -1).astype(np.float64)
    da = a - a.mean(1, keepdims=True)
    db = b - b.mean(1, keepdims=True)
    denom = np.sqrt((da**2).sum(1) * (db**2).sum(1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, (da * db).sum(1) / np.where(denom > 0, denom, 1.0), np.nan)


def _tile(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    return (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)


def feature_panel(model: ClassifierHandle, x: ImageTensor, x_star: ImageTensor, tap=None, path=None,
                  max_channels=16, scale=4) -> dict:
    """Per-channel activations for original (top row) and protected (bottom row) input.

    Every tile is min-max normalized on its own. Returns the per-channel
    Pearson correlations, their mean and the written file (if ``path``).
    """
    from .models.adapter import features

    t = model.taps[-1] if tap is None else model.resolve_tap(tap)
    fa, fb = features(model, x, t), features(model, x_star, t)
    corr = channel_correlations(fa, fb)
    out = {"tap": t.name, "correlations": corr.tolist(), "mean_correlation": float(np.nanmean(corr))
           if np.isfinite(corr).any() else float("nan")}
    if path is not None:
        k = min(max_channels, fa.shape[0])
        h, w = fa.shape[1:]
        gap = 1
        grid = np.ones((2 * h + gap, k * (w + gap) - gap))
        for c in range(k):
            x0 = c * (w + gap)
            grid[:h, x0 : x0 + w] = _tile(fa[c])
            grid[h + gap :, x0 : x0 + w] = _tile(fb[c])
        img = Image.fromarray(np.uint8(np.rint(grid * 255)), mode="L")
        img = img.resize((grid.shape[1] * scale, grid.shape[0] * scale), Image.NEAREST)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path)
        path.with_suffix(".json").write_text(json.dumps(out, indent=1))
        out["path"] = str(path)
    return out


# -- softmax histograms ------------------------------------------------------------

def max_softmax(model: ClassifierHandle, images: np.ndarray, batch_size=256) -> np.ndarray:
    parts = []
    for i in range(0, len(images), batch_size):
        p = model.softmax(images[i : i + batch_size])
        parts.append(np.asarray(p).max(1))
    return np.concatenate(parts) if parts else np.zeros(0)


def softmax_histogram(models: Sequence[ClassifierHandle], originals: np.ndarray, protected: np.ndarray,
                      path=None, bins=20) -> dict:
    """Distribution of the largest softmax value per model on original and protected images."""
    originals, protected = np.asarray(originals), np.asarray(protected)
    edges = np.linspace(0.0, 1.0, bins + 1)
    stats = {"bin_edges": edges.tolist(), "models": {}}
    for m in models:
        entry = {}
        for name, imgs in (("original", originals), ("protected", protected)):
            v = max_softmax(m, imgs)
            counts, _ = np.histogram(v, bins=edges)
            entry[name] = {"mean": float(v.mean()), "median": float(np.median(v)), "counts": counts.tolist(),
                           "n": int(len(v))}
        stats["models"][m.model_id] = entry
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig, axes = plt.subplots(1, len(models), figsize=(3.2 * len(models), 2.8), squeeze=False)
        centers = (edges[:-1] + edges[1:]) / 2
        width = edges[1] - edges[0]
        for ax, m in zip(axes[0], models):
            e = stats["models"][m.model_id]
            ax.bar(centers, e["original"]["counts"], width=width, alpha=0.55, label="original")
            ax.bar(centers, e["protected"]["counts"], width=width, alpha=0.55, label="protected")
            ax.set_title(m.model_id)
            ax.set_xlabel("max softmax")
        axes[0][0].set_ylabel("images")
        axes[0][0].legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        path.with_suffix(".json").write_text(json.dumps(stats, indent=1))
        stats["path"] = str(path)
    return stats
