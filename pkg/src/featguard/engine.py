"""Feature-map distortion: the protected-image generator.

The objective for one image is

    J(x*) = MSE(feat(x), feat(x*)) - lam * CE(logits(x*), y)

with the feature map read at one internal tap of the authorized model. J is
ascended with fixed-size sign steps from a uniform random start inside the
l-inf box around x, and every iterate is clipped back into
[max(x - eps, 0), min(x + eps, 255)].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, NumericError
from .imaging import ImageTensor, LabeledImage, linf_distance, save_image_lossless
from .models.adapter import ClassifierHandle, TapId

INIT_MODES = ("random", "original")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16.0
    alpha: float = 4.0
    n_iters: int = 100
    lam: float = 1.0
    tap: object = None  # TapId, index, name, or None for the model default
    seed: int = 0
    init: str = "random"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 255.0:
            raise ContractError(f"epsilon must lie in [0, 255], got {self.epsilon}")
        if not self.alpha > 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")
        if self.epsilon > 0 and self.alpha > 2 * self.epsilon:
            raise ContractError(f"alpha={self.alpha} exceeds 2*epsilon={2 * self.epsilon}")
        if int(self.n_iters) != self.n_iters or self.n_iters < 0:
            raise ContractError(f"n_iters must be a non-negative integer, got {self.n_iters}")
        if self.lam < 0:
            raise ContractError(f"lambda must be non-negative, got {self.lam}")
        if not -(2**63) <= int(self.seed) < 2**64:
            raise ContractError("seed must fit in 64 bits")
        if self.init not in INIT_MODES:
            raise ContractError(f"init must be one of {INIT_MODES}")
        object.__setattr__(self, "n_iters", int(self.n_iters))
        object.__setattr__(self, "seed", int(self.seed))

    def replace(self, **changes) -> "AttackConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return AttackConfig(**d)

    def to_dict(self) -> dict:
        tap = self.tap
        if isinstance(tap, TapId):
            tap = {"name": tap.name, "index": tap.index}
        return {"epsilon": self.epsilon, "alpha": self.alpha, "n_iters": self.n_iters,
                "lambda": self.lam, "tap": tap, "seed": self.seed, "init": self.init}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        tap = d.get("tap")
        if isinstance(tap, dict):
            d["tap"] = TapId(tap["name"], tap["index"])
        return cls(**d)


@dataclass
class ProtectionResult:
    x_star: ImageTensor
    loss_trace: list  # (iteration, J, mse_term, ce_term), evaluated at the iterate entering that step
    config: AttackConfig
    authorized_prediction: int
    x_original: ImageTensor
    source_id: str = ""
    tap: TapId | None = None
    attack_seed: int = 0

    @property
    def linf(self) -> float:
        return linf_distance(self.x_star, self.x_original)

    def quantized(self) -> ImageTensor:
        return quantize_within_budget(self.x_star, self.x_original, self.config.epsilon)

    def to_record(self) -> dict:
        q = self.quantized()
        return {
            "source_id": self.source_id,
            "config": self.config.to_dict(),
            "tap": None if self.tap is None else {"name": self.tap.name, "index": self.tap.index},
            "attack_seed": self.attack_seed,
            "authorized_prediction": self.authorized_prediction,
            "linf": self.linf,
            "linf_quantized": linf_distance(q, self.x_original),
            "original_sha256": _pixel_hash(self.x_original),
            "protected_sha256": _pixel_hash(q),
            "trace": [list(t) for t in self.loss_trace],
        }

    def save(self, directory, stem=None) -> tuple[Path, Path]:
        """PNG plus JSON record under ``directory``; returns both paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or _safe_stem(self.source_id)
        png = directory / f"{stem}.png"
        save_image_lossless(self.quantized(), png)
        rec = directory / f"{stem}.json"
        rec.write_text(json.dumps(self.to_record(), indent=1))
        return png, rec


def _safe_stem(source_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in source_id) or "image"


def _pixel_hash(img: ImageTensor) -> str:
    return hashlib.sha256(np.ascontiguousarray(img.pixels).tobytes()).hexdigest()


def item_seed(seed: int, source_id: str) -> int:
    """Stable per-image attack seed from (run seed, image id)."""
    digest = hashlib.sha256(f"{int(seed)}:{source_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def quantize_within_budget(x_star: ImageTensor, x_orig: ImageTensor, epsilon: float) -> ImageTensor:
    """Round to 8-bit values that still satisfy the l-inf budget.

    Nearest-integer rounding, then pulled inward to the integer box
    [ceil(x - eps), floor(x + eps)] intersected with [0, 255].
    """
    lo = np.maximum(np.ceil(x_orig.pixels - epsilon - 1e-9), 0.0)
    hi = np.minimum(np.floor(x_orig.pixels + epsilon + 1e-9), 255.0)
    if np.any(lo > hi):
        raise ContractError("no 8-bit image satisfies the budget (non-integer original with epsilon < 0.5)")
    q = np.clip(np.rint(x_star.pixels), lo, hi)
    return ImageTensor(q)


def _as_array(x) -> np.ndarray:
    return x.pixels if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)


def random_init(x, epsilon: float, seed: int) -> ImageTensor:
    """Each pixel drawn uniformly from [x - eps, x + eps], then clipped to [0, 255]."""
    px = _as_array(x)
    if epsilon == 0:
        return ImageTensor(px)
    rng = np.random.default_rng(int(seed) % 2**64)
    noise = rng.uniform(-epsilon, epsilon, size=px.shape)
    return ImageTensor(np.clip(px + noise, 0.0, 255.0))


def project(x_cur, x_orig, epsilon: float) -> ImageTensor:
    """Clamp into [max(x_orig - eps, 0), min(x_orig + eps, 255)], element-wise."""
    cur, orig = _as_array(x_cur), _as_array(x_orig)
    if cur.shape != orig.shape:
        raise ContractError(f"shape mismatch: {cur.shape} vs {orig.shape}")
    out = np.minimum(np.minimum(cur, orig + epsilon), 255.0)
    out = np.maximum(np.maximum(out, orig - epsilon), 0.0)
    return ImageTensor(out)


def _project_t(x, x0, eps):
    x = torch.minimum(torch.minimum(x, x0 + eps), torch.full_like(x, 255.0))
    return torch.maximum(torch.maximum(x, x0 - eps), torch.zeros_like(x))


def _objective(model, x_cur, f0, y, tap_idx, lam):
    """Per-item (J, mse, ce) tensors for a batch of iterates."""
    logits, feats = model.forward(x_cur, taps=[tap_idx])
    diff = feats[tap_idx] - f0
    mse = diff.pow(2).flatten(1).mean(1)
    ce = F.cross_entropy(logits, y, reduction="none")
    return mse - lam * ce, mse, ce, logits


def j_loss(model: ClassifierHandle, x_orig, x_cur, y_gt: int, tap, lam: float):
    """(J, mse_term, ce_term) for one image pair."""
    t = model.resolve_tap(tap)
    if not 0 <= int(y_gt) < model.num_classes:
        raise ContractError(f"label {y_gt} outside [0, {model.num_classes})")
    x0 = torch.tensor(_as_array(x_orig))
    x1 = torch.tensor(_as_array(x_cur))
    if x0.shape != x1.shape:
        raise ContractError("x_orig and x_cur differ in shape")
    with torch.no_grad():
        _, f = model.forward(x0, taps=[t.index], stop_early=True)
        j, mse, ce, _ = _objective(model, x1, f[t.index], torch.tensor([int(y_gt)]), t.index, lam)
    vals = (float(j[0]), float(mse[0]), float(ce[0]))
    if not all(np.isfinite(vals)):
        raise NumericError("non-finite activations in objective")
    return vals


def objective_fn(model: ClassifierHandle, x_orig, y_gt: int, tap, lam: float):
    """J as a differentiable function of one H x W x C pixel tensor (for gradient checks)."""
    t = model.resolve_tap(tap)
    with torch.no_grad():
        _, f = model.forward(torch.tensor(_as_array(x_orig)), taps=[t.index], stop_early=True)
    f0 = f[t.index]
    y = torch.tensor([int(y_gt)])

    def fn(px):
        return _objective(model, px, f0, y, t.index, lam)[0][0]

    return fn


def protect_batch(model: ClassifierHandle, items: Sequence[LabeledImage], cfg: AttackConfig,
                  batch_size: int = 128, require_correct: bool = True, snapshots=None):
    """Run the generator on many images; each image is seeded from its own source_id.

    With ``snapshots`` (iteration counts <= cfg.n_iters) the return value is a
    dict mapping each count n to the results a run with ``n_iters=n`` would give,
    taken from the one trajectory.
    """
    tap = model.default_tap() if cfg.tap is None else model.resolve_tap(cfg.tap)
    stops = sorted(set(int(n) for n in snapshots)) if snapshots is not None else [cfg.n_iters]
    if stops and (stops[0] < 0 or stops[-1] > cfg.n_iters):
        raise ContractError(f"snapshots must lie in [0, {cfg.n_iters}]")
    out = {n: [] for n in stops}
    for start in range(0, len(items), batch_size):
        chunk = _protect_chunk(model, list(items[start : start + batch_size]), cfg, tap, require_correct, stops)
        for n in stops:
            out[n].extend(chunk[n])
    return out if snapshots is not None else out[cfg.n_iters]


def _protect_chunk(model, items, cfg, tap, require_correct, stops):
    for it in items:
        if not 0 <= it.label < model.num_classes:
            raise ContractError(f"{it.source_id}: label {it.label} outside [0, {model.num_classes})")
    x0_np = np.stack([it.image.pixels for it in items])
    y = torch.tensor([it.label for it in items], dtype=torch.long)
    x0 = torch.as_tensor(x0_np)
    with torch.no_grad():
        logits0, f = model.forward(x0, taps=[tap.index])
    f0 = f[tap.index].detach()
    if require_correct:
        pred0 = logits0.argmax(1)
        bad = [items[i].source_id for i in torch.nonzero(pred0 != y).flatten().tolist()]
        if bad:
            raise ContractError(f"authorized model disagrees with the label for {bad[:5]} "
                                f"({len(bad)} images); filter the split first")
    seeds = [item_seed(cfg.seed, it.source_id) for it in items]
    if cfg.init == "random":
        xs = torch.as_tensor(np.stack([random_init(it.image, cfg.epsilon, s).pixels
                                       for it, s in zip(items, seeds)]))
    else:
        xs = x0.clone()
    eps = float(cfg.epsilon)
    traces = [[] for _ in items]
    done = {}
    if 0 in stops:
        done[0] = _finish(model, xs, items, traces, cfg.replace(n_iters=0), tap, seeds)
    for i in range(1, max(stops, default=0) + 1):
        xr = xs.clone().requires_grad_(True)
        j, mse, ce, _ = _objective(model, xr, f0, y, tap.index, cfg.lam)
        (grad,) = torch.autograd.grad(j.sum(), xr)
        if not torch.isfinite(grad).all() or not torch.isfinite(j).all():
            raise NumericError(f"non-finite objective or gradient at iteration {i}", iteration=i)
        jv, mv, cv = j.detach().double().tolist(), mse.detach().double().tolist(), ce.detach().double().tolist()
        for k in range(len(items)):
            traces[k].append((i, jv[k], mv[k], cv[k]))
        xs = _project_t(xs + cfg.alpha * torch.sign(grad.to(torch.float64)), x0, eps)
        if i in stops:
            done[i] = _finish(model, xs, items, traces, cfg.replace(n_iters=i), tap, seeds)
    return done


def _finish(model, xs, items, traces, cfg, tap, seeds):
    with torch.no_grad():
        pred = model.forward(xs)[0].argmax(1).tolist()
    xs_np = xs.numpy().copy()
    return [ProtectionResult(ImageTensor(xs_np[k]), list(traces[k]), cfg, int(pred[k]), it.image,
                             it.source_id, tap, seeds[k])
            for k, it in enumerate(items)]


def protect_image(model: ClassifierHandle, item: LabeledImage, cfg: AttackConfig,
                  require_correct: bool = True) -> ProtectionResult:
    return protect_batch(model, [item], cfg, require_correct=require_correct)[0]


def write_manifest(results: Sequence[ProtectionResult], directory, stems=None) -> Path:
    """Persist every result (PNG + JSON) and a ``manifest.json`` index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, r in enumerate(results):
        stem = stems[k] if stems else None
        png, rec = r.save(directory, stem)
        entries.append({"source_id": r.source_id, "output": png.name, "record": rec.name,
                        "linf": r.linf, "linf_quantized": linf_distance(r.quantized(), r.x_original),
                        "authorized_prediction": r.authorized_prediction})
    path = directory / "manifest.json"
    path.write_text(json.dumps({"images": entries}, indent=1))
    return path
