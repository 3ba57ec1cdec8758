"""Evaluation protocol: filtering, transfer matrices and parameter sweeps.

Every accuracy here is measured on the 8-bit quantized protected images, i.e.
exactly what a saved PNG would give, and the denominator is always the
filtered split. Multi-seed results are plain means over attack seeds.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from .datasets import DatasetSplit, subset_classes
from .engine import AttackConfig, ProtectionResult, protect_batch
from .errors import ContractError, NumericError, ProtocolError
from .imaging import ssim
from .models.adapter import ClassifierHandle

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)


@dataclass
class EvalMatrix:
    protected_models: list
    target_models: list
    accuracy: np.ndarray  # rows = protected, columns = targets, percent
    n_images: int
    seeds: tuple = (0,)
    per_seed: list = field(default_factory=list)
    clean: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)  # protected model id -> AttackConfig used

    def __post_init__(self):
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if self.accuracy.shape != (len(self.protected_models), len(self.target_models)):
            raise ContractError("accuracy grid does not match the model lists")
        if self.accuracy.size and (np.nanmin(self.accuracy) < 0 or np.nanmax(self.accuracy) > 100):
            raise ContractError("accuracies must lie in [0, 100]")

    def cell(self, protected, target) -> float:
        return float(self.accuracy[self.protected_models.index(protected), self.target_models.index(target)])

    def diagonal(self) -> dict:
        return {p: self.cell(p, p) for p in self.protected_models if p in self.target_models}

    def off_diagonal(self) -> list:
        return [float(self.accuracy[i, j]) for i, p in enumerate(self.protected_models)
                for j, t in enumerate(self.target_models) if p != t]

    def mean_off_diagonal(self) -> float:
        vals = self.off_diagonal()
        return float(np.mean(vals)) if vals else float("nan")

    def mean_drop(self) -> float:
        """Mean clean-minus-protected accuracy over off-diagonal cells."""
        drops = [self.clean.get(t, 100.0) - float(self.accuracy[i, j])
                 for i, p in enumerate(self.protected_models)
                 for j, t in enumerate(self.target_models) if p != t]
        return float(np.mean(drops)) if drops else float("nan")

    def to_dict(self) -> dict:
        return {
            "protected_models": list(self.protected_models),
            "target_models": list(self.target_models),
            "accuracy": self.accuracy.tolist(),
            "n_images": self.n_images,
            "seeds": list(self.seeds),
            "per_seed": [np.asarray(m).tolist() for m in self.per_seed],
            "clean": dict(self.clean),
            "configs": {k: v.to_dict() for k, v in self.configs.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "EvalMatrix":
        return cls(d["protected_models"], d["target_models"], np.array(d["accuracy"]), d["n_images"],
                   tuple(d.get("seeds", (0,))), [np.array(m) for m in d.get("per_seed", [])],
                   d.get("clean", {}), {k: AttackConfig.from_dict(v) for k, v in d.get("configs", {}).items()})


@dataclass
class SweepResult:
    parameter: str
    values: list
    matrices: list  # one EvalMatrix per value
    ssim: list | None = None  # mean SSIM per value (epsilon sweeps)

    def __post_init__(self):
        if len(self.values) != len(self.matrices):
            raise ContractError("one matrix per swept value is required")
        keys = [_order_key(v) for v in self.values]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise ContractError(f"swept values must be strictly increasing: {self.values}")

    def mean_target_accuracy(self) -> list:
        return [m.mean_off_diagonal() for m in self.matrices]

    def to_dict(self) -> dict:
        return {"parameter": self.parameter, "values": [list(v) if isinstance(v, tuple) else v for v in self.values],
                "matrices": [m.to_dict() for m in self.matrices], "ssim": self.ssim,
                "mean_target_accuracy": self.mean_target_accuracy()}


def _order_key(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v,)


@dataclass
class ComplexityReport:
    class_counts: list
    matrices: list
    head_accuracy: list  # per class count: {model_id: clean held-out accuracy after head retraining}

    def drops(self) -> list:
        return [m.mean_drop() for m in self.matrices]

    def to_dict(self) -> dict:
        return {"class_counts": self.class_counts, "drops": self.drops(), "head_accuracy": self.head_accuracy,
                "matrices": [m.to_dict() for m in self.matrices]}


# -- protocol -----------------------------------------------------------------

def _predict_all(model: ClassifierHandle, split: DatasetSplit, batch_size=256) -> np.ndarray:
    x, _ = split.arrays()
    if len(split) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([model.predict(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def filter_correctly_classified(models: Sequence[ClassifierHandle], split: DatasetSplit) -> DatasetSplit:
    """Keep the items every model classifies correctly, in their original order."""
    for m in models:
        if m.num_classes != split.class_count:
            raise ContractError(f"{m.model_id} has {m.num_classes} classes, split has {split.class_count}")
    keep = np.ones(len(split), dtype=bool)
    labels = split.labels
    for m in models:
        keep &= _predict_all(m, split) == labels
    if not keep.any():
        raise ProtocolError(f"no image of {split.dataset_id} is classified correctly by all "
                            f"{len(models)} models")
    out = split.subset(np.flatnonzero(keep))
    log.info("filtered %s: %d of %d images kept", split.dataset_id, len(out), len(split))
    return out


def clean_accuracy(models: Sequence[ClassifierHandle], split: DatasetSplit) -> dict:
    labels = split.labels
    return {m.model_id: float(np.mean(_predict_all(m, split) == labels) * 100.0) for m in models}


def generate(model: ClassifierHandle, split: DatasetSplit, cfg: AttackConfig, workers=1, batch_size=128,
             snapshots=None):
    """Protected images for a whole split, optionally spread over a thread pool.

    Results are independent of ``workers``: each image is seeded by its own id.
    """
    items = list(split.items)
    try:
        if workers <= 1 or len(items) <= batch_size:
            return protect_batch(model, items, cfg, batch_size=batch_size, snapshots=snapshots)
        chunks = [items[i : i + batch_size] for i in range(0, len(items), batch_size)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: protect_batch(model, c, cfg, batch_size=batch_size,
                                                          snapshots=snapshots), chunks))
    except (ContractError, NumericError) as exc:
        raise type(exc)(f"while protecting with {model.model_id}: {exc}") from exc
    if snapshots is None:
        return [r for p in parts for r in p]
    return {n: [r for p in parts for r in p[n]] for n in parts[0]}


def _accuracy_on(target: ClassifierHandle, images: np.ndarray, labels: np.ndarray, batch_size=256) -> float:
    pred = np.concatenate([target.predict(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])
    return float(np.mean(pred == labels) * 100.0)


def _stack_quantized(results: Sequence[ProtectionResult]) -> np.ndarray:
    return np.stack([r.quantized().pixels for r in results])


def _tap_for(model, taps):
    if taps is None:
        return None
    if isinstance(taps, dict):
        return taps.get(model.model_id)
    return taps


def transfer_row(protected: ClassifierHandle, targets: Sequence[ClassifierHandle], split: DatasetSplit,
                 cfg: AttackConfig, seeds=DEFAULT_SEEDS, workers=1, sink: Callable | None = None) -> EvalMatrix:
    """One matrix row: protect with ``protected``, evaluate every target on the quantized images.

    ``targets`` should include ``protected`` itself for the diagonal entry.
    ``sink(protected_id, seed, results)`` receives the raw results (for persistence).
    """
    labels = split.labels
    ids = [t.model_id for t in targets]
    grids = []
    for s in seeds:
        c = cfg.replace(seed=s)
        results = generate(protected, split, c, workers=workers)
        if sink is not None:
            sink(protected.model_id, s, results)
        imgs = _stack_quantized(results)
        grids.append(np.array([[_accuracy_on(t, imgs, labels) for t in targets]]))
    acc = np.mean(grids, axis=0)
    return EvalMatrix([protected.model_id], ids, acc, len(split), tuple(seeds), grids,
                      clean_accuracy(targets, split), {protected.model_id: cfg})


def _stack_rows(rows: Sequence[EvalMatrix]) -> EvalMatrix:
    first = rows[0]
    per_seed = [np.vstack([r.per_seed[k] for r in rows]) for k in range(len(first.seeds))]
    configs = {}
    for r in rows:
        configs.update(r.configs)
    return EvalMatrix([r.protected_models[0] for r in rows], first.target_models,
                      np.vstack([r.accuracy for r in rows]), first.n_images, first.seeds, per_seed,
                      first.clean, configs)


def transfer_matrix(models: Sequence[ClassifierHandle], split: DatasetSplit, cfg: AttackConfig,
                    seeds=DEFAULT_SEEDS, taps=None, workers=1, sink=None) -> EvalMatrix:
    """Every model in turn is the authorized one; all models are evaluated on its protected images.

    ``taps`` overrides ``cfg.tap``: either one tap for all models or a
    ``{model_id: tap}`` mapping (missing ids use ``cfg.tap``).
    """
    if not models:
        raise ContractError("at least one model is required")
    if len(split) == 0:
        raise ProtocolError("empty split")
    rows = []
    for p in models:
        tap = _tap_for(p, taps)
        c = cfg if tap is None else cfg.replace(tap=tap)
        rows.append(transfer_row(p, models, split, c, seeds, workers, sink))
        log.info("row %s: %s", p.model_id, np.round(rows[-1].accuracy[0], 1).tolist())
    return _stack_rows(rows)


# -- sweeps -------------------------------------------------------------------

def _targets_with(protected, targets):
    return [protected] + [t for t in targets if t.model_id != protected.model_id]


def sweep_layer(protected: ClassifierHandle, targets: Sequence[ClassifierHandle], split: DatasetSplit,
                base_cfg: AttackConfig, taps=None, seeds=DEFAULT_SEEDS, workers=1) -> SweepResult:
    """One transfer row per tap of the protected model (all taps unless ``taps`` is given)."""
    cols = _targets_with(protected, targets)
    idx = [protected.resolve_tap(t).index for t in taps] if taps is not None else [t.index for t in protected.taps]
    idx = sorted(set(idx))
    rows = [transfer_row(protected, cols, split, base_cfg.replace(tap=i), seeds, workers) for i in idx]
    return SweepResult("tap", idx, rows)


def select_taps(models: Sequence[ClassifierHandle], split: DatasetSplit, base_cfg: AttackConfig,
                seeds=(0,), workers=1) -> tuple[dict, dict]:
    """Per model, the tap whose protected images give the lowest mean accuracy on the other models.

    Use a split disjoint from the one later evaluated. Returns ``({model_id: tap index},
    {model_id: SweepResult})``; ties go to the shallower tap.
    """
    chosen, sweeps = {}, {}
    for m in models:
        sw = sweep_layer(m, models, split, base_cfg, seeds=seeds, workers=workers)
        acc = sw.mean_target_accuracy()
        chosen[m.model_id] = sw.values[int(np.argmin(acc))]
        sweeps[m.model_id] = sw
    return chosen, sweeps


def sweep_step_and_iters(protected: ClassifierHandle, targets: Sequence[ClassifierHandle], split: DatasetSplit,
                         alphas: Sequence[float], ns: Sequence[int], base_cfg: AttackConfig = AttackConfig(),
                         seeds=DEFAULT_SEEDS, workers=1) -> SweepResult:
    """Grid over (alpha, N). For each alpha one trajectory of max(N) steps is snapshotted at every N."""
    cols = _targets_with(protected, targets)
    labels = split.labels
    ns = sorted(set(int(n) for n in ns))
    values, mats = [], []
    for a in sorted(set(float(a) for a in alphas)):
        cfg = base_cfg.replace(alpha=a, n_iters=max(ns))
        grids = {n: [] for n in ns}
        for s in seeds:
            snaps = generate(protected, split, cfg.replace(seed=s), workers=workers, snapshots=ns)
            for n in ns:
                imgs = _stack_quantized(snaps[n])
                grids[n].append(np.array([[_accuracy_on(t, imgs, labels) for t in cols]]))
        clean = clean_accuracy(cols, split)
        for n in ns:
            values.append((a, n))
            mats.append(EvalMatrix([protected.model_id], [t.model_id for t in cols], np.mean(grids[n], axis=0),
                                   len(split), tuple(seeds), grids[n], clean,
                                   {protected.model_id: cfg.replace(n_iters=n)}))
    return SweepResult("alpha,n_iters", values, mats)


def iteration_curve(sweep: SweepResult, alpha: float, target_id: str) -> tuple[list, list]:
    """(N values, target accuracy) for one alpha of a step/iteration sweep."""
    xs, ys = [], []
    for (a, n), m in zip(sweep.values, sweep.matrices):
        if a == alpha:
            xs.append(n)
            ys.append(m.cell(m.protected_models[0], target_id))
    return xs, ys


def sweep_epsilon_quality(protected: ClassifierHandle, targets: Sequence[ClassifierHandle], split: DatasetSplit,
                          epsilons: Sequence[float], base_cfg: AttackConfig = AttackConfig(),
                          seeds=DEFAULT_SEEDS, workers=1) -> SweepResult:
    """Per budget: one transfer row plus the mean SSIM between originals and protected images.

    The step size is capped at 2*eps so that small budgets stay valid.
    """
    cols = _targets_with(protected, targets)
    eps_list = sorted(set(float(e) for e in epsilons))
    mats, quality = [], []
    for eps in eps_list:
        alpha = base_cfg.alpha if eps == 0 else min(base_cfg.alpha, 2 * eps)
        cfg = base_cfg.replace(epsilon=eps, alpha=alpha)
        scores = []

        def sink(_pid, _seed, results):
            scores.extend(ssim(r.x_original, r.quantized()) for r in results)

        mats.append(transfer_row(protected, cols, split, cfg, seeds, workers, sink))
        quality.append(float(np.mean(scores)))
    return SweepResult("epsilon", eps_list, mats, quality)


def task_complexity_experiment(backbones, train: DatasetSplit, test: DatasetSplit, class_counts: Sequence[int],
                               cfg: AttackConfig, seeds=DEFAULT_SEEDS, taps=None, head_epochs=15, seed=0,
                               max_images=None, workers=1) -> ComplexityReport:
    """Retrain only the final layer of each backbone on the first k classes, then run a transfer matrix.

    ``backbones`` are checkpoints trained on the full label set.
    """
    from .models.training import retrain_head

    counts = sorted(set(int(k) for k in class_counts))
    if counts and (counts[0] < 2 or counts[-1] > train.class_count):
        raise ContractError(f"class counts must lie in [2, {train.class_count}]")
    mats, head_acc = [], []
    for k in counts:
        classes = list(range(k))
        tr, te = subset_classes(train, classes), subset_classes(test, classes)
        heads = [retrain_head(b, tr, head_epochs, seed, te) for b in backbones]
        handles = [h.handle() for h in heads]
        # same model ids across class counts so taps and reports line up
        for h, b in zip(handles, backbones):
            h.model_id = b.model_id
        head_acc.append({b.model_id: h.accuracy for b, h in zip(backbones, heads)})
        split = filter_correctly_classified(handles, te)
        if max_images:
            split = split.subsample(max_images, seed)
        mats.append(transfer_matrix(handles, split, cfg, seeds, taps, workers))
        log.info("%d classes: mean drop %.1f", k, mats[-1].mean_drop())
    return ComplexityReport(counts, mats, head_acc)


# -- reporting ----------------------------------------------------------------

def matrix_csv(m: EvalMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["protected\\target"] + list(m.target_models))
    for p, row in zip(m.protected_models, m.accuracy):
        w.writerow([p] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_matrix_csv(text: str) -> tuple[list, list, np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    targets = rows[0][1:]
    protected = [r[0] for r in rows[1:]]
    return protected, targets, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def provenance(extra=None) -> dict:
    """Version stamp for reports: package, torch, numpy and python versions."""
    d = {"featguard": __version__, "torch": torch.__version__, "numpy": np.__version__,
         "python": platform.python_version()}
    d.update(extra or {})
    return d


def export_report(result, directory, name="matrix", extra=None) -> list[Path]:
    """Write CSV table(s) and a JSON document with the full result and provenance."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(result, EvalMatrix):
        mats = {name: result}
    elif isinstance(result, SweepResult):
        mats = {f"{name}_{result.parameter.replace(',', '_')}_{_value_tag(v)}": m
                for v, m in zip(result.values, result.matrices)}
    elif isinstance(result, ComplexityReport):
        mats = {f"{name}_classes{k}": m for k, m in zip(result.class_counts, result.matrices)}
    else:
        raise ContractError(f"cannot export {type(result).__name__}")
    for stem, m in mats.items():
        p = directory / f"{stem}.csv"
        p.write_text(matrix_csv(m))
        written.append(p)
    doc = {"kind": type(result).__name__, "result": result.to_dict(), "provenance": provenance(extra)}
    p = directory / f"{name}.json"
    p.write_text(json.dumps(doc, indent=1, sort_keys=True))
    written.append(p)
    return written


def _value_tag(v) -> str:
    if isinstance(v, tuple):
        return "-".join(_value_tag(x) for x in v)
    return f"{v:g}" if isinstance(v, float) else str(v)
