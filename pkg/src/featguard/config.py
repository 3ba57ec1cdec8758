"""Run configuration: YAML file -> validated, defaults-filled dict.

Missing top-level blocks take their defaults. An ``attack`` block that is
present must spell out the four numeric attack fields; everything else is
optional. Errors name the dotted field path.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .engine import AttackConfig
from .errors import ConfigError, ContractError

OUTPUT_ENV = "FEATGUARD_RUNS"
REQUIRED_ATTACK = ("epsilon", "alpha", "n_iters", "lambda")
SWEEP_KINDS = ("layer", "step_iters", "epsilon", "complexity")

DEFAULTS = {
    "run": {"name": "run", "workers": 1, "out": None},
    "dataset": {"name": "glyphs", "path": None, "class_count": 50, "per_class": 80, "image_size": None,
                "test_fraction": 0.2, "seed": 0, "subsample": 200},
    "models": [
        {"id": "vgg", "family": "vgg", "checkpoint": None, "train": {"epochs": 20, "seed": 0}},
        {"id": "resnet", "family": "resnet", "checkpoint": None, "train": {"epochs": 20, "seed": 1}},
        {"id": "separable", "family": "separable", "checkpoint": None, "train": {"epochs": 20, "seed": 2}},
    ],
    "attack": {"epsilon": 16.0, "alpha": 4.0, "n_iters": 100, "lambda": 1.0, "tap": "auto",
               "seeds": [0, 1, 2], "init": "random"},
    "protect": {"model": None, "filter": True, "limit": None},
    "sweep": {"kind": "layer", "protected": None, "taps": None, "alphas": [4.0], "ns": [10, 100, 200],
              "epsilons": [4.0, 8.0, 16.0], "class_counts": [2, 10, 50], "head_epochs": 15},
    "analyze": {"authorized": None, "n_images": 100, "panels": 4, "histogram": True, "gradcam": True},
}

TRAIN_DEFAULTS = {"epochs": 20, "seed": 0, "lr": 3e-3, "batch_size": 64, "noise_aug": 0.0, "shift_aug": 3}


@dataclass
class RunConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def attack(self) -> AttackConfig:
        a = self.data["attack"]
        return AttackConfig(epsilon=a["epsilon"], alpha=a["alpha"], n_iters=a["n_iters"], lam=a["lambda"],
                            seed=a["seeds"][0], init=a["init"])

    def taps(self):
        """``None`` for per-model defaults, one tap for all, or ``{model_id: tap}``."""
        tap = self.data["attack"]["tap"]
        return None if tap in (None, "auto") else tap

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def output_root(self) -> Path:
        out = self.data["run"].get("out") or os.environ.get(OUTPUT_ENV) or "runs"
        return Path(out)


def _merge(base, override):
    if isinstance(base, dict) and isinstance(override, dict):
        out = dict(base)
        for k, v in override.items():
            out[k] = _merge(base.get(k), v) if k in base else v
        return out
    return copy.deepcopy(override)


def _num(d, key, path, lo=None, hi=None, integer=False):
    if key not in d or d[key] is None:
        raise ConfigError(f"{path}.{key}", "missing")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{path}.{key}", f"must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}.{key}", f"must be <= {hi}, got {v}")
    return int(v) if integer else float(v)


def _num_list(d, key, path, **kw):
    vals = d.get(key)
    if not isinstance(vals, list) or not vals:
        raise ConfigError(f"{path}.{key}", "expected a non-empty list")
    return [_num({"v": v}, "v", f"{path}.{key}[{i}]", **kw) for i, v in enumerate(vals)]


def validate(raw: dict, base_dir=None) -> RunConfig:
    """Fill defaults, check types, ranges and paths. Returns a RunConfig."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    if "attack" in raw:
        if not isinstance(raw["attack"], dict):
            raise ConfigError("attack", "expected a mapping")
        for k in REQUIRED_ATTACK:
            if k not in raw["attack"]:
                raise ConfigError(f"attack.{k}", "missing")
    data = _merge(DEFAULTS, raw)
    if "models" in raw:
        data["models"] = copy.deepcopy(raw["models"])
    base_dir = Path(base_dir) if base_dir else Path.cwd()

    run = data["run"]
    run["workers"] = _num(run, "workers", "run", lo=1, integer=True)

    ds = data["dataset"]
    if ds.get("path"):
        p = Path(ds["path"])
        p = p if p.is_absolute() else base_dir / p
        if not p.is_dir():
            raise ConfigError("dataset.path", f"{p} does not exist")
        ds["path"] = str(p)
    elif ds.get("name") not in ("glyphs", "digits"):
        raise ConfigError("dataset.name", f"unknown built-in dataset {ds.get('name')!r}")
    ds["class_count"] = _num(ds, "class_count", "dataset", lo=2, integer=True)
    ds["test_fraction"] = _num(ds, "test_fraction", "dataset", lo=0.0, hi=1.0)
    if ds.get("subsample") is not None:
        ds["subsample"] = _num(ds, "subsample", "dataset", lo=1, integer=True)

    models = data["models"]
    if not isinstance(models, list) or not models:
        raise ConfigError("models", "expected a non-empty list")
    seen = set()
    for i, m in enumerate(models):
        path = f"models[{i}]"
        if not isinstance(m, dict) or not m.get("id"):
            raise ConfigError(f"{path}.id", "missing")
        if m["id"] in seen:
            raise ConfigError(f"{path}.id", f"duplicate id {m['id']!r}")
        seen.add(m["id"])
        if m.get("checkpoint"):
            p = Path(m["checkpoint"])
            p = p if p.is_absolute() else base_dir / p
            if not p.exists():
                raise ConfigError(f"{path}.checkpoint", f"{p} does not exist")
            m["checkpoint"] = str(p)
        else:
            m["checkpoint"] = None
            if m.get("family") not in ("vgg", "vgg11", "resnet", "separable"):
                raise ConfigError(f"{path}.family", f"unknown family {m.get('family')!r}")
            m["train"] = _merge(TRAIN_DEFAULTS, m.get("train") or {})
            m["train"]["epochs"] = _num(m["train"], "epochs", f"{path}.train", lo=0, integer=True)

    a = data["attack"]
    _num(a, "epsilon", "attack", lo=0, hi=255)
    _num(a, "alpha", "attack")
    _num(a, "n_iters", "attack", lo=0, integer=True)
    _num(a, "lambda", "attack", lo=0)
    a["seeds"] = _num_list(a, "seeds", "attack", integer=True)
    tap = a.get("tap")
    if isinstance(tap, dict):
        for k in tap:
            if k not in seen:
                raise ConfigError(f"attack.tap.{k}", "no model with this id")
    try:
        AttackConfig(epsilon=a["epsilon"], alpha=a["alpha"], n_iters=a["n_iters"], lam=a["lambda"],
                     seed=a["seeds"][0], init=a.get("init", "random"))
    except ContractError as exc:
        raise ConfigError("attack", str(exc)) from exc

    for key, section in (("model", "protect"), ("protected", "sweep"), ("authorized", "analyze")):
        ref = data[section].get(key)
        if ref is not None and ref not in seen:
            raise ConfigError(f"{section}.{key}", f"no model with id {ref!r}")
    sw = data["sweep"]
    if sw.get("kind") not in SWEEP_KINDS:
        raise ConfigError("sweep.kind", f"expected one of {SWEEP_KINDS}")
    sw["alphas"] = _num_list(sw, "alphas", "sweep")
    sw["ns"] = _num_list(sw, "ns", "sweep", lo=0, integer=True)
    sw["epsilons"] = _num_list(sw, "epsilons", "sweep", lo=0, hi=255)
    sw["class_counts"] = _num_list(sw, "class_counts", "sweep", lo=2, integer=True)
    data["analyze"]["n_images"] = _num(data["analyze"], "n_images", "analyze", lo=1, integer=True)
    return RunConfig(data)


def load_config(path=None, overrides=None) -> RunConfig:
    """Read YAML (or a previous run's manifest.json) and apply flat CLI overrides."""
    raw, base = {}, None
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"{path}: not valid YAML ({exc})") from exc
        if isinstance(raw, dict) and "config" in raw and "run_id" in raw:
            raw = raw["config"]  # manifest of an earlier run
        base = path.parent
    raw = copy.deepcopy(raw or {})
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        cur = raw
        parts = dotted.split(".")
        for p in parts[:-1]:
            if parts[0] == "attack" and "attack" not in raw:
                raw["attack"] = {k: DEFAULTS["attack"][k] for k in REQUIRED_ATTACK}
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
    return validate(raw, base)
