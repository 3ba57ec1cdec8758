"""Command-line entry point: ``featguard {train,protect,evaluate,sweep,analyze}``.

Every command writes into ``<out>/<run_id>/`` where ``run_id`` is a UTC
timestamp plus the first 8 hex digits of the resolved config's SHA-256. The
directory always holds ``config.json`` and ``manifest.json``; the manifest
lists checkpoints and outputs with their hashes and can be passed back via
``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import OUTPUT_ENV, RunConfig, load_config
from .datasets import load_dataset
from .engine import protect_batch
from .errors import ConfigError, ContractError, FormatError, NumericError, ProtocolError, TrainingError
from .harness import (
    export_report,
    filter_correctly_classified,
    provenance,
    sweep_epsilon_quality,
    sweep_layer,
    sweep_step_and_iters,
    task_complexity_experiment,
    transfer_matrix,
)
from .models import load_checkpoint, save_checkpoint, sha256_file, standard_arch, train_reference_model

log = logging.getLogger("featguard")


class Run:
    """Output directory, manifest bookkeeping and per-item failure log for one command."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.created = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
        self.run_id = f"{stamp}-{cfg.digest()[:8]}"
        self.dir = cfg.output_root() / self.run_id
        if self.dir.exists():
            raise ProtocolError(f"run directory {self.dir} already exists (run_id collision)")
        self.dir.mkdir(parents=True)
        (self.dir / "config.json").write_text(json.dumps(cfg.data, indent=1, sort_keys=True))
        self.checkpoints = {}
        self.failures = []
        self.summary = {}
        self.dataset = {}
        handler = logging.FileHandler(self.dir / "log.txt")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        self._handler = handler

    def fail(self, item, reason):
        self.failures.append({"item": item, "reason": str(reason)})
        log.warning("failed %s: %s", item, reason)

    def finish(self) -> Path:
        outputs = []
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p.name not in ("manifest.json", "log.txt"):
                outputs.append({"path": p.relative_to(self.dir).as_posix(), "sha256": sha256_file(p)})
        manifest = {
            "run_id": self.run_id,
            "created": self.created,
            "command": self.command,
            "config": self.cfg.data,
            "config_sha256": self.cfg.digest(),
            "seeds": self.cfg["attack"]["seeds"],
            "dataset": self.dataset,
            "checkpoints": self.checkpoints,
            "outputs": outputs,
            "failures": self.failures,
            "summary": self.summary,
            "versions": provenance(),
        }
        if self.failures:
            with open(self.dir / "failures.jsonl", "w") as fh:
                for f in self.failures:
                    fh.write(json.dumps(f) + "\n")
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        logging.getLogger().removeHandler(self._handler)
        self._handler.close()
        return path


# -- shared steps ----------------------------------------------------------

def _data(run: Run):
    train, test = load_dataset(run.cfg["dataset"])
    run.dataset = {"dataset_id": test.dataset_id, "class_count": test.class_count,
                   "n_train": len(train), "n_test": len(test)}
    return train, test


def _checkpoints(run: Run, train, test, force_train=False):
    """Load or train every configured model; trained ones are saved under checkpoints/."""
    out = []
    size = list(test.items[0].image.shape) if len(test) else [32, 32, 3]
    for i, spec in enumerate(run.cfg["models"]):
        if spec.get("checkpoint") and not force_train:
            path = Path(spec["checkpoint"])
            try:
                ck = load_checkpoint(path)
            except FormatError as exc:
                raise ConfigError(f"models[{i}].checkpoint", str(exc)) from exc
            if ck.arch["num_classes"] != test.class_count:
                raise ConfigError(f"models[{i}].checkpoint",
                                  f"model has {ck.arch['num_classes']} classes, dataset has {test.class_count}")
            ck.model_id = spec["id"]
            run.checkpoints[spec["id"]] = {"path": str(path), "sha256": sha256_file(path)}
        else:
            t = spec["train"]
            arch = standard_arch(spec["family"], test.class_count, tuple(size))
            ck = train_reference_model(arch, train, t["epochs"], t["seed"], test, spec["id"], t["lr"],
                                       t["batch_size"], t["noise_aug"], t["shift_aug"])
            path = save_checkpoint(ck, run.dir / "checkpoints" / spec["id"])
            run.checkpoints[spec["id"]] = {"path": path.relative_to(run.dir).as_posix(),
                                           "sha256": sha256_file(path), "accuracy": ck.accuracy}
        out.append(ck)
    return out


def _handles(ckpts):
    return [c.handle() for c in ckpts]


def _by_id(handles, model_id, field):
    if model_id is None:
        return handles[0]
    for h in handles:
        if h.model_id == model_id:
            return h
    raise ConfigError(field, f"no model with id {model_id!r}")


def _tap(cfg: RunConfig, model_id):
    taps = cfg.taps()
    if isinstance(taps, dict):
        return taps.get(model_id)
    return taps


def _evaluation_split(run: Run, handles, test):
    split = filter_correctly_classified(handles, test)
    n = run.cfg["dataset"].get("subsample")
    split = split.subsample(n, run.cfg["dataset"]["seed"])
    run.dataset.update(n_filtered_used=len(split))
    return split


def _image_sink(run: Run):
    def sink(pid, seed, results):
        for r in results:
            stem = _stem(r.source_id)
            png, rec = r.save(run.dir / "images" / pid / f"s{seed}", stem)
            rec.replace(_trace_path(run, pid, seed, stem))
    return sink


def _trace_path(run, pid, seed, stem):
    d = run.dir / "trace" / pid / f"s{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d / f"{stem}.json"


def _stem(source_id):
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in source_id)


# -- commands -----------------------------------------------------------------

def cmd_train(run: Run) -> None:
    train, test = _data(run)
    ckpts = _checkpoints(run, train, test, force_train=True)
    run.summary = {"accuracy": {c.model_id: c.accuracy for c in ckpts}}
    for c in ckpts:
        print(f"{c.model_id}: {c.accuracy:.2f}% held-out accuracy")


def cmd_protect(run: Run) -> None:
    cfg = run.cfg
    train, test = _data(run)
    handles = _handles(_checkpoints(run, train, test))
    model = _by_id(handles, cfg["protect"]["model"], "protect.model")
    split = _evaluation_split(run, handles, test) if cfg["protect"]["filter"] else test
    if cfg["protect"].get("limit"):
        split = split.subset(range(min(int(cfg["protect"]["limit"]), len(split))))
    attack = cfg.attack
    tap = _tap(cfg, model.model_id)
    if tap is not None:
        attack = attack.replace(tap=tap)
    items = []
    pred = model.predict(split.arrays()[0]) if len(split) else []
    for it, p in zip(split, pred):
        if int(p) != it.label:
            run.fail(it.source_id, f"authorized model predicts {int(p)}, label is {it.label}")
        else:
            items.append(it)
    results = []
    for start in range(0, len(items), 128):
        chunk = items[start : start + 128]
        try:
            results.extend(protect_batch(model, chunk, attack))
        except NumericError:
            for it in chunk:  # isolate the offending images
                try:
                    results.extend(protect_batch(model, [it], attack))
                except NumericError as exc:
                    run.fail(it.source_id, exc)
    entries = []
    for r in results:
        stem = _stem(r.source_id)
        png, rec = r.save(run.dir / "images", stem)
        trace = run.dir / "trace" / f"{stem}.json"
        trace.parent.mkdir(exist_ok=True)
        rec.replace(trace)
        entries.append({"source_id": r.source_id, "output": png.relative_to(run.dir).as_posix(),
                        "trace": trace.relative_to(run.dir).as_posix(), "linf": r.linf,
                        "linf_quantized": float(np.abs(r.quantized().pixels - r.x_original.pixels).max()),
                        "authorized_prediction": r.authorized_prediction})
    run.summary = {"protected_model": model.model_id, "n_images": len(entries), "images": entries,
                   "max_linf": max((e["linf_quantized"] for e in entries), default=0.0)}
    print(f"protected {len(entries)} images with {model.model_id}; {len(run.failures)} failures")


def cmd_evaluate(run: Run) -> None:
    cfg = run.cfg
    train, test = _data(run)
    handles = _handles(_checkpoints(run, train, test))
    split = _evaluation_split(run, handles, test)
    m = transfer_matrix(handles, split, cfg.attack, tuple(cfg["attack"]["seeds"]), cfg.taps(),
                        cfg["run"]["workers"], _image_sink(run))
    export_report(m, run.dir, "matrix", {"run_id": run.run_id})
    run.summary = {"mean_off_diagonal": m.mean_off_diagonal(), "mean_drop": m.mean_drop(),
                   "diagonal": m.diagonal(), "n_images": m.n_images}
    _print_matrix(m)


def cmd_sweep(run: Run) -> None:
    cfg = run.cfg
    sw = cfg["sweep"]
    seeds = tuple(cfg["attack"]["seeds"])
    workers = cfg["run"]["workers"]
    train, test = _data(run)
    ckpts = _checkpoints(run, train, test)
    handles = _handles(ckpts)
    if sw["kind"] == "complexity":
        rep = task_complexity_experiment(ckpts, train, test, sw["class_counts"], cfg.attack, seeds, cfg.taps(),
                                         sw["head_epochs"], cfg["dataset"]["seed"],
                                         cfg["dataset"].get("subsample"), workers)
        export_report(rep, run.dir, "complexity", {"run_id": run.run_id})
        run.summary = {"class_counts": rep.class_counts, "drops": rep.drops()}
        for k, d in zip(rep.class_counts, rep.drops()):
            print(f"{k:4d} classes: mean off-diagonal drop {d:6.2f}")
        return
    split = _evaluation_split(run, handles, test)
    p = _by_id(handles, sw["protected"], "sweep.protected")
    targets = [h for h in handles if h is not p]
    base = cfg.attack
    tap = _tap(cfg, p.model_id)
    if tap is not None:
        base = base.replace(tap=tap)
    if sw["kind"] == "layer":
        res = sweep_layer(p, targets, split, base, sw["taps"], seeds, workers)
    elif sw["kind"] == "step_iters":
        res = sweep_step_and_iters(p, targets, split, sw["alphas"], sw["ns"], base, seeds, workers)
    else:
        res = sweep_epsilon_quality(p, targets, split, sw["epsilons"], base, seeds, workers)
    export_report(res, run.dir, "sweep", {"run_id": run.run_id})
    run.summary = {"parameter": res.parameter, "values": [list(v) if isinstance(v, tuple) else v for v in res.values],
                   "mean_target_accuracy": res.mean_target_accuracy(), "ssim": res.ssim}
    for i, (v, acc) in enumerate(zip(res.values, res.mean_target_accuracy())):
        extra = f"  ssim {res.ssim[i]:.4f}" if res.ssim else ""
        print(f"{res.parameter}={v}: mean target accuracy {acc:6.2f}{extra}")


def cmd_analyze(run: Run) -> None:
    from .analysis import feature_panel, grad_cam_pair, gradcam_shift, save_heatmap_overlay, softmax_histogram

    cfg = run.cfg
    an = cfg["analyze"]
    train, test = _data(run)
    handles = _handles(_checkpoints(run, train, test))
    auth = _by_id(handles, an["authorized"], "analyze.authorized")
    split = filter_correctly_classified(handles, test).subsample(an["n_images"], cfg["dataset"]["seed"])
    attack = cfg.attack
    tap = _tap(cfg, auth.model_id)
    if tap is not None:
        attack = attack.replace(tap=tap)
    results = protect_batch(auth, list(split.items), attack)
    orig = [r.x_original for r in results]
    prot = [r.quantized() for r in results]
    labels = [it.label for it in split]
    out = run.dir / "analysis"
    out.mkdir()
    stats = {"authorized": auth.model_id, "n_images": len(results)}
    if an["gradcam"]:
        stats["gradcam_l1_shift"] = gradcam_shift(handles, orig, prot, labels)
    if an["histogram"]:
        h = softmax_histogram(handles, np.stack([o.pixels for o in orig]), np.stack([p.pixels for p in prot]),
                              out / "max_softmax.png")
        stats["max_softmax"] = {k: {s: {"mean": v[s]["mean"], "median": v[s]["median"]} for s in v}
                                for k, v in h["models"].items()}
    corr = {m.model_id: [] for m in handles}
    for k in range(min(an["panels"], len(results))):
        stem = _stem(results[k].source_id)
        for m in handles:
            panel = feature_panel(m, orig[k], prot[k], path=out / "panels" / m.model_id / f"{stem}.png")
            corr[m.model_id].append(panel["mean_correlation"])
            pair = grad_cam_pair(m, orig[k], prot[k], labels[k])
            for key in ("original", "protected_label", "protected_prediction"):
                img = orig[k] if key == "original" else prot[k]
                save_heatmap_overlay(pair[key], img, out / "gradcam" / m.model_id / f"{stem}_{key}.png")
    stats["panel_mean_correlation"] = {k: float(np.nanmean(v)) if v else None for k, v in corr.items()}
    (out / "analysis.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    run.summary = stats
    print(json.dumps(stats, indent=1, sort_keys=True))


def _print_matrix(m):
    width = max(len(t) for t in m.target_models + m.protected_models) + 2
    print(" " * width + "".join(t.rjust(width) for t in m.target_models))
    for p, row in zip(m.protected_models, m.accuracy):
        print(p.ljust(width) + "".join(f"{v:{width}.2f}" for v in row))
    print(f"mean off-diagonal accuracy {m.mean_off_diagonal():.2f} over {m.n_images} images")


COMMANDS = {"train": cmd_train, "protect": cmd_protect, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "analyze": cmd_analyze}


def _tap_arg(s):
    return int(s) if s.lstrip("-").isdigit() else s


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (or a previous run's manifest.json)")
    common.add_argument("--out", help=f"output root (default: ${OUTPUT_ENV} or ./runs)")
    common.add_argument("--workers", type=int, help="worker threads for image generation")
    common.add_argument("--seed", type=int, help="single attack seed (replaces attack.seeds)")
    common.add_argument("--epsilon", type=float, help="l-inf budget in 0-255 pixel units")
    common.add_argument("--alpha", type=float, help="step size")
    common.add_argument("--iters", type=int, help="number of iterations N")
    common.add_argument("--lambda", dest="lam", type=float, help="weight of the classification term")
    common.add_argument("--tap", type=_tap_arg, help="feature tap index or name for every model")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="featguard", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__ or name)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"run.out": args.out, "run.workers": args.workers, "attack.epsilon": args.epsilon,
                 "attack.alpha": args.alpha, "attack.n_iters": args.iters, "attack.lambda": args.lam,
                 "attack.tap": args.tap, "attack.seeds": [args.seed] if args.seed is not None else None}
    try:
        cfg = load_config(args.config, overrides)
        run = Run(cfg, args.command)
    except (ConfigError, ProtocolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    code = 0
    try:
        COMMANDS[args.command](run)
    except (ConfigError, ContractError, ProtocolError, NumericError, TrainingError, FormatError, OSError) as exc:
        run.fail("<run>", f"{type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
    finally:
        manifest = run.finish()
    if run.failures:
        code = 1
    print(f"run {run.run_id}: {manifest}")
    return code


if __name__ == "__main__":
    sys.exit(main())
