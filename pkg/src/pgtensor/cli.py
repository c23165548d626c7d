"""Command-line driver: ``pgtensor {generate,train,eval,compare}``.

Exit codes: 0 success, 2 bad config or input, 3 numerical failure,
4 evaluation precondition not met.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .evaluate import (UndefinedMetricError, metrics, roc_auc, score_supervised, score_unsupervised,
                       write_metrics, write_ranking)
from .inference import TrainingError, train, write_curves
from .state import (ConfigError, LabelSet, MissingHeadError, TrainConfig, iterations_per_epoch,
                    load_checkpoint, load_labels, save_checkpoint)
from .synthetic import PlantConfig, desk_preset, generate, write_outputs
from .tensor import TensorFormatError, load_tensor

log = logging.getLogger("pgtensor")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_EVAL = 2, 3, 4

MODEL_KEYS = {"rank", "a_c", "b1", "b2", "init_scale", "init_loc", "shrink_threshold"}


class CLIError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


# -- config -----------------------------------------------------------------------


def read_config(path):
    """Parse the JSON run config; sections ``model``, ``training``, ``synthetic``, ``eval``."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CLIError(f"config: {exc}", EXIT_CONFIG) from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"config: malformed JSON: {exc}", EXIT_CONFIG) from None
    if not isinstance(cfg, dict):
        raise CLIError("config: top level must be an object", EXIT_CONFIG)
    unknown = set(cfg) - {"model", "training", "synthetic", "eval"}
    if unknown:
        raise CLIError(f"config: unknown sections {sorted(unknown)}", EXIT_CONFIG)
    return cfg


def train_config(cfg, **overrides):
    model = dict(cfg.get("model", {}))
    training = dict(cfg.get("training", {}))
    bad = set(model) - MODEL_KEYS
    if bad:
        raise CLIError(f"config: model: unknown fields {sorted(bad)}", EXIT_CONFIG)
    merged = {**model, **training, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return TrainConfig.from_dict(merged)
    except (ConfigError, TypeError) as exc:
        raise CLIError(f"config: {exc}", EXIT_CONFIG) from None


def plant_config(cfg, preset=None, seed=None):
    syn = dict(cfg.get("synthetic", {}))
    preset = preset or syn.pop("preset", None)
    try:
        if preset is not None:
            if preset != "desk":
                raise ConfigError(f"synthetic.preset: unknown preset {preset!r}")
            extra = set(syn) - {"seed", "label_fraction"}
            if extra:
                raise ConfigError(f"synthetic: fields {sorted(extra)} cannot combine with a preset")
            pc = desk_preset(seed=syn.get("seed", 0) if seed is None else seed,
                             label_fraction=syn.get("label_fraction", 0.1))
        else:
            if not syn:
                raise ConfigError("synthetic: section missing (or pass --preset)")
            if seed is not None:
                syn["seed"] = seed
            pc = PlantConfig.from_dict(syn)
        return pc.validate()
    except ConfigError as exc:
        raise CLIError(f"config: {exc}", EXIT_CONFIG) from None


# -- manifest ---------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _version():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now():
    return datetime.now(timezone.utc).isoformat()


def write_manifest(out_dir, command, config, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items() if p},
        "outputs": {name: str(p) for name, p in outputs.items()},
        "started": started,
        "finished": _now(),
        "version": _version(),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- commands ---------------------------------------------------------------------


def cmd_generate(args):
    started = _now()
    cfg = read_config(args.config)
    pc = plant_config(cfg, preset=args.preset, seed=args.seed)
    tensor, labels, gt = generate(pc)
    paths = write_outputs(args.out_dir, tensor, labels, gt)
    write_manifest(args.out_dir, "generate", pc.to_dict(), pc.seed,
                   {"config": args.config}, paths, started)
    log.info("wrote %d ones, %d training labels to %s", tensor.nnz, sum(1 for _ in labels.triples()),
             args.out_dir)
    return 0


def _load_inputs(tensor_path, labels_path):
    try:
        tensor = load_tensor(tensor_path)
        labels = load_labels(labels_path) if labels_path else LabelSet()
        labels.check(tensor.shape)
    except (OSError, TensorFormatError, ValueError) as exc:
        raise CLIError(f"input: {exc}", EXIT_CONFIG) from None
    return tensor, labels


def cmd_train(args):
    started = _now()
    cfg = read_config(args.config)
    tc = train_config(cfg, backend=args.backend, kappa_mode=args.kappa, seed=args.seed,
                      epochs=args.epochs, iterations=args.iterations)
    tensor, labels = _load_inputs(args.tensor, args.labels)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        state, prior, records = train(tensor, labels, tc)
    except TrainingError as exc:
        raise CLIError(f"numerical failure at iteration {exc.iteration}: {exc}", EXIT_NUMERIC) from None
    paths = {"checkpoint": out / "checkpoint.json", "curves": out / "curves.csv"}
    save_checkpoint(paths["checkpoint"], state, prior, tensor.shape, extra={"config": tc.to_dict()})
    write_curves(records, paths["curves"])
    write_manifest(out, "train", tc.to_dict(), tc.seed, {"tensor": args.tensor, "labels": args.labels,
                                                         "config": args.config}, paths, started)
    log.info("trained %d iterations; %d of %d components shrunk", len(records), records[-1].n_shrunk,
             tc.rank)
    return 0


def cmd_eval(args):
    started = _now()
    try:
        state, _, shape = load_checkpoint(args.checkpoint)
        labels = load_labels(args.labels)
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError(f"input: {exc}", EXIT_CONFIG) from None
    mode = args.mode
    if args.n < 1:
        raise CLIError(f"--n must be >= 1, got {args.n}", EXIT_CONFIG)
    if not 0 <= mode < len(shape):
        raise CLIError(f"--mode {mode} is not a mode of a {len(shape)}-mode tensor", EXIT_CONFIG)
    try:
        scores = score_unsupervised(state, mode) if args.unsupervised else score_supervised(state, mode)
    except MissingHeadError as exc:
        raise CLIError(f"{exc}; use --unsupervised", EXIT_EVAL) from None
    try:
        m = metrics(scores, labels, args.n)
    except UndefinedMetricError as exc:
        raise CLIError(str(exc), EXIT_EVAL) from None
    m["mode"] = mode
    m["scoring"] = "unsupervised" if args.unsupervised else "supervised"
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.json", "ranking": out / "ranking.csv"}
    write_metrics(m, paths["metrics"])
    write_ranking(scores, paths["ranking"], labels)
    write_manifest(out, "eval", {"mode": mode, "n": args.n, "scoring": m["scoring"]}, None,
                   {"checkpoint": args.checkpoint, "labels": args.labels}, paths, started)
    print(json.dumps(m, sort_keys=True))
    return 0


COMPARE_COLUMNS = ["backend", "epoch", "train_auc", "test_auc", "shrink_fraction", "status"]


def compare_backends(tensor, labels, test_labels, mode, base: TrainConfig, backends=("natural", "sgd", "em")):
    """Train each backend on the same data and seed; AUCs at every epoch boundary."""
    rows = []
    for backend in backends:
        tc = TrainConfig.from_dict({**base.to_dict(), "backend": backend, "iterations": None})
        done = []

        def on_epoch(epoch, state, tc=tc, done=done):
            row = {"backend": tc.backend, "epoch": epoch,
                   "train_auc": _auc(state, mode, labels), "test_auc": _auc(state, mode, test_labels),
                   "shrink_fraction": _shrink(state.lam, tc.shrink_threshold), "status": "ok"}
            done.append(row)
            return {"train_auc": row["train_auc"], "test_auc": row["test_auc"]}

        try:
            train(tensor, labels, tc, on_epoch=on_epoch)
        except TrainingError as exc:
            log.warning("backend %s failed: %s", backend, exc)
            epoch = exc.iteration // iterations_per_epoch(tensor.nnz, tc) + 1
            done.append({"backend": backend, "epoch": epoch, "train_auc": "", "test_auc": "",
                         "shrink_fraction": "", "status": f"failed: {exc}"})
        rows.extend(done)
    return rows


def _auc(state, mode, labels):
    if mode in state.betas:
        scores = score_supervised(state, mode)
    else:
        scores = score_unsupervised(state, mode)
    return roc_auc(scores, labels)


def _shrink(lam, threshold):
    a = np.abs(lam)
    return float(np.mean(a < threshold * a.max())) if a.max() > 0 else 1.0


def cmd_compare(args):
    started = _now()
    cfg = read_config(args.config)
    pc = plant_config(cfg, preset=args.preset, seed=args.seed)
    tc = train_config(cfg, seed=args.seed)
    tensor, labels, gt = generate(pc)
    test_labels = gt.held_out_labels()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = compare_backends(tensor, labels, test_labels, pc.label_mode, tc)
    path = out / "comparison.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    write_manifest(out, "compare", {"synthetic": pc.to_dict(), "training": tc.to_dict()}, tc.seed,
                   {"config": args.config}, {"comparison": path}, started)
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pgtensor",
                                description="Semi-supervised CP factorization of sparse binary tensors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic planted-block tensor and labels")
    g.add_argument("--config", help="JSON config with a 'synthetic' section")
    g.add_argument("--preset", choices=["desk"])
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir", default=".")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit the model to a tensor file")
    t.add_argument("--tensor", required=True)
    t.add_argument("--labels")
    t.add_argument("--config")
    t.add_argument("--backend", choices=["natural", "sgd", "em"])
    t.add_argument("--kappa", choices=["observed", "expected"])
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--out-dir", default=".")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score entities and compute ranking metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--mode", type=int, required=True)
    e.add_argument("--n", type=int, required=True)
    which = e.add_mutually_exclusive_group()
    which.add_argument("--supervised", action="store_true", default=True)
    which.add_argument("--unsupervised", action="store_true")
    e.add_argument("--out-dir", default=".")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="train natural, sgd and em backends on identical data")
    c.add_argument("--config")
    c.add_argument("--preset", choices=["desk"])
    c.add_argument("--seed", type=int)
    c.add_argument("--out-dir", default=".")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"pgtensor {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
