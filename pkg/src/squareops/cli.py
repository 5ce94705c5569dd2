"""Command-line entry point.

Subcommands: gradcheck, spiral, boundary, train, ablate. Every run command
writes deterministic CSV/JSON artifacts plus one manifest.json (the only
file holding timestamps). Exit status is 0 iff all requested work completed
and validated; a training run that *reports* divergence still exits 0.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, data as data_mod, gradcheck, spiral as spiral_mod
from .models import (Model, POOL_VARIANTS, RESNET_FLAGS, VANILLA_VARIANTS,
                     build_mini_resnet, build_vanilla_cnn)
from .train import TrainConfig, config_to_dict, run_training

TABLE2_ROWS = list(VANILLA_VARIANTS)
TABLE3_ROWS = ["original", "gem2", "sp", "moment3", "moment4", "moment5", "moment6"]
TABLE4_MINI_ROWS = ["plain", "sp", "ss", "sex", "sen", "sp_sex", "sp_sen", "sp_sex_sen"]


def _version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).parent)
        rev = desc.stdout.strip()
    except Exception:
        rev = ""
    return f"squareops {__version__}" + (f" ({rev})" if rev else "")


def _dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir: Path, command: str, resolved: dict,
                    t0: float, t1: float, config_path=None) -> None:
    _dump_json({
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "resolved_config": resolved,
        "out_dir": str(out_dir),
        "version": _version_string(),
        "started_unix": t0,
        "finished_unix": t1,
        "wall_seconds": t1 - t0,
    }, out_dir / "manifest.json")


def _parse_seeds(text: str) -> list:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s]


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    ops = None
    if args.op:
        ops = [o for chunk in args.op for o in chunk.split(",")]
    try:
        results = gradcheck.suite(ops, seeds=args.seeds)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    width = max(len(name) for name, _, _ in results)
    print(f"{'operation':<{width}}  max rel err  status")
    failed = []
    for name, err, ok in results:
        print(f"{name:<{width}}  {err:11.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradcheck FAILED for: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} operations under "
          f"{gradcheck.SUITE_TOLERANCE:g} ({args.seeds} seeds)")
    return 0


# ---------------------------------------------------------------------------
# spiral

def cmd_spiral(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    seeds = _parse_seeds(args.seeds)
    acts = ["relu_square", "relu"] if args.activation == "both" else [args.activation]
    task = args.task
    n_train = args.n_train if args.n_train is not None else (1000 if task == "reg" else 300)
    n_test = args.n_test if args.n_test is not None else (500 if task == "reg" else 150)
    per_seed: dict = {}
    for seed in seeds:
        if task == "reg":
            train = spiral_mod.gen_one_arm(n_train, args.noise, seed, "train")
            test = spiral_mod.gen_one_arm(n_test, args.noise, seed, "test")
        else:
            train = spiral_mod.gen_three_arm(n_train, args.noise, seed, "train")
            test = spiral_mod.gen_three_arm(n_test, args.noise, seed, "test")
        spiral_mod.dataset_to_csv(train, out / f"data_{task}_s{seed}.csv")
        entry: dict = {}
        for act in acts:
            cfg = spiral_mod.spiral_fit_config(task, seed)
            if args.epochs is not None:
                cfg.epochs = args.epochs
            print(f"spiral {task} seed {seed} {act}: {cfg.epochs} epochs",
                  file=sys.stderr)
            model, result = spiral_mod.fit_two_layer(
                train, test, hidden=args.hidden, activation=act, config=cfg)
            result.to_csv(out / f"metrics_{task}_{act}_s{seed}.csv")
            if task == "reg":
                t_grid = np.linspace(0.0, 1.0, 400)[:, None]
                pred = model.forward(t_grid).data
                lines = ["t,x,y"] + [f"{t:.6g},{x:.6g},{y:.6g}"
                                     for t, (x, y) in zip(t_grid[:, 0], pred)]
                (out / f"trajectory_{act}_s{seed}.csv").write_text(
                    "\n".join(lines) + "\n")
                entry[act] = {"test_mse": result.final_test_loss,
                              "diverged": result.diverged}
            else:
                report = spiral_mod.count_decision_regions(
                    spiral_mod.model_predictor(model),
                    bounds=(-1.25, 1.25, -1.25, 1.25), resolution=(200, 200))
                report.to_csv(out / f"grid_{act}_s{seed}.csv")
                entry[act] = {"test_acc": result.final_test_acc,
                              "diverged": result.diverged}
        per_seed[str(seed)] = entry

    summary: dict = {"task": task, "seeds": seeds, "per_seed": per_seed}
    if len(acts) == 2:
        wins = 0
        for seed in seeds:
            e = per_seed[str(seed)]
            if task == "reg":
                wins += e["relu_square"]["test_mse"] < e["relu"]["test_mse"]
            else:
                wins += e["relu_square"]["test_acc"] >= e["relu"]["test_acc"]
        summary["wins_relu_square"] = wins
        summary["wins_relu"] = len(seeds) - wins
    _dump_json(summary, out / "summary.json")
    _write_manifest(out, "spiral", vars(args) | {"out": str(out)}, t0, time.time())
    print(out / "summary.json")
    return 0


# ---------------------------------------------------------------------------
# boundary

def cmd_boundary(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    try:
        bounds = tuple(float(v) for v in args.bounds.split(","))
        if len(bounds) != 4:
            raise ValueError("bounds must be xmin,xmax,ymin,ymax")
        if args.model_file:
            model = Model.load(args.model_file)
            predict = spiral_mod.model_predictor(model)
            coeffs = None
        else:
            if args.weights_file:
                doc = json.loads(Path(args.weights_file).read_text())
                problem = spiral_mod.BoundaryProblem(**doc)
            else:
                vals = [float(v) for v in args.weights.split(",")]
                if len(vals) != 6:
                    raise ValueError("weights must be w11,w12,w21,w22,b1,b2")
                problem = spiral_mod.BoundaryProblem(*vals)
            coeffs = spiral_mod.boundary_coefficients(problem)
            predict = spiral_mod.model_predictor(spiral_mod.problem_to_model(problem))
    except (ValueError, TypeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = spiral_mod.count_decision_regions(
        predict, bounds=bounds, resolution=(args.resolution, args.resolution))
    if coeffs is not None:
        report.boundary_type = coeffs.kind
    report.to_csv(out / "grid.csv")
    doc = report.summary()
    if coeffs is not None:
        doc["coefficients"] = {"a": coeffs.a, "b": coeffs.b, "c": coeffs.c}
    _dump_json(doc, out / "boundary.json")
    _write_manifest(out, "boundary", vars(args) | {"out": str(out)}, t0, time.time())
    print(out / "boundary.json")
    return 0


# ---------------------------------------------------------------------------
# train

_MODEL_KEYS = {"builder", "variant", "flags", "num_classes", "num_blocks",
               "shared_excitation"}
_DATA_KEYS = {"kind", "dir", "path", "subset"}


def _build_model_from_config(model_cfg: dict, train_cfg: TrainConfig) -> Model:
    extra = set(model_cfg) - _MODEL_KEYS
    if extra:
        raise ValueError(f"unknown model config keys: {sorted(extra)}")
    builder = model_cfg.get("builder")
    num_classes = model_cfg.get("num_classes", 10)
    if builder == "vanilla_cnn":
        spec = build_vanilla_cnn(model_cfg.get("variant", "original"),
                                 num_classes=num_classes,
                                 dropout_rate=train_cfg.dropout_rate)
    elif builder == "mini_resnet":
        spec = build_mini_resnet(model_cfg.get("num_blocks", 3),
                                 flags=model_cfg.get("flags", []),
                                 num_classes=num_classes,
                                 dropout_rate=train_cfg.dropout_rate,
                                 shared_softmin=train_cfg.shared_softmin_scale,
                                 shared_excitation=model_cfg.get(
                                     "shared_excitation", False))
    else:
        raise ValueError(f"unknown builder {builder!r}")
    return Model(spec, seed=train_cfg.seed)


def _load_data_from_config(data_cfg: dict):
    extra = set(data_cfg) - _DATA_KEYS
    if extra:
        raise ValueError(f"unknown data config keys: {sorted(extra)}")
    kind = data_cfg.get("kind")
    if kind == "cifar10":
        if "dir" not in data_cfg:
            raise ValueError("data.kind=cifar10 requires data.dir")
        train, test = data_mod.load_cifar10(data_cfg["dir"])
    elif kind == "smoke":
        ds = data_mod.load_smoke(data_cfg.get("path"))
        train = test = ds
    else:
        raise ValueError(f"unknown data kind {kind!r}")
    if data_cfg.get("subset"):
        train = train.subset(int(data_cfg["subset"]))
    return train, test


def _resolve_config(path) -> tuple:
    doc = json.loads(Path(path).read_text())
    extra = set(doc) - {"model", "data", "train"}
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    for key in ("model", "data"):
        if key not in doc:
            raise ValueError(f"config is missing the {key!r} section")
    train_doc = doc.get("train", {})
    known = set(TrainConfig.__dataclass_fields__)
    extra = set(train_doc) - known
    if extra:
        raise ValueError(f"unknown train config keys: {sorted(extra)}")
    return doc["model"], doc["data"], TrainConfig(**train_doc)


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    try:
        model_cfg, data_cfg, train_cfg = _resolve_config(args.config)
        model = _build_model_from_config(model_cfg, train_cfg)
        train_ds, test_ds = _load_data_from_config(data_cfg)
    except (ValueError, TypeError, OSError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    def progress(rec):
        print(f"epoch {rec.epoch}: lr {rec.lr:.4g} train {rec.train_loss:.4f} "
              f"acc {rec.train_acc:.4f} | test {rec.test_loss:.4f} "
              f"acc {rec.test_acc:.4f}", file=sys.stderr)

    result = run_training(model, train_ds, test_ds, train_cfg, progress=progress)
    result.to_csv(out / "metrics.csv")
    summary = {
        "model": model_cfg,
        "data": {k: v for k, v in data_cfg.items()},
        "train": config_to_dict(train_cfg),
        "variant": model.spec.variant,
        "param_count": model.param_count(),
        "result": result.summary(),
    }
    _dump_json(summary, out / "summary.json")
    resolved = {"model": model_cfg, "data": data_cfg,
                "train": config_to_dict(train_cfg)}
    _write_manifest(out, "train", resolved, t0, time.time(),
                    config_path=args.config)
    print(out / "summary.json")
    return 0


# ---------------------------------------------------------------------------
# ablate

def _suite_rows(suite: str) -> list:
    if suite == "table2":
        return [("vanilla_cnn", v) for v in TABLE2_ROWS]
    if suite == "table3":
        return [("vanilla_cnn", v) for v in TABLE3_ROWS]
    if suite == "table4-mini":
        return [("mini_resnet", label) for label in TABLE4_MINI_ROWS]
    raise ValueError(f"unknown suite {suite!r}")


def _ablate_run(task) -> dict:
    """Worker for one (row, seed) cell; must stay importable for pickling."""
    builder, label, seed, data_cfg, train_doc, out_dir = task
    train_cfg = TrainConfig(**{**train_doc, "seed": seed})
    if builder == "vanilla_cnn":
        model_cfg = {"builder": "vanilla_cnn", "variant": label}
    else:
        flags = [] if label == "plain" else label.split("_")
        model_cfg = {"builder": "mini_resnet", "flags": flags}
    model = _build_model_from_config(model_cfg, train_cfg)
    train_ds, test_ds = _load_data_from_config(data_cfg)
    run_dir = Path(out_dir) / f"{label}_s{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        print(f"[{label} s{seed}] epoch {rec.epoch}: "
              f"test_acc {rec.test_acc:.4f}", file=sys.stderr)

    result = run_training(model, train_ds, test_ds, train_cfg, progress=progress)
    result.to_csv(run_dir / "metrics.csv")
    summary = {"model": model_cfg, "train": config_to_dict(train_cfg),
               "param_count": model.param_count(), "result": result.summary()}
    _dump_json(summary, run_dir / "summary.json")
    return {"label": label, "seed": seed,
            "final_test_acc": result.final_test_acc,
            "diverged": result.diverged}


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    try:
        rows = _suite_rows(args.suite)
        seeds = _parse_seeds(args.seeds)
        if args.data == "smoke":
            data_cfg = {"kind": "smoke"}
        elif args.data:
            data_cfg = {"kind": "cifar10", "dir": args.data}
        else:
            env = os.environ.get("SQUAREOPS_CIFAR10_DIR")
            if not env:
                raise ValueError("no dataset: pass --data DIR|smoke or set "
                                 "SQUAREOPS_CIFAR10_DIR")
            data_cfg = {"kind": "cifar10", "dir": env}
        train_doc: dict = {}
        if args.epochs is not None:
            train_doc["epochs"] = args.epochs
            train_doc["warmup_epochs"] = min(5, max(0, args.epochs - 1))
        if args.batch_size is not None:
            train_doc["batch_size"] = args.batch_size
        if args.lr0 is not None:
            train_doc["lr0"] = args.lr0
        TrainConfig(**train_doc)  # fail fast on bad overrides
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    tasks = [(builder, label, seed, data_cfg, train_doc, str(out))
             for builder, label in rows for seed in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_ablate_run, tasks))
    else:
        outcomes = [_ablate_run(t) for t in tasks]

    by_label: dict = {}
    for oc in outcomes:
        by_label.setdefault(oc["label"], []).append(oc)
    base_label = rows[0][1]
    base_accs = [oc["final_test_acc"] for oc in by_label[base_label]
                 if not oc["diverged"]]
    base_mean = 100.0 * sum(base_accs) / len(base_accs) if base_accs else math.nan

    lines = ["variant,mean_acc,improvement"]
    for _, label in rows:
        cells = by_label[label]
        if any(c["diverged"] for c in cells):
            lines.append(f"{label},divergence,-")
            continue
        mean = 100.0 * sum(c["final_test_acc"] for c in cells) / len(cells)
        lines.append(f"{label},{mean:.2f},{mean - base_mean:.2f}")
    table_path = out / f"{args.suite.replace('-', '_')}.csv"
    table_path.write_text("\n".join(lines) + "\n")
    resolved = {"suite": args.suite, "seeds": seeds, "data": data_cfg,
                "train_overrides": train_doc, "jobs": args.jobs}
    _write_manifest(out, "ablate", resolved, t0, time.time())
    print(table_path)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="squareops")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="certify every backward rule")
    p.add_argument("--op", action="append",
                   help="check only these ops (comma list, repeatable)")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("spiral", help="two-layer fits on spiral data")
    p.add_argument("--task", choices=("reg", "cls"), required=True)
    p.add_argument("--activation", choices=("relu", "relu_square", "both"),
                   default="both")
    p.add_argument("--seeds", default="1..5")
    p.add_argument("--out", default="out/spiral")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.set_defaults(func=cmd_spiral)

    p = sub.add_parser("boundary", help="quadratic decision-boundary analysis")
    p.add_argument("--weights", default="1,0,0,1,0,1",
                   help="w11,w12,w21,w22,b1,b2")
    p.add_argument("--weights-file", default=None)
    p.add_argument("--model-file", default=None,
                   help="saved model .npz to analyze instead")
    p.add_argument("--bounds", default="-3,3,-3,3")
    p.add_argument("--resolution", type=int, default=400)
    p.add_argument("--out", default="out/boundary")
    p.set_defaults(func=cmd_boundary)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="out/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run a variant sweep")
    p.add_argument("--suite", choices=("table2", "table3", "table4-mini"),
                   required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", default="out/ablate")
    p.add_argument("--data", default=None, help="CIFAR-10 dir, or 'smoke'")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
