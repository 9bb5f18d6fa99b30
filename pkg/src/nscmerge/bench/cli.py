"""Command-line entry point: ``nscmerge <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..adapters import MergeCoefficients, load_adapter_set, save_adapter_set
from ..config import ConfigError
from ..container import ContainerError
from ..mergers import concat_sets, grid_search_scale, merge_adapter_sets
from ..nsc import optimize
from ..toynet import load_base_model, save_base_model, train_lora
from .experiment import ExperimentConfig, grid_csv, history_csv, method_csv, ratio_report, run_experiment
from .metrics import average_normalized, evaluate, mean_loss
from .tasks import load_tasks, write_tasks

logger = logging.getLogger("nscmerge")

MERGE_METHODS = ("ta", "ties", "dare-ties", "svd", "linear", "knots-ties", "adamerging", "nsc")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_tasks(args) -> int:
    cfg = _config(args)
    if args.classification is not None:
        cfg = replace(cfg, classification_tasks=args.classification)
    if args.regression is not None:
        cfg = replace(cfg, regression_tasks=args.regression)
    tasks = cfg.make_tasks()
    write_tasks(tasks, _out(args))
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def _base(args, cfg):
    if args.base:
        return load_base_model(args.base)
    return cfg.base_model()


def cmd_train_adapter(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.train_lr is not None:
        cfg = replace(cfg, train_lr=args.train_lr)
    (task,) = load_tasks(args.data, [args.task])
    model = _base(args, cfg)
    out = _out(args)
    adapter_set, history = train_lora(model, task, cfg.epochs, seed=cfg.seed, lr=cfg.train_lr, batch_size=cfg.train_batch_size)
    save_base_model(model, out / "base")
    save_adapter_set(adapter_set, out / "adapter")
    (out / "history.csv").write_text(history_csv(history), encoding="utf-8")
    last = history[-1]
    print(f"{task.task_id}: val metric {last.metric:.6f}, mean omega {last.mean_omega:.6f}")
    return 0


def _nsc_overrides(args, cfg: ExperimentConfig) -> ExperimentConfig:
    for flag, key in (("steps", "steps"), ("lr", "lr"), ("lambda_init", "lambda_init"),
                      ("target_blocks", "target_blocks"), ("target_proj", "target_proj")):
        value = getattr(args, flag)
        if value is not None:
            cfg = replace(cfg, **{key: value})
    return cfg


def cmd_merge(args) -> int:
    cfg = _nsc_overrides(args, _config(args))
    model = load_base_model(args.base)
    sets = [load_adapter_set(p) for p in args.adapters]
    out = _out(args)
    method = args.method
    tasks = load_tasks(args.data, [s.task_id for s in sets]) if args.data else None

    if method in ("nsc", "adamerging"):
        if tasks is None:
            raise SystemExit(f"merge --method {method} needs --data for the unlabeled pools")
        pools = {t.task_id: t.splits[args.pool_split][0] for t in tasks}
        objective = "nsc" if method == "nsc" else "entropy"
        res = optimize(model, sets, pools, cfg.nsc_config(), objective=objective)
        (out / "trajectory.csv").write_text(res.trajectory_csv(), encoding="utf-8")
        (out / "coefficients.txt").write_text(res.coefficients.to_text(), encoding="utf-8")
        merged = concat_sets(sets, res.coefficients)
        print(f"{method}: objective {res.trajectory[0]:.6f} -> {res.trajectory[-1]:.6f}")
    else:
        spec = cfg.merge_spec(method)
        if args.scale is not None:
            scale = args.scale
        elif tasks is not None:
            unit = merge_adapter_sets(sets, spec)
            heads = {s.task_id: s.head for s in sets}
            layers = model.config.layer_ids

            def val_loss(s: float) -> float:
                coeffs = MergeCoefficients.constant(["merged"], layers, s)
                return mean_loss(evaluate(model, [unit], coeffs, tasks, heads, split="val"))

            scale, grid = grid_search_scale(val_loss)
            (out / "grid.csv").write_text(grid_csv(grid), encoding="utf-8")
        else:
            scale = 1.0
        merged = merge_adapter_sets(sets, replace(spec, scale=scale))
        coeffs = MergeCoefficients.constant(["merged"], model.config.layer_ids, scale)
        (out / "coefficients.txt").write_text(coeffs.to_text(), encoding="utf-8")
        print(f"{method}: scale {float(scale)!r}")
    save_adapter_set(merged, out / "merged")
    return 0


def cmd_evaluate(args) -> int:
    model = load_base_model(args.base)
    sets = [load_adapter_set(p) for p in args.adapters]
    tasks = load_tasks(args.data, [s.task_id for s in sets])
    heads = {s.task_id: s.head for s in sets}
    layers = model.config.layer_ids
    own = [
        evaluate(model, [s], MergeCoefficients.constant([s.task_id], layers, 1.0), [t], heads, split=args.split)[0]
        for s, t in zip(sets, tasks)
    ]
    if args.merged:
        merged = load_adapter_set(args.merged)
        refs = {r.task_id: r.score for r in own}
        coeffs = MergeCoefficients.constant([merged.task_id], layers, 1.0)
        results = evaluate(model, [merged], coeffs, tasks, heads, refs, args.split)
    else:
        results = [replace(r, reference=r.score, normalized=100.0) for r in own]
    (_out(args) / "scores.csv").write_text(method_csv(results), encoding="utf-8")
    avg = average_normalized(results)
    print("average normalized: " + ("undefined" if avg is None else f"{avg:.4f}"))
    return 0


def cmd_analyze_nullspace(args) -> int:
    model = load_base_model(args.base)
    adapter_set = load_adapter_set(args.adapter)
    (task,) = load_tasks(args.data, [adapter_set.task_id])
    layers = model.config.layer_ids
    if args.merged:
        merged = load_adapter_set(args.merged)
        sets, coeffs = [merged], MergeCoefficients.constant([merged.task_id], layers, 1.0)
    else:
        sets, coeffs = [adapter_set], MergeCoefficients.constant([adapter_set.task_id], layers, 1.0)
    report = ratio_report(model, sets, coeffs, adapter_set, task.splits[args.split][0])
    (_out(args) / "ratios.csv").write_text(report.to_csv(), encoding="utf-8")
    print(f"{adapter_set.task_id}: mean omega {report.overall:.6f} over {len(layers)} layers")
    return 0


def cmd_run_experiment(args) -> int:
    out = run_experiment(args.config, args.out, seed=args.seed)
    print((out / "summary.csv").read_text(encoding="utf-8"), end="")
    notes = (out / "notes.txt").read_text(encoding="utf-8")
    if notes:
        print(notes, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nscmerge", description="Merge LoRA adapters on a toy transformer.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 0)")
        p.add_argument("--config", default=None, help="key = value experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(fn=fn)
        return p

    p = command("gen-tasks", cmd_gen_tasks, "write synthetic task datasets")
    p.add_argument("--classification", type=int, default=None)
    p.add_argument("--regression", type=int, default=None)

    p = command("train-adapter", cmd_train_adapter, "fine-tune one LoRA adapter set")
    p.add_argument("--data", required=True, help="directory from gen-tasks")
    p.add_argument("--task", required=True)
    p.add_argument("--base", default=None, help="base model container (default: pretrain one from config and seed)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--train-lr", type=float, default=None)

    p = command("merge", cmd_merge, "merge adapter sets")
    p.add_argument("--method", required=True, choices=MERGE_METHODS)
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", nargs="+", required=True)
    p.add_argument("--data", default=None, help="task data; enables grid search and learned merges")
    p.add_argument("--pool-split", default="val", choices=("train", "val", "test"))
    p.add_argument("--scale", type=float, default=None, help="fixed scale for learning-free methods")
    p.add_argument("--steps", type=int, default=None, help="optimization steps (default 100)")
    p.add_argument("--lr", type=float, default=None, help="coefficient learning rate (default 0.001)")
    p.add_argument("--lambda-init", type=float, default=None, help="initial coefficient (default 0.4)")
    p.add_argument("--target-blocks", default=None, help="default last-quarter")
    p.add_argument("--target-proj", default=None, help="default o")

    p = command("analyze-nullspace", cmd_analyze_nullspace, "per-layer null-space ratios")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--merged", default=None, help="measure activations of this merged model instead")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = command("evaluate", cmd_evaluate, "score a merged model against per-task references")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", nargs="+", required=True, help="per-task adapter sets (references and heads)")
    p.add_argument("--data", required=True)
    p.add_argument("--merged", default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    command("run-experiment", cmd_run_experiment, "full benchmark suite")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ContainerError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
