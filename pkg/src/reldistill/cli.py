"""Command-line entry points.

Subcommands: ``train-teacher``, ``distill``, ``eval``, ``mi-oracle``,
``report``.  All randomness is seeded from the config (or ``--seed``),
and each distillation run writes a self-contained directory: config
snapshot, per-step metrics log, checkpoints, and the final result
record.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import mi, report
from .config import (DistillConfig, apply_overrides, config_to_dict,
                     load_config, save_config)
from .data import DatasetHandle, Loader, load_dataset
from .engine import evaluate, model_spec_from_config, train
from .errors import SchemaError, UsageError
from .models import (build_model, load_model_checkpoint,
                     save_model_checkpoint, train_teacher)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reldistill")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="TOML or JSON config file")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default="runs")

    p_teacher = sub.add_parser("train-teacher", help="supervised teacher training")
    add_common(p_teacher)

    p_distill = sub.add_parser("distill", help="run one distillation job")
    add_common(p_distill)

    p_eval = sub.add_parser("eval", help="evaluate a run or checkpoint")
    p_eval.add_argument("--run-dir", help="distillation run directory")
    p_eval.add_argument("--checkpoint", help="self-describing model checkpoint")
    p_eval.add_argument("--config", help="config for the dataset (defaults to run dir's)")
    p_eval.add_argument("--override", action="append", default=[])

    p_mi = sub.add_parser("mi-oracle", help="bound-vs-true-MI soundness check")
    p_mi.add_argument("--spec", default="gaussian:0.9",
                      help="gaussian:<corr>[:<dim>] or discrete:diagonal")
    p_mi.add_argument("--negatives", type=int, default=64)
    p_mi.add_argument("--steps", type=int, default=600)
    p_mi.add_argument("--seed", type=int, default=0)

    p_rep = sub.add_parser("report", help="aggregate runs into tables/plots")
    p_rep.add_argument("--runs", required=True)
    p_rep.add_argument("--out-dir", default="reports")
    p_rep.add_argument("--format", choices=("csv", "json"), default="csv")
    p_rep.add_argument("--axis", action="append", default=[],
                       help="config axis to sweep-plot (repeatable)")
    return parser


def _load_run_config(args) -> DistillConfig:
    cfg = load_config(args.config)
    if args.override:
        cfg = apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _data_handle(cfg: DistillConfig) -> DatasetHandle:
    d = cfg.data
    return DatasetHandle(name=d.name, root=d.root, num_classes=d.num_classes,
                         subset_fraction=d.subset_fraction, augment=d.augment,
                         seed=d.seed, image_size=d.image_size,
                         train_per_class=d.train_per_class,
                         test_per_class=d.test_per_class, noise=d.noise)


def _cmd_train_teacher(args) -> int:
    cfg = _load_run_config(args)
    train_set, test_set = load_dataset(_data_handle(cfg))
    spec = model_spec_from_config(cfg.teacher, cfg.data.num_classes, train_set)
    import torch
    torch.manual_seed(cfg.seed)
    model = build_model(spec, seed=cfg.seed)
    train_loader = Loader(train_set, cfg.batch_size, shuffle=True, seed=cfg.seed,
                          augment=cfg.data.augment, drop_last=True)
    test_loader = Loader(test_set, 256, shuffle=False)
    ckpt = train_teacher(model, train_loader, test_loader, epochs=cfg.teacher_epochs,
                         lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum,
                         weight_decay=cfg.optimizer.weight_decay,
                         milestones=cfg.lr_milestones, lr_decay=cfg.lr_decay)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "teacher.pt"
    save_model_checkpoint(path, spec, model,
                          meta={"test_top1": ckpt["test_top1"], "seed": cfg.seed})
    print(json.dumps({"teacher_checkpoint": str(path),
                      "test_top1": report.fmt(ckpt["test_top1"])}))
    return 0


def _cmd_distill(args) -> int:
    cfg = _load_run_config(args)
    if not cfg.teacher_checkpoint:
        raise UsageError("config must set teacher_checkpoint (run train-teacher first)")
    if not Path(cfg.teacher_checkpoint).exists():
        raise UsageError(f"teacher checkpoint not found: {cfg.teacher_checkpoint}")
    teacher, _meta = load_model_checkpoint(cfg.teacher_checkpoint)
    train_set, test_set = load_dataset(_data_handle(cfg))
    run_dir = Path(args.out_dir) / f"seed{cfg.seed}-{cfg.data.name}"
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    result = train(cfg, teacher, out_dir=run_dir,
                   train_set=train_set, test_set=test_set)
    print(json.dumps({"run_dir": str(run_dir),
                      "final_top1": report.fmt(result.final_top1),
                      "best_top1": report.fmt(result.best_top1)}))
    return 0


def _cmd_eval(args) -> int:
    import torch
    if args.run_dir:
        run_dir = Path(args.run_dir)
        cfg = load_config(run_dir / "config.json")
        if args.override:
            cfg = apply_overrides(cfg, args.override)
        _train_probe, test_probe = load_dataset(_data_handle(cfg))
        student_spec = model_spec_from_config(cfg.student, cfg.data.num_classes,
                                              test_probe)
        model = build_model(student_spec, seed=0)
        state = torch.load(run_dir / "checkpoints" / "last.pt", weights_only=False)
        model.load_state_dict(state["student"])
    elif args.checkpoint:
        if not args.config:
            raise UsageError("--checkpoint evaluation needs --config for the dataset")
        cfg = load_config(args.config)
        if args.override:
            cfg = apply_overrides(cfg, args.override)
        model, _meta = load_model_checkpoint(args.checkpoint)
    else:
        raise UsageError("eval needs --run-dir or --checkpoint")
    _train_set, test_set = load_dataset(_data_handle(cfg))
    result = evaluate(model, Loader(test_set, 256, shuffle=False))
    print(json.dumps({k: report.fmt(v) if isinstance(v, float) else v
                      for k, v in result.items()}))
    return 0


def _parse_mi_spec(text: str, seed: int) -> mi.SyntheticJointSpec:
    parts = text.split(":")
    if parts[0] == "gaussian":
        corr = float(parts[1]) if len(parts) > 1 else 0.9
        dim = int(parts[2]) if len(parts) > 2 else 8
        return mi.SyntheticJointSpec("gaussian_pair", correlation=corr,
                                     dim=dim, seed=seed)
    if parts[0] == "discrete" and len(parts) > 1 and parts[1] == "diagonal":
        return mi.SyntheticJointSpec("discrete_joint",
                                     table=((0.5, 0.0), (0.0, 0.5)), seed=seed)
    raise UsageError(f"cannot parse MI spec {text!r}")


def _cmd_mi_oracle(args) -> int:
    spec = _parse_mi_spec(args.spec, args.seed)
    result = mi.fit_and_bound(spec, negatives=args.negatives,
                              train_steps=args.steps)
    record = {
        "spec": args.spec,
        "negatives": args.negatives,
        "true_mi": report.fmt(result.true_mi),
        "final_bound": report.fmt(result.final_bound),
        "final_std": report.fmt(result.final_std),
        "sound": result.sound,
    }
    print(json.dumps(record))
    return 0 if result.sound else 1


def _cmd_report(args) -> int:
    results = report.load_results(args.runs)
    if not results:
        raise UsageError(f"no run results under {args.runs}")
    out = report.emit_report(results, args.out_dir, fmt_kind=args.format,
                             axes=tuple(args.axis))
    print(json.dumps({"table": out["table"], "plots": out["plots"]}))
    return 0


_COMMANDS = {
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "eval": _cmd_eval,
    "mi-oracle": _cmd_mi_oracle,
    "report": _cmd_report,
}


def run_command(argv) -> int:
    """Parse and execute one subcommand; returns the process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, SchemaError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


def main() -> None:
    raise SystemExit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
