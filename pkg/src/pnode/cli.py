"""Command-line interface: dataset generation, training, evaluation, the
mode-comparison matrix, and the stabilization-gain sweep.

All outputs are the documented text formats (dataset CSV, checkpoint,
loss-history CSV, eval-report JSON, comparison CSV) written under
--out-dir, and are byte-reproducible for fixed seeds as long as timing is
not requested.
"""

import argparse
import json
import sys
from pathlib import Path

from .data import generate_dataset, load_dataset, save_dataset
from .metrics import evaluate, report_to_json, write_trajectory_csv
from .neuralmodel import load_checkpoint, model_for_system, save_checkpoint
from .systems import SYSTEM_NAMES, make_system
from .training import (
    MODES,
    TrainConfig,
    train_adam,
    train_lbfgs,
    write_loss_history,
)

CONFIG_FORMAT = "pnode-train-config"
DEFAULT_GAMMAS = (0.5, 2.0, 10.0)


class CliError(RuntimeError):
    pass


def load_train_config(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CONFIG_FORMAT:
        raise CliError(f"{path}: expected format={CONFIG_FORMAT!r}")
    return payload


def build_train_config(args, overrides):
    adam = overrides.get("adam", {})
    lbfgs = overrides.get("lbfgs", {})
    return TrainConfig(
        mode=overrides.get("mode", getattr(args, "mode", "pnode_fast")),
        gamma=overrides.get("gamma", getattr(args, "gamma", 0.5)),
        soft_weight=overrides.get("soft_weight", 1.0),
        h=overrides.get("h", args.h),
        lr=adam.get("lr", 1e-3),
        beta1=adam.get("beta1", 0.9),
        beta2=adam.get("beta2", 0.999),
        eps=adam.get("eps", 1e-8),
        epochs=adam.get("epochs", 200),
        batch_size=adam.get("batch_size", 32),
        window=adam.get("window", 10),
        stride=adam.get("stride", 5),
        finetune_full=overrides.get("finetune_full", True),
        lbfgs_history=lbfgs.get("history", 10),
        lbfgs_max_iters=lbfgs.get("max_iters", 200),
        lbfgs_c1=lbfgs.get("c1", 1e-4),
        lbfgs_max_backtracks=lbfgs.get("max_backtracks", 40),
        seed=overrides.get("seed", args.seed),
    )


def _dataset_path(out_dir, system, seed):
    return Path(out_dir) / f"dataset_{system}_seed{seed}.csv"


def _ensure_dataset(args, overrides, system):
    n = overrides.get("n_train", args.n)
    seed = overrides.get("seed", args.seed)
    path = getattr(args, "dataset", None)
    if path:
        return load_dataset(path, system=system)
    return generate_dataset(system, n, seed, train_end=overrides.get("train_end"))


def cmd_generate(args):
    system = make_system(args.system)
    dataset = generate_dataset(system, args.n, args.seed,
                               train_end=args.horizon if args.horizon > 0 else None)
    out = _dataset_path(args.out_dir, args.system, args.seed)
    save_dataset(dataset, out)
    print(out)
    return 0


def _train_one(system, dataset, cfg, hidden, mode):
    model = model_for_system(system, hidden=hidden, seed=cfg.seed,
                             meta={"mode": mode})
    model, history = train_adam(model, dataset, cfg)
    if cfg.finetune_full and cfg.lbfgs_max_iters > 0:
        model, tail = train_lbfgs(model, dataset, cfg)
        offset = len(history)
        for row in tail:
            row = dict(row)
            row["epoch"] += offset
            history.append(row)
    return model, history


def cmd_train(args):
    overrides = load_train_config(args.config) if args.config else {}
    system = make_system(overrides.get("system", args.system))
    cfg = build_train_config(args, overrides)
    dataset = _ensure_dataset(args, overrides, system)
    hidden = tuple(overrides.get("hidden", (64, 64)))
    model, history = _train_one(system, dataset, cfg, hidden, cfg.mode)
    out_dir = Path(args.out_dir)
    ckpt = out_dir / f"checkpoint_{system.name}_{cfg.mode}.txt"
    save_checkpoint(model, ckpt)
    write_loss_history(history, out_dir / f"loss_{system.name}_{cfg.mode}.csv")
    print(ckpt)
    return 0


def cmd_evaluate(args):
    overrides = load_train_config(args.config) if args.config else {}
    system = make_system(overrides.get("system", args.system))
    model = load_checkpoint(args.checkpoint)
    if model.dim != system.dim:
        raise CliError(
            f"checkpoint dimension {model.dim} does not match system "
            f"{system.name} (dim {system.dim})"
        )
    mode = overrides.get("mode", args.mode)
    horizon = args.horizon if args.horizon > 0 else system.inference_end
    report, trajectories = evaluate(
        model, system, n_eval=args.n, horizon=horizon, mode=mode,
        seed=overrides.get("seed", args.seed), h=args.h, gamma=args.gamma,
        timing=args.timing, return_trajectories=True,
    )
    out_dir = Path(args.out_dir)
    report_path = out_dir / f"report_{system.name}_{mode}.json"
    report_path.write_text(report_to_json(report))
    write_trajectory_csv(out_dir / f"trajectories_{system.name}_{mode}.csv",
                         trajectories)
    truth_rows = [(truth, truth, c) for truth, _, c in trajectories]
    write_trajectory_csv(out_dir / f"trajectories_{system.name}_reference.csv",
                         truth_rows)
    print(report_path)
    return 0


COMPARE_COLUMNS = [
    "system", "mode", "gamma", "train_end", "horizon",
    "mean_rel_state_error", "std_rel_state_error",
    "mean_sq_constraint_error", "std_sq_constraint_error",
    "inference_seconds_per_batch", "diverged",
]


def _report_row(report, train_end):
    def fmt(x):
        return "" if x is None else repr(float(x))

    return [
        report.system, report.mode,
        fmt(report.gamma), repr(float(train_end)), repr(float(report.horizon)),
        fmt(report.mean_rel_state_error), fmt(report.std_rel_state_error),
        fmt(report.mean_sq_constraint_error), fmt(report.std_sq_constraint_error),
        fmt(report.inference_seconds_per_batch), str(int(report.diverged)),
    ]


def write_compare_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(COMPARE_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def read_compare_csv(path):
    import csv as _csv
    with open(path, newline="") as fh:
        return list(_csv.DictReader(fh))


def cmd_compare(args):
    overrides = load_train_config(args.config) if args.config else {}
    system = make_system(overrides.get("system", args.system))
    dataset = _ensure_dataset(args, overrides, system)
    hidden = tuple(overrides.get("hidden", (64, 64)))
    horizon = args.horizon if args.horizon > 0 else system.inference_end
    rows = []
    for mode in MODES:
        cfg = build_train_config(args, {**overrides, "mode": mode})
        model, _ = _train_one(system, dataset, cfg, hidden, mode)
        report = evaluate(model, system, n_eval=args.n_eval, horizon=horizon,
                          mode=mode, seed=cfg.seed, h=cfg.h, gamma=cfg.gamma,
                          timing=args.timing)
        rows.append(_report_row(report, dataset.trajectories[0].times[-1]))
        ckpt = Path(args.out_dir) / f"checkpoint_{system.name}_{mode}.txt"
        save_checkpoint(model, ckpt)
    out = Path(args.out_dir) / f"compare_{system.name}.csv"
    write_compare_csv(out, rows)
    print(out)
    return 0


def cmd_sweep_gamma(args):
    overrides = load_train_config(args.config) if args.config else {}
    system = make_system(overrides.get("system", args.system))
    dataset = _ensure_dataset(args, overrides, system)
    hidden = tuple(overrides.get("hidden", (64, 64)))
    horizon = args.horizon if args.horizon > 0 else system.inference_end
    rows = []
    for gamma in args.gammas:
        cfg = build_train_config(args, {**overrides, "mode": "snode", "gamma": gamma})
        model, _ = _train_one(system, dataset, cfg, hidden, "snode")
        report = evaluate(model, system, n_eval=args.n_eval, horizon=horizon,
                          mode="snode", seed=cfg.seed, h=cfg.h, gamma=gamma,
                          timing=args.timing)
        rows.append(_report_row(report, dataset.trajectories[0].times[-1]))
    out = Path(args.out_dir) / f"sweep_gamma_{system.name}.csv"
    write_compare_csv(out, rows)
    print(out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pnode",
        description="Constraint-projected neural ODE benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, horizon_default=-1.0):
        p.add_argument("--system", choices=SYSTEM_NAMES, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--h", type=float, default=0.01)
        p.add_argument("--horizon", type=float, default=horizon_default,
                       help="negative means the system default")
        p.add_argument("--config", default=None, help="JSON train-config file")
        p.add_argument("--out-dir", default=".", type=Path)

    p = sub.add_parser("generate", help="simulate and store a training dataset")
    common(p)
    p.add_argument("--n", type=int, default=16, help="number of trajectories")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train one model; writes checkpoint + loss CSV")
    common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--mode", choices=MODES, default="pnode_fast")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--dataset", default=None, help="reuse a generated dataset file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on fresh initial conditions")
    common(p)
    p.add_argument("--n", type=int, default=8, help="evaluation trajectories")
    p.add_argument("--mode", choices=MODES, default="pnode_fast")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--timing", action="store_true",
                   help="measure seconds per batch (breaks byte reproducibility)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", help="train and evaluate every mode on one system")
    common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--n-eval", type=int, default=8)
    p.add_argument("--mode", choices=MODES, default="pnode_fast")  # unused, kept uniform
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--dataset", default=None)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("sweep-gamma", help="stabilized-mode gain sweep")
    common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--n-eval", type=int, default=8)
    p.add_argument("--gamma", type=float, default=0.5)  # unused, kept uniform
    p.add_argument("--gammas", type=float, nargs="+", default=list(DEFAULT_GAMMAS))
    p.add_argument("--dataset", default=None)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(fn=cmd_sweep_gamma)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        return args.fn(args)
    except (CliError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
