"""Command-line entry points: run, nqm, report, gen-data, sweep-modes."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import cmd, nqm, pipeline, report, toymodel, trainer
from .paramstore import TrajectorySnapshotLog, record_snapshot
from .pipeline import RunConfig, StageError
from .seeds import child_seed
from .trainer import TrainHooks


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Config from JSON (a raw config or a run manifest), with CLI overrides."""
    data: dict = {}
    if path:
        with open(path) as fh:
            loaded = json.load(fh)
        data = loaded.get("config", loaded) if isinstance(loaded, dict) else loaded
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file or a run manifest")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="global seed")
    p.add_argument("--workers", type=int, default=None, help="worker threads where supported")
    p.add_argument("--method", default=None, help="training method")
    p.add_argument("--plot", action="store_true", help="also render SVG figures")


def cmd_run(args) -> int:
    config = load_config(args.config, {"seed": args.seed, "workers": args.workers,
                                       "method": args.method})
    summary = pipeline.run_experiment(config, args.out, plot=args.plot)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    text = report.render_report(args.run_dir, plot=args.plot)
    print(text, end="")
    return 0


def cmd_nqm(args) -> int:
    config = nqm.NQMConfig(
        a=np.logspace(np.log10(args.a_min), np.log10(args.a_max), args.dim),
        sigma2=np.full(args.dim, args.sigma2),
        gamma=args.gamma,
        alpha=args.alpha,
        interval=args.interval,
        embed_fraction=args.embed_fraction,
        k_values=np.array([args.k]),
        steps=args.steps,
        num_seeds=args.num_seeds,
    )
    methods = args.methods.split(",")
    results = {}
    for method in methods:
        results[method] = nqm.simulate(config, method, seed=args.seed or 0,
                                       workers=args.workers or 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "nqm_variance.csv"
    nqm.write_variance_csv(path, config, results)
    for method in methods:
        res = results[method]
        rel = np.abs(res.empirical_variance - res.closedform_variance) / res.closedform_variance
        print(f"{method}: max relative variance error {rel.max():.4f}, "
              f"loss emp={res.empirical_loss:.6f} closed={res.closedform_loss:.6f}")
    print(f"wrote {path}")
    return 0


def cmd_gen_data(args) -> int:
    batch = toymodel.generate_batch(args.batch_size, args.input_dim, args.seed or 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(args.input_dim)])
        for row in batch.inputs:
            w.writerow([repr(float(v)) for v in row])
    print(f"wrote {out}")
    return 0


def cmd_sweep_modes(args) -> int:
    """Head-stage training followed by a full (no early stop) mode-count sweep."""
    config = load_config(args.config, {"seed": args.seed, "workers": args.workers})
    model_cfg = config.model_config()
    train_cfg = config.train_config()
    train_cfg.epochs = config.head_epochs
    traj = TrajectorySnapshotLog()

    from . import sma as sma_mod

    params0 = toymodel.init_params(model_cfg, child_seed(config.seed, "init"))
    sma_state = sma_mod.sma_init(params0, config.sma_alpha, config.sma_interval)
    hooks = TrainHooks(
        post_step=lambda p, e, s: sma_mod.sma_maybe_update(sma_state, p),
        post_epoch=lambda p, e: record_snapshot(traj, p, e),
    )
    _, params = trainer.train(model_cfg, train_cfg, hooks, initial_params=params0)
    trajectories = traj.param_trajectories()
    samples = toymodel.generate_batch(config.sensitivity_samples, config.input_dim,
                                      child_seed(config.seed, "sens-samples"))
    rows = []
    for m in config.mode_candidates:
        decomp = cmd.decompose(trajectories, m, config.sample_factor * m,
                               child_seed(config.seed, "cmd-sample", m))
        loss = cmd.instant_rd_loss(decomp, params, model_cfg, samples)
        rows.append((m, config.sample_factor * m, loss))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "mode_sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "s", "instant_loss"])
        for m, s, loss in rows:
            w.writerow([m, s, repr(loss)])
    for m, s, loss in rows:
        print(f"M={m} S={s} instant_loss={loss:.6f}")
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modetrain",
        description="Mode-embedding training acceleration on a toy rate-distortion codec",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a full training run")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="summarize a finished run")
    p_rep.add_argument("run_dir", help="run directory with metrics.csv and manifest.json")
    p_rep.add_argument("--plot", action="store_true", help="also render loss_curve.svg")
    p_rep.set_defaults(func=cmd_report)

    p_nqm = sub.add_parser("nqm", help="noisy-quadratic simulation vs closed forms")
    p_nqm.add_argument("--out", default="runs/nqm")
    p_nqm.add_argument("--seed", type=int, default=0)
    p_nqm.add_argument("--workers", type=int, default=1)
    p_nqm.add_argument("--dim", type=int, default=10)
    p_nqm.add_argument("--a-min", type=float, default=0.1)
    p_nqm.add_argument("--a-max", type=float, default=1.0)
    p_nqm.add_argument("--sigma2", type=float, default=1.0)
    p_nqm.add_argument("--gamma", type=float, default=0.1)
    p_nqm.add_argument("--alpha", type=float, default=0.8)
    p_nqm.add_argument("--interval", type=int, default=5)
    p_nqm.add_argument("--embed-fraction", type=float, default=0.5)
    p_nqm.add_argument("--k", type=float, default=float(np.sqrt(0.9)))
    p_nqm.add_argument("--steps", type=int, default=200_000)
    p_nqm.add_argument("--num-seeds", type=int, default=64)
    p_nqm.add_argument("--methods", default="sgd,sma,proposed")
    p_nqm.set_defaults(func=cmd_nqm)

    p_gen = sub.add_parser("gen-data", help="write a synthetic batch as CSV")
    p_gen.add_argument("--out", default="runs/batch.csv")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--batch-size", type=int, default=16)
    p_gen.add_argument("--input-dim", type=int, default=64)
    p_gen.set_defaults(func=cmd_gen_data)

    p_sweep = sub.add_parser("sweep-modes", help="standalone mode-count sweep after head training")
    _add_common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep_modes)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, FloatingPointError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
