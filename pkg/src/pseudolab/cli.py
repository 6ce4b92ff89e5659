"""Command-line entry point: dataset synthesis, training, evaluation, attack
sweeps, the EM demo and report rendering."""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .trainer import TrainConfig, config_echo, fit, load_train_config

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    # exit code contract: 1 for usage errors (argparse default is 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(USAGE_ERROR)


def code_version() -> str:
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except OSError:
        sha = ""
    return f"pseudolab {__version__}" + (f" ({sha})" if sha else "")


def write_manifest(run_dir: Path, seed, config, artifacts):
    manifest = {
        "version": code_version(),
        "seed": seed,
        "config": config,
        "output_dir": str(run_dir),
        "artifacts": sorted(str(a) for a in artifacts),
    }
    with open(run_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


def append_artifacts(run_dir: Path, artifacts):
    path = Path(run_dir) / "manifest.json"
    with open(path) as f:
        manifest = json.load(f)
    manifest["artifacts"] = sorted(set(manifest["artifacts"]) | {str(a) for a in artifacts})
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)


def cmd_synth(args):
    from .data import SyntheticSpec, generate_synthetic, save_dataset, split

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise RuntimeError(f"refusing to write into non-empty {out} (use --force)")
    spec = SyntheticSpec(
        image_size=(args.size, args.size),
        num_images=args.num_images,
        noise_std=args.noise_std,
        fg_intensity_range=tuple(args.fg_range),
        bg_intensity_range=tuple(args.bg_range),
        seed=args.seed,
    )
    images, masks = generate_synthetic(spec)
    ds = split(images, masks, args.labelled, args.unlabelled, args.val, args.test, seed=args.seed)
    manifest = save_dataset(out, images, masks, ds, spec)
    fractions = np.asarray([m.mean() for m in masks])
    print(f"wrote {len(images)} images to {out} (fg fraction {fractions.min():.3f}..{fractions.max():.3f})")
    print(f"splits: { {k: len(v) for k, v in ds.ids.items()} }")
    print(f"manifest: {manifest}")


def _apply_overrides(config: TrainConfig, args) -> TrainConfig:
    overrides = {}
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return replace(config, **overrides)


def cmd_train(args):
    from .data import load_dataset

    split = load_dataset(args.data)
    config = load_train_config(args.config) if args.config else None
    if config is None:
        from .presets import get_preset

        config = get_preset(args.preset)
    config = _apply_overrides(config, args)

    tag = args.tag or config.mode
    run_dir = Path(args.out) / f"{time.strftime('%Y%m%d-%H%M%S')}-{tag}"
    run_dir.mkdir(parents=True, exist_ok=False)
    state, csv_path = fit(config, split, run_dir)
    artifacts = [csv_path, run_dir / "final.ckpt", run_dir / "config.txt"]
    if (run_dir / "best.ckpt").exists():
        artifacts.append(run_dir / "best.ckpt")
    write_manifest(run_dir, config.seed, config_echo(config), artifacts)
    print(f"run dir: {run_dir}")
    print(f"steps: {state.step}  best val IoU: {state.best_val_iou:.4f}")


def _load_run_model(run_dir: Path, which: str):
    from .backbone import load_checkpoint

    path = Path(run_dir) / f"{which}.ckpt"
    if not path.exists():
        raise RuntimeError(f"no {which}.ckpt under {run_dir}; train first")
    return load_checkpoint(path)


def cmd_eval(args):
    from .data import load_dataset
    from .evaluation import mc_predict, robustness_sweep

    split = load_dataset(args.data)
    loaded = _load_run_model(Path(args.run), args.checkpoint)
    report = robustness_sweep(
        loaded.model, split.test_images, split.test_masks,
        head=loaded.posterior_head, mc_samples=args.mc_samples, seed=args.seed,
    )
    out_csv = Path(args.run) / "eval.csv"
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerow(["mean_iou", f"{report.mean_iou:.6f}"])
        writer.writerow(["std_iou", f"{report.std_iou:.6f}"])
        writer.writerow(["brier", f"{report.brier:.6f}"])
        writer.writerow(["mc_samples", report.mc_samples])
        for i, value in enumerate(report.per_image_iou):
            writer.writerow([f"iou_image_{i:03d}", f"{value:.6f}"])
    if loaded.posterior_head is not None:
        mc = mc_predict(loaded.model, loaded.posterior_head, split.test_images[:1],
                        n_samples=args.mc_samples, seed=args.seed)
        thresholds = ", ".join(f"{t:.3f}" for t in mc.thresholds)
        print(f"MC thresholds (first image batch): {thresholds}")
    append_artifacts(args.run, [out_csv])
    print(f"checkpoint: {args.checkpoint}  test IoU {report.mean_iou:.4f} ± {report.std_iou:.4f}  "
          f"Brier {report.brier:.4f}")
    print(f"wrote {out_csv}")


def cmd_attack(args):
    from .data import load_dataset
    from .evaluation import robustness_sweep
    from .plots import plot_sweep

    split = load_dataset(args.data)
    loaded = _load_run_model(Path(args.run), args.checkpoint)
    report = robustness_sweep(
        loaded.model, split.test_images, split.test_masks,
        gamma_list=args.gammas, epsilon_list=args.epsilons,
        contrast_range=tuple(args.contrast_range), noise_std=args.ood_noise_std,
        seed=args.seed, head=loaded.posterior_head,
    )
    run_dir = Path(args.run)
    out_csv = run_dir / "sweep.csv"
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sweep", "parameter", "mean_iou"])
        for row in report.rows():
            writer.writerow([row[0], row[1], f"{row[2]:.6f}"])
    artifacts = [out_csv]
    if report.gamma_table:
        artifacts.append(plot_sweep(report.gamma_table, "corruption strength gamma",
                                    run_dir / "sweep_gamma.png"))
    if report.epsilon_table:
        artifacts.append(plot_sweep(report.epsilon_table, "attack strength epsilon",
                                    run_dir / "sweep_epsilon.png"))
    append_artifacts(run_dir, artifacts)
    for kind, param, value in report.rows():
        print(f"{kind:8s} {param:<8g} IoU {value:.4f}")
    print(f"wrote {out_csv}")


def cmd_emdemo(args):
    from .em_oracle import MixtureParams, run_em, sample_mixture, trace_rows
    from .plots import plot_em_trace

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    true_params = MixtureParams([0.5, 0.5], [-1.5, 1.5], [0.7, 0.7])
    data = sample_mixture(args.points, true_params, seed=args.seed)
    init = MixtureParams([0.5, 0.5], [-0.3, 0.4], [1.2, 1.2])
    trace = run_em(data, init, mode=args.mode, threshold=args.threshold, iters=args.iters)
    rows = trace_rows(trace)
    out_csv = out / "em_trace.csv"
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    plot_path = plot_em_trace(rows, out / "em_convergence.png")
    ll = trace.log_likelihoods()
    print(f"{args.mode} EM on {args.points} points, {args.iters} iterations")
    print(f"log-likelihood {ll[0]:.4f} -> {ll[-1]:.4f}  (min step {np.diff(ll).min():+.2e})"
          if len(ll) > 1 else f"log-likelihood {ll[0]:.4f}")
    print(f"wrote {out_csv} and {plot_path}")


def cmd_report(args):
    from .plots import (
        plot_loss_curves,
        plot_sweep,
        plot_threshold_trajectory,
        plot_validation_iou,
    )

    run_dir = Path(args.run)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise RuntimeError(f"no metrics.csv under {run_dir}")
    artifacts = [plot_loss_curves(metrics, run_dir / "loss_curves.png")]
    threshold_plot = plot_threshold_trajectory(metrics, run_dir / "threshold_trajectory.png")
    if threshold_plot:
        artifacts.append(threshold_plot)
    val_plot = plot_validation_iou(metrics, run_dir / "val_iou.png")
    if val_plot:
        artifacts.append(val_plot)
    sweep_csv = run_dir / "sweep.csv"
    if sweep_csv.exists():
        tables = {"gamma": {}, "epsilon": {}}
        with open(sweep_csv, newline="") as f:
            for row in csv.DictReader(f):
                if row["sweep"] in tables:
                    tables[row["sweep"]][float(row["parameter"])] = float(row["mean_iou"])
        for kind, xlabel in (("gamma", "corruption strength gamma"),
                             ("epsilon", "attack strength epsilon")):
            if tables[kind]:
                artifacts.append(plot_sweep(tables[kind], xlabel, run_dir / f"sweep_{kind}.png"))
    if (run_dir / "manifest.json").exists():
        append_artifacts(run_dir, artifacts)
    for path in artifacts:
        print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudolab", description=__doc__)
    parser.add_argument("--version", action="version", version=code_version())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-images", type=int, default=108)
    p.add_argument("--noise-std", type=float, default=0.2)
    p.add_argument("--fg-range", type=float, nargs=2, default=[0.5, 0.85])
    p.add_argument("--bg-range", type=float, nargs=2, default=[0.2, 0.48])
    p.add_argument("--labelled", type=int, default=4)
    p.add_argument("--unlabelled", type=int, default=64)
    p.add_argument("--val", type=int, default=8)
    p.add_argument("--test", type=int, default=32)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--tag", default=None)
    p.add_argument("--preset", default="desk")
    p.add_argument("--config", default=None, help="flat key=value config file (overrides preset)")
    p.add_argument("--mode", choices=["supervised", "segpl", "segpl_vi"], default=None)
    p.add_argument("--labelled-bs", dest="labelled_bs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--ratio", type=int, default=None)
    p.add_argument("--warmup-fraction", dest="warmup_fraction", type=float, default=None)
    p.add_argument("--prior-mean", dest="prior_mean", type=float, default=None)
    p.add_argument("--prior-std", dest="prior_std", type=float, default=None)
    p.add_argument("--kl-weight", dest="kl_weight", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--base-width", dest="base_width", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on the test split")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", choices=["best", "final"], default="best")
    p.add_argument("--mc-samples", dest="mc_samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="corruption and FGSM robustness sweeps")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", choices=["best", "final"], default="best")
    p.add_argument("--gammas", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--epsilons", type=float, nargs="+", default=[0.0, 2e-3, 5e-3, 1e-2])
    p.add_argument("--contrast-range", type=float, nargs=2, default=[0.4, 2.2])
    p.add_argument("--ood-noise-std", dest="ood_noise_std", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("emdemo", help="tractable mixture EM convergence demo")
    p.add_argument("--out", default="emdemo")
    p.add_argument("--mode", choices=["soft", "hard"], default="soft")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_emdemo)

    p = sub.add_parser("report", help="render figures for an existing run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        args.func(args)
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
