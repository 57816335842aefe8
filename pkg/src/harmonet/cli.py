"""Command line: ``harmonet {gen,train,eval,perturb-eval,analyze}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, metrics, plots
from .autodiff import NonFiniteError
from .pipeline import (CheckpointError, TrainConfig, TrainingError, load_checkpoint, robustness_table,
                       save_checkpoint, spectral_comparison, train_phase1, train_phase2)
from .synthdata import DataError, PerturbationConfig, gen_dataset, load_dataset, robustness_grid

log = logging.getLogger("harmonet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_clock_seconds: Optional[float] = None

    def write(self, out_dir: Path) -> Path:
        d = {k: v for k, v in vars(self).items() if v is not None}
        path = out_dir / RUN_MANIFEST
        path.write_text(json.dumps(d, indent=2, sort_keys=True, default=str) + "\n")
        return path


def resolve_seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get("HZ_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"HZ_SEED must be an integer, got {env!r}")


def _config_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def _out_dir(path: str, force: bool = True) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(data: str, split: str):
    ds = load_dataset(data)
    if split not in ds.splits:
        raise DataError(f"dataset {data} has no {split!r} split")
    return ds, ds[split]


# -- commands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    if min(args.train, args.val, args.test) < 1:
        raise UsageError("--train, --val and --test must each be >= 1")
    if not 1 <= args.raters <= 4:
        raise UsageError(f"--raters must lie in 1..4, got {args.raters}")
    if args.size < 16 or args.size % 8:
        raise UsageError(f"--size must be a multiple of 8 and at least 16, got {args.size}")
    gen_dataset(out, args.train, args.val, args.test, args.raters, seed, args.size, args.held_out_domain)
    # no wall clock here: regenerating with the same command must give a byte-identical tree
    RunManifest("gen", _config_echo(args), seed, outputs=sorted(p.name for p in out.iterdir())
                + [RUN_MANIFEST]).write(out)
    print(f"wrote {args.train + args.val + args.test} samples to {out}")
    return EXIT_OK


def _train_config(args, seed: int) -> TrainConfig:
    base = TrainConfig() if args.long_schedule else TrainConfig.desk()
    over = {"seed": seed, "harmonizer": not args.no_harmonizer, "ged": not args.no_ged}
    for key, attr in (("epochs1", "phase1_epochs"), ("epochs2", "phase2_epochs"), ("lr1", "lr_phase1"),
                      ("lr2", "lr_phase2"), ("batch_size", "batch_size"), ("k_train", "k_train")):
        v = getattr(args, key)
        if v is not None:
            over[attr] = v
    try:
        return TrainConfig.from_dict({**base.to_dict(), **over})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _write_loss_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    metrics.write_csv(path, columns, [{c: r.get(c, "") for c in columns} for r in rows])


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    cfg = _train_config(args, seed)
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    ds = load_dataset(args.data)
    train = ds["train"]
    outputs = []
    ckpt = None

    if args.phase in ("1", "both"):
        try:
            ckpt = train_phase1(train, cfg, on_epoch=_epoch_logger("phase1", args.every))
        except TrainingError as exc:
            if exc.checkpoint is not None:
                save_checkpoint(exc.checkpoint, out / "phase1_last_good.hzck")
            raise
        save_checkpoint(ckpt, out / "phase1.hzck")
        cols = ["epoch", "seg", "kl", "harm"] + (["ged"] if cfg.ged else []) + ["total"]
        _write_loss_csv(out / "loss_phase1.csv", ckpt.history, cols)
        outputs += ["phase1.hzck", "loss_phase1.csv"]
    if args.phase in ("2", "both"):
        if ckpt is None:
            src = Path(args.checkpoint) if args.checkpoint else out / "phase1.hzck"
            if not src.exists():
                raise DataError(f"Phase 2 needs a Phase-1 checkpoint; {src} not found (use --checkpoint)")
            ckpt = load_checkpoint(src)
        try:
            ckpt2 = train_phase2(ckpt, train, cfg, on_epoch=_epoch_logger("phase2", args.every))
        except TrainingError as exc:
            if exc.checkpoint is not None:
                save_checkpoint(exc.checkpoint, out / "phase2_last_good.hzck")
            raise
        save_checkpoint(ckpt2, out / "phase2.hzck")
        rows = [r for r in ckpt2.history if r.get("phase") == 2]
        R = train.masks.shape[1]
        flat = [{"epoch": r["epoch"], "loss": r["loss"],
                 **{f"dice_r{i}": (r["dice"][i] if "dice" in r else "") for i in range(R)}} for r in rows]
        _write_loss_csv(out / "loss_phase2.csv", flat, ["epoch", "loss"] + [f"dice_r{i}" for i in range(R)])
        outputs += ["phase2.hzck", "loss_phase2.csv"]
    RunManifest("train", {**_config_echo(args), "train_config": cfg.to_dict()}, seed,
                inputs={"data": str(args.data), "checkpoint": args.checkpoint},
                outputs=outputs, wall_clock_seconds=time.perf_counter() - t0).write(out)
    print(f"training done: {', '.join(outputs)} in {out}")
    return EXIT_OK


def _epoch_logger(tag: str, every: int):
    def hook(epoch: int, row: dict) -> None:
        if every > 1 and epoch % every:
            return
        log.info("%s epoch %d %s", tag, epoch, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
    return hook


def _parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--sweep-k expects comma-separated integers, got {text!r}")
    if not ks or min(ks) < 1:
        raise UsageError("--sweep-k values must be >= 1")
    return ks


def cmd_eval(args) -> int:
    seed = resolve_seed(args.seed)
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    t0 = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    ds, split = _load_split(args.data, args.split)
    out = _out_dir(args.out)
    model = ckpt.model()
    report = metrics.evaluate(model, split.images, split.masks, args.k, seed, split.domains,
                              personalized=ckpt.phase == "phase2")
    report.write(out / "metrics.json", out / "cases.csv")
    outputs = ["metrics.json", "cases.csv"]
    if args.sweep_k:
        rows = metrics.ged_vs_samples(model, split.images, split.masks, _parse_k_list(args.sweep_k), seed)
        metrics.write_csv(out / "ged_vs_k.csv", ["K", "mean", "std", "sem", "n"], rows)
        plots.line_plot(out / "ged_vs_k.svg", [r["K"] for r in rows], {"GED": [r["mean"] for r in rows]},
                        "GED vs number of samples", "K", "GED")
        outputs += ["ged_vs_k.csv", "ged_vs_k.svg"]
    RunManifest("eval", _config_echo(args), seed, inputs={"checkpoint": args.checkpoint, "data": args.data},
                outputs=outputs, wall_clock_seconds=time.perf_counter() - t0).write(out)
    print(f"GED {report.ged:.4f}  Dice_soft {report.dice_soft:.4f}  Dice_mean {report.dice_mean:.4f}")
    return EXIT_OK


ROBUST_COLUMNS = ["model", "kind", "magnitude", "clean_dsc", "perturbed_dsc", "abs_delta"]


def cmd_perturb_eval(args) -> int:
    seed = resolve_seed(args.seed)
    t0 = time.perf_counter()
    ds, split = _load_split(args.data, args.split)
    out = _out_dir(args.out)
    configs = robustness_grid()
    models = [("primary", args.checkpoint)] + ([("compare", args.compare)] if args.compare else [])
    seeds = [seed + i for i in range(args.seeds)]
    rows = []
    for tag, path in models:
        model = load_checkpoint(path).model()
        if args.with_identity:
            ident = robustness_table(model, split.images, split.masks,
                                     [PerturbationConfig("gaussian_noise", 0.0)], seeds)[0]
            ident.update(kind="identity")
            rows.append({"model": tag, **ident})
        rows += [{"model": tag, **r} for r in robustness_table(model, split.images, split.masks, configs, seeds)]
    metrics.write_csv(out / "robustness.csv", ROBUST_COLUMNS, rows)
    RunManifest("perturb-eval", _config_echo(args), seed,
                inputs={"checkpoint": args.checkpoint, "compare": args.compare, "data": args.data},
                outputs=["robustness.csv"], wall_clock_seconds=time.perf_counter() - t0).write(out)
    for r in rows:
        print(f"{r['model']:8s} {r['kind']:15s} {r['magnitude']:<5g} |delta| {r['abs_delta']:.4f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    seed = resolve_seed(args.seed)
    t0 = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    ds, split = _load_split(args.data, args.split)
    out = _out_dir(args.out)
    model = ckpt.model()
    R = split.masks.shape[1]
    report = metrics.evaluate(model, split.images, split.masks, args.k, seed, split.domains,
                              personalized=ckpt.phase == "phase2")
    outputs = []

    def csv(name, cols, rows):
        metrics.write_csv(out / name, cols, rows)
        outputs.append(name)

    def svg(name, fn, *a):
        fn(out / name, *a)
        outputs.append(name)

    classes = [{"class": c, **report.entropy_by_class[c]} for c in metrics.CORRECTNESS_CLASSES]
    csv("entropy_by_correctness.csv", ["class", "count", "median", "mean"], classes)
    svg("entropy_by_correctness.svg", plots.bar_plot, [r["class"] for r in classes],
        [r["median"] for r in classes], "Median entropy by correctness", "entropy (bits)")

    # per-case scatter: mean entropy of the predictive mean vs consensus Dice
    rng = np.random.default_rng([seed, 1])
    ent = [float(metrics.entropy_map(model.sample_probs(img, args.k, rng)[0]).mean()) for img in split.images]
    scatter = [{"case": c["case"], "mean_entropy": e, "dice_consensus": c["dice_consensus"]}
               for c, e in zip(report.cases, ent)]
    csv("entropy_scatter.csv", ["case", "mean_entropy", "dice_consensus"], scatter)
    svg("entropy_scatter.svg", plots.scatter_plot, ent, [c["dice_consensus"] for c in report.cases],
        "Uncertainty vs accuracy", "mean entropy", "consensus Dice")

    if R >= 2:
        regimes = [{"regime": r, **report.entropy_by_regime[r]} for r in metrics.AGREEMENT_REGIMES]
        csv("entropy_by_agreement.csv", ["regime", "count", "median", "mean"], regimes)
        svg("entropy_by_agreement.svg", plots.bar_plot, [r["regime"] for r in regimes],
            [r["median"] for r in regimes], "Median entropy by rater agreement", "entropy (bits)")

    if report.size_bins:
        csv("size_bins.csv", ["bin", "count", "area_min", "area_max", "mean_dice"], report.size_bins)
        svg("size_bins.svg", plots.bar_plot, [b["bin"] for b in report.size_bins],
            [b["mean_dice"] for b in report.size_bins], "Dice by lesion size", "consensus Dice")

    calib = [{"rater": str(r), "ece": report.ece_per_rater[r], "brier": report.brier_per_rater[r]}
             for r in range(R)]
    calib.append({"rater": "mean", "ece": float(np.mean(report.ece_per_rater)),
                  "brier": float(np.mean(report.brier_per_rater))})
    csv("calibration.csv", ["rater", "ece", "brier"], calib)

    spec = spectral_comparison(model, split.images, seed)
    n_bins = len(spec["without_personalizer"])
    csv("spectrum.csv", ["bin", "with_personalizer", "without_personalizer"],
        [{"bin": b, "with_personalizer": float(spec["with_personalizer"][b]),
          "without_personalizer": float(spec["without_personalizer"][b])} for b in range(n_bins)])
    svg("spectrum.svg", plots.line_plot, list(range(n_bins)),
        {"with personalizer": spec["with_personalizer"], "without": spec["without_personalizer"]},
        "Final decoder feature spectrum", "frequency bin", "log(1 + |F|)")

    n_show = min(args.grid_cases, len(split))
    samples = model.sample_probs(split.images[:n_show], args.grid_samples, np.random.default_rng([seed, 2]))
    rows = [[split.images[i, 0]] + list(split.masks[i]) + list(samples[i]) for i in range(n_show)]
    plots.write_pgm(out / "sample_grid.pgm", plots.tile(rows))
    outputs.append("sample_grid.pgm")

    RunManifest("analyze", _config_echo(args), seed, inputs={"checkpoint": args.checkpoint, "data": args.data},
                outputs=outputs, wall_clock_seconds=time.perf_counter() - t0).write(out)
    print(f"wrote {len(outputs)} analysis files to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="harmonet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic multi-rater dataset")
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--val", type=int, default=40)
    g.add_argument("--test", type=int, default=80)
    g.add_argument("--raters", type=int, default=4)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--held-out-domain", type=int, choices=(0, 1, 2), default=None)
    g.add_argument("--seed", type=int, default=None, help="defaults to $HZ_SEED, then 0")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--phase", choices=("1", "2", "both"), default="both")
    t.add_argument("--checkpoint", help="Phase-1 checkpoint for --phase 2 (default OUT/phase1.hzck)")
    t.add_argument("--long-schedule", action="store_true",
                   help="100 + 150 epochs at learning rates 1e-4 / 5e-5 instead of the desk schedule")
    t.add_argument("--epochs1", type=int)
    t.add_argument("--epochs2", type=int)
    t.add_argument("--lr1", type=float)
    t.add_argument("--lr2", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--k-train", type=int)
    t.add_argument("--every", type=int, default=1, help="with -v, log every N epochs")
    t.add_argument("--no-harmonizer", action="store_true")
    t.add_argument("--no-ged", action="store_true")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "metric suite on a split"),
                               ("perturb-eval", cmd_perturb_eval, "robustness under image perturbations"),
                               ("analyze", cmd_analyze, "uncertainty, calibration and spectral analyses")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--split", default="test", choices=("train", "val", "test"))
        e.add_argument("--seed", type=int, default=None)
        if name in ("eval", "analyze"):
            e.add_argument("--k", type=int, default=16, help="prior samples per image")
        if name == "eval":
            e.add_argument("--sweep-k", help="comma-separated sample counts, e.g. 1,4,8,16,32")
        if name == "perturb-eval":
            e.add_argument("--compare", help="second checkpoint (e.g. harmonizer off)")
            e.add_argument("--seeds", type=int, default=3, help="noise seeds per perturbation")
            e.add_argument("--with-identity", action="store_true", help="add an unperturbed reference row")
        if name == "analyze":
            e.add_argument("--grid-cases", type=int, default=4)
            e.add_argument("--grid-samples", type=int, default=6)
        e.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"harmonet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"harmonet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteError, FloatingPointError) as exc:
        print(f"harmonet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
