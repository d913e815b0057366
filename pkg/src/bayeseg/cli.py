"""Command-line entry point: synth, train, infer, degrade, eval, sweep.

Options resolve in three layers: built-in defaults, then a JSON config file
(--config, unknown keys rejected), then explicit flags. Every run writes a
resolved_config.json snapshot into its output directory that is sufficient
to replay it. Exit codes: 0 success, 1 usage/config error, 2 runtime or
data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as dio
from . import plots
from .degrade import DegradationSpec, apply_degradation
from .metrics import degradation_report
from .rng import RngStream
from .tensor import ShapeError
from .training import TrainConfig, TrainingDivergedError, evaluate_frozen, load_state, train
from .uncertainty import McConfig, decompose_uncertainty, mc_predict, summarize, t_sweep
from .unet import ArchConfig, build_model


class UsageError(ValueError):
    """Bad flags or config contents; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


# ---- config resolution -------------------------------------------------------

SYNTH_DEFAULTS = {"n": 200, "size": 64, "seed": 0,
                  "train_frac": 0.70, "val_frac": 0.10, "test_frac": 0.20}
TRAIN_DEFAULTS = {"epochs": 15, "batch_size": 8, "lr": 1e-3, "seed": 0,
                  "base_filters": 8, "depth": 4, "attention": "bottleneck_only",
                  "beta0": 1.0, "kl_weighting": "uniform", "likelihood_samples": 10,
                  "plateau_patience": 10, "plateau_factor": 0.5,
                  # architecture knobs reachable through --config only
                  "variational_decoder": True, "deterministic_tail_convs": 2,
                  "groupnorm_group_size": 32, "cbam_reduction": 8,
                  "sigma_init": 0.05, "prior_std": 1.0}
INFER_DEFAULTS = {"T": 20, "seed": 0, "threshold": 0.5,
                  "variance_space": "probability", "labels": "paper"}
DEGRADE_DEFAULTS = {"seed": 0, "blur_sigma": None, "noise_sigma": None,
                    "brightness_delta": None, "contrast_gain": None}
EVAL_DEFAULTS = {"T": 20, "seed": 0, "threshold": 0.5, "limit": None,
                 "variance_space": "probability", "labels": "paper", "split": "test"}
SWEEP_DEFAULTS = {"T_values": "5,10,15,20,25,30", "repeats": 20, "images": 4,
                  "seed": 0, "variance_space": "probability", "labels": "paper",
                  "split": "val"}


def _resolve(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid JSON in {path}: {exc}") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _write_snapshot(out_dir: Path, command: str, cfg: dict, extra: dict = None):
    snapshot = {"command": command, **cfg}
    if extra:
        snapshot.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _load_image01(path) -> np.ndarray:
    return dio.read_image(path).astype(np.float64) / 255.0


def _heatmap_pgm(path, arr: np.ndarray) -> dict:
    """Min-max scaled 8-bit rendering; returns the scaling for the sidecar."""
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    dio.write_pgm(path, scaled)
    return {"min": lo, "max": hi}


# ---- command handlers -------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve(args, SYNTH_DEFAULTS)
    if cfg["n"] < 1:
        raise UsageError(f"--n must be >= 1, got {cfg['n']}")
    if cfg["size"] % 16 != 0:
        raise UsageError(f"--size must be divisible by 16 (depth-4 network), got {cfg['size']}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise dio.DataError(f"output directory {out} is not empty (use --force)")
    rng = RngStream(cfg["seed"])
    samples = dio.gen_synthetic(cfg["n"], cfg["size"], rng)
    spec = dio.SplitSpec(train=cfg["train_frac"], val=cfg["val_frac"],
                         test=cfg["test_frac"], seed=cfg["seed"])
    train_s, val_s, test_s = dio.split(samples, spec)
    dio.save_dataset(out, {"train": train_s, "val": val_s, "test": test_s})
    _write_snapshot(out, "synth", cfg)
    print(f"wrote {len(train_s)}/{len(val_s)}/{len(test_s)} train/val/test samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    if cfg["epochs"] < 1:
        raise UsageError(f"--epochs must be >= 1, got {cfg['epochs']}")
    splits = dio.load_dataset(args.data)
    train_set = splits.get("train", [])
    val_set = splits.get("val", [])
    if not train_set:
        raise dio.DataError(f"dataset at {args.data} has no training split")
    size = train_set[0].image.shape[-1]
    arch = ArchConfig(base_filters=cfg["base_filters"], depth=cfg["depth"],
                      attention_placement=cfg["attention"], input_size=size,
                      variational_decoder=cfg["variational_decoder"],
                      deterministic_tail_convs=cfg["deterministic_tail_convs"],
                      groupnorm_group_size=cfg["groupnorm_group_size"],
                      cbam_reduction=cfg["cbam_reduction"],
                      sigma_init=cfg["sigma_init"], prior_std=cfg["prior_std"])
    model = build_model(arch, seed=cfg["seed"])
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     seed=cfg["seed"], beta0=cfg["beta0"],
                     kl_weighting=cfg["kl_weighting"],
                     likelihood_mc_samples=cfg["likelihood_samples"],
                     plateau_patience=cfg["plateau_patience"],
                     plateau_factor=cfg["plateau_factor"])
    out = Path(args.out)
    _write_snapshot(out, "train", cfg, {"data": str(args.data)})
    result = train(model, train_set, val_set, tc)
    load_state(model, result.best_state)
    dio.save_checkpoint(model, out / "checkpoint")
    _write_csv(out / "training_log.csv",
               ["epoch", "loss", "nll", "kl", "lr", "f1", "iou"],
               [asdict(r) for r in result.log])
    plots.plot_training_curves(result.log, out / "training_curves.png")
    test_set = splits.get("test", [])
    if test_set:
        f1, iou_val = evaluate_frozen(model, test_set)
        print(f"best epoch {result.best_epoch}: val F1 {result.best_f1:.4f}, "
              f"test F1 {f1:.4f}, test IoU {iou_val:.4f}")
    else:
        print(f"best epoch {result.best_epoch}: val F1 {result.best_f1:.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve(args, INFER_DEFAULTS)
    if cfg["T"] < 1:
        raise UsageError(f"--T must be >= 1, got {cfg['T']}")
    model = dio.load_checkpoint(args.checkpoint)
    image = _load_image01(args.image)
    out = Path(args.out)
    _write_snapshot(out, "infer", cfg,
                    {"checkpoint": str(args.checkpoint), "image": str(args.image)})
    mc = McConfig(T=cfg["T"], seed=cfg["seed"], variance_space=cfg["variance_space"],
                  label_convention=cfg["labels"])
    passes = mc_predict(model, image, mc)

    summary = {"T": cfg["T"], "seed": cfg["seed"]}
    if cfg["T"] >= 2:
        result = decompose_uncertainty(passes, mc)
        mean_map = result.mean_map
        sidecars = {}
        for name, arr in (("aleatoric", result.aleatoric_map),
                          ("epistemic", result.epistemic_map),
                          ("total", result.total_map)):
            dio.write_array(out / f"{name}.f32", arr.astype(np.float32))
            sidecars[name] = _heatmap_pgm(out / f"{name}.pgm", arr)
        with open(out / "heatmap_scaling.json", "w") as fh:
            json.dump(sidecars, fh, indent=2, sort_keys=True)
        summary.update(summarize(result))
        plots.plot_inference_panel(image, result, out / "overview.png")
    else:
        mean_map = passes[0][0]

    dio.write_array(out / "probability.f32", np.asarray(mean_map, dtype=np.float32))
    dio.write_pgm(out / "probability.pgm", mean_map)
    dio.write_pgm(out / "mask.pgm", (mean_map >= cfg["threshold"]).astype(np.float64))
    summary["mean_probability"] = float(np.mean(mean_map))
    summary["positive_fraction"] = float(np.mean(mean_map >= cfg["threshold"]))
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"wrote segmentation and uncertainty artifacts to {out}")
    return 0


def _spec_from_flags(cfg, seed) -> DegradationSpec:
    chosen = [k for k in ("blur_sigma", "noise_sigma") if cfg[k] is not None]
    bc = cfg["brightness_delta"] is not None or cfg["contrast_gain"] is not None
    if len(chosen) + bc > 1:
        raise UsageError("choose one degradation: blur, noise, or brightness/contrast")
    try:
        if cfg["blur_sigma"] is not None:
            return DegradationSpec(kind="blur", blur_sigma=cfg["blur_sigma"], seed=seed)
        if cfg["noise_sigma"] is not None:
            return DegradationSpec(kind="rician", noise_sigma=cfg["noise_sigma"], seed=seed)
        if bc:
            return DegradationSpec(
                kind="brightness_contrast",
                brightness_delta=cfg["brightness_delta"] or 0.0,
                contrast_gain=cfg["contrast_gain"] if cfg["contrast_gain"] is not None else 1.0,
                seed=seed)
        return DegradationSpec(kind="none", seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_degrade(args) -> int:
    cfg = _resolve(args, DEGRADE_DEFAULTS)
    spec = _spec_from_flags(cfg, cfg["seed"])
    image = _load_image01(args.image)
    out = Path(args.out)
    _write_snapshot(out, "degrade", cfg, {"image": str(args.image)})
    degraded = apply_degradation(image, spec)
    dio.write_pgm(out / "degraded.pgm", degraded)
    with open(out / "provenance.json", "w") as fh:
        json.dump({"input": str(args.image), "spec": spec.to_dict()},
                  fh, indent=2, sort_keys=True)
    print(f"wrote degraded image ({spec.id}) to {out}")
    return 0


DEFAULT_BATTERY = [
    {"kind": "none"},
    {"kind": "blur", "blur_sigma": 2.6},
    {"kind": "blur", "blur_sigma": 4.4},
    {"kind": "rician", "noise_sigma": 0.3},
    {"kind": "brightness_contrast", "brightness_delta": 0.2, "contrast_gain": 1.2},
]

_SPEC_KEYS = {"kind", "blur_sigma", "noise_sigma", "brightness_delta",
              "contrast_gain", "seed", "id"}


def _load_specs(path, seed) -> list[DegradationSpec]:
    entries = DEFAULT_BATTERY if path is None else json.loads(Path(path).read_text())
    specs = []
    for entry in entries:
        unknown = set(entry) - _SPEC_KEYS
        if unknown:
            raise UsageError(f"unknown degradation spec keys: {sorted(unknown)}")
        kwargs = dict(entry)
        kwargs.setdefault("seed", seed)
        if "id" in kwargs:
            kwargs["spec_id"] = kwargs.pop("id")
        try:
            specs.append(DegradationSpec(**kwargs))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad degradation spec {entry}: {exc}") from exc
    return specs


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    if cfg["T"] < 2:
        raise UsageError("--T must be >= 2 for uncertainty evaluation")
    model = dio.load_checkpoint(args.checkpoint)
    splits = dio.load_dataset(args.data)
    samples = splits.get(cfg["split"], [])
    if cfg["limit"]:
        samples = samples[: cfg["limit"]]
    if not samples:
        raise dio.DataError(f"dataset at {args.data} has no {cfg['split']!r} samples")
    specs = _load_specs(args.specs, cfg["seed"])
    out = Path(args.out)
    _write_snapshot(out, "eval", cfg, {"checkpoint": str(args.checkpoint),
                                       "data": str(args.data),
                                       "specs": [s.to_dict() for s in specs]})
    mc = McConfig(T=cfg["T"], seed=cfg["seed"], variance_space=cfg["variance_space"],
                  label_convention=cfg["labels"])
    rows = degradation_report(model, samples, specs, mc, threshold=cfg["threshold"])
    _write_csv(out / "report.csv",
               ["spec_id", "kind", "param", "mean_total_unc", "pct_change_unc",
                "mean_f1", "mean_iou"],
               [asdict(r) for r in rows])
    plots.plot_degradation_response(rows, out / "degradation_response.png")
    for row in rows:
        print(f"{row.spec_id:>16}: uncertainty {row.mean_total_unc:.6g} "
              f"({row.pct_change_unc:+.1f}%), F1 {row.mean_f1:.4f}, IoU {row.mean_iou:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args, SWEEP_DEFAULTS)
    if cfg["repeats"] < 2:
        raise UsageError(f"--repeats must be >= 2, got {cfg['repeats']}")
    try:
        t_values = [int(v) for v in str(cfg["T_values"]).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --T-values {cfg['T_values']!r}: {exc}") from exc
    if not t_values or min(t_values) < 2:
        raise UsageError("--T-values must be integers >= 2")
    model = dio.load_checkpoint(args.checkpoint)
    splits = dio.load_dataset(args.data)
    samples = splits.get(cfg["split"], [])
    if not samples:
        raise dio.DataError(f"dataset at {args.data} has no {cfg['split']!r} samples")
    samples = samples[: cfg["images"]]
    out = Path(args.out)
    _write_snapshot(out, "sweep", cfg, {"checkpoint": str(args.checkpoint),
                                        "data": str(args.data)})
    mc = McConfig(T=max(t_values), seed=cfg["seed"],
                  variance_space=cfg["variance_space"], label_convention=cfg["labels"])
    rows = t_sweep(model, [s.image[0] for s in samples], t_values,
                   repeats=cfg["repeats"], cfg=mc)
    if cfg["labels"] == "paper":
        key1, key2 = "aleatoric", "epistemic"
    else:
        key1, key2 = "epistemic", "aleatoric"
    csv_rows = [{"T": r["T"],
                 f"var_{key1}": r["var_term1"], f"var_{key2}": r["var_term2"],
                 f"mean_{key1}": r["mean_term1"], f"mean_{key2}": r["mean_term2"]}
                for r in rows]
    _write_csv(out / "sweep.csv",
               ["T", f"var_{key1}", f"var_{key2}", f"mean_{key1}", f"mean_{key2}"],
               csv_rows)
    plots.plot_sweep_variance(rows, out / "sweep_variance.png", labels=(key1, key2))
    for r in rows:
        print(f"T={r['T']:>3}: var({key1})={r['var_term1']:.3e} "
              f"var({key2})={r['var_term2']:.3e}")
    return 0


# ---- parser -----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="bayeseg",
                     description="Uncertainty-aware segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (default 0)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--size", type=int, help="image side length")
    p.add_argument("--train-frac", type=float, dest="train_frac")
    p.add_argument("--val-frac", type=float, dest="val_frac")
    p.add_argument("--test-frac", type=float, dest="test_frac")
    p.add_argument("--force", action="store_true", help="overwrite non-empty output")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--base-filters", type=int, dest="base_filters")
    p.add_argument("--depth", type=int)
    p.add_argument("--attention", choices=["bottleneck_only", "central_layers"])
    p.add_argument("--beta0", type=float)
    p.add_argument("--kl-weighting", choices=["uniform", "geometric"], dest="kl_weighting")
    p.add_argument("--likelihood-samples", type=int, dest="likelihood_samples")
    p.add_argument("--plateau-patience", type=int, dest="plateau_patience")
    p.add_argument("--plateau-factor", type=float, dest="plateau_factor")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="segment one image with uncertainty maps")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--T", type=int, dest="T", help="MC passes")
    p.add_argument("--threshold", type=float)
    p.add_argument("--variance-space", choices=["probability", "logit"],
                   dest="variance_space")
    p.add_argument("--labels", choices=["paper", "kendall_gal"])
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("degrade", help="corrupt one image")
    add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--blur-sigma", type=float, dest="blur_sigma")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--brightness-delta", type=float, dest="brightness_delta")
    p.add_argument("--contrast-gain", type=float, dest="contrast_gain")
    p.set_defaults(handler=cmd_degrade)

    p = sub.add_parser("eval", help="degradation-response report over a test set")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--specs", help="JSON list of degradation specs")
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--threshold", type=float)
    p.add_argument("--limit", type=int, help="evaluate at most this many samples")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--variance-space", choices=["probability", "logit"],
                   dest="variance_space")
    p.add_argument("--labels", choices=["paper", "kendall_gal"])
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep", help="variance of uncertainty estimates vs T")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--T-values", dest="T_values", help="comma list, e.g. 5,10,20,30")
    p.add_argument("--repeats", type=int)
    p.add_argument("--images", type=int, help="how many validation images to use")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--variance-space", choices=["probability", "logit"],
                   dest="variance_space")
    p.add_argument("--labels", choices=["paper", "kendall_gal"])
    p.set_defaults(handler=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (dio.DataError, dio.CheckpointError, ShapeError, TrainingDivergedError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
