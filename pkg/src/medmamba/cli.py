"""Command-line entry point.

Subcommands: synth | train | eval | analyze | gradcheck | bench. Every run
directory receives the exact merged configuration that produced it; config
precedence is defaults < --config file < explicit flags. Exit codes are a
stable contract: 0 success, 2 usage/config, 3 data, 4 numeric, 5 I/O.
The MEDMAMBA_SEED environment variable supplies the default seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis, data, ssm
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .model import (ModelConfig, count_parameters, forward, init_params,
                    random_params, trainable)
from .numerics import Rng, Tensor, grad_check
from .training import (TrainConfig, TrainResult, compute_metrics, evaluate,
                       smoothed_ce, train_loop)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

GRADCHECK_PARAM_CAP = 10_000


def _default_seed() -> int:
    return int(os.environ.get("MEDMAMBA_SEED", "41"))


def _parse_strides(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad stride list {text!r}; expected e.g. 5,10,25") from None


def _parse_seeds(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}; expected e.g. 41..45 or 41,42") from None


def _parse_fractions(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"fractions must be three comma-separated values, got {text!r}")
    return tuple(float(v) for v in parts)  # type: ignore[return-value]


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to reuse")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    common = dict(n_subjects=args.subjects, channels=args.channels,
                  length=args.len, seed=args.seed,
                  windows_per_subject=args.windows)
    if args.kind == "centralized":
        ds = data.synth_centralized(snr=args.snr, **common)
    elif args.kind == "multiscale":
        ds = data.synth_multiscale(**common)
    else:  # argparse choices guard this
        raise ConfigError(f"unknown synth kind {args.kind!r}")
    manifest = data.write_dataset(ds, out)
    print(f"wrote {len(ds.recordings)} recordings to {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _load_split_windows(manifest: str, length: int, hop: int, classes: int | None,
                        fractions, split_seed: int, stratify: bool):
    recs = data.load_recordings(manifest, num_classes=classes)
    inferred = max(r.label for r in recs) + 1
    classes = classes or max(inferred, 2)
    split = data.subject_split(recs, fractions, split_seed, stratify)
    full = data.build_windows(recs, length, hop)
    parts = {name: full.subset(split.part(name)) for name in ("train", "val", "test")}
    return recs, split, parts, classes


def _run_single_training(args, seed: int, out: Path, tag: str = "") -> dict:
    hop = args.hop or args.len
    _, split, parts, classes = _load_split_windows(
        args.manifest, args.len, hop, args.classes,
        args.fractions, args.split_seed, not args.no_stratify)
    if len(parts["train"]) == 0 or len(parts["val"]) == 0:
        raise DataError("train/val splits produced no windows")
    train_ws = data.zscore(parts["train"], parts["train"])
    val_ws = data.zscore(parts["val"], parts["train"])
    test_ws = data.zscore(parts["test"], parts["train"]) if len(parts["test"]) else None

    channels = train_ws.windows.shape[2]
    mcfg = ModelConfig(
        channels=channels, window_len=args.len, classes=classes,
        d_model=args.d_model, n_layers=args.layers, ssm_expand=args.ssm_expand,
        ffn_expand=args.ffn_expand, state_dim=args.state_dim,
        strides=_parse_strides(args.strides), mixer_expand=args.mixer_expand,
        p_dropout=args.p_dropout, p_droppath=args.p_droppath,
        p_channel_dropout=args.p_channel_dropout, dtype=args.dtype)
    tcfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr_peak=args.lr,
        weight_decay=args.weight_decay, warmup_epochs=args.warmup_epochs,
        clip_norm=args.clip_norm, label_smoothing=args.label_smoothing, seed=seed)

    params = init_params(mcfg, Rng(seed))
    params["norm.mean"] = Tensor(train_ws.mean.astype(mcfg.np_dtype))
    params["norm.std"] = Tensor(train_ws.std.astype(mcfg.np_dtype))
    result: TrainResult = train_loop(params, mcfg, train_ws, val_ws, tcfg)

    ckpt = out / f"best{tag}.ckpt"
    save_checkpoint(result.best_params, mcfg, ckpt)
    _write_history(out / f"history{tag}.csv", result.history)
    report = {"best_epoch": result.best_epoch, "best_val_f1": result.best_val_f1,
              "val": result.history[result.best_epoch - 1]}
    if test_ws is not None and len(test_ws):
        test_metrics = evaluate(result.best_params, mcfg, test_ws.windows,
                                test_ws.labels, tcfg.batch_size)
        report["test"] = test_metrics.to_dict()
    report["split"] = {k: list(split.part(k)) for k in ("train", "val", "test")}
    report["param_count"] = count_parameters(result.best_params)
    report["model"] = mcfg.to_dict()
    report["train"] = tcfg.to_dict()
    return report


def _write_history(path: Path, history: list[dict]) -> None:
    if not history:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def cmd_train(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    seeds = _parse_seeds(args.seeds) if args.seeds else [args.seed]
    reports = {}
    for seed in seeds:
        tag = "" if len(seeds) == 1 else f"_seed{seed}"
        reports[seed] = _run_single_training(args, seed, out, tag)
        val = reports[seed]["val"]
        print(f"seed {seed}: best epoch {reports[seed]['best_epoch']} "
              f"val_f1={val['val_f1']:.4f} val_acc={val['val_acc']:.4f}")

    if len(seeds) == 1:
        report = reports[seeds[0]]
    else:
        metric_keys = ("accuracy", "precision_macro", "recall_macro",
                       "f1_macro", "auroc_macro")
        per_seed = {str(s): reports[s] for s in seeds}
        agg = {}
        for key in metric_keys:
            vals = [reports[s].get("test", {}).get(key) for s in seeds]
            vals = [v for v in vals if v is not None]
            if vals:
                agg[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        report = {"seeds": seeds, "per_seed": per_seed, "test_mean_std": agg}
    _write_json(out / "report.json", report)
    config_echo = {"command": "train",
                   "model": reports[seeds[0]]["model"],
                   "train": reports[seeds[0]]["train"],
                   "data": {"manifest": args.manifest, "window_len": args.len,
                            "hop": args.hop or args.len,
                            "fractions": list(args.fractions),
                            "split_seed": args.split_seed,
                            "stratify": not args.no_stratify},
                   "seeds": seeds}
    _write_json(out / "config.json", config_echo)
    print(f"artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    params, mcfg = load_checkpoint(args.checkpoint)
    hop = args.hop or mcfg.window_len
    recs = data.load_recordings(args.manifest, num_classes=mcfg.classes)
    channels = recs[0].values.shape[1]
    if channels != mcfg.channels:
        raise DataError(
            f"dimension mismatch: checkpoint expects (C={mcfg.channels}, "
            f"L={mcfg.window_len}, K={mcfg.classes}) but manifest provides "
            f"(C={channels}, L<={max(r.values.shape[0] for r in recs)}, "
            f"K={max(r.label for r in recs) + 1})")
    if args.split == "all":
        ws = data.build_windows(recs, mcfg.window_len, hop)
    else:
        split = data.subject_split(recs, args.fractions, args.split_seed,
                                   not args.no_stratify)
        full = data.build_windows(recs, mcfg.window_len, hop)
        ws = full.subset(split.part(args.split))
        if len(ws) == 0:
            raise DataError(f"split {args.split!r} contains no windows")
    if "norm.mean" in params and "norm.std" in params:
        ws = data.apply_stats(ws, params["norm.mean"].data, params["norm.std"].data)
    else:
        split = data.subject_split(recs, args.fractions, args.split_seed,
                                   not args.no_stratify)
        train_ws = data.build_windows(recs, mcfg.window_len, hop).subset(split.train)
        ws = data.zscore(ws, train_ws)
    metrics = evaluate(params, mcfg, ws.windows, ws.labels)
    payload = {"split": args.split, "n_windows": len(ws), **metrics.to_dict()}
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze

def cmd_analyze(args) -> int:
    if bool(args.manifest) == bool(args.csv):
        raise ConfigError("analyze needs exactly one of --manifest or --csv")
    if args.manifest:
        recs = data.load_recordings(args.manifest)
        named = [(f"rec{idx:04d}", rec.values.T) for idx, rec in enumerate(recs)]
    else:
        rec = data.Recording(data._read_recording_csv(Path(args.csv)), 0.0, "csv", 0)
        named = [(Path(args.csv).name, rec.values.T)]

    per_recording = []
    skipped = 0
    for name, x in named:
        if x.shape[0] < 2:
            skipped += 1
            per_recording.append({"id": name, "note": "single channel; SCI/DIC skipped"})
            continue
        report = analysis.centralization_report(x)
        per_recording.append({"id": name, "sci": report.sci, "dic": report.dic,
                              "influence": report.influence.tolist()})
    scis = [r["sci"] for r in per_recording if "sci" in r]
    dics = [r["dic"] for r in per_recording if "dic" in r]
    payload = {"recordings": per_recording,
               "aggregate": {"sci_median": float(np.median(scis)) if scis else None,
                             "dic_median": float(np.median(dics)) if dics else None,
                             "n_skipped_single_channel": skipped}}
    if args.strides:
        strides = _parse_strides(args.strides)
        payload["worst_case_mismatch"] = analysis.worst_case_mismatch(strides)
        payload["strides"] = list(strides)
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.influence_csv:
        with open(args.influence_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "channel", "influence"])
            for row in per_recording:
                for c, v in enumerate(row.get("influence", [])):
                    writer.writerow([row["id"], c, v])
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

GRADCHECK_CONFIG = dict(channels=3, window_len=30, classes=2, d_model=8,
                        n_layers=1, ssm_expand=2, ffn_expand=2, state_dim=4,
                        strides=(3, 5), mixer_expand=2, p_dropout=0.0,
                        p_droppath=0.0, p_channel_dropout=0.0, dtype="f64")


def cmd_gradcheck(args) -> int:
    mcfg = ModelConfig(**{**GRADCHECK_CONFIG,
                          "d_model": args.d_model, "n_layers": args.layers})
    rng = Rng(args.seed)
    params = random_params(mcfg, rng)  # generic point, away from the near-identity init
    n_params = count_parameters(params)
    if n_params > GRADCHECK_PARAM_CAP:
        raise ConfigError(f"gradcheck config has {n_params} parameters; "
                          f"cap is {GRADCHECK_PARAM_CAP}")
    batch = Tensor(rng.split("x").normal((2, mcfg.window_len, mcfg.channels)))
    labels = np.asarray(rng.split("y").integers(0, mcfg.classes, (2,)))

    def loss_fn(_p):
        # the checked tensors are shared with the full store, so in-place
        # perturbation by grad_check is visible here
        return smoothed_ce(forward(batch, params, mcfg, mode="train"), labels)

    report = grad_check(loss_fn, trainable(params), tol_rel=args.tol)
    print(report.summary())
    print(f"parameters checked: {n_params}")
    if not report.passed:
        raise NumericError("gradient check failed for: " + ", ".join(report.failures))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench

def cmd_bench(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",")]
    if len(lengths) < 3:
        raise ConfigError(f"bench needs at least 3 lengths, got {lengths}")
    probe = ssm.scan_complexity_probe(lengths, args.d_inner, args.state_dim,
                                      repeats=args.repeats, seed=args.seed)
    rows = [(r.length, r.median_seconds * 1e3) for r in probe.rows]
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["L", "median_ms"])
            writer.writerows(rows)
    for length, ms in rows:
        print(f"L={length:>8d}  median={ms:10.3f} ms")
    ratios = probe.doubling_ratios()
    print(f"log-log slope: {probe.loglog_slope:.4f}")
    print("step ratios: " + ", ".join(f"{r:.3f}" for r in ratios))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    seed_default = _default_seed()
    parser = argparse.ArgumentParser(
        prog="medmamba",
        description="Multi-scale bidirectional selective-scan engine: synthetic "
                    "tasks, training, evaluation, centralization analysis, "
                    "gradient checking, and scaling benchmarks.")
    parser.add_argument("--config", help="JSON file of flag defaults "
                                         "(defaults < file < flags)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("kind", choices=("centralized", "multiscale"))
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--len", type=int, default=256)
    p.add_argument("--windows", type=int, default=4,
                   help="windows worth of samples per subject")
    p.add_argument("--snr", type=float, default=4.0,
                   help="informative-channel SNR (centralized only)")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--len", type=int, default=256)
    p.add_argument("--hop", type=int, default=None, help="window hop (default: --len)")
    p.add_argument("--fractions", type=_parse_fractions, default=(0.6, 0.2, 0.2))
    p.add_argument("--split-seed", type=int, default=7)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--ssm-expand", type=int, default=2)
    p.add_argument("--ffn-expand", type=int, default=4)
    p.add_argument("--state-dim", type=int, default=16)
    p.add_argument("--strides", default="5,10,25")
    p.add_argument("--mixer-expand", type=int, default=2)
    p.add_argument("--p-dropout", type=float, default=0.1)
    p.add_argument("--p-droppath", type=float, default=0.1)
    p.add_argument("--p-channel-dropout", type=float, default=0.1)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--warmup-epochs", type=int, default=5)
    p.add_argument("--clip-norm", type=float, default=4.0)
    p.add_argument("--label-smoothing", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--seeds", default=None, help="e.g. 41..45 or 41,43; emits "
                                                 "mean/std over seeds")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--hop", type=int, default=None)
    p.add_argument("--fractions", type=_parse_fractions, default=(0.6, 0.2, 0.2))
    p.add_argument("--split-seed", type=int, default=7)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="centralization metrics for recordings")
    p.add_argument("--manifest", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--strides", default=None, help="e.g. 5,10,25 to report the "
                                                   "worst-case scale mismatch")
    p.add_argument("--out", default=None)
    p.add_argument("--influence-csv", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--seed", type=int, default=seed_default)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="scan wall-time scaling over sequence length")
    p.add_argument("--lengths", default="1024,2048,4096,8192")
    p.add_argument("--d-inner", type=int, default=64)
    p.add_argument("--state-dim", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    pre, _ = parser.parse_known_args(argv)
    if pre.config:
        try:
            file_cfg = json.loads(Path(pre.config).read_text())
        except OSError as exc:
            print(f"error: cannot read config file: {exc}", file=sys.stderr)
            return EXIT_IO
        except json.JSONDecodeError as exc:
            print(f"error: bad config file: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if not isinstance(file_cfg, dict):
            print("error: config file must hold a JSON object", file=sys.stderr)
            return EXIT_USAGE
        parser.set_defaults(**file_cfg)
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
