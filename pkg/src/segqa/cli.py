"""Command-line entry points: generate / train / eval / sweep.

Experiments are defined by a JSON config with sections ``model`` (ModelConfig
fields), ``train`` (TrainSchedule fields), ``data`` (manifest paths and output
directory), ``synth`` (SynthConfig fields, for ``generate``), and a top-level
``variant``.  Unknown keys anywhere are rejected so typos fail loudly.

Artifacts per training run: ``checkpoint.npz`` (best model + configs),
``history.jsonl`` (one record per epoch), ``summary.json``.  Evaluation emits
``predictions.jsonl`` (one record per sample) and ``eval_summary.json``.

Exit codes: 0 success, 1 validation error (bad config, incompatible inputs),
2 runtime abort (non-finite loss).  Relative output paths resolve under
$SEGQA_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainSchedule
from .model import VARIANTS, SegQAModel
from .synth import ManifestError, SynthConfig, generate_synthetic_dataset, load_feature_dataset
from .training import (
    ConfigurationError,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)

OUTPUT_ROOT_ENV = "SEGQA_OUTPUT_ROOT"
CONFIG_SECTIONS = ("model", "train", "data", "synth", "variant")
DATA_KEYS = ("train_manifest", "val_manifest", "out_dir")


class CliError(ValueError):
    """User-facing validation problem; maps to exit code 1."""


def resolve_out(path):
    """Apply the output-root override to relative paths."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def load_run_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise CliError(f"cannot read config {path}: {err}") from err
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a JSON object")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    try:
        model = ModelConfig.from_dict(raw.get("model", {}))
        train = TrainSchedule.from_dict(raw.get("train", {}))
        synth = SynthConfig.from_dict(raw["synth"]) if "synth" in raw else None
    except (ValueError, TypeError) as err:
        raise CliError(str(err)) from err
    data = raw.get("data", {})
    if not isinstance(data, dict):
        raise CliError("'data' section must be an object")
    unknown = set(data) - set(DATA_KEYS)
    if unknown:
        raise CliError(f"unknown data keys: {sorted(unknown)}")
    variant = raw.get("variant", "full")
    if variant not in VARIANTS:
        raise CliError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return {"model": model, "train": train, "data": data, "synth": synth, "variant": variant}


def _load_split(manifest_path):
    try:
        samples, _ = load_feature_dataset(manifest_path)
    except ManifestError as err:
        raise CliError(str(err)) from err
    return samples


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _write_jsonl(path, records):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


# -- commands ------------------------------------------------------------------


def cmd_generate(args):
    cfg = load_run_config(args.config)
    if cfg["synth"] is None:
        raise CliError("generate needs a 'synth' section in the config")
    synth_cfg = cfg["synth"]
    if args.seed is not None:
        synth_cfg = SynthConfig.from_dict({**synth_cfg.to_dict(), "seed": args.seed})
    out_dir = resolve_out(args.out or cfg["data"].get("out_dir", "dataset"))
    ds = generate_synthetic_dataset(synth_cfg, out_dir)
    for split, path in sorted(ds.manifest_paths.items()):
        print(f"{split}: {path}")
    return 0


def _train_once(config, variant, out_dir, seed=None):
    """Shared by train and sweep; returns the summary dict."""
    schedule = config["train"]
    if seed is not None:
        schedule = TrainSchedule.from_dict({**schedule.to_dict(), "seed": seed})
    data = config["data"]
    for key in ("train_manifest", "val_manifest"):
        if key not in data:
            raise CliError(f"train needs data.{key}")
    train_samples = _load_split(data["train_manifest"])
    val_samples = _load_split(data["val_manifest"])
    model = SegQAModel(config["model"], np.random.default_rng(schedule.seed), variant)
    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "history.jsonl"
    with open(history_path, "w") as fh:
        def log(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
        try:
            result = train_loop(model, train_samples, val_samples, schedule, log=log)
        except ConfigurationError as err:
            raise CliError(str(err)) from err
    rng_state = np.random.default_rng(schedule.seed).bit_generator.state
    save_checkpoint(
        out_dir / "checkpoint.npz", model, state=result.best_state,
        schedule=schedule, rng_state=rng_state, summary=result.summary,
    )
    summary = dict(result.summary)
    summary["history_path"] = str(history_path)
    summary["checkpoint_path"] = str(out_dir / "checkpoint.npz")
    _write_json(out_dir / "summary.json", summary)
    return summary


def cmd_train(args):
    config = load_run_config(args.config)
    variant = args.variant or config["variant"]
    if variant not in VARIANTS:
        raise CliError(f"variant must be one of {VARIANTS}, got {variant!r}")
    out_dir = resolve_out(args.out or config["data"].get("out_dir", "run"))
    summary = _train_once(config, variant, out_dir, seed=args.seed)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_eval(args):
    try:
        model, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as err:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {err}") from err
    samples = _load_split(args.manifest)
    cfg = model.cfg
    mismatches = []
    probe = samples[0]
    if probe.video.dim != cfg.d_video:
        mismatches.append(f"d_video: checkpoint {cfg.d_video}, dataset {probe.video.dim}")
    if probe.question.dim != cfg.d_question:
        mismatches.append(
            f"d_question: checkpoint {cfg.d_question}, dataset {probe.question.dim}"
        )
    if cfg.answer_mode == "multiple_choice" and probe.n_candidates != cfg.n_answers:
        mismatches.append(
            f"n_answers: checkpoint {cfg.n_answers}, dataset {probe.n_candidates}"
        )
    if mismatches:
        raise CliError("checkpoint/dataset mismatch: " + "; ".join(mismatches))
    report = evaluate(model, samples)
    out_dir = resolve_out(args.out or "eval")
    _write_jsonl(out_dir / "predictions.jsonl", report["records"])
    summary = {k: v for k, v in report.items() if k != "records"}
    summary["checkpoint"] = str(args.checkpoint)
    summary["manifest"] = str(args.manifest)
    summary["variant"] = meta.get("variant")
    _write_json(out_dir / "eval_summary.json", summary)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def _sweep_row(payload):
    config_path, row, out_dir, variant, seed = payload
    config = load_run_config(config_path)
    overrides = {"mode": row["strategy"]}
    if row["strategy"] == "bundled":
        overrides["loss_lambda"] = row["lambda"]
    schedule = TrainSchedule.from_dict({**config["train"].to_dict(), **overrides})
    config = {**config, "train": schedule}
    summary = _train_once(config, variant, Path(out_dir), seed=seed)
    return {
        "strategy": row["strategy"],
        "lambda": row.get("lambda"),
        "best_val_accuracy": summary["best_val_accuracy"],
        "convergence_epoch": summary["convergence_epoch"],
        "epochs_run": summary["epochs_run"],
        "out_dir": str(out_dir),
    }


def cmd_sweep(args):
    config = load_run_config(args.config)
    variant = args.variant or config["variant"]
    if variant != "full":
        raise CliError("sweep compares locator-loss schedules; variant must be 'full'")
    try:
        grid = [float(x) for x in args.lambda_grid.split(",") if x.strip() != ""]
    except ValueError as err:
        raise CliError(f"bad --lambda-grid: {err}") from err
    if not grid:
        raise CliError("--lambda-grid must list at least one value")
    out_dir = resolve_out(args.out or config["data"].get("out_dir", "sweep"))
    rows = [{"strategy": "bundled", "lambda": lam} for lam in grid]
    rows.append({"strategy": "DA"})
    payloads = []
    for row in rows:
        tag = "da" if row["strategy"] == "DA" else f"lambda_{row['lambda']:g}"
        payloads.append((args.config, row, str(out_dir / tag), variant, args.seed))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_row, payloads))
    else:
        results = [_sweep_row(p) for p in payloads]
    _write_json(out_dir / "sweep_results.json", {"rows": results})
    header = f"{'strategy':>8} {'lambda':>8} {'accuracy':>9} {'conv.epoch':>10}"
    print(header)
    for row in results:
        lam = "-" if row["lambda"] is None else f"{row['lambda']:g}"
        print(
            f"{row['strategy']:>8} {lam:>8} {row['best_val_accuracy']:>9.4f} "
            f"{row['convergence_epoch']:>10d}"
        )
    return 0


# -- argument parsing -----------------------------------------------------------


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def build_parser():
    parser = Parser(prog="segqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset + manifests")
    gen.add_argument("--config", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", default=None, help="dataset directory")
    gen.set_defaults(fn=cmd_generate)

    train = sub.add_parser("train", help="train one model per the config")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None, help="override train.seed")
    train.add_argument("--out", default=None, help="run directory")
    train.add_argument("--variant", choices=VARIANTS, default=None)
    train.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", default=None, help="directory for prediction records")
    ev.set_defaults(fn=cmd_eval)

    sweep = sub.add_parser("sweep", help="bundled runs over a lambda grid + one DA run")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--lambda-grid", required=True, help="comma-separated values")
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument("--out", default=None)
    sweep.add_argument("--variant", choices=VARIANTS, default=None)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel row processes")
    sweep.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except TrainingDiverged as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
