"""``nice-lab`` command line: gen, train, eval, ablate, check, export.

Exit codes: 0 success, 1 verification failure, 2 usage or IO error,
3 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from collections import Counter
from dataclasses import asdict
from pathlib import Path

from . import checks
from .config import (ConfigFileError, dump_config, flatten_train_config, generation_config_from_flat,
                     read_config, train_config_from_flat)
from .scene import (ConfigError, DatasetFormatError, format_sidecar, generate_dataset,
                    load_dataset, save_dataset)
from .trainer import (LOG_COLUMNS, CheckpointError, TrainingDiverged, ablation_run, evaluate, format_ablation,
                      load_checkpoint, save_checkpoint, train)
from .validation import check_scenes

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

DATASET_NAME = "dataset.nicelab"
CKPT_NAME = "checkpoint.nckpt"

GEN_FLAGS = {"height": int, "width": int, "min_instances": int, "max_instances": int, "min_stuff": int,
             "max_stuff": int, "max_phrases": int, "vocab_size": int, "min_size": int, "max_size": int,
             "repeat_prob": float, "noise": int}
TRAIN_FLAGS = {"epochs": int, "batch_size": int, "lr": float, "schedule": str, "seed": int, "clip_norm": float,
               "channels": int, "stride": int, "embed_dim": int, "vocab_size": int, "layers": int, "heads": int,
               "tau": float, "hidden": int, "mode": str, "barycenter": str, "lambda_bce": float,
               "lambda_dice": float, "lambda_smooth_l1": float, "lambda_giou": float, "xi": float,
               "dice_eps": float}


class UsageError(Exception):
    pass


def _add_flags(p, flags):
    for name, typ in flags.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def _resolve(args, flags, from_flat, config_keys_ok=None):
    """Defaults <- --config file <- explicit flags."""
    file_vals = read_config(args.config) if getattr(args, "config", None) else {}
    if config_keys_ok is not None:
        file_vals = {k: v for k, v in file_vals.items() if k in config_keys_ok}
    flag_vals = {k: getattr(args, k) for k in flags if getattr(args, k, None) is not None}
    return from_flat({**file_vals, **flag_vals})


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    return out


def _echo(out: Path, name: str, flat: dict):
    text = dump_config(flat)
    (out / name).write_text(text)
    print(f"# resolved config ({out / name})")
    print(text, end="")


def _load_scenes(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {path}") from None
    except DatasetFormatError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


def cmd_gen(args) -> int:
    flat_keys = set(GEN_FLAGS) | {"thing_categories"}
    gcfg = _resolve(args, GEN_FLAGS, generation_config_from_flat, flat_keys)
    gcfg.validate()
    out = _outdir(args.out)
    scenes = generate_dataset(args.seed, args.count, gcfg)
    save_dataset(scenes, out / DATASET_NAME)
    (out / "dataset.txt").write_text(format_sidecar(scenes))
    hist = Counter()
    for s in scenes:
        for p in s.phrases:
            hist[p.text] += 1
    manifest = {"seed": args.seed, "count": args.count, "generation": asdict(gcfg),
                "phrases": sum(hist.values()), "phrase_histogram": dict(sorted(hist.items()))}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _echo(out, "config.txt", {"seed": args.seed, "count": args.count, **asdict(gcfg)})
    print(f"wrote {len(scenes)} scenes to {out / DATASET_NAME}")
    return EXIT_OK


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_FLAGS, train_config_from_flat)
    cfg.validate()
    scenes = _load_scenes(args.data)
    check_scenes(scenes, cfg.model.stride, cfg.model.vocab_size)
    out = _outdir(args.out)
    _echo(out, "config.txt", flatten_train_config(cfg))
    t0 = time.time()
    try:
        ckpt, rows = train(scenes, cfg)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / CKPT_NAME)
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(ckpt, out / CKPT_NAME)
    _write_log(out / "train_log.csv", rows)
    if args.eval:
        rep = evaluate(ckpt.build_params(), cfg.model, scenes)
        (out / "report.json").write_text(rep.to_text())
        (out / "recall_curves.csv").write_text(rep.curves_csv())
    print(f"trained {cfg.epochs} epochs ({len(rows)} steps) in {time.time() - t0:.1f}s -> {out / CKPT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.ckpt}") from None
    except CheckpointError as exc:
        raise UsageError(f"bad checkpoint {args.ckpt}: {exc}") from None
    if args.config:
        want = train_config_from_flat(read_config(args.config))
        if want.model.digest() != ckpt.config.model.digest():
            raise UsageError(f"checkpoint model config {ckpt.config.model.digest()} does not match "
                             f"--config model config {want.model.digest()}")
    scenes = _load_scenes(args.data)
    check_scenes(scenes, ckpt.config.model.stride, ckpt.config.model.vocab_size)
    out = _outdir(args.out)
    _echo(out, "config.txt", {**flatten_train_config(ckpt.config), "box_source": args.box_source,
                              "oracle": args.oracle, "config_hash": ckpt.config_hash})
    rep = evaluate(ckpt.build_params(), ckpt.config.model, scenes, args.box_source, oracle=args.oracle)
    (out / "report.json").write_text(rep.to_text())
    (out / "recall_curves.csv").write_text(rep.curves_csv())
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _resolve(args, TRAIN_FLAGS, train_config_from_flat)
    base.validate()
    scenes = _load_scenes(args.data)
    check_scenes(scenes, base.model.stride, base.model.vocab_size)
    out = _outdir(args.out)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    _echo(out, "config.txt", {**flatten_train_config(base), "variants": ",".join(variants)})
    try:
        table = ablation_run(scenes, variants, base)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    text = format_ablation(table)
    (out / "ablation.tsv").write_text(text)
    for row in table:
        (out / f"report_{row['variant']}.json").write_text(row["report"].to_text())
    print(text, end="")
    return EXIT_OK


def cmd_check(args) -> int:
    t0 = time.time()
    if args.corrupt:
        with checks.corrupted_gradient(args.corrupt):
            grads = checks.gradient_suite(args.trials)
    else:
        grads = checks.gradient_suite(args.trials)
    oracles = checks.oracle_suite(args.instances)
    print("gradient checks (h=1e-6, float64)")
    for r in grads:
        print("  " + str(r))
    print("oracle equivalence")
    for r in oracles:
        print("  " + str(r))
    failed = [r.op_name for r in grads if not r.passed] + [r.name for r in oracles if not r.passed]
    print(f"{len(grads) + len(oracles) - len(failed)}/{len(grads) + len(oracles)} passed in {time.time() - t0:.1f}s")
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_export(args) -> int:
    scenes = _load_scenes(args.data)
    text = format_sidecar(scenes)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nice-lab", description="Cascaded panoptic narrative grounding lab")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config")
    _add_flags(g, GEN_FLAGS)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--eval", action="store_true", help="also evaluate on the training data")
    _add_flags(t, TRAIN_FLAGS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="fail if its model settings differ from the checkpoint's")
    e.add_argument("--box-source", choices=("model", "tight"), default="model")
    e.add_argument("--oracle", action="store_true", help="score ground truth as the prediction")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare variants")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--variants", default="joint,mask_only,box_only,two_branch")
    _add_flags(a, TRAIN_FLAGS)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("check", help="gradient and oracle verification suites")
    c.add_argument("--trials", type=int, default=checks.N_TRIALS)
    c.add_argument("--instances", type=int, default=1000)
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_check)

    x = sub.add_parser("export", help="print the human-readable listing of a dataset")
    x.add_argument("--data", required=True)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("NICELAB_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError, ConfigFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
