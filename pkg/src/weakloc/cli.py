"""Command-line entry point: ``weakloc <command> [options]``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime or
data error (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import datamodel, model, pipeline, synthgen, trainer
from .config import ConfigError, RunConfig, load_run_config
from .datamodel import Split
from .localizer import read_predictions, result_from_row, write_predictions

logger = logging.getLogger("weakloc")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument groups
# ---------------------------------------------------------------------------


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--pooling", choices=model.POOLING_MODES, help="temporal pooling (default softmax_tanh)")
    g.add_argument("--fusion", choices=model.FUSION_MODES, help="modality fusion (default softmax_gate)")
    g.add_argument("--modalities", choices=model.MODALITY_MODES, help="modalities used (default both)")
    g.add_argument("--hidden", type=int, help="shared hidden size (default 1024)")
    g.add_argument("--dropout", dest="dropout_p", type=float, help="dropout before the classifier (default 0.5)")
    g.add_argument("--no-projection-activation", dest="projection_activation", action="store_const", const=False,
                   help="drop LayerNorm+ReLU from the projections")
    g.add_argument("--focal-gamma", type=float, help="focal loss gamma (default 2.0)")
    g.add_argument("--class-weights", help="two comma-separated weights (default: inverse class frequency)")
    g.add_argument("--d-audio", type=int, help="audio feature dim (default: read from data)")
    g.add_argument("--d-visual", type=int, help="visual feature dim (default: read from data)")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", dest="learning_rate", type=float, help="Adam learning rate (default 1e-4)")
    g.add_argument("--batch-size", type=int, help="batch size (default 32)")
    g.add_argument("--epochs", dest="max_epochs", type=int, help="maximum epochs (default 50)")
    g.add_argument("--patience", dest="early_stop_patience", type=int, help="early-stop patience (default 5)")
    g.add_argument("--clip-norm", type=float, help="global gradient-norm clip (default off)")


def _add_localizer_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("localization")
    g.add_argument("--tau", type=float, help="sharpening temperature (default 0.5)")
    g.add_argument("--bins", dest="n_bins", type=int,
                   help="number of alignment bins (default 50; 10 gives a coarser grid)")


def _pick(args: argparse.Namespace, names: list[str]) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "model": _pick(args, ["pooling", "fusion", "modalities", "hidden", "dropout_p", "projection_activation",
                              "focal_gamma", "class_weights", "d_audio", "d_visual"]),
        "train": _pick(args, ["learning_rate", "batch_size", "max_epochs", "early_stop_patience", "clip_norm"]),
        "localizer": _pick(args, ["tau", "n_bins"]),
        "synth": _pick(args, ["n_segments", "n_val", "n_test", "positive_fraction", "amplitude", "audio_dim",
                              "visual_dim"]),
    }
    if getattr(args, "seed", None) is not None:
        overrides["train"]["seed"] = args.seed
        overrides["synth"]["seed"] = args.seed
    if getattr(args, "mix", None):
        try:
            a, v, b = (float(x) for x in args.mix.split(","))
        except ValueError:
            raise ConfigError(f"--mix expects three comma-separated numbers, got {args.mix!r}") from None
        overrides["synth"].update(mix_acoustic=a, mix_visual=v, mix_both=b)
    return load_run_config(args.config, overrides)


def _select(records, split: str):
    if split == "all":
        return list(records)
    wanted = Split(split)
    return [r for r in records if r.split is wanted]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _run_config(args).synth
    ds = synthgen.generate(cfg, args.out)
    n_pos = sum(r.label for r in ds.records)
    sizes = cfg.split_sizes
    print(f"wrote {len(ds.records)} segments ({n_pos} positive) to {args.out}")
    print(f"splits: train={sizes[0]} val={sizes[1]} test={sizes[2]}; "
          f"audio {cfg.audio_frames}x{cfg.audio_dim} @ {cfg.audio_rate_hz:g} Hz, "
          f"visual {cfg.visual_frames}x{cfg.visual_dim} @ {cfg.visual_rate_hz:g} Hz")
    return EXIT_OK


def _infer_dims(run: RunConfig, records, store) -> model.ModelConfig:
    mc = run.model
    changes = {}
    first = next((r for r in records if r.split is Split.TRAIN), None) or records[0]
    streams = store.get(first)
    if "model.d_audio" not in run.explicit and "audio" in streams:
        changes["d_audio"] = streams["audio"].dim
    if "model.d_visual" not in run.explicit and "visual" in streams:
        changes["d_visual"] = streams["visual"].dim
    return mc.replace(**changes) if changes else mc


def cmd_train(args) -> int:
    run = _run_config(args)
    records = datamodel.load_manifest(args.manifest)
    store = trainer.FeatureStore()
    mc = _infer_dims(run, records, store)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        def on_epoch(rec):
            log.write(json.dumps({"event": "epoch", **rec.__dict__}) + "\n")
            log.flush()

        params, report = trainer.train(records, store, mc, run.train, on_epoch=on_epoch)
        log.write(json.dumps({"event": "summary", "best_epoch": report.best_epoch,
                              "stop_reason": report.stop_reason, "wall_time_s": report.wall_time_s,
                              "class_weights": list(report.class_weights)}) + "\n")
    model.save_checkpoint(params, args.out)
    print(f"trained {len(report.epochs)} epochs, best epoch {report.best_epoch} "
          f"(val loss {report.epochs[report.best_epoch - 1].val_loss:.5f}); {report.stop_reason}")
    print(f"checkpoint: {args.out}\nlog: {log_path}")
    return EXIT_OK


def cmd_localize(args) -> int:
    run = _run_config(args)
    params = model.load_checkpoint(args.checkpoint)
    records = _select(datamodel.load_manifest(args.manifest), args.split)
    preds = pipeline.predict(params, records, trainer.FeatureStore(), run.localizer)
    write_predictions([(p.record.id, p.result, p.w_audio, p.w_visual) for p in preds], args.out)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _run_config(args)
    records = _select(datamodel.load_manifest(args.manifest), args.split)
    if args.predictions:
        by_id = {row["id"]: row for row in read_predictions(args.predictions)}
        missing = [r.id for r in records if r.id not in by_id]
        if missing:
            raise UsageError(f"{len(missing)} segments have no prediction (first: {missing[0]})")
        preds = [pipeline.SegmentPrediction(r, int(by_id[r.id]["label"]), by_id[r.id].get("w_a", 0.5),
                                            by_id[r.id].get("w_v", 0.5), result_from_row(by_id[r.id]))
                 for r in records]
    elif args.checkpoint:
        params = model.load_checkpoint(args.checkpoint)
        preds = pipeline.predict(params, records, trainer.FeatureStore(), run.localizer)
    else:
        raise UsageError("eval needs --checkpoint or --predictions")
    rep = pipeline.report(preds)
    print(rep.table(title=f"split={args.split}"))
    if args.json:
        Path(args.json).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _parse_columns(spec: str | None) -> dict[str, str]:
    if not spec:
        return {}
    out = {}
    for item in spec.split(","):
        key, sep, col = item.partition("=")
        if not sep or key.strip() not in datamodel.DEFAULT_COLUMN_MAP:
            raise UsageError(f"bad --columns entry {item!r}; keys are {sorted(datamodel.DEFAULT_COLUMN_MAP)}")
        out[key.strip()] = col.strip()
    return out


def _read_durations(path: str) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"video_id", "duration_s"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: durations CSV needs video_id,duration_s columns")
        return {row["video_id"].strip(): float(row["duration_s"]) for row in reader}


def cmd_stats(args) -> int:
    cmap = _parse_columns(args.columns)
    events = []
    row_errors = 0
    for path in args.csv:
        parsed = datamodel.parse_annotation_csv(path, cmap, strict=args.strict)
        events.extend(parsed.events)
        row_errors += len(parsed.row_errors)
        for err in parsed.row_errors[:10]:
            logger.warning("%s: %s", path, err)
    if row_errors:
        print(f"skipped {row_errors} malformed rows")
    if not events:
        print("no events")
        return EXIT_OK
    grouped: dict[str, list] = {}
    for vid, ev in events:
        grouped.setdefault(vid, []).append(ev)
    durations = _read_durations(args.durations) if args.durations else None
    st = datamodel.compute_stats(grouped, durations)
    lines = [
        f"{'Total videos':<24}{st.total_videos:>10,}",
        f"{'Total hours':<24}{st.total_hours:>10.1f}",
        f"{'Videos with laughter':<24}{st.videos_with_laughter:>10,}",
        f"{'Total laughter events':<24}{st.total_events:>10,}",
        f"{'Mean duration (s)':<24}{st.mean_duration_s:>10.2f}",
        f"{'Duration std dev (s)':<24}{st.std_duration_s:>10.2f}  (population; sample: {st.sample_std_duration_s:.2f})",
    ]
    for title, counts in (("Speaker vs. Audience", st.by_source), ("Modality Dominance", st.by_modality),
                          ("Intensity Levels", st.by_intensity)):
        lines.append(title)
        lines.extend(f"  {k.capitalize():<22}{v:>10,}" for k, v in counts.items())
    print("\n".join(lines))
    if args.json:
        Path(args.json).write_text(json.dumps(st.to_dict(), indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    base = model.ModelConfig(d_audio=args.d_audio, d_visual=args.d_visual, hidden=args.hidden)
    names = list(model.VARIANTS) if args.variant == "all" else [args.variant]

    def corrupt(name, g):
        return g + 1e-3 if name == args.corrupt else g

    hook = corrupt if args.corrupt else None
    worst_all = 0.0
    failed = []
    for name in names:
        errs = model.gradient_check(base.replace(**model.VARIANTS[name]), seed=args.seed, t_audio=args.t_audio,
                                    t_visual=args.t_visual, epsilon=args.epsilon, grad_hook=hook)
        worst = max(errs, key=errs.get)
        ok = errs[worst] <= args.tolerance
        worst_all = max(worst_all, errs[worst])
        print(f"{'PASS' if ok else 'FAIL'} {name:<20} worst rel err {errs[worst]:.3e} ({worst})")
        if not ok:
            failed.append((name, worst))
    print(f"{'PASS' if not failed else 'FAIL'}: worst relative error {worst_all:.3e} "
          f"(tolerance {args.tolerance:g}, eps {args.epsilon:g})")
    for name, param in failed:
        print(f"  {name}: parameter {param}")
    return EXIT_OK if not failed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakloc", description="Weakly supervised temporal event localization")
    parser.add_argument("--config", help="INI file with [model], [train], [localizer], [synth] sections")
    parser.add_argument("--threads", type=int, default=os.cpu_count(),
                        help="BLAS thread limit (default: available cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted bursts")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", dest="n_segments", type=int, help="number of segments (default 1000)")
    p.add_argument("--n-val", type=int, help="validation segments (default 15%%)")
    p.add_argument("--n-test", type=int, help="test segments (default 15%%)")
    p.add_argument("--positive-fraction", type=float, help="share of positive segments (default 0.3)")
    p.add_argument("--amplitude", type=float, help="burst mean shift in noise std units (default 3.0)")
    p.add_argument("--audio-dim", type=int, help="audio feature dim (default 32)")
    p.add_argument("--visual-dim", type=int, help="visual feature dim (default 24)")
    p.add_argument("--mix", help="acoustic,visual,both dominance mix (default 0.79,0.06,0.15)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the train split, early-stopping on val")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (MMCK)")
    p.add_argument("--log", help="per-epoch JSON-lines log (default <out>.log.jsonl)")
    p.add_argument("--seed", type=int)
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="classification and localization metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="score an existing prediction file instead of running the model")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--json", help="also write the report as JSON")
    _add_localizer_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", help="write per-segment predicted intervals")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    _add_localizer_args(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("stats", help="annotation statistics from event CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--columns", help="column mapping, e.g. video_id=clip,start=onset,end=offset")
    p.add_argument("--durations", help="CSV of video_id,duration_s covering all videos")
    p.add_argument("--strict", action="store_true", help="fail on the first malformed row")
    p.add_argument("--json")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check of all model gradients")
    p.add_argument("--variant", default="all", choices=["all", *model.VARIANTS])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--d-audio", type=int, default=6)
    p.add_argument("--d-visual", type=int, default=5)
    p.add_argument("--t-audio", type=int, default=12)
    p.add_argument("--t-visual", type=int, default=6)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--corrupt", metavar="PARAM", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit(n: int | None):
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (datamodel.ValidationError, datamodel.SchemaError, datamodel.RowError, datamodel.FormatError,
            trainer.TrainingError, FileNotFoundError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
