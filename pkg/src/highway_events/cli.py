"""Command-line entry point: ``python -m highway_events.cli <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import importlib
import json
import sys
from pathlib import Path

import numpy as np

from .clips import ClipFormatError, MalformedInputError, load_clip, write_pgm, write_sidecar, save_clip
from .features import make_encoder
from .harness import (
    NumericFailure,
    RepresentationStore,
    SplitSpec,
    TrainConfig,
    calibrate_thresholds,
    evaluate,
    export_trace,
    load_dataset,
    load_lane_mask,
    stratified_split,
    stream,
    train,
)
from .models import ConfigError, ModelConfig, load_model, save_model
from .nn.checkpoint import CheckpointFormatError, load_checkpoint
from .nn.gradcheck import FRAGMENTS
from .synth import DatasetMix, default_lane_mask, generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _loss_weights(text: str) -> tuple:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated numbers, got {text!r}") from None
    if len(values) != 4 or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError(f"expected 4 positive weights, got {text!r}")
    return values


def _provider(spec: str):
    module, _, name = spec.partition(":")
    if not module or not name:
        raise UsageError(f"--provider must look like module:function, got {spec!r}")
    return getattr(importlib.import_module(module), name)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="highway-events", description="Highway traffic event detection")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True, ckpt=True):
        p.add_argument("--seed", type=int, default=0)
        if data:
            p.add_argument("--data", type=Path, required=True, help="clip directory")
        if ckpt:
            p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")

    def model_flags(p):
        p.add_argument("--model", default="hist", choices=["hist", "conv", "convflow", "external"])
        p.add_argument("--conv-layers", type=int, default=2, choices=[2, 3])
        p.add_argument("--rnn-layers", type=int, default=1, choices=[1, 2])
        p.add_argument("--hidden", type=int, default=None)
        p.add_argument("--feature-length", type=int, default=None, help="external variant vector length")
        p.add_argument(
            "--standardize", action=argparse.BooleanOptionalAction, default=True,
            help="fit a per-element input affine on the training split (default: on)",
        )

    def provider_flag(p):
        p.add_argument("--provider", default=None, help="external feature provider as module:function")

    p = sub.add_parser("gen", help="generate a synthetic labelled dataset")
    common(p, ckpt=False)
    p.add_argument("--count", type=int, default=200, help="number of clips (mix proportional to the reference)")

    p = sub.add_parser("train", help="train on the training split")
    common(p)
    model_flags(p)
    provider_flag(p)
    p.add_argument("--epochs", type=int, default=350)
    p.add_argument("--lr", type=float, default=3e-5)
    p.add_argument("--loss-weights", type=_loss_weights, default=(10.0, 40.0, 30.0, 100.0))
    p.add_argument("--clip-norm", type=float, default=None)

    p = sub.add_parser("calibrate", help="pick per-class thresholds on the validation split")
    common(p)
    provider_flag(p)

    p = sub.add_parser("eval", help="frame-level F1 on the test split")
    common(p)
    provider_flag(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    p = sub.add_parser("stream", help="online inference over one clip with a JSON-lines event log")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--clip", type=Path, required=True, help=".tevc clip file")
    p.add_argument("--mask", type=Path, default=None, help="lane mask PGM (default: synthetic road mask)")
    p.add_argument("--log", type=Path, default=None, help="write JSON lines here instead of stdout")
    p.add_argument("--annotate", type=Path, default=None, help="directory for annotated PGM frames")
    p.add_argument("--all", action="store_true", help="log every class on every frame")
    provider_flag(p)

    p = sub.add_parser("trace", help="per-frame CSV of scores, decisions and labels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--clip", type=Path, required=True)
    p.add_argument("--mask", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    provider_flag(p)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


# --- helpers -----------------------------------------------------------------------


def _model_config(args) -> ModelConfig:
    kwargs = {"variant": args.model, "conv_layers": args.conv_layers, "rnn_layers": args.rnn_layers}
    if args.hidden is not None:
        kwargs["hidden_size"] = args.hidden
    if args.model == "external":
        if args.feature_length is None or args.provider is None:
            raise UsageError("--model external needs --feature-length and --provider")
        kwargs["feature_length"] = args.feature_length
    kwargs["standardize"] = args.standardize
    return ModelConfig(**kwargs)


def _store(config: ModelConfig, mask, cache_dir, provider_spec):
    if config.variant == "external":
        if provider_spec is None:
            raise UsageError("external checkpoints need --provider")
        provider = _provider(provider_spec)
        return RepresentationStore(
            "external", mask, None, lambda: make_encoder("external", mask, provider=provider, length=config.feature_length)
        )
    return RepresentationStore(config.variant, mask, cache_dir)


def _splits(args, extra: dict | None = None):
    clips = load_dataset(args.data)
    seed = (extra or {}).get("split_seed", args.seed)
    return stratified_split(clips, SplitSpec(seed=seed))


def _checkpoint_extra(path) -> dict:
    header, _ = load_checkpoint(path)
    return header.get("extra", {})


def _single_mask(args):
    if args.mask is not None:
        from .clips import read_pgm

        return (read_pgm(args.mask) > 0).astype(np.uint8)
    sibling = args.clip.parent / "mask.pgm"
    return load_lane_mask(args.clip.parent) if sibling.exists() else default_lane_mask()


# --- commands ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be positive")
    args.data.mkdir(parents=True, exist_ok=True)
    for clip in generate_dataset(DatasetMix.proportional(args.count), args.seed):
        save_clip(clip, args.data / f"{clip.clip_id}.tevc")
        pv = clip.provenance
        write_sidecar(args.data / f"{clip.clip_id}.json", clip.clip_id, pv["seed"], pv["event_onset_frame"], pv["scenario_kind"])
    write_pgm(args.data / "mask.pgm", default_lane_mask() * 255)
    print(f"wrote {args.count} clips to {args.data}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        config = TrainConfig(_model_config(args), args.epochs, args.lr, args.loss_weights, args.seed, args.clip_norm)
    except ConfigError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    train_set, _, _ = _splits(args)
    store = _store(config.model, load_lane_mask(args.data), args.data, args.provider)

    def report(epoch, loss):
        print(f"epoch {epoch:4d}  mean loss {loss:.6f}", flush=True)

    result = train(config, train_set, store, on_epoch=report)
    extra = {"train": config.to_dict(), "split_seed": args.seed, "epoch_losses": result.epoch_losses}
    save_model(result.model, args.ckpt, extra)
    print(f"saved {args.ckpt} ({result.model.n_parameters()} parameters, {len(train_set)} training clips)")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    extra = _checkpoint_extra(args.ckpt)
    model = load_model(args.ckpt)
    _, val_set, _ = _splits(args, extra)
    store = _store(model.config, load_lane_mask(args.data), args.data, args.provider)
    gammas, table = calibrate_thresholds(model, val_set, store)
    model.config = model.config.with_thresholds(gammas)
    extra["calibration"] = {"gammas": list(gammas), "val_f1": [float(row.max()) for row in table]}
    save_model(model, args.ckpt, extra)
    print(json.dumps({"thresholds": list(gammas), "val_f1": extra["calibration"]["val_f1"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    extra = _checkpoint_extra(args.ckpt)
    model = load_model(args.ckpt)
    splits = dict(zip(("train", "val", "test"), _splits(args, extra)))
    store = _store(model.config, load_lane_mask(args.data), args.data, args.provider)
    report = evaluate(model, model.config.thresholds, splits[args.split], store)
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.table())
    return EXIT_OK


def cmd_stream(args) -> int:
    model = load_model(args.ckpt)
    clip = load_clip(args.clip)
    store = _store(model.config, _single_mask(args), None, args.provider)
    out = args.log.open("w") if args.log else sys.stdout
    try:
        result = stream(
            model, store.encoder(), clip.frames, clip.clip_id,
            log_all=args.all, annotate_dir=args.annotate, sink=lambda rec: print(rec.to_json(), file=out),
        )
    finally:
        if args.log:
            out.close()
    ms = 1000 * np.asarray(result.frame_seconds)
    print(f"{len(ms)} frames, {len(result.records)} records, {ms.mean():.1f} ms/frame (max {ms.max():.1f})", file=sys.stderr)
    return EXIT_OK


def cmd_trace(args) -> int:
    model = load_model(args.ckpt)
    clip = load_clip(args.clip)
    store = _store(model.config, _single_mask(args), None, args.provider)
    text = export_trace(model, model.config.thresholds, clip, store)
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    failed = False
    for name, fn in FRAGMENTS.items():
        worst = max(fn(s).max_rel_error for s in seeds)
        ok = worst < args.tolerance
        failed |= not ok
        print(f"{name:<10} max relative error {worst:.3e}  {'ok' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "trace": cmd_trace,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MalformedInputError, ClipFormatError, CheckpointFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
