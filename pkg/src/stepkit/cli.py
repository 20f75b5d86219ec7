"""Command-line entry point: synth, train, extract and eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig, default_threads, load_config, set_path
from .datamodel import Manifest, load_manifest, save_dataset
from .encoder import build_model, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .keysteps import CLUSTERING
from .pipeline import BASELINES, evaluate, extract_all, model_features, raw_features
from .report import ksl_csv, render_html, render_markdown
from .synth import generate, separability_report
from .trainer import TrainHistory, TrainState, gradient_check, prepare_sample, train

log = logging.getLogger("stepkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GRAD_CHECK_LIMIT = 1e-3


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _load(path) -> Manifest:
    try:
        return load_manifest(path)
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc


def _configure_threads(threads: Optional[int]) -> None:
    if threads:
        torch.set_num_threads(threads)


# -- commands ----------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    cfg.synth.validate()
    manifest, gt = generate(cfg.synth)
    out = save_dataset(manifest, args.out)
    print(f"wrote {len(manifest)} videos to {out}")
    print(f"separability (nearest prototype accuracy): {separability_report(manifest, gt):.4f}")
    return EXIT_OK


def _resume_state(path) -> TrainState:
    model, meta, extra = load_checkpoint(path)
    hist = meta.get("history", {})
    history = TrainHistory(list(hist.get("epoch_loss", [])), list(hist.get("epoch_seconds", [])))
    return TrainState(model, history, int(meta.get("epochs_done", len(history))), meta.get("rng_state"), extra)


def _grad_check(manifest: Manifest, cfg: RunConfig, model) -> float:
    tc = cfg.train
    rng = np.random.default_rng(tc.seed)
    names = list(manifest.modality_names)
    samples = [prepare_sample(rec, names, tc, rng) for rec in manifest.records[:tc.batch_size]]
    return gradient_check(model, samples, tc.loss, seed=tc.seed)


def cmd_train(args, cfg: RunConfig) -> int:
    tc = cfg.train
    tc.validate()
    manifest = _load(args.manifest)
    resume = _resume_state(args.resume) if args.resume else None
    if args.grad_check:
        names = list(manifest.modality_names)
        dims = {m: manifest.records[0].modalities[m].dim for m in names}
        model = resume.model if resume else build_model(dims, tc.encoder, seed=tc.seed, dtype=tc.torch_dtype)
        err = _grad_check(manifest, cfg, model)
        print(f"gradient check: max relative error {err:.3e}")
        if not err <= GRAD_CHECK_LIMIT:
            raise NumericError(f"gradient check failed: {err:.3e} > {GRAD_CHECK_LIMIT:g}")
    state = train(manifest, tc, resume=resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = state.history.to_json(include_timing=not tc.deterministic)
    meta = {
        "epochs_done": state.epochs_done,
        "rng_state": state.rng_state,
        "history": history,
        "train_config": RunConfig(train=tc).to_dict()["train"],
    }
    save_checkpoint(out / "model.ckpt", state.model, meta=meta, extra_tensors=state.optimizer_tensors)
    _write_json(history, out / "history.json")
    final = f"{state.history.epoch_loss[-1]:.6f}" if len(state.history) else "n/a"
    print(f"trained {state.epochs_done} epochs, final loss {final}; wrote {out / 'model.ckpt'}")
    return EXIT_OK


def _modalities(args) -> Optional[list[str]]:
    return args.inference_modalities or None


def cmd_extract(args, cfg: RunConfig) -> int:
    cfg.extract.validate()
    manifest = _load(args.manifest)
    model, _, _ = load_checkpoint(args.checkpoint)
    results = extract_all(manifest, model_features(model, _modalities(args)), cfg.extract)
    out = Path(args.out)
    for vid, res in results.items():
        _write_json(res.to_json(), out / f"{vid}.keysteps.json")
    print(f"wrote key steps for {len(results)} videos to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    opts = cfg.eval
    if args.inference_modalities:
        opts.modalities = args.inference_modalities
    opts.validate()
    manifest = _load(args.manifest)
    losses = None
    if args.checkpoint:
        model, meta, _ = load_checkpoint(args.checkpoint)
        features = model_features(model, opts.modalities)
        losses = meta.get("history", {}).get("epoch_loss")
        source = str(args.checkpoint)
    else:
        features = raw_features(manifest.modality_names)
        source = "raw"
    report = evaluate(manifest, features, opts, meta={"features": source})
    _write_json(report.to_json(), Path(args.out))
    if args.report:
        path = Path(args.report)
        text = render_markdown(report) if path.suffix in (".md", ".markdown") else render_html(report, losses)
        path.write_text(text)
    if args.csv:
        Path(args.csv).write_text(ksl_csv(report))
    f1 = report.ksl["model"]["per_step"]["f1"]
    print(f"KSL per-step F1 {100 * f1:.1f}; wrote {args.out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    # defaults are suppressed so a subcommand never clobbers values given before it
    p.add_argument("--config", default=argparse.SUPPRESS, help="YAML run configuration")
    p.add_argument("--print-config", action="store_true", default=argparse.SUPPRESS,
                   help="print the fully resolved configuration and exit")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="cap on worker threads (default from STEPKIT_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepkit", description=__doc__)
    parser.set_defaults(config=None, print_config=False, threads=None, verbose=False, command=None)
    _common(parser)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    _common(p)
    p.add_argument("--out", default="data")
    p.add_argument("--videos", dest="synth.num_videos", type=int)
    p.add_argument("--steps", dest="synth.num_steps", type=int)
    p.add_argument("--frames", dest="synth.frames_per_video", type=int)
    p.add_argument("--modalities", dest="synth.modalities", type=int)
    p.add_argument("--dims", dest="synth.dims", type=_csv(int), help="comma-separated, one per modality")
    p.add_argument("--background", dest="synth.background_fraction", type=float)
    p.add_argument("--repeat", dest="synth.repeat_probability", type=float)
    p.add_argument("--noise", dest="synth.cue_noise", type=float)
    p.add_argument("--fps", dest="synth.fps", type=float)
    p.add_argument("--seed", dest="synth.seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the per-modality encoders")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="ck")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--grad-check", action="store_true",
                   help=f"run a gradient check first; abort if the error exceeds {GRAD_CHECK_LIMIT:g}")
    p.add_argument("--epochs", dest="train.epochs", type=int)
    p.add_argument("--chunks", dest="train.num_chunks", type=int)
    p.add_argument("--extent", dest="train.temporal_extent", type=float)
    p.add_argument("--batch-size", dest="train.batch_size", type=int)
    p.add_argument("--lr", dest="train.learning_rate", type=float)
    p.add_argument("--lr-drop-epoch", dest="train.lr_drop_epoch", type=int)
    p.add_argument("--seed", dest="train.seed", type=int)
    p.add_argument("--dtype", dest="train.dtype", choices=("float32", "float64"))
    p.add_argument("--prefetch", dest="train.prefetch", action="store_const", const=True)
    p.add_argument("--nondeterministic", dest="train.deterministic", action="store_const", const=False)
    p.add_argument("--sigma", dest="train.loss.sigma", type=float)
    p.add_argument("--margin", dest="train.loss.margin", type=float)
    p.add_argument("--bootstrap-variant", dest="train.loss.bootstrap_variant")
    p.add_argument("--bootstrap-modality", dest="train.loss.bootstrap_modality")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract ordered key steps per video")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="keysteps")
    p.add_argument("--inference-modalities", type=_csv(str),
                   help="one modality, or several to concatenate (default: first)")
    p.add_argument("-K", "--clusters", dest="extract.num_clusters", type=int)
    p.add_argument("--alpha", dest="extract.background_ratio", type=float)
    p.add_argument("--gamma-split", dest="extract.gamma_split", type=float)
    p.add_argument("--clustering", dest="extract.clustering", choices=sorted(CLUSTERING))
    p.add_argument("--seed", dest="extract.seed", type=int)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="score embeddings against the labels")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="omit to score raw concatenated features")
    p.add_argument("--out", default="eval.json")
    p.add_argument("--report", help="static report (.html or .md)")
    p.add_argument("--csv", help="KSL table as CSV")
    p.add_argument("--inference-modalities", type=_csv(str))
    p.add_argument("-K", "--clusters", dest="eval.num_clusters", type=int)
    p.add_argument("--baselines", dest="eval.baselines", type=_csv(str),
                   help=f"comma-separated subset of {','.join(BASELINES)}")
    p.add_argument("--fractions", dest="eval.fractions", type=_csv(float))
    p.add_argument("--subsample", dest="eval.subsample", type=int)
    p.add_argument("--clustering", dest="eval.clustering", choices=sorted(CLUSTERING))
    p.add_argument("--seed", dest="eval.seed", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


def resolve_config(args) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = load_config(args.config)
    for key, value in vars(args).items():
        if "." in key:
            set_path(cfg, key, value)
    threads = args.threads or default_threads()
    if threads is not None:
        cfg.train.threads = threads
    return cfg


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        _configure_threads(cfg.train.threads)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"stepkit: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"stepkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"stepkit: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
