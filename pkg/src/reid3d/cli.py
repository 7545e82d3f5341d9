"""Command-line entry point.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, evaluation, experiment, gradcheck, training
from .config import load_run_config
from .errors import CheckpointError, ConfigError, ReidError, ShapeError, TensorFormatError
from .tensor import read_tensor, write_tensor


class UsageError(Exception):
    pass


def _existing(path: str) -> str:
    if not os.path.isfile(path):
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return path


def _ranks(text: str) -> list[int]:
    try:
        ranks = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"ranks must be comma-separated integers, got {text!r}")
    if not ranks or min(ranks) < 1:
        raise argparse.ArgumentTypeError("ranks must be positive")
    return ranks


def cmd_gradcheck(args) -> int:
    report = gradcheck.gradcheck_suite(args.tol, args.seed, args.op and [args.op], args.cases)
    sys.stdout.write(report.format())
    return 0 if report.passed else 1


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.steps is not None:
        cfg.steps = args.steps
    experiment.synthetic_split(cfg)  # validate before touching the output directory
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    run = experiment.run_training(cfg)
    (out / "loss_history.csv").write_text(training.history_to_csv(run.history))
    checkpoint.save_checkpoint(run.encoder, out / "checkpoint.rckp", run.optimizer)
    if run.history:
        print(f"steps {len(run.history)}  ratio last10/first10 {run.loss_ratio():.9g}")
    print(f"wrote {out}")
    return 0


def cmd_synth(args) -> int:
    """Query (held-out) and gallery (training sequence) tracks for a run config."""
    cfg = load_run_config(args.config)
    ds, held = experiment.synthetic_split(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.sampler
    write_tensor(training.eval_tracks(held, s.track_len, s.window), out / "query_tracks.tnsr")
    write_tensor(training.eval_tracks(ds, s.track_len, s.window), out / "gallery_tracks.tnsr")
    evaluation.write_labels(held.labels, out / "query_ids.txt")
    evaluation.write_labels(held.cams, out / "query_cams.txt")
    evaluation.write_labels(ds.labels, out / "gallery_ids.txt")
    evaluation.write_labels(ds.cams, out / "gallery_cams.txt")
    print(f"wrote {len(held.labels)} query and {len(ds.labels)} gallery tracks to {out}")
    return 0


def _load_encoder(path, config_path):
    config = None
    if config_path:
        config = load_run_config(config_path).model
    return checkpoint.load_checkpoint(path, config)


def cmd_extract(args) -> int:
    enc = _load_encoder(args.checkpoint, args.config)
    tracks = read_tensor(args.input)
    if tracks.size == 0:
        tracks = tracks.reshape((0,) + (tracks.shape[1:] if tracks.ndim == 5 else ()))
    elif tracks.ndim != 5:
        raise ShapeError(f"input must be n x C x T x H x W, got {tracks.shape}")
    feats = evaluation.extract_features(enc, tracks.astype(enc.dtype, copy=False), args.batch_size)
    write_tensor(feats, args.output)
    print(f"features {feats.shape[0]} x {feats.shape[1]} -> {args.output}")
    return 0


def cmd_distances(args) -> int:
    qf, gf = read_tensor(args.query), read_tensor(args.gallery)
    d = evaluation.distance_matrix(qf, gf)
    write_tensor(d, args.output)
    print(f"distances {d.shape[0]} x {d.shape[1]} -> {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    dist = read_tensor(args.distances)
    if dist.ndim != 2:
        raise ShapeError(f"distance tensor must be 2-D, got {dist.shape}")
    cams = (None, None)
    if bool(args.query_cams) != bool(args.gallery_cams):
        raise UsageError("--query-cams and --gallery-cams go together")
    if args.query_cams:
        cams = (evaluation.read_labels(args.query_cams), evaluation.read_labels(args.gallery_cams))
    proto = evaluation.EvalProtocol(
        evaluation.read_labels(args.query_ids), evaluation.read_labels(args.gallery_ids), dist, *cams
    )
    result = evaluation.evaluate(proto, max(args.ranks))
    text = evaluation.result_csv(result, args.ranks)
    sys.stdout.write(text)
    if result.n_skipped:
        print(f"skipped {result.n_skipped} queries without a valid match", file=sys.stderr)
    if args.output:
        Path(args.output).write_text(text)
    return 0


def _stats(t: np.ndarray) -> str:
    lines = [f"shape: {tuple(t.shape)}", f"dtype: {t.dtype}"]
    if t.size:
        lines += [f"min: {t.min():.9g}", f"max: {t.max():.9g}", f"mean: {t.mean():.9g}", f"std: {t.std():.9g}"]
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    t = read_tensor(args.file)
    print(_stats(t))
    if not args.attention:
        return 0
    if not (args.checkpoint and args.input):
        raise UsageError("--attention needs --checkpoint and --input")
    enc = _load_encoder(args.checkpoint, None)
    tracks = read_tensor(args.input)
    enc.forward(tracks.astype(enc.dtype, copy=False))
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    for name, attn in enc.attention_maps().items():
        path = out / f"attention_{name}.tnsr"
        write_tensor(attn, path)
        print(f"{name}: {tuple(attn.shape)} -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reid3d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--op", choices=sorted(gradcheck.CHECKS))
    p.add_argument("--cases", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the synthetic dataset described by a run config")
    p.add_argument("--config", type=_existing, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="write query/gallery tracks and labels for a run config")
    p.add_argument("--config", type=_existing, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="embed tracks with a trained checkpoint")
    p.add_argument("--checkpoint", type=_existing, required=True)
    p.add_argument("--input", type=_existing, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", type=_existing, help="run config whose model digest must match")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("distances", help="Euclidean query x gallery distance matrix")
    p.add_argument("--query", type=_existing, required=True)
    p.add_argument("--gallery", type=_existing, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("evaluate", help="CMC and mAP from a distance matrix and label files")
    p.add_argument("--distances", type=_existing, required=True)
    p.add_argument("--query-ids", type=_existing, required=True)
    p.add_argument("--gallery-ids", type=_existing, required=True)
    p.add_argument("--query-cams", type=_existing)
    p.add_argument("--gallery-cams", type=_existing)
    p.add_argument("--ranks", type=_ranks, default=[1, 5, 10])
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="summarise a tensor file, optionally dump attention maps")
    p.add_argument("--file", type=_existing, required=True)
    p.add_argument("--attention", action="store_true")
    p.add_argument("--checkpoint", type=_existing)
    p.add_argument("--input", type=_existing)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except (UsageError, TensorFormatError, CheckpointError, ShapeError, ReidError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
