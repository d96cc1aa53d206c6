"""Command-line pipeline: synth, project, train, eval.

Every subcommand is deterministic given its flags, so rerunning with
the same arguments overwrites byte-identical outputs. Exit status is 0
exactly when all declared outputs were written.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import encoder, evaluation, training
from .geometry import load_sequence_frames
from .projection import aligned_frame_image, write_pgm
from .synth import DEFAULT_VIEWS, FRAMES_PER_SEQUENCE, generate_dataset, read_manifest

VIEW_NAMES = ("rv", "rsv", "bev")
INPUT_MODES = ("depth", "silhouette")

_INT_KEYS = ("p", "k", "l", "total_iters", "seed", "checkpoint_interval")
_FLOAT_KEYS = ("alpha", "beta", "margin", "lr0", "weight_decay", "momentum")


class CliError(Exception):
    pass


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def parse_views(text: str) -> tuple[str, ...]:
    views = tuple(v.strip() for v in text.split(","))
    if not views or len(set(views)) != len(views):
        raise CliError(f"bad view list {text!r}")
    for v in views:
        if v not in VIEW_NAMES:
            raise CliError(f"unknown view {v!r}, expected one of {VIEW_NAMES}")
    return views


def load_run_config(path: str | Path, cfg: training.TrainingConfig):
    """Apply `key=value` overrides (ASCII, # comments) to a preset.

    Returns (TrainingConfig, input_mode or None). Unknown keys and
    unparseable values are rejected.
    """
    overrides = {}
    input_mode = None
    for lineno, raw in enumerate(Path(path).read_text("ascii").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key in _INT_KEYS:
                overrides[key] = int(value)
            elif key in _FLOAT_KEYS:
                overrides[key] = float(value)
            elif key == "milestones":
                overrides[key] = tuple(
                    int(m) for m in value.split(",") if m.strip()
                )
            elif key == "input":
                if value not in INPUT_MODES:
                    raise CliError(
                        f"{path}:{lineno}: input must be one of {INPUT_MODES}"
                    )
                input_mode = value
            else:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    try:
        cfg = dataclasses.replace(cfg, **overrides)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from exc
    return cfg, input_mode


def identity_split(records):
    """Sorted identities, first 75% (floored) train, remainder test."""
    identities = sorted({r.identity for r in records})
    n_train = (3 * len(identities)) // 4
    train_ids = set(identities[:n_train])
    train_recs = [r for r in records if r.identity in train_ids]
    test_recs = [r for r in records if r.identity not in train_ids]
    return train_recs, test_recs, n_train, len(identities) - n_train


def cmd_synth(args) -> int:
    attributes = tuple(a.strip() for a in args.attributes.split(","))
    views = DEFAULT_VIEWS if args.views is None \
        else tuple(int(v) for v in args.views.split(","))
    out = Path(args.out)
    records = generate_dataset(
        out, args.ids, attributes=attributes, seed=args.seed,
        views=views, n_frames=args.frames,
    )
    print(f"{out / 'manifest.csv'}: {len(records)} sequences")
    return 0


def cmd_project(args) -> int:
    frames = load_sequence_frames(args.in_dir)
    if not frames:
        raise CliError(f"no frames found in {args.in_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        img = aligned_frame_image(frame, args.view, silhouette=args.silhouette)
        write_pgm(out / f"{i:03d}.pgm", img)
    print(f"{out}: {len(frames)} {args.view} images")
    return 0


def cmd_train(args) -> int:
    data = Path(args.data)
    records = read_manifest(data / "manifest.csv")
    presets = {"paper": training.paper_preset, "desk": training.desk_preset}
    cfg = presets[args.preset]()
    input_mode = "depth"
    if args.config is not None:
        cfg, file_input = load_run_config(args.config, cfg)
        if file_input is not None:
            input_mode = file_input
    views = parse_views(args.views)
    train_recs, _, n_train, n_test = identity_split(records)
    if not train_recs:
        raise CliError("training split is empty")
    result = training.train(
        data, train_recs, cfg, views=views, input_mode=input_mode
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    encoder.save_params(out, result.params)
    log_path = out.with_name(out.name + ".log.csv")
    training.write_log(
        log_path, result.log_rows,
        comments=[
            f"preset={args.preset}",
            f"milestones={','.join(str(m) for m in cfg.milestones)}",
            f"views={','.join(views)}",
            f"input={input_mode}",
            f"split={n_train}/{n_test}",
        ],
    )
    final = result.log_rows[-1][3] if result.log_rows else float("nan")
    print(f"{out}: trained {cfg.total_iters} iters, final loss {final:.4f}")
    print(f"{log_path}")
    return 0


def cmd_eval(args) -> int:
    try:
        params = encoder.load_params(args.ckpt)
    except (ValueError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    if args.views is not None and parse_views(args.views) != params.views:
        raise CliError(
            f"checkpoint was trained with views {','.join(params.views)}, "
            f"not {args.views}"
        )
    data = Path(args.data)
    records = read_manifest(data / "manifest.csv")
    _, test_recs, n_train, n_test = identity_split(records)
    if not test_recs:
        raise CliError("test split is empty")
    emb = evaluation.extract_embeddings(
        params, data, test_recs, frames_limit=args.frames, seed=args.seed
    )
    role = "normal_gallery" if args.gallery == "normal" else "variant_gallery"
    suffix = "" if args.gallery == "normal" else "_variant"
    report = evaluation.attribute_report(emb, ks=(1, 5), gallery_role=role)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"report{suffix}.csv"
    evaluation.write_report_csv(
        report_path, report,
        header={
            "split": f"{n_train}/{n_test}",
            "frames": "all" if args.frames is None else str(args.frames),
            "views": ",".join(params.views),
            "input": params.input_mode,
        },
    )
    for (attr, k), matrix in report.matrices.items():
        name = "overall" if attr is None else attr
        stem = f"matrix_{name}_rank{k}{suffix}"
        evaluation.write_matrix_csv(out / f"{stem}.csv", matrix)
        if args.heatmaps:
            evaluation.write_matrix_heatmap(out / f"{stem}.pgm", matrix)
    print(f"{report_path}")
    for k in (1, 5):
        print(
            f"rank-{k}: overall_pooled {100 * report.overall_pooled[k]:.2f}"
            f" overall_mean {100 * report.overall_mean[k]:.2f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcgait",
        description="LiDAR gait pipeline: synthesize, project, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--ids", type=positive_int, required=True)
    p.add_argument("--attributes", default="normal",
                   help="comma-separated walk attributes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", default=None,
                   help="comma-separated view angles in degrees")
    p.add_argument("--frames", type=positive_int, default=FRAMES_PER_SEQUENCE)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", help="render aligned images for one sequence")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="directory of .pcf frames")
    p.add_argument("--view", choices=VIEW_NAMES, default="rv")
    p.add_argument("--silhouette", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train the encoder on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="key=value override file")
    p.add_argument("--preset", choices=("paper", "desk"), default="desk")
    p.add_argument("--views", default="rv")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-view retrieval report on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--views", default=None,
                   help="must match the checkpoint when given")
    p.add_argument("--frames", type=positive_int, default=None,
                   help="frame budget per sequence (default: all)")
    p.add_argument("--seed", type=int, default=0,
                   help="frame subsampling seed")
    p.add_argument("--gallery", choices=("normal", "variant"), default="normal")
    p.add_argument("--heatmaps", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    for sp in sub.choices.values():
        sp.add_argument("--threads", type=positive_int, default=None,
                        help="cap BLAS worker threads")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (CliError, ValueError, RuntimeError, OSError) as exc:
        print(f"pcgait: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
