"""Command-line entry points: gen, train, eval, render, gradcheck."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as cfgmod
from .dataio import AccessLog, FrameReader, audit_weak_supervision, read_dataset, write_dataset
from .fusion import evaluate
from .gradchecks import COMPONENTS, run_all, run_component
from .render import render_frame, save_eval_figure
from .scenesim import generate_scene, overlap_factor
from .training import load_model, train_staged


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.default_config()
    if getattr(args, "seed", None) is not None:
        cfg.scene.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "supervision", None):
        cfg.train.supervision = args.supervision
    if getattr(args, "ablate_distance", False):
        cfg.train.use_distance = False
    if getattr(args, "ablate_match_supervision", False):
        cfg.train.use_match_supervision = False
    cfg.validate()
    return cfg


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output dir {out} is not empty (use --force)", file=sys.stderr)
        return 2
    frames, warnings = generate_scene(cfg.scene)
    manifest = write_dataset(frames, cfg.scene, out, warnings)
    factor = overlap_factor(frames)
    print(f"wrote {len(frames)} frames ({len(manifest.splits['train'])} train / "
          f"{len(manifest.splits['test'])} test) to {out}")
    print(f"views: {cfg.scene.views}, image {cfg.scene.image_w}x{cfg.scene.image_h}, "
          f"seed {cfg.scene.seed}")
    print(f"overlap factor (sum of view counts / scene count, mean): {factor:.3f}")
    for w in warnings:
        print(f"warning: {w}")
    if cfg.scene.views == 1:
        print("warning: single-view dataset; homography and fusion stages are untrainable")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = read_dataset(args.dataset)
    log = AccessLog()
    reader = FrameReader(manifest, log)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    results = train_staged(cfg, reader, run_dir, stage=args.stage)
    for res in results:
        print(f"stage {res.stage}: final loss {res.final_loss:.6f} -> {res.checkpoint}")
    if cfg.train.supervision == "weak":
        problems = audit_weak_supervision(log)
        if problems:
            print("weak-supervision audit FAILED:", file=sys.stderr)
            for p in problems:
                print(f"  {p}", file=sys.stderr)
            return 3
        print("weak-supervision audit passed: no head locations or density ground "
              "truth read outside cross-view ground-truth construction")
    return 0


def _parse_views(text: str | None, available: int) -> list | None:
    if not text:
        return None
    views = [int(tok) - 1 for tok in text.split(",") if tok.strip()]
    bad = [v + 1 for v in views if not 0 <= v < available]
    if bad:
        raise SystemExit(f"error: views {bad} not in dataset (1..{available})")
    return views


def _checkpoint_path(arg: str) -> Path:
    path = Path(arg)
    if path.is_dir():
        return path / "fusion.ckpt"
    return path


def cmd_eval(args) -> int:
    bundle, ck_config = load_model(_checkpoint_path(args.checkpoint))
    manifest = read_dataset(args.dataset)
    if list(manifest.image_size) != list(ck_config["scene"]["image_size"] if "image_size" in ck_config["scene"] else [ck_config["scene"]["image_w"], ck_config["scene"]["image_h"]]):
        print("error: checkpoint and dataset image sizes differ", file=sys.stderr)
        return 2
    if args.ablate_match_supervision and ck_config["train"]["use_match_supervision"]:
        print("error: --ablate-match-supervision needs a checkpoint trained without "
              "match supervision (train with --ablate-match-supervision)", file=sys.stderr)
        return 2
    reader = FrameReader(manifest)
    views = _parse_views(args.views, manifest.views)
    use_distance = ck_config["train"]["use_distance"] and not args.ablate_distance
    report = evaluate(
        bundle,
        reader,
        split=args.split,
        views=views,
        use_distance=use_distance,
        unit_weights=args.unit_weights,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = report.to_csv(out / f"eval_views{report.views_label.replace('+', '-')}.csv")
    fig_path = save_eval_figure(report, csv_path.with_suffix(".png"))
    print(f"views {report.views_label}: MAE {report.mae:.3f}  NAE {report.nae:.3f} "
          f"({report.excluded_zero_gt} zero-GT frames excluded from NAE)")
    print(f"report: {csv_path}")
    print(f"figure: {fig_path}")
    return 0


def cmd_render(args) -> int:
    bundle, ck_config = load_model(_checkpoint_path(args.checkpoint))
    manifest = read_dataset(args.dataset)
    if args.frame not in manifest.frame_dirs:
        print(f"error: frame {args.frame} not in dataset", file=sys.stderr)
        return 2
    reader = FrameReader(manifest)
    paths = render_frame(
        bundle,
        reader,
        args.frame,
        args.out,
        use_distance=ck_config["train"]["use_distance"] and not args.ablate_distance,
    )
    print(f"wrote {len(paths)} map images and 1 overview figure to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.component == "all":
        reports = run_all(seed=args.seed or 0)
    else:
        try:
            reports = [run_component(args.component, seed=args.seed or 0)]
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    failed = False
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        extra = f", {rep.resampled} kink points resampled" if rep.resampled else ""
        print(f"{status} {rep.component}: max rel err {rep.max_rel_err:.3e} "
              f"over {rep.points} points{extra}")
        failed |= not rep.passed
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvcount",
        description="Synthetic multi-view crowd counting: generate, train, evaluate, render.",
    )
    parser.add_argument(
        "--print-defaults", action="store_true", help="print the default config as YAML and exit"
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", help="generate a synthetic multi-camera dataset")
    p.add_argument("--config", help="YAML run config (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the staged training procedure")
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--dataset", required=True, help="dataset directory from `gen`")
    p.add_argument("--out", required=True, help="run directory for checkpoints and curves")
    p.add_argument("--stage", default="all", choices=["svcc", "homography", "fusion", "all"])
    p.add_argument("--supervision", choices=["full", "weak"])
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--ablate-distance", action="store_true",
                   help="train the confidence net without distance features")
    p.add_argument("--ablate-match-supervision", action="store_true",
                   help="train the match net without its supervision term")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate scene counts on a split")
    p.add_argument("--checkpoint", required=True, help="fusion checkpoint file or run dir")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="directory for the CSV report and figure")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--views", help="comma-separated 1-based view subset, e.g. 1,3")
    p.add_argument("--ablate-distance", action="store_true",
                   help="zero the distance features at evaluation time")
    p.add_argument("--ablate-match-supervision", action="store_true",
                   help="assert the checkpoint was trained without match supervision")
    p.add_argument("--unit-weights", action="store_true",
                   help="force W=1 everywhere (naive summing baseline)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render maps for one frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate-distance", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference check of a component")
    p.add_argument("component", help=f"one of: {', '.join(sorted(COMPONENTS))}, or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(cfgmod.dump_config(cfgmod.default_config()), end="")
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
