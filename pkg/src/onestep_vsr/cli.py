"""Command line entry points: train, upscale, eval, demo-data.

Exit code 0 on success; on failure a single categorized error line
("error: <category>: <message>") goes to stderr and the exit code is
2 (usage/config), 3 (data/io) or 4 (internal).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import ContractViolation, load_clip, save_clip
from .data import ClipDataset, make_demo_clip
from .harness import (
    EvalReport,
    RunConfig,
    TrainingState,
    evaluate,
    infer_clip,
    load_state,
    save_loss_plot,
    save_state,
    train,
)
from .objectives import NonFiniteLossError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onestep-vsr",
        description="One-step diffusion video super-resolution at toy scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="key = value config file")
    p_train.add_argument("--plot", action="store_true", help="also write loss curves as PNG")
    p_train.add_argument("--quiet", action="store_true")

    p_up = sub.add_parser("upscale", help="upscale a directory of LR frames")
    p_up.add_argument("--in", dest="input", required=True, help="clip directory of frame_*.png")
    p_up.add_argument("--out", required=True, help="output clip directory")
    p_up.add_argument("--checkpoint", required=True)

    p_eval = sub.add_parser("eval", help="evaluate predicted clips against references")
    p_eval.add_argument("--pred", required=True, help="clip dir, or root of clip dirs")
    p_eval.add_argument("--ref", default=None, help="matching reference dir (optional)")
    p_eval.add_argument("--report", required=True, help="output JSON report path")
    p_eval.add_argument("--alpha", type=float, default=50.0,
                        help="warp-confidence scaling for the warping error")

    p_demo = sub.add_parser("demo-data", help="generate procedural demo clips")
    p_demo.add_argument("--kind", choices=("static", "shift", "rotate"), default="shift")
    p_demo.add_argument("--out", required=True)
    p_demo.add_argument("--clips", type=int, default=4)
    p_demo.add_argument("--frames", type=int, default=5)
    p_demo.add_argument("--size", type=int, default=96)
    p_demo.add_argument("--seed", type=int, default=0)
    return parser


def _collect_clip_dirs(root: Path) -> list[Path]:
    """A directory is itself a clip if it holds frame_*.png; else its subdirs are."""
    if any(root.glob("frame_*.png")):
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("frame_*.png")))
    if not dirs:
        raise IOError(f"no frame_*.png clips found under {root}")
    return dirs


def _cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if not cfg.data_root:
        raise ContractViolation("config must set data_root for training")
    dataset = ClipDataset(
        Path(cfg.data_root),
        clip_len=cfg.clip_len,
        crop=cfg.crop,
        degradation=cfg.degradation(),
        seed=cfg.seed,
    ).materialize()
    pretrain_frames = [f for hr, _ in dataset for f in hr.frames]
    state = TrainingState.initialize(cfg, pretrain_frames, verbose=not args.quiet)
    history = train(state, dataset, out_dir=cfg.out_dir, verbose=not args.quiet)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_state(state, out / "model.ckpt")
    (out / "loss_history.json").write_text(json.dumps(history, indent=2))
    if args.plot:
        save_loss_plot(history, out / "loss_curves.png")
    if not args.quiet:
        print(f"checkpoint written to {out / 'model.ckpt'}")
    return 0


def _cmd_upscale(args) -> int:
    state = load_state(args.checkpoint)
    lr = load_clip(args.input, "lr")
    out_clip = infer_clip(lr, state)
    save_clip(out_clip, args.out)
    print(f"wrote {len(out_clip)} frames at {out_clip.width}x{out_clip.height} to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    pred_dirs = _collect_clip_dirs(Path(args.pred))
    pairs = []
    for pd in pred_dirs:
        pred = load_clip(pd, "hr")
        ref = None
        if args.ref:
            ref_root = Path(args.ref)
            ref_dir = ref_root if pd == Path(args.pred) else ref_root / pd.name
            if ref_dir.exists():
                ref = load_clip(ref_dir, "hr")
        pairs.append((pred, ref))
    report = evaluate(pairs, conf_alpha=args.alpha)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(report.to_json())
    agg_psnr = "n/a" if report.psnr is None else f"{report.psnr:.3f} dB"
    agg_warp = "n/a" if report.warping_error is None else f"{report.warping_error:.4f}"
    print(f"clips: {len(pairs)}  psnr: {agg_psnr}  warping_error(x1e-3): {agg_warp}")
    return 0


def _cmd_demo_data(args) -> int:
    out = Path(args.out)
    for k in range(args.clips):
        shift = [(2, 0), (-2, 0), (0, 2), (1, 1)][k % 4]
        clip = make_demo_clip(
            args.kind, args.frames, (args.size, args.size),
            seed=args.seed * 1000 + k, shift=shift,
        )
        save_clip(clip, out / f"clip_{k:03d}")
    print(f"wrote {args.clips} {args.kind} clips to {out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "upscale": _cmd_upscale,
    "eval": _cmd_eval,
    "demo-data": _cmd_demo_data,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ContractViolation as err:
        print(f"error: config: {err}", file=sys.stderr)
        return 2
    except (IOError, FileNotFoundError) as err:
        print(f"error: data: {err}", file=sys.stderr)
        return 3
    except NonFiniteLossError as err:
        print(f"error: training-aborted: {err}", file=sys.stderr)
        return 4
    except Exception as err:  # noqa: BLE001
        print(f"error: internal: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
