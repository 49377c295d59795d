"""Command-line entry point: ``meshgait {synth,train,eval,reconstruct,ablate,bench}``.

Exit codes: 0 success, 1 other failure (e.g. a non-finite loss), 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from meshgait.errors import ConfigError, DataError, MeshGaitError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("meshgait")


def _run_config(args):
    from meshgait.config import load_config, parse_assignments

    overrides = parse_assignments(getattr(args, "set", None))
    if getattr(args, "data", None):
        overrides["data.root"] = args.data
    if getattr(args, "out", None) and args.command in ("train",):
        overrides["output_dir"] = args.out
    return load_config(args.config, overrides)


def cmd_synth(args) -> int:
    from meshgait.dataset import synth_generate

    counts = synth_generate(args.ids, args.seqs, args.frames, args.seed, args.out)
    print(f"wrote {counts['sequences']} sequences ({counts['identities']} identities, "
          f"{counts['frames']} frames) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from meshgait.train import train

    cfg = _run_config(args)
    result = train(cfg, resume=args.resume)
    print(f"trained {cfg.max_steps} steps; log {result.log_path}; checkpoint {result.checkpoint}")
    if result.report is not None:
        r = result.report
        print(f"rank1 {r.rank1:.2f}  rank5 {r.rank5:.2f}  mAP {r.mAP:.2f}  mINP {r.mINP:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from meshgait.dataset import GaitDataset
    from meshgait.metrics import evaluate
    from meshgait.model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    ds = GaitDataset.from_root(args.data, load_gt=False)
    report = evaluate(model, ds, args.protocol, args.seed, max_frames=args.max_frames or None)
    text = report.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.write(args.out)
    print(text, end="")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from meshgait.dataset import load_sequence
    from meshgait.export import export_frame, read_topology
    from meshgait.model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    seq, _ = load_sequence(args.sequence, load_gt=False)
    if args.frame is not None and not 0 <= args.frame < len(seq):
        raise ConfigError(f"--frame {args.frame} outside [0, {len(seq)})")
    frames = [args.frame] if args.frame is not None else list(range(len(seq)))
    faces = None
    if args.topology:
        faces = read_topology(args.topology, model.cfg.num_vertices)
    with torch.no_grad():
        out = model(torch.from_numpy(np.array(seq.frames))[None], compute_mesh=model.regressor is not None,
                    mesh_frames=frames)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, t in enumerate(frames):
        mesh = out.mesh[0, i].numpy() if out.mesh is not None else None
        written = export_frame(out_dir, t, seq.frames[t], out.keypoints[0, t].numpy(), mesh,
                               model.cfg.num_joints, faces)
        count += len(written)
    print(f"exported {len(frames)} frame(s), {count} files to {out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from meshgait.harness import ablate

    cfg = _run_config(args)
    path, rows = ablate(cfg, args.axis, args.out, args.budget)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    from meshgait.dataset import GaitDataset
    from meshgait.harness import bench
    from meshgait.model import MeshGait, load_checkpoint

    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = _run_config(args)
        torch.manual_seed(cfg.seed)
        model = MeshGait(cfg.model)
    ds = GaitDataset.from_root(args.data, load_gt=False)
    report = bench(model, ds, args.n, args.runs, args.max_frames or None)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshgait", description="Gait recognition with reconstructed 3D heatmaps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="run config file (key = value)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    sp = sub.add_parser("synth", help="write a synthetic walker dataset")
    sp.add_argument("--ids", type=int, default=16)
    sp.add_argument("--seqs", type=int, default=4)
    sp.add_argument("--frames", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    config_args(sp)
    sp.add_argument("--data", help="dataset root (overrides data.root)")
    sp.add_argument("--out", help="output directory (overrides output_dir)")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--protocol", default="gait3d", choices=["gait3d", "cross_view"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-frames", type=int, default=0)
    sp.add_argument("--out", help="CSV path")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("reconstruct", help="export meshes, keypoints and projections for one sequence")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sequence", required=True, help="directory of frame_*.png")
    sp.add_argument("--out", required=True)
    sp.add_argument("--frame", type=int, help="export only this frame")
    sp.add_argument("--topology", help="triangle file (0-based 'i j k' per line) for OBJ faces")
    sp.set_defaults(fn=cmd_reconstruct)

    sp = sub.add_parser("ablate", help="reduced-budget sweep over one design axis")
    config_args(sp)
    sp.add_argument("--axis", required=True, choices=["fusion", "representation", "featdim"])
    sp.add_argument("--data", help="dataset root (overrides data.root)")
    sp.add_argument("--budget", type=float, default=0.2, help="fraction of max_steps per setting")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("bench", help="time inference with and without the mesh head")
    config_args(sp)
    sp.add_argument("--checkpoint", help="model to time (default: fresh model from config)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--n", type=int, default=100, help="sequences per timed pass")
    sp.add_argument("--runs", type=int, default=5, help="timed passes per mode (>= 5)")
    sp.add_argument("--max-frames", type=int, default=0, help="truncate sequences to this many frames")
    sp.add_argument("--out", help="CSV path")
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MeshGaitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
