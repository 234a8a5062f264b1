"""Command-line interface: ``recontrack <subcommand> ...``."""
import argparse
import sys
from pathlib import Path

from . import io as rio
from .config import PipelineConfig, load_config
from .errors import ConfigError, RecontrackError
from .metrics import evaluate
from .pipeline import (
    Sequence,
    report_timings,
    run_pipeline,
    write_outputs,
    write_reconstructions,
    write_trajectories,
)

EXIT_OK, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2


def _add_pipeline_flags(p):
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--online", action="store_true", help="causal forward-only mode")
    p.add_argument("--stage", choices=("full", "no-fill", "2d-only"))
    p.add_argument("--max-gap", type=int, metavar="N", help="merge window in frames (default 20)")
    p.add_argument("--tmr-residual", type=float, metavar="R", help="trusted-motion residual, m (default 1.0)")
    p.add_argument("--merge-score", type=float, metavar="S", help="Mahalanobis merge gate (default 12)")
    p.add_argument("--threads", type=int, metavar="T", help="worker threads (default 1)")
    p.add_argument("--mask-provider", choices=("depth-consistent", "precomputed"))
    p.add_argument("--precomputed-masks", metavar="FILE")
    p.add_argument("--classes", help="comma-separated class filter")
    p.add_argument("--quiet", action="store_true", help="no timing report on stderr")


def _config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return cfg.override(
        mode="online" if args.online else None,
        stage=args.stage,
        max_gap=args.max_gap,
        residual_max=args.tmr_residual,
        merge_score=args.merge_score,
        threads=args.threads,
        mask_provider=args.mask_provider,
        precomputed_masks=args.precomputed_masks,
        classes=tuple(c.strip() for c in args.classes.split(",")) if args.classes else None,
    )


def _run(args):
    cfg = _config(args)
    seq = Sequence.from_dir(args.sequence)
    result = run_pipeline(seq, cfg)
    if not args.quiet:
        report_timings(result)
    return result


def cmd_track(args):
    result = _run(args)
    box, mask = write_outputs(result, args.output)
    print(f"{len(result.tracks)} tracks, {len(result.records)} records -> {box}, {mask}")


def cmd_dump_recon(args):
    result = _run(args)
    write_reconstructions(result.motions, args.output)
    print(f"{len(result.motions)} tracklet reconstructions -> {args.output}")


def cmd_dump_traj(args):
    result = _run(args)
    write_trajectories(result.tracks, args.output)
    print(f"{sum(len(t.frames()) for t in result.tracks)} trajectory lines -> {args.output}")


def cmd_eval(args):
    if args.mode == "mask":
        gt, pred = rio.read_mask_records(args.gt), rio.read_mask_records(args.pred)
    else:
        gt, pred = rio.read_box_records(args.gt), rio.read_box_records(args.pred)
    sys.stdout.write(evaluate(gt, pred, args.mode).format())


def cmd_synth(args):
    from . import synth

    out = Path(args.output)
    if args.script:
        scripts = [synth.parse_script(Path(args.script).read_text())]
        names = [out]
    elif args.suite:
        scripts = synth.make_suite(args.count, depth_noise=args.depth_noise)
        names = [out / f"scene_{i:02d}" for i in range(len(scripts))]
    else:
        scripts = [synth.make_scene(args.seed, depth_noise=args.depth_noise)]
        names = [out]
    for s, d in zip(scripts, names):
        if args.depth_noise is not None:
            s.depth_noise = args.depth_noise
        synth.write_bundle(synth.render(s), d)
        print(f"wrote {d}")


def cmd_convert_rle(args):
    if args.to == "plain":
        rio.convert_coco_to_plain(args.src, args.dst)
    else:
        rio.convert_plain_to_coco(args.src, args.dst)


def build_parser():
    ap = argparse.ArgumentParser(prog="recontrack", description="Tracklet merging by 3D motion consistency.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="run the tracker on a sequence directory")
    _add_pipeline_flags(p)
    p.add_argument("output", help="output directory for tracks_box.txt and tracks_mask.txt")
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("gt")
    p.add_argument("pred")
    p.add_argument("--mode", choices=("box", "mask"), default="mask")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("synth", help="render synthetic sequences")
    p.add_argument("output")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--suite", action="store_true", help="render the benchmark suite")
    g.add_argument("--script", help="scene script file")
    p.add_argument("--count", type=int, default=20, help="suite size")
    p.add_argument("--depth-noise", type=float, default=None, metavar="SIGMA")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("convert-rle", help="convert between compressed and plain RLE mask files")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--to", choices=("plain", "coco"), required=True)
    p.set_defaults(fn=cmd_convert_rle)

    p = sub.add_parser("dump-recon", help="write per-tracklet fused point clouds and transform logs")
    _add_pipeline_flags(p)
    p.add_argument("output", help="output directory")
    p.set_defaults(fn=cmd_dump_recon)

    p = sub.add_parser("dump-traj", help="write per-track 3D centres as 'frame track_id x y z'")
    _add_pipeline_flags(p)
    p.add_argument("output", help="output file")
    p.set_defaults(fn=cmd_dump_traj)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RecontrackError, OSError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
