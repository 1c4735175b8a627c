"""sfeb-export command line: flags mirror the ExportJob fields."""

from __future__ import annotations

import argparse
import logging
import sys

from sfeb_export.backend import make_backend
from sfeb_export.errors import ExporterError
from sfeb_export.export import ExportJob, run_export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfeb-export",
        description="Export per-epoch multimodal embeddings to SFEB exchange files.",
    )
    parser.add_argument("--manifest", required=True, help="cohort manifest JSON")
    parser.add_argument(
        "--modality", required=True, choices=["eog_audio", "psm_video"]
    )
    parser.add_argument("--out", required=True, help="output SFEB path")
    parser.add_argument(
        "--backend", default="imagebind", choices=["imagebind", "stub"],
        help="embedding backend (stub = deterministic contract-test backend)",
    )
    parser.add_argument("--weights", help="pre-trained checkpoint path (imagebind)")
    parser.add_argument("--device", default="cpu", help="inference device")
    parser.add_argument(
        "--window-policy", default="split_mean", choices=["split_mean"],
        help="long-input handling: split into native clips and mean-pool",
    )
    parser.add_argument("--clip-seconds", type=float, default=2.0)
    parser.add_argument(
        "--eog-channels", default="mix", choices=["mix", "split", "left", "right"],
        help="dual-channel handling; 'split' writes <out>.left/.right files",
    )
    return parser


def _run_one(args, channel_policy: str, out_path: str) -> int:
    job = ExportJob(
        manifest_path=args.manifest,
        modality=args.modality,
        out_path=out_path,
        device=args.device,
        window_policy=args.window_policy,
        clip_seconds=args.clip_seconds,
        channel_policy=channel_policy,
    )
    backend = make_backend(args.backend, weights_path=args.weights, device=args.device)
    summary = run_export(job, backend)
    print(
        f"{out_path}: wrote {summary.written}/{summary.attempted} epochs "
        f"(dim {summary.dim}, {len(summary.skipped)} skipped)"
    )
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.modality == "eog_audio" and args.eog_channels == "split":
            rc = _run_one(args, "left", str(args.out) + ".left")
            rc |= _run_one(args, "right", str(args.out) + ".right")
            return rc
        policy = args.eog_channels if args.eog_channels != "split" else "mix"
        return _run_one(args, policy, args.out)
    except ExporterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
