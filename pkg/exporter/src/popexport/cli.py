"""Exporter command line.

    popexport export --source <1-6> --videos <dir> --captions <csv> \
        --out <file> [--stub --seed N] [--device cpu] [--batch-size N]

Stub mode needs no checkpoints or video files and is fully deterministic
given (seed, video_id, source_id).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .extract import ExportJob, JobFailed, extract_embeddings


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popexport")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="extract one source's embeddings to a v1 file")
    p.add_argument("--source", type=int, required=True, choices=range(1, 7))
    p.add_argument("--videos", required=True, help="directory of <video_id>.<ext> files")
    p.add_argument("--captions", required=True, help="CSV with video_id and caption columns")
    p.add_argument("--out", required=True, help="output embedding file path")
    p.add_argument("--stub", action="store_true", help="seeded pseudo-embeddings, no models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--device", default="cpu")
    p.add_argument("--batch-size", type=int, default=4)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    job = ExportJob(
        source_id=args.source,
        videos_dir=args.videos,
        captions_csv=args.captions,
        out_path=args.out,
        device=args.device,
        batch_size=args.batch_size,
        stub=args.stub,
        seed=args.seed,
    )
    try:
        path = extract_embeddings(job)
    except JobFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if job.missing:
        print(f"wrote {path} ({len(job.missing)} ids missing)")
    else:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
