"""Writer for the popembed v1 embedding file format.

Line 1: ``#popembed v1 source=<name> id=<1-6> dim=<D>``; optional ``#``
comment lines (used to record the pooling rule); then one
``<video_id><TAB><f1> <f2> ...`` line per video. Floats are written as the
shortest decimal that round-trips to the same binary64, LF endings, written
atomically (temp file + rename) once the whole job is done.
"""

from __future__ import annotations

import math
import os
from pathlib import Path

SOURCE_NAMES = {
    1: "VideoMAE",
    2: "ViViT",
    3: "TimeSformer",
    4: "X-CLIP",
    5: "LLaVA-NeXT",
    6: "InternVideo2",
}


def write_embedding_file(
    path: str | Path,
    source_id: int,
    dim: int,
    vectors: dict,
    comments: tuple[str, ...] = (),
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"#popembed v1 source={SOURCE_NAMES[source_id]} id={source_id} dim={dim}\n")
        for comment in comments:
            fh.write(f"# {comment}\n")
        for vid in sorted(vectors):
            vec = vectors[vid]
            if len(vec) != dim:
                raise ValueError(f"vector for {vid} has {len(vec)} entries, expected {dim}")
            values = [float(v) for v in vec]
            if not all(math.isfinite(v) for v in values):
                raise ValueError(f"vector for {vid} contains non-finite values")
            fh.write(vid + "\t" + " ".join(repr(v) for v in values) + "\n")
    os.replace(tmp, path)
