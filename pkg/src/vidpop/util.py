"""Small shared helpers: deterministic seeding and JSON/CSV writing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any


def derive_seed(base_seed: int, *tokens) -> int:
    """Stable 63-bit seed derived from a base seed and string-able tokens.

    Used wherever independent sub-jobs (per target, per ablation cell) need
    their own RNG stream that does not depend on execution order.
    """
    key = ":".join([str(int(base_seed))] + [str(t) for t in tokens])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def dump_json(obj: Any, path: str | Path) -> None:
    """Write JSON with sorted keys and a trailing newline (byte-stable reruns)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_json(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def fmt_float(x: float) -> str:
    """Shortest decimal text that round-trips to the same binary64 value."""
    return repr(float(x))
