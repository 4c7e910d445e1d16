"""Container-metadata probe for video files.

Corrupt or unreadable streams yield per-field missing markers (None) rather
than errors, so a batch job keeps going; the caller decides what to do with
all-missing rows.
"""

from __future__ import annotations

import logging
from pathlib import Path

log = logging.getLogger(__name__)

META_FIELDS = ("duration_s", "frame_count", "fps", "width", "height")


def _all_missing() -> dict:
    return {name: None for name in META_FIELDS}


def probe_video_meta(path: str | Path) -> dict:
    """Duration/frames/fps/width/height for one file, None per unreadable field."""
    path = Path(path)
    if not path.exists():
        log.warning("probe: %s does not exist", path)
        return _all_missing()
    try:
        import cv2
    except ImportError as exc:  # pragma: no cover - environment without opencv
        raise RuntimeError("probe_video_meta requires opencv-python-headless") from exc

    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            log.warning("probe: %s is unreadable", path)
            return _all_missing()
        fps = float(cap.get(cv2.CAP_PROP_FPS))
        frames = float(cap.get(cv2.CAP_PROP_FRAME_COUNT))
        width = float(cap.get(cv2.CAP_PROP_FRAME_WIDTH))
        height = float(cap.get(cv2.CAP_PROP_FRAME_HEIGHT))
    finally:
        cap.release()

    meta = _all_missing()
    if fps > 0:
        meta["fps"] = fps
    if frames > 0:
        meta["frame_count"] = frames
    if width > 0:
        meta["width"] = width
    if height > 0:
        meta["height"] = height
    if fps > 0 and frames > 0:
        meta["duration_s"] = frames / fps
    return meta
