"""Embedding extraction jobs.

Two backends share the job runner: the real one loads the source's
pretrained backbone (sources 1-4 mean-pool final-layer tokens; sources 5-6
generate a capped description through the prompt framework and mean-pool a
BERT encoding of it), and a stub one that emits seeded pseudo-embeddings of
the declared dims so the rest of the pipeline can run without checkpoints.

Per-video failures are logged and appended to the job's missing list; a job
fails outright only when no video succeeds.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .format import write_embedding_file
from .prompt import build_prompt
from .registry import GENERATION_MAX_TOKENS, TEXT_ENCODER_CHECKPOINT, SourceEntry, get_source

log = logging.getLogger(__name__)

VIDEO_EXTENSIONS = (".mp4", ".mov", ".avi", ".mkv", ".webm")


class JobFailed(RuntimeError):
    pass


@dataclass
class ExportJob:
    source_id: int
    videos_dir: str
    captions_csv: str
    out_path: str
    device: str = "cpu"
    batch_size: int = 4
    stub: bool = False
    seed: int = 0
    missing: list[str] = field(default_factory=list)

    @property
    def source(self) -> SourceEntry:
        return get_source(self.source_id)


def read_captions(path: str | Path) -> list[tuple[str, str]]:
    """(video_id, caption) pairs from any CSV carrying those two columns."""
    with open(path, "r", encoding="utf-8-sig", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "video_id" not in reader.fieldnames:
            raise JobFailed(f"{path}: captions CSV must have a video_id column")
        has_caption = "caption" in reader.fieldnames
        out = []
        for row in reader:
            out.append((row["video_id"], row["caption"] if has_caption else ""))
    return out


def find_video_file(videos_dir: str | Path, video_id: str) -> Path | None:
    base = Path(videos_dir)
    for ext in VIDEO_EXTENSIONS:
        candidate = base / f"{video_id}{ext}"
        if candidate.exists():
            return candidate
    return None


def stub_vector(seed: int, video_id: str, source_id: int, dim: int) -> np.ndarray:
    """Deterministic pseudo-embedding keyed by (seed, video_id, source_id)."""
    key = f"{seed}:{source_id}:{video_id}".encode("utf-8")
    digest = hashlib.sha256(key).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    return rng.standard_normal(dim)


# --- real backends (require torch + transformers + a reachable checkpoint) -----


class _VideoBackend:
    """Pooled features from a pretrained video encoder (sources 1-4)."""

    def __init__(self, entry: SourceEntry, device: str):
        import torch
        from transformers import AutoImageProcessor, AutoModel

        self.entry = entry
        self.torch = torch
        self.device = device
        self.processor = AutoImageProcessor.from_pretrained(entry.checkpoint)
        self.model = AutoModel.from_pretrained(entry.checkpoint).to(device).eval()

    def _sample_frames(self, path: Path) -> list:
        import cv2

        cap = cv2.VideoCapture(str(path))
        try:
            total = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
            if total <= 0:
                raise JobFailed(f"{path}: no readable frames")
            wanted = np.linspace(0, total - 1, self.entry.n_frames).astype(int)
            frames = []
            for idx in wanted:
                cap.set(cv2.CAP_PROP_POS_FRAMES, int(idx))
                ok, frame = cap.read()
                if not ok:
                    raise JobFailed(f"{path}: failed reading frame {idx}")
                frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
            return frames
        finally:
            cap.release()

    def embed(self, path: Path, caption: str) -> np.ndarray:
        frames = self._sample_frames(path)
        inputs = self.processor(frames, return_tensors="pt").to(self.device)
        with self.torch.no_grad():
            outputs = self.model(**inputs)
        hidden = outputs.last_hidden_state  # (1, tokens, dim)
        return hidden.mean(dim=1)[0].cpu().numpy().astype(np.float64)


class _TextBackend:
    """Generated-description features for sources 5-6: prompt + video into the
    generation model (capped at 512 new tokens), output mean-pooled by BERT."""

    def __init__(self, entry: SourceEntry, device: str):
        import torch
        from transformers import (
            AutoModel,
            AutoProcessor,
            AutoTokenizer,
            AutoModelForVision2Seq,
        )

        self.entry = entry
        self.torch = torch
        self.device = device
        self.processor = AutoProcessor.from_pretrained(entry.checkpoint)
        self.generator = AutoModelForVision2Seq.from_pretrained(entry.checkpoint).to(device).eval()
        self.encoder_tok = AutoTokenizer.from_pretrained(TEXT_ENCODER_CHECKPOINT)
        self.encoder = AutoModel.from_pretrained(TEXT_ENCODER_CHECKPOINT).to(device).eval()

    def embed(self, path: Path, caption: str) -> np.ndarray:
        prompt = build_prompt(caption)
        inputs = self.processor(text=prompt, videos=str(path), return_tensors="pt").to(self.device)
        with self.torch.no_grad():
            generated = self.generator.generate(**inputs, max_new_tokens=GENERATION_MAX_TOKENS)
        description = self.processor.batch_decode(generated, skip_special_tokens=True)[0]
        enc = self.encoder_tok(
            description, return_tensors="pt", truncation=True, max_length=512
        ).to(self.device)
        with self.torch.no_grad():
            hidden = self.encoder(**enc).last_hidden_state  # (1, tokens, 768)
        return hidden.mean(dim=1)[0].cpu().numpy().astype(np.float64)


def _make_backend(entry: SourceEntry, device: str):
    try:
        if entry.kind == "video":
            return _VideoBackend(entry, device)
        return _TextBackend(entry, device)
    except ImportError as exc:
        raise JobFailed(
            f"source {entry.source_id} needs torch/transformers (pip install "
            f"'popexport[models]') or --stub mode"
        ) from exc
    except Exception as exc:
        raise JobFailed(
            f"source {entry.source_id}: checkpoint {entry.checkpoint!r} unavailable: {exc}"
        ) from exc


def extract_embeddings(job: ExportJob) -> Path:
    """Run one export job and write its embedding file; returns the path."""
    entry = job.source
    captions = read_captions(job.captions_csv)
    vectors: dict[str, np.ndarray] = {}

    if job.stub:
        for vid, _caption in captions:
            vectors[vid] = stub_vector(job.seed, vid, entry.source_id, entry.dim)
        comments = (f"backend=stub seed={job.seed}",)
    else:
        backend = _make_backend(entry, job.device)
        for vid, caption in captions:
            path = find_video_file(job.videos_dir, vid)
            if path is None:
                log.warning("source %d: no video file for %s", entry.source_id, vid)
                job.missing.append(vid)
                continue
            try:
                vectors[vid] = backend.embed(path, caption)
            except Exception as exc:
                log.warning("source %d: %s failed: %s", entry.source_id, vid, exc)
                job.missing.append(vid)
        comments = (
            f"backend={entry.checkpoint} pooling=mean_final_layer_tokens",
        )
        if entry.kind == "text":
            comments += (
                f"text_encoder={TEXT_ENCODER_CHECKPOINT} "
                f"generation_max_tokens={GENERATION_MAX_TOKENS}",
            )

    if not vectors:
        raise JobFailed(f"source {entry.source_id}: no video produced an embedding")
    write_embedding_file(job.out_path, entry.source_id, entry.dim, vectors, comments)
    return Path(job.out_path)
