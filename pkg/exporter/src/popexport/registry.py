"""The six embedding sources and their backbone checkpoints.

Sources 1-4 pool video-encoder features directly; sources 5-6 run a
video-to-text model over the prompt framework and encode the generated
description with BERT (768-dim).
"""

from __future__ import annotations

from dataclasses import dataclass

TEXT_ENCODER_CHECKPOINT = "bert-base-uncased"
TEXT_DIM = 768
GENERATION_MAX_TOKENS = 512


@dataclass(frozen=True)
class SourceEntry:
    source_id: int
    name: str
    kind: str  # "video" | "text"
    checkpoint: str
    dim: int
    n_frames: int


REGISTRY = {
    1: SourceEntry(1, "VideoMAE", "video", "MCG-NJU/videomae-base", 768, 16),
    2: SourceEntry(2, "ViViT", "video", "google/vivit-b-16x2-kinetics400", 768, 32),
    3: SourceEntry(3, "TimeSformer", "video", "facebook/timesformer-base-finetuned-k400", 768, 8),
    4: SourceEntry(4, "X-CLIP", "video", "microsoft/xclip-base-patch32", 512, 8),
    5: SourceEntry(5, "LLaVA-NeXT", "text", "llava-hf/LLaVA-NeXT-Video-7B-hf", TEXT_DIM, 16),
    6: SourceEntry(6, "InternVideo2", "text", "OpenGVLab/InternVideo2-Chat-8B", TEXT_DIM, 16),
}


def get_source(source_id: int) -> SourceEntry:
    if source_id not in REGISTRY:
        raise ValueError(f"source_id must be 1..6, got {source_id}")
    return REGISTRY[source_id]
