"""Prompt framework for the video-to-text sources.

The template is a fixed byte sequence: changing it changes what the
generation models describe, so downstream embeddings silently shift. Tests
pin its hash; edit deliberately or not at all.
"""

from __future__ import annotations

import hashlib

PROMPT_TEMPLATE = (
    "Here's the caption of the video: {caption}. "
    "Please carefully answer the following questions based on the caption and video:\n"
    "1. Can you analyze the video in terms of its content interestingness, "
    "including emotional appeal, engagement strategies, pacing, and uniqueness?\n"
    "2. How do the scene transitions affect pacing, engagement, and narrative flow?\n"
    "3. How do camera movements like panning, zooming, and tracking enhance "
    "storytelling, emotional tone, and immersion?\n"
    "4. What is the central plot conflict, and how does it affect character "
    "development and viewer engagement?\n"
    "5. How would you evaluate the quality of the presentation, including "
    "visuals, audio, and production techniques?\n"
    "6. What makes the video entertaining, and how do engaging moments and "
    "visual storytelling contribute to its popularity?\n"
    "7. How does the genre influence both its initial and long-term popularity?\n"
    "8. Finally, how does the emotional tone conveyed through visuals, music, "
    "and narration impact viewer connection?\n"
)


def build_prompt(caption: str) -> str:
    """Substitute the caption into the fixed template, byte-exact otherwise."""
    return PROMPT_TEMPLATE.replace("{caption}", caption)


def template_sha256() -> str:
    return hashlib.sha256(PROMPT_TEMPLATE.encode("utf-8")).hexdigest()
