"""Trainable input prompts.

Visual prompts are per-frame pixel patterns confined to a border ring of
width ``p`` on the padded canvas; each of the sampled frames carries its own
pattern and the same set is reused for every video (universal prompts). Text
prompts are trainable vectors prepended to the token feature sequence before
positional embeddings.

Application is plain masked arithmetic so it works both on numpy arrays and
on autodiff tensors (gradients flow into the patterns during prompt
training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tvp.autodiff import Tensor, concat
from tvp.frames import FrameBatch

__all__ = [
    "VisualPromptSet",
    "TextPromptSet",
    "PROMPT_MODES",
    "ring_mask",
    "ring_param_count",
    "apply_visual",
    "apply_visual_arrays",
    "apply_text",
    "apply_text_arrays",
    "init_prompts",
]

PROMPT_MODES = ("replace", "add", "remove")


def ring_mask(canvas: int, width: int, dtype=np.float32) -> np.ndarray:
    """(canvas, canvas) mask: 1 on the border ring of the given width."""
    if width < 0 or 2 * width > canvas:
        raise ValueError(f"ring width must satisfy 0 <= p <= canvas/2, got p={width}, canvas={canvas}")
    mask = np.ones((canvas, canvas), dtype=dtype)
    if width == 0:
        return np.zeros((canvas, canvas), dtype=dtype)
    mask[width : canvas - width, width : canvas - width] = 0.0
    return mask


def ring_param_count(canvas: int, width: int, channels: int = 3) -> int:
    """Trainable entries per frame: C * (S^2 - (S - 2p)^2)."""
    return channels * (canvas * canvas - (canvas - 2 * width) ** 2)


@dataclass
class VisualPromptSet:
    """Per-frame pixel patterns, meaningful only on the border ring."""

    patterns: np.ndarray  # (n_sam, C, S, S)
    width: int
    mode: str = "replace"

    def __post_init__(self) -> None:
        p = np.asarray(self.patterns)
        if p.ndim != 4 or p.shape[2] != p.shape[3]:
            raise ValueError(f"expected (n_sam, C, S, S) patterns, got shape {p.shape}")
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"mode must be one of {PROMPT_MODES}, got {self.mode!r}")
        if self.width < 0 or 2 * self.width > p.shape[2]:
            raise ValueError(f"ring width {self.width} out of range for canvas {p.shape[2]}")
        self.patterns = p

    @property
    def n_sam(self) -> int:
        return self.patterns.shape[0]

    @property
    def canvas(self) -> int:
        return self.patterns.shape[2]

    @property
    def params_per_frame(self) -> int:
        return ring_param_count(self.canvas, self.width, self.patterns.shape[1])


@dataclass
class TextPromptSet:
    """Trainable vectors prepended to the textual feature sequence."""

    vectors: np.ndarray  # (n_text, hidden)

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors)
        if v.ndim != 2:
            raise ValueError(f"expected (n_text, hidden) vectors, got shape {v.shape}")
        self.vectors = v

    @property
    def n_text(self) -> int:
        return self.vectors.shape[0]

    @property
    def hidden(self) -> int:
        return self.vectors.shape[1]


def apply_visual_arrays(frames, patterns, mask, mode: str):
    """Masked prompt application; frames/patterns may be ndarrays or Tensors.

    Pixels where mask == 0 pass through bit-identically (multiplying by 1.0
    and adding pattern*0.0 is exact for the non-negative pixel values the
    pipeline produces).
    """
    inv = 1.0 - mask
    if mode == "replace":
        return frames * inv + patterns * mask
    if mode == "add":
        return frames + patterns * mask
    if mode == "remove":
        return frames * inv
    raise ValueError(f"unknown prompt mode {mode!r}")


def apply_visual(batch: FrameBatch, prompts: VisualPromptSet) -> FrameBatch:
    """Apply pattern i to frame i on the border ring; interior is untouched."""
    if batch.frames.shape != prompts.patterns.shape:
        raise ValueError(
            f"frame/prompt shape mismatch: {batch.frames.shape} vs {prompts.patterns.shape}"
        )
    mask = ring_mask(batch.canvas, prompts.width, dtype=batch.frames.dtype)
    out = apply_visual_arrays(batch.frames, prompts.patterns.astype(batch.frames.dtype), mask, prompts.mode)
    return FrameBatch(frames=out, valid_region=list(batch.valid_region))


def apply_text_arrays(text_features, prompt_vectors):
    if isinstance(text_features, Tensor) or isinstance(prompt_vectors, Tensor):
        return concat([prompt_vectors, text_features], axis=0)
    return np.concatenate([prompt_vectors, text_features], axis=0)


def apply_text(text_features: np.ndarray, prompts: TextPromptSet) -> np.ndarray:
    """Prepend prompt vectors to token features; token rows are unmodified."""
    feats = np.asarray(text_features)
    if feats.ndim != 2 or feats.shape[1] != prompts.hidden:
        raise ValueError(
            f"feature width {feats.shape} does not match prompt width {prompts.hidden}"
        )
    return apply_text_arrays(feats, prompts.vectors.astype(feats.dtype))


def init_prompts(
    n_sam: int,
    canvas: int,
    width: int,
    n_text: int,
    hidden: int,
    mode: str = "replace",
    seed: int = 0,
    dtype=np.float32,
) -> tuple[VisualPromptSet, TextPromptSet]:
    """Seeded prompt initialization: uniform(0,1) on the ring, N(0, 0.02) text."""
    rng = np.random.default_rng(seed)
    mask = ring_mask(canvas, width, dtype=dtype)
    patterns = rng.uniform(0.0, 1.0, size=(n_sam, 3, canvas, canvas)).astype(dtype) * mask
    vectors = (rng.standard_normal((n_text, hidden)) * 0.02).astype(dtype)
    return (
        VisualPromptSet(patterns=patterns, width=width, mode=mode),
        TextPromptSet(vectors=vectors),
    )
