"""Two-view augmentation: random fixed-length segment crop + time/freq masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataspec import SpectrogramClip
from .errors import ConfigurationError

Rng = np.random.Generator


@dataclass(frozen=True)
class AugmentConfig:
    """Crop length and SpecAugment-style masking parameters.

    Mask widths are sampled uniformly in [0, max_width], inclusive of zero.
    `seed_stream` offsets the derived augmentation rng streams so two
    otherwise-identical runs can draw different distortions.
    """

    segment_len: int
    num_freq_masks: int = 2
    max_freq_width: int = 0
    num_time_masks: int = 2
    max_time_width: int = 0
    mask_value: float = 0.0
    seed_stream: int = 0

    def __post_init__(self) -> None:
        if self.segment_len < 1:
            raise ConfigurationError(f"segment_len must be >= 1, got {self.segment_len}")
        if self.num_freq_masks < 0 or self.num_time_masks < 0:
            raise ConfigurationError("mask counts must be >= 0")
        if self.max_freq_width < 0 or self.max_time_width < 0:
            raise ConfigurationError("mask widths must be >= 0")
        if self.max_time_width > self.segment_len:
            raise ConfigurationError(
                f"max_time_width {self.max_time_width} exceeds segment_len {self.segment_len}"
            )


def default_augment_config(freq_bins: int, segment_len: int) -> AugmentConfig:
    """Standard proportions scaled to the input: 2+2 masks of width <= dim/8."""
    return AugmentConfig(
        segment_len=segment_len,
        num_freq_masks=2,
        max_freq_width=-(-freq_bins // 8),
        num_time_masks=2,
        max_time_width=-(-segment_len // 8),
        mask_value=0.0,
    )


@dataclass(frozen=True)
class ViewPair:
    """Two independently distorted views of the same source clip."""

    view_a: np.ndarray
    view_b: np.ndarray
    source_clip_id: str


def random_segment(features: np.ndarray, segment_len: int, rng: Rng) -> np.ndarray:
    """Contiguous random column window; clips shorter than L are wrap-padded.

    Wrap-padding tiles the clip along time starting at offset 0, which keeps
    the log-domain spectral statistics intact.
    """
    if segment_len < 1:
        raise ConfigurationError(f"segment_len must be >= 1, got {segment_len}")
    n_frames = features.shape[1]
    if n_frames >= segment_len:
        offset = int(rng.integers(0, n_frames - segment_len + 1))
        return features[:, offset : offset + segment_len].copy()
    reps = -(-segment_len // n_frames)
    return np.tile(features, (1, reps))[:, :segment_len].copy()


def spec_augment(segment: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Mask random row bands and column bands; everything else untouched."""
    f_bins, n_frames = segment.shape
    if cfg.max_freq_width > f_bins:
        raise ConfigurationError(
            f"max_freq_width {cfg.max_freq_width} exceeds freq_bins {f_bins}"
        )
    out = segment.copy()
    for _ in range(cfg.num_freq_masks):
        width = int(rng.integers(0, cfg.max_freq_width + 1))
        start = int(rng.integers(0, f_bins - width + 1))
        if width > 0:
            out[start : start + width, :] = cfg.mask_value
    for _ in range(cfg.num_time_masks):
        width = int(rng.integers(0, cfg.max_time_width + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        if width > 0:
            out[:, start : start + width] = cfg.mask_value
    return out


def make_view(clip: SpectrogramClip, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """One distorted view: crop first, then masking."""
    return spec_augment(random_segment(clip.features, cfg.segment_len, rng), cfg, rng)


def make_view_pair(clip: SpectrogramClip, cfg: AugmentConfig, rng: Rng) -> ViewPair:
    """Two independent draws of the crop+mask pipeline from the same clip."""
    view_a = make_view(clip, cfg, rng)
    view_b = make_view(clip, cfg, rng)
    return ViewPair(view_a=view_a, view_b=view_b, source_clip_id=clip.clip_id)
