"""Synthetic two-domain quality benchmark with known ground truth.

Each sample is a smooth random texture corrupted by white noise whose
strength is the latent distortion level.  The score is a strictly
decreasing function of that level on a 1..5 opinion scale.  The target
domain passes the same generator through a fixed channel-mixing affine map
and a random per-sample, per-channel style (gain and offset) shift, so the
absolute noise energy no longer ranks target samples by quality while the
noise-to-texture ratio still does.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import QualityDataset

SCORE_LOW, SCORE_HIGH = 1.0, 5.0


@dataclass
class SyntheticDomainSpec:
    channels: int = 3
    size: int = 32
    n_source: int = 2000
    n_target: int = 1500
    quality_exponent: float = 1.0  # score = low + (high-low) * (1-level)^exponent
    label_noise: float = 0.0  # std of additive opinion noise, raw scale
    distortion_strength: float = 0.6  # max white-noise std relative to unit texture
    texture_smoothing: float = 2.0  # gaussian sigma in pixels
    source_contrast: tuple[float, float] = (0.7, 1.3)
    # target shift
    channel_mixing: float = 0.3  # off-diagonal magnitude of the affine map
    style_gain: tuple[float, float] = (1.0, 1.0)  # log-uniform per-sample gain range
    mean_offset: tuple[float, ...] = field(default_factory=lambda: (0.0, 0.0, 0.0))
    style_offset_std: float = 0.0
    overlay_strength: float = 0.0  # max amplitude of a per-sample sinusoidal grating
    overlay_frequency: tuple[float, float] = (0.15, 0.35)  # cycles per pixel

    def __post_init__(self):
        if not 0 < self.quality_exponent:
            raise ValueError("quality_exponent must be positive for a strictly monotone score")
        if len(self.mean_offset) != self.channels:
            raise ValueError("mean_offset needs one entry per channel")
        lo, hi = self.style_gain
        if not 0 < lo <= hi:
            raise ValueError("style_gain must be a positive range")

    @classmethod
    def identity(cls, **kw) -> "SyntheticDomainSpec":
        kw.setdefault("channel_mixing", 0.0)
        return cls(**kw)

    @classmethod
    def shifted(cls, **kw) -> "SyntheticDomainSpec":
        """Default benchmark: affine channel mixing plus per-sample style shift."""
        kw.setdefault("channel_mixing", 0.3)
        kw.setdefault("style_gain", (0.35, 2.8))
        kw.setdefault("mean_offset", (0.5, -0.3, 0.2))
        kw.setdefault("style_offset_std", 0.3)
        return cls(**kw)


def quality_score(level, exponent: float = 1.0) -> np.ndarray:
    level = np.asarray(level, dtype=np.float64)
    return SCORE_LOW + (SCORE_HIGH - SCORE_LOW) * (1.0 - level) ** exponent


def mixing_matrix(spec: SyntheticDomainSpec) -> np.ndarray:
    """Fixed, well-conditioned channel map: I + m * (cyclic shift)."""
    c = spec.channels
    return np.eye(c) + spec.channel_mixing * np.roll(np.eye(c), 1, axis=1)


def _textures(n: int, spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    raw = rng.standard_normal((n, spec.channels, spec.size, spec.size))
    smooth = gaussian_filter(raw, sigma=(0, 0, spec.texture_smoothing, spec.texture_smoothing), mode="wrap")
    smooth /= smooth.std(axis=(2, 3), keepdims=True)
    return smooth


def _render(n: int, spec: SyntheticDomainSpec, rng: np.random.Generator):
    level = rng.uniform(0.0, 1.0, n)
    tex = _textures(n, spec, rng)
    contrast = rng.uniform(*spec.source_contrast, size=(n, 1, 1, 1))
    noise = rng.standard_normal(tex.shape) * (spec.distortion_strength * level)[:, None, None, None]
    img = contrast * (tex + noise)
    score = quality_score(level, spec.quality_exponent)
    if spec.label_noise > 0:
        score = score + rng.normal(0.0, spec.label_noise, n)
    return img, score, level


def _shift(img: np.ndarray, spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    n, c = img.shape[:2]
    out = np.einsum("dc,nchw->ndhw", mixing_matrix(spec), img)
    lo, hi = spec.style_gain
    gain = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n, c, 1, 1)))
    offset = np.asarray(spec.mean_offset, dtype=np.float64)[None, :, None, None]
    if spec.style_offset_std > 0:
        offset = offset + rng.normal(0.0, spec.style_offset_std, size=(n, c, 1, 1))
    out = gain * out + offset
    if spec.overlay_strength > 0:
        out = out + _gratings(n, spec, rng)
    return out


def _gratings(n: int, spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64)
    theta = rng.uniform(0, np.pi, n)
    freq = rng.uniform(*spec.overlay_frequency, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(0, spec.overlay_strength, n)
    arg = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy) * freq[:, None, None]
    wave = amp[:, None, None] * np.sin(2 * np.pi * arg + phase[:, None, None])
    return np.repeat(wave[:, None], spec.channels, axis=1)


def make_synthetic_domains(spec: SyntheticDomainSpec, rng: np.random.Generator,
                           dtype=np.float32) -> tuple[QualityDataset, QualityDataset]:
    """Returns (source, target); target labels are for evaluation only.

    Both sets share the label range of the score function so normalized
    labels are comparable across domains.
    """
    label_range = (SCORE_LOW, SCORE_HIGH)
    src_img, src_score, _ = _render(spec.n_source, spec, rng)
    tgt_img, tgt_score, _ = _render(spec.n_target, spec, rng)
    tgt_img = _shift(tgt_img, spec, rng)
    source = QualityDataset(src_img.astype(dtype), src_score, label_range, name="synthetic-source")
    target = QualityDataset(tgt_img.astype(dtype), tgt_score, label_range, name="synthetic-target")
    return source, target


def generate_with_levels(spec: SyntheticDomainSpec, rng: np.random.Generator, shifted: bool):
    """Single domain plus its latent levels, for generator property checks."""
    n = spec.n_target if shifted else spec.n_source
    img, score, level = _render(n, spec, rng)
    if shifted:
        img = _shift(img, spec, rng)
    return img, score, level
