"""Stochastic two-view augmentation for 1-D toy signals.

The transform set mirrors the usual self-supervised recipe at desk
scale: random crop-and-resize (contiguous window, linearly resized back
to full length), appearance jitter (affine perturbation of contrast
around the range midpoint plus a brightness offset), and Gaussian
smoothing. Outputs are clamped back to the valid data range [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

DATA_MIN = 0.0
DATA_MAX = 1.0


@dataclass(frozen=True)
class TransformSpec:
    crop_scale_range: tuple[float, float] = (0.14, 1.0)
    jitter_strength: float = 1.0
    blur_sigma_range: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop scale range must satisfy 0 < min <= max <= 1")
        if self.jitter_strength < 0:
            raise ValueError("jitter strength must be nonnegative")
        blo, bhi = self.blur_sigma_range
        if blo < 0 or bhi < blo:
            raise ValueError("blur sigma range must be nonnegative and ordered")

    def is_identity(self) -> bool:
        return (self.crop_scale_range == (1.0, 1.0)
                and self.jitter_strength == 0.0
                and self.blur_sigma_range[1] == 0.0)


def _transform_once(x: np.ndarray, spec: TransformSpec, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    scale = rng.uniform(*spec.crop_scale_range)
    window = max(2, int(round(scale * n))) if scale < 1.0 else n
    start = int(rng.integers(0, n - window + 1))
    if window == n:
        out = x.copy()
    else:
        out = np.interp(np.linspace(start, start + window - 1, n),
                        np.arange(start, start + window), x[start:start + window])

    j = spec.jitter_strength
    contrast = rng.uniform(1.0 - 0.4 * j, 1.0 + 0.4 * j)
    brightness = rng.uniform(-0.2 * j, 0.2 * j)
    if j > 0:
        out = (out - 0.5) * contrast + 0.5 + brightness

    sigma = rng.uniform(*spec.blur_sigma_range)
    if sigma > 0:
        out = gaussian_filter1d(out, sigma, mode="reflect")

    return np.clip(out, DATA_MIN, DATA_MAX)


def sample_views(x: np.ndarray, spec: TransformSpec,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independently transformed copies of one sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return _transform_once(x, spec, rng), _transform_once(x, spec, rng)


def view_rng(root_seed: int, *stream_key: int) -> np.random.Generator:
    """Deterministic per-(epoch, sample, ...) augmentation stream."""
    return np.random.default_rng(np.random.SeedSequence((root_seed, *stream_key)))


def sample_view_batch(inputs: np.ndarray, spec: TransformSpec, root_seed: int,
                      epoch: int, sample_keys) -> tuple[np.ndarray, np.ndarray]:
    """Views for a row-major batch; returns column-major (dim, batch) pairs.

    ``sample_keys`` holds one integer per row (typically the dataset
    index), so each sample owns a counter-based substream and the views
    do not depend on batch composition or processing order.
    """
    n, dim = inputs.shape
    sample_keys = list(sample_keys)
    if len(sample_keys) != n:
        raise ValueError("sample_keys must match the number of rows")
    vs = np.empty((dim, n))
    vt = np.empty((dim, n))
    for i, key in enumerate(sample_keys):
        rng = view_rng(root_seed, epoch, int(key))
        vs[:, i], vt[:, i] = sample_views(inputs[i], spec, rng)
    return vs, vt
