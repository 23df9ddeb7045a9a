"""Resize and percentile contrast stretch applied to every raw channel."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# unit-range tolerance for an "entirely black" ground-truth channel
EPS_BLACK = 1.0 / 255.0


@dataclass(frozen=True)
class PreprocessParams:
    clip_low_percentile: float = 0.05
    clip_high_percentile: float = 0.95
    target_size: int = 512
    output_range: str = "unit"  # "unit" -> [0, 1], "byte" -> [0, 255]
    clip_bf: bool = True
    clip_if: bool = True

    def __post_init__(self):
        if not 0.0 <= self.clip_low_percentile < self.clip_high_percentile <= 1.0:
            raise ValueError(
                f"need 0 <= low < high <= 1, got {self.clip_low_percentile}, "
                f"{self.clip_high_percentile}"
            )
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if self.output_range not in ("unit", "byte"):
            raise ValueError(f"unknown output_range {self.output_range!r}")

    @property
    def range_max(self) -> float:
        return 1.0 if self.output_range == "unit" else 255.0


@lru_cache(maxsize=32)
def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix mapping ``n_in`` samples onto ``n_out`` bins by overlap length."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), min(int(np.ceil(hi)), n_in)
        for j in range(j0, j1):
            w[i, j] = min(hi, j + 1) - max(lo, j)
        w[i] /= w[i].sum()
    w.setflags(write=False)
    return w


def resize_area(img: np.ndarray, size: int) -> np.ndarray:
    """Area-weighted resampling of a 2-D image to ``size`` x ``size``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h == size and w == size:
        return img.copy()
    return _area_weights(h, size) @ img @ _area_weights(w, size).T


def percentile_stretch(img: np.ndarray, low: float, high: float, range_max: float = 1.0) -> np.ndarray:
    """Clip at the ``low``/``high`` pixel-count percentiles and rescale linearly.

    The lower bound uses the 'lower' order statistic and the upper bound the
    'higher' one, so re-applying the stretch to its own output is a no-op.
    A degenerate histogram (both bounds equal) maps to all zeros.
    """
    img = np.asarray(img, dtype=np.float64)
    lo = np.percentile(img, 100.0 * low, method="lower")
    hi = np.percentile(img, 100.0 * high, method="higher")
    if not hi > lo:
        return np.zeros_like(img)
    out = (np.clip(img, lo, hi) - lo) / (hi - lo)
    return out * range_max


def preprocess_channel(img: np.ndarray, params: PreprocessParams, clip: bool = True) -> np.ndarray:
    out = resize_area(img, params.target_size)
    if clip:
        return percentile_stretch(
            out, params.clip_low_percentile, params.clip_high_percentile, params.range_max
        )
    # no contrast stretch: only map the raw dtype range into the output range
    peak = out.max()
    return out / peak * params.range_max if peak > 0 else np.zeros_like(out)
