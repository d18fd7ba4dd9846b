"""The 26 window texture features: gray-level histogram, co-occurrence, run-length.

Histogram statistics are taken on raw HU values (1 HU bins). Co-occurrence
and run-length statistics use values quantized to ``levels`` gray levels over
``hu_range``. A window is a 3-D ``(z, y, x)`` array plus an optional boolean
mask of the same shape; only masked voxels contribute, and unmasked voxels
break pairs and runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K

HISTOGRAM_NAMES = (
    "Mean", "Min", "Max", "5thPercentile", "5thMean", "95thPercentile",
    "95thMean", "Sum", "Sigma", "Entropy", "Kurtosis", "Skewness",
)
GLCM_NAMES = (
    "ClusterShade", "Correlation", "HaralickCorrelation", "Energy",
    "GLCMEntropy", "Inertia", "InverseDifferenceMoment",
)
RLM_NAMES = (
    "GrayLevelNonuniformity", "HighGrayLevelRunEmphasis", "LongRunEmphasis",
    "LowGrayLevelRunEmphasis", "RunLengthNonuniformity", "RunPercentage",
    "ShortRunEmphasis",
)
FEATURE_NAMES = HISTOGRAM_NAMES + GLCM_NAMES + RLM_NAMES
N_FEATURES = len(FEATURE_NAMES)

OFFSETS_13 = K.OFFSETS_13


class DegenerateWindowError(ValueError):
    """The window has no pair of masked neighbouring voxels."""


@dataclass(frozen=True)
class TextureConfig:
    levels: int = 32
    hu_range: tuple[float, float] = (-1024.0, 240.0)
    distance: int = 1

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        lo, hi = self.hu_range
        if not lo < hi:
            raise ValueError("hu_range must satisfy lo < hi")
        if self.distance < 1:
            raise ValueError("distance must be >= 1")


def quantize(values, levels: int, hu_range) -> np.ndarray:
    """Map HU values to 0-based gray levels, clamping to ``hu_range``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot quantize an empty window")
    if levels < 2:
        raise ValueError("levels must be >= 2")
    lo, hi = float(hu_range[0]), float(hu_range[1])
    if not lo < hi:
        raise ValueError("hu_range must satisfy lo < hi")
    c = np.clip(values, lo, hi)
    q = np.floor(levels * (c - lo) / (hi - lo)).astype(np.int64)
    return np.minimum(q, levels - 1)


def _as_window(window, mask):
    w = np.asarray(window)
    if w.ndim == 1:
        w = w[None, None, :]
    elif w.ndim == 2:
        w = w[None, :, :]
    if w.ndim != 3:
        raise ValueError("window must be 1-, 2- or 3-D")
    if mask is None:
        m = np.ones(w.shape, dtype=np.bool_)
    else:
        m = np.asarray(mask, dtype=np.bool_).reshape(w.shape)
    return w, m


def _as_offsets(directions):
    if directions is None:
        return OFFSETS_13
    off = np.asarray(directions, dtype=np.int64)
    if off.ndim == 1:
        off = off[None, :]
    if off.shape[1] != 3:
        raise ValueError("directions must be (dz, dy, dx) triples")
    return np.ascontiguousarray(off)


@dataclass(frozen=True)
class GrayLevelHistogram:
    """Distinct HU values with relative frequencies."""

    levels: np.ndarray
    counts: np.ndarray
    bin_width_hu: float = 1.0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def freq(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def gray_level_histogram(values) -> GrayLevelHistogram:
    values = np.asarray(values).ravel()
    if values.size == 0:
        raise ValueError("empty window")
    levels, counts = np.unique(np.rint(values).astype(np.int64), return_counts=True)
    return GrayLevelHistogram(levels.astype(np.float64), counts.astype(np.int64))


def histogram_features(h: GrayLevelHistogram) -> np.ndarray:
    out = np.empty(len(HISTOGRAM_NAMES))
    K.hist_features(np.ascontiguousarray(h.levels, dtype=np.float64),
                    np.ascontiguousarray(h.counts, dtype=np.int64), out, 0)
    return out


@dataclass(frozen=True)
class CoOccurrenceMatrix:
    """Symmetric pair counts; ``f`` gives the normalised joint frequencies."""

    counts: np.ndarray
    distance: int
    directions: np.ndarray

    @property
    def f(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def marginals(self) -> tuple[float, float, float, float]:
        """(mu_i, mu_j, sigma_i, sigma_j) with gray levels indexed from 1."""
        _, mu_i, mu_j, sd_i, sd_j = K.glcm_marginals(self.counts.astype(np.float64))
        return mu_i, mu_j, sd_i, sd_j


def build_glcm(levels, levels_count: int, mask=None, distance: int = 1,
               directions=None) -> CoOccurrenceMatrix:
    q, m = _as_window(levels, mask)
    q = np.ascontiguousarray(q, dtype=np.int64)
    if q.size and (q.min() < 0 or q.max() >= levels_count):
        raise ValueError("gray levels outside [0, levels_count)")
    off = _as_offsets(directions)
    counts = K.glcm_counts(q, np.ascontiguousarray(m), levels_count, off, distance)
    if counts.sum() == 0:
        raise DegenerateWindowError("no valid voxel pairs in window")
    return CoOccurrenceMatrix(counts, distance, off)


def glcm_features(m: CoOccurrenceMatrix) -> np.ndarray:
    out = np.empty(len(GLCM_NAMES))
    K.glcm_features(m.counts.astype(np.float64), out, 0)
    return out


@dataclass(frozen=True)
class RunLengthMatrix:
    """Run counts R[i, j]: gray level i (0-based row), run length j (column j)."""

    runs: np.ndarray
    directions: np.ndarray

    @property
    def n_runs(self) -> int:
        return int(self.runs.sum())

    @property
    def pixels(self) -> int:
        """Voxel visits summed over directions (each masked voxel once per direction)."""
        return int((self.runs * np.arange(self.runs.shape[1])).sum())


def build_rlm(levels, levels_count: int, mask=None, directions=None) -> RunLengthMatrix:
    q, m = _as_window(levels, mask)
    q = np.ascontiguousarray(q, dtype=np.int64)
    if q.size == 0:
        raise ValueError("empty window")
    if q.min() < 0 or q.max() >= levels_count:
        raise ValueError("gray levels outside [0, levels_count)")
    off = _as_offsets(directions)
    runs = K.rlm_counts(q, np.ascontiguousarray(m), levels_count, off)
    return RunLengthMatrix(runs, off)


def rlm_features(r: RunLengthMatrix) -> np.ndarray:
    if r.n_runs == 0:
        raise ValueError("run-length matrix holds no runs")
    out = np.empty(len(RLM_NAMES))
    K.rlm_features(r.runs, out, 0)
    return out


def compute_feature_vector(window, mask=None, config: TextureConfig | None = None,
                           directions=None) -> np.ndarray:
    """All 26 features for one window, in ``FEATURE_NAMES`` order."""
    config = config or TextureConfig()
    w, m = _as_window(window, mask)
    if not m.any():
        raise ValueError("window has no masked voxels")
    lo, hi = config.hu_range
    out = np.empty(N_FEATURES)
    ok = K.box_features(
        np.ascontiguousarray(w, dtype=np.int64), np.ascontiguousarray(m),
        0, w.shape[0], 0, w.shape[1], 0, w.shape[2],
        config.levels, float(lo), float(hi), _as_offsets(directions), config.distance, out,
    )
    if not ok:
        raise DegenerateWindowError("no valid voxel pairs in window")
    return out


def as_dict(vector) -> dict[str, float]:
    return dict(zip(FEATURE_NAMES, (float(v) for v in vector)))
