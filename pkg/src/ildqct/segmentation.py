"""Lung parenchyma segmentation by 1-D intensity K-means and component cleanup."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import CohortRecord, LungMask, Volume, read_mask


class DegenerateInputError(ValueError):
    pass


class SegmentationFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SegmentationConfig:
    k_intensity: int = 3
    max_iters: int = 100
    tol_hu: float = 0.01
    min_component_voxels: int = 50
    seed: int = 0
    n_init: int = 4
    air_hu: float = -500.0  # the lowest centre must lie below this

    def __post_init__(self):
        if self.k_intensity < 2:
            raise ValueError("k_intensity must be >= 2")
        if not self.tol_hu > 0:
            raise ValueError("tol_hu must be > 0")
        if self.min_component_voxels < 1:
            raise ValueError("min_component_voxels must be >= 1")


def _lloyd_1d(values, weights, centers, max_iters, tol):
    for _ in range(max_iters):
        labels = _assign(values, centers)
        sums = np.bincount(labels, weights=weights * values, minlength=len(centers))
        mass = np.bincount(labels, weights=weights, minlength=len(centers))
        new = np.where(mass > 0, sums / np.where(mass > 0, mass, 1), centers)
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift < tol:
            break
    order = np.sort(centers)
    labels = _assign(values, order)
    sse = float(np.sum(weights * (values - order[labels]) ** 2))
    return order, sse


def _assign(values, centers):
    # nearest centre; centres need not be sorted
    d = np.abs(values[:, None] - centers[None, :])
    return np.argmin(d, axis=1)


def _kmeanspp_init(values, weights, k, rng):
    p = weights / weights.sum()
    centers = [values[rng.choice(len(values), p=p)]]
    for _ in range(1, k):
        d2 = np.min((values[:, None] - np.array(centers)[None, :]) ** 2, axis=1) * weights
        if d2.sum() == 0:
            break
        centers.append(values[rng.choice(len(values), p=d2 / d2.sum())])
    return np.array(centers, dtype=np.float64)


def intensity_kmeans(v: Volume | np.ndarray, cfg: SegmentationConfig = SegmentationConfig()):
    """Cluster voxel intensities into ``k_intensity`` groups.

    Runs on the histogram of distinct HU values, so cost is independent of
    volume size. Returns ``(centers, labels)`` with centres ascending and
    labels shaped like the voxel array.
    """
    vox = v.voxels if isinstance(v, Volume) else np.asarray(v)
    if vox.size == 0:
        raise DegenerateInputError("empty volume")
    values, inverse, counts = np.unique(vox.ravel(), return_inverse=True, return_counts=True)
    if len(values) < cfg.k_intensity:
        raise DegenerateInputError(
            f"{len(values)} distinct intensities, fewer than k={cfg.k_intensity}"
        )
    values = values.astype(np.float64)
    weights = counts.astype(np.float64)
    rng = np.random.default_rng(cfg.seed)
    best = None
    for _ in range(cfg.n_init):
        init = _kmeanspp_init(values, weights, cfg.k_intensity, rng)
        if len(init) < cfg.k_intensity:
            continue
        centers, sse = _lloyd_1d(values, weights, init, cfg.max_iters, cfg.tol_hu)
        if best is None or sse < best[1]:
            best = (centers, sse)
    centers = best[0]
    labels = _assign(values, centers)[inverse].reshape(vox.shape)
    return centers, labels


def _boundary_labels(lab: np.ndarray) -> np.ndarray:
    faces = [lab[0], lab[-1], lab[:, 0], lab[:, -1], lab[:, :, 0], lab[:, :, -1]]
    return np.unique(np.concatenate([f.ravel() for f in faces]))


def segment_lung(v: Volume, cfg: SegmentationConfig = SegmentationConfig(),
                 record: CohortRecord | None = None) -> LungMask:
    """Lung mask: sub-threshold voxels minus exterior air and small specks.

    The threshold is the midpoint between the two highest intensity centres.
    A ``mask_override_path`` on ``record`` is returned as-is.
    """
    if record is not None and record.mask_override_path:
        mask = read_mask(record.mask_override_path)
        if mask.dims != v.dims:
            raise ValueError(f"{record.patient_id}: override mask dims {mask.dims} != volume dims {v.dims}")
        return mask
    try:
        centers, _ = intensity_kmeans(v, cfg)
    except DegenerateInputError as exc:
        raise SegmentationFailedError(f"intensity clustering failed: {exc}") from exc
    if centers[0] >= cfg.air_hu:
        raise SegmentationFailedError(
            f"no air-like intensity mode (lowest centre {centers[0]:.1f} HU)"
        )
    threshold = 0.5 * (centers[-2] + centers[-1])
    candidate = v.voxels < threshold

    structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
    lab, n = ndimage.label(candidate, structure=structure)
    if n == 0:
        raise SegmentationFailedError("no voxels below the lung threshold")
    sizes = np.bincount(lab.ravel(), minlength=n + 1)
    sizes[0] = 0
    sizes[_boundary_labels(lab)] = 0
    sizes[sizes < cfg.min_component_voxels] = 0
    if not sizes.any():
        raise SegmentationFailedError("no interior lung component survived cleanup")
    keep = np.argsort(sizes, kind="stable")[::-1][:2]
    keep = [k for k in keep if sizes[k] > 0]
    # drop a second component that is negligible beside the first (e.g. a trachea stub)
    if len(keep) == 2 and sizes[keep[1]] < 0.05 * sizes[keep[0]]:
        keep = keep[:1]
    return LungMask(np.isin(lab, keep))


def dice(a, b) -> float:
    a = np.asarray(getattr(a, "bits", a), dtype=bool)
    b = np.asarray(getattr(b, "bits", b), dtype=bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom
