"""Lattice placement over the lung mask and per-window feature maps."""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .features import FEATURE_NAMES, N_FEATURES, OFFSETS_13, TextureConfig
from .volume_io import LungMask, Volume, atomic_write_text


class EmptyMapError(RuntimeError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class LatticeConfig:
    window_mm: float
    lattice_step_mm: float | None = None  # None -> window_mm / 2
    min_lung_fraction: float = 0.5
    texture: TextureConfig = field(default_factory=TextureConfig)
    workers: int = 1

    def __post_init__(self):
        if not self.window_mm > 0:
            raise ValueError("window_mm must be > 0")
        if self.lattice_step_mm is not None and not self.lattice_step_mm > 0:
            raise ValueError("lattice_step_mm must be > 0")
        if not 0 < self.min_lung_fraction <= 1:
            raise ValueError("min_lung_fraction must be in (0, 1]")

    @property
    def step_mm(self) -> float:
        return self.lattice_step_mm if self.lattice_step_mm is not None else self.window_mm / 2


def lattice_steps(spacing_mm, step_mm: float) -> tuple[int, int, int]:
    """Voxel step per (x, y, z) axis, at least 1."""
    return tuple(max(1, round_half_up(step_mm / s)) for s in spacing_mm)


def window_sides(spacing_mm, window_mm: float) -> tuple[int, int, int]:
    """Cube side in voxels per (x, y, z) axis, at least 2."""
    return tuple(max(2, round_half_up(window_mm / s)) for s in spacing_mm)


def place_lattice(mask: LungMask, spacing_mm, cfg: LatticeConfig) -> np.ndarray:
    """Grid points (x, y, z) whose voxel is masked, sorted by (z, y, x)."""
    bits = mask.bits
    if not bits.any():
        raise ValueError("empty mask")
    sx, sy, sz = lattice_steps(spacing_mm, cfg.step_mm)
    sub = bits[::sz, ::sy, ::sx]
    zi, yi, xi = np.nonzero(sub)  # C order of (z, y, x) is already lexicographic
    return np.stack([xi * sx, yi * sy, zi * sz], axis=1).astype(np.int64)


def window_bounds(center, dims, sides):
    """Clipped half-open [lo, hi) bounds per (x, y, z) axis."""
    out = []
    for c, n, s in zip(center, dims, sides):
        lo = c - s // 2
        out.append((max(0, lo), min(n, lo + s)))
    return out


def extract_window(volume: Volume, mask: LungMask, center, window_mm: float):
    """Cube around ``center`` (x, y, z), clipped at the borders.

    Returns ``(values, occupancy, box, box_mask)``: the masked HU values, the
    masked share of the clipped cube, and the cube with its mask in (z, y, x)
    order.
    """
    dims = volume.dims
    if not all(0 <= c < n for c, n in zip(center, dims)):
        raise IndexError(f"centre {tuple(center)} outside volume {dims}")
    (x0, x1), (y0, y1), (z0, z1) = window_bounds(center, dims, window_sides(volume.spacing_mm, window_mm))
    box = volume.voxels[z0:z1, y0:y1, x0:x1]
    box_mask = mask.bits[z0:z1, y0:y1, x0:x1]
    occupancy = box_mask.sum() / box_mask.size
    return box[box_mask], float(occupancy), box, box_mask


@dataclass
class FeatureMap:
    window_mm: float
    points: np.ndarray  # (n, 3) x, y, z
    features: np.ndarray  # (n, 26)
    occupancy: np.ndarray  # (n,)
    min_lung_fraction: float = 0.5
    skipped_low_occupancy: int = 0
    skipped_degenerate: int = 0

    def __len__(self):
        return len(self.points)

    def column(self, name: str) -> np.ndarray:
        return self.features[:, FEATURE_NAMES.index(name)]

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            self.window_mm == other.window_mm
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.occupancy, other.occupancy)
        )


def compute_feature_map(volume: Volume, mask: LungMask, cfg: LatticeConfig,
                        workers: int | None = None) -> FeatureMap:
    """Feature vectors at every lattice point with enough lung in its window.

    Windows are independent, so the result does not depend on ``workers``.
    """
    if mask.dims != volume.dims:
        raise ValueError(f"mask dims {mask.dims} differ from volume dims {volume.dims}")
    workers = max(1, workers or cfg.workers)
    pts = place_lattice(mask, volume.spacing_mm, cfg)
    centers = np.ascontiguousarray(pts[:, ::-1])  # (z, y, x)
    sx, sy, sz = window_sides(volume.spacing_mm, cfg.window_mm)
    sides = np.array([sz, sy, sx], dtype=np.int64)
    n = len(centers)
    feats = np.zeros((n, N_FEATURES))
    occ = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    vol = volume.voxels
    bits = mask.bits
    tex = cfg.texture
    lo, hi = (float(v) for v in tex.hu_range)

    def run(a, b):
        K.map_features(vol, bits, centers[a:b], sides, cfg.min_lung_fraction, tex.levels, lo, hi,
                       OFFSETS_13, tex.distance, feats[a:b], occ[a:b], status[a:b])

    if workers == 1 or n < 2 * workers:
        run(0, n)
    else:
        bounds = np.linspace(0, n, 4 * workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run, a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            for fut in futures:
                fut.result()

    keep = status == K.OK
    if not keep.any():
        raise EmptyMapError(
            f"no lattice point reached lung occupancy {cfg.min_lung_fraction} at W={cfg.window_mm} mm"
        )
    return FeatureMap(
        window_mm=float(cfg.window_mm),
        points=pts[keep],
        features=feats[keep],
        occupancy=occ[keep],
        min_lung_fraction=cfg.min_lung_fraction,
        skipped_low_occupancy=int((status == K.LOW_OCCUPANCY).sum()),
        skipped_degenerate=int((status == K.DEGENERATE).sum()),
    )


def format_window(window_mm: float) -> str:
    w = float(window_mm)
    return str(int(w)) if w.is_integer() else repr(w)


def feature_map_filename(patient_id: str, window_mm: float) -> str:
    return f"{patient_id}_W{format_window(window_mm)}.csv"


def feature_map_to_csv(fmap: FeatureMap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "occupancy", *FEATURE_NAMES])
    for p, occ, row in zip(fmap.points, fmap.occupancy, fmap.features):
        w.writerow([int(p[0]), int(p[1]), int(p[2]), repr(float(occ)), *(repr(float(v)) for v in row)])
    return buf.getvalue()


def write_feature_map(fmap: FeatureMap, path: str | os.PathLike) -> None:
    atomic_write_text(path, feature_map_to_csv(fmap))


def read_feature_map(path: str | os.PathLike, window_mm: float | None = None) -> FeatureMap:
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        expected = ["x", "y", "z", "occupancy", *FEATURE_NAMES]
        if header != expected:
            raise ValueError(f"{path}: unexpected feature map columns")
        rows = [r for r in reader if r]
    if window_mm is None:
        stem = path.stem
        window_mm = float(stem.rsplit("_W", 1)[1]) if "_W" in stem else float("nan")
    if not rows:
        return FeatureMap(float(window_mm), np.zeros((0, 3), np.int64), np.zeros((0, N_FEATURES)), np.zeros(0))
    arr = np.array(rows, dtype=object)
    return FeatureMap(
        window_mm=float(window_mm),
        points=arr[:, :3].astype(np.int64),
        features=arr[:, 4:].astype(np.float64),
        occupancy=arr[:, 3].astype(np.float64),
    )
