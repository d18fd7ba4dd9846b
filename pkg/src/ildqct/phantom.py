"""Synthetic labelled CT phantoms and cohorts with planted signal.

A phantom is a soft-tissue body in exterior air holding two ellipsoidal
lungs. The lungs are tiled into cubic blocks (or z-slabs) and every block is
filled with one tissue region. Region textures are crude on purpose: periodic structure
plus Gaussian noise with a known spatial scale.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
import numpy as np

from .volume_io import (
    HU_MAX, HU_MIN, CohortRecord, LungMask, Volume, write_cohort, write_labels, write_mask,
    write_volume,
)

TEXTURES = ("normal", "ground_glass", "reticular", "honeycomb", "hyperlucent")
CLASS_CODES = {name: i + 1 for i, name in enumerate(TEXTURES)}

EXTERIOR_HU = -1000
BODY_HU = 30


@dataclass(frozen=True)
class TextureParams:
    base_hu: float
    noise_hu: float
    period_mm: float | None = None
    structure_hu: float | None = None  # lines (reticular) or walls (honeycomb)


DEFAULT_TEXTURES = {
    "normal": TextureParams(-850, 25),
    "ground_glass": TextureParams(-650, 25),
    "reticular": TextureParams(-850, 25, period_mm=4.0, structure_hu=-550),
    "honeycomb": TextureParams(-950, 15, period_mm=4.0, structure_hu=-550),
    "hyperlucent": TextureParams(-950, 8),
}


@dataclass(frozen=True)
class Region:
    texture: str
    fraction: float
    period_mm: float | None = None  # overrides the texture default

    def __post_init__(self):
        if self.texture not in CLASS_CODES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if not 0 <= self.fraction <= 1:
            raise ValueError("region fraction must be in [0, 1]")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 80, 64)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    regions: tuple[Region, ...] = (Region("normal", 1.0),)
    block_mm: float = 16.0
    layout: str = "blocks"  # or "slabs": one z-slab per region across both lungs
    septum_mm: float = 0.0  # slabs only: soft-tissue gap between neighbouring slabs
    body_semi_axes: tuple[float, float] = (0.46, 0.42)  # x, y, as fractions of dims
    lung_semi_axes: tuple[float, float, float] = (0.17, 0.30, 0.40)
    lung_offset_x: float = 0.21
    body_noise_hu: float = 10.0
    textures: dict = field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    seed: int = 0

    def __post_init__(self):
        if len(self.regions) == 0:
            raise ValueError("at least one region is required")
        total = sum(r.fraction for r in self.regions)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"region fractions sum to {total}, not 1")
        for r in self.regions:
            p = r.period_mm or self.textures[r.texture].period_mm
            if p is not None and min(p / s for s in self.spacing_mm) < 2:
                raise ValueError(f"structure period {p} mm is below 2 voxels")
        if self.layout not in ("blocks", "slabs"):
            raise ValueError("layout must be 'blocks' or 'slabs'")
        ax, ay, az = self.lung_semi_axes
        if self.lung_offset_x + ax >= self.body_semi_axes[0] or ay >= self.body_semi_axes[1] or az >= 0.5:
            raise ValueError("lung geometry exceeds the body")


@dataclass
class Phantom:
    volume: Volume
    mask: LungMask
    labels: np.ndarray  # per-voxel class code, 0 outside the lung
    region_index: np.ndarray  # per-voxel region index + 1, 0 outside the lung
    spec: PhantomSpec

    def region_fractions(self) -> np.ndarray:
        counts = np.bincount(self.region_index.ravel(), minlength=len(self.spec.regions) + 1)[1:]
        return counts / counts.sum()


def _grid(spec):
    nx, ny, nz = spec.dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return x, y, z


def _geometry(spec):
    nx, ny, nz = spec.dims
    x, y, z = _grid(spec)
    cx, cy, cz = (nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2
    bx, by = spec.body_semi_axes
    body = ((x - cx) / (bx * nx)) ** 2 + ((y - cy) / (by * ny)) ** 2 <= 1
    ax, ay, az = spec.lung_semi_axes
    lung = np.zeros(body.shape, dtype=bool)
    for side in (-1, 1):
        lx = cx + side * spec.lung_offset_x * nx
        lung |= (
            ((x - lx) / (ax * nx)) ** 2 + ((y - cy) / (ay * ny)) ** 2 + ((z - cz) / (az * nz)) ** 2
        ) <= 1
    return body, lung & body, (x, y, z)


def _assign_slabs(lung, spec):
    """Region index (1-based) per voxel; consecutive z-slabs sized by lung mass."""
    per_slice = lung.sum(axis=(1, 2))
    cum_mid = (np.cumsum(per_slice) - per_slice / 2) / per_slice.sum()
    bounds = np.cumsum([r.fraction for r in spec.regions])
    region_of_slice = np.minimum(np.searchsorted(bounds, cum_mid, side="right"), len(spec.regions) - 1) + 1
    half = int(round(spec.septum_mm / spec.spacing_mm[2] / 2))
    if half > 0:
        change = np.nonzero(np.diff(region_of_slice))[0]
        for c in change:
            region_of_slice[max(0, c + 1 - half):c + 1 + half] = 0
    out = np.zeros(lung.shape, dtype=np.uint8)
    out[lung] = np.broadcast_to(region_of_slice[:, None, None], lung.shape)[lung]
    return out


def _assign_blocks(lung, spec, rng):
    """Region index (1-based) per voxel; blocks assigned to match target fractions."""
    bs = [max(1, int(round(spec.block_mm / s))) for s in spec.spacing_mm]
    nz, ny, nx = lung.shape
    x, y, z = _grid(spec)
    block_id = (z // bs[2]) * ((ny // bs[1] + 1) * (nx // bs[0] + 1)) + (y // bs[1]) * (nx // bs[0] + 1) + x // bs[0]
    ids, mass = np.unique(block_id[lung], return_counts=True)
    order = rng.permutation(len(ids))
    ids, mass = ids[order], mass[order]
    cum_mid = (np.cumsum(mass) - mass / 2) / mass.sum()
    bounds = np.cumsum([r.fraction for r in spec.regions])
    region_of_block = np.searchsorted(bounds, cum_mid, side="right")
    region_of_block = np.minimum(region_of_block, len(spec.regions) - 1) + 1
    lut = np.zeros(block_id.max() + 1, dtype=np.uint8)
    lut[ids] = region_of_block
    out = np.zeros(lung.shape, dtype=np.uint8)
    out[lung] = lut[block_id[lung]]
    return out


def _period_vox(period_mm, spacing):
    return [max(2, int(round(period_mm / s))) for s in spacing]


def _texture(name, params, period_mm, coords, spec, rng, shape):
    x, y, z = coords
    vals = params.base_hu + rng.normal(0.0, params.noise_hu, size=shape)
    if name in ("reticular", "honeycomb"):
        px, py, pz = _period_vox(period_mm or params.period_mm, spec.spacing_mm)
        if name == "reticular":
            on = [(x % px == 0), (y % py == 0), (z % pz == 0)]
            struct = (on[0] & on[1]) | (on[1] & on[2]) | (on[0] & on[2])
        else:
            tx, ty, tz = (max(1, int(round(p / 4))) for p in (px, py, pz))
            struct = (x % px < tx) | (y % py < ty) | (z % pz < tz)
        vals = np.where(struct, params.structure_hu + rng.normal(0.0, params.noise_hu, size=shape), vals)
    return vals


def generate_phantom(spec: PhantomSpec) -> Phantom:
    rng = np.random.default_rng(spec.seed)
    body, lung, coords = _geometry(spec)
    shape = lung.shape
    hu = np.full(shape, float(EXTERIOR_HU))
    hu[body] = BODY_HU + rng.normal(0.0, spec.body_noise_hu, size=int(body.sum()))
    if spec.layout == "slabs":
        region_index = _assign_slabs(lung, spec)
        lung &= region_index > 0
    else:
        region_index = _assign_blocks(lung, spec, rng)
    labels = np.zeros(shape, dtype=np.uint8)
    for k, region in enumerate(spec.regions, start=1):
        sel = region_index == k
        if not sel.any():
            continue
        params = spec.textures[region.texture]
        local = tuple(c[sel] for c in coords)
        hu[sel] = _texture(region.texture, params, region.period_mm, local, spec, rng, int(sel.sum()))
        labels[sel] = CLASS_CODES[region.texture]
    hu = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    return Phantom(
        volume=Volume(hu, spec.spacing_mm),
        mask=LungMask(lung),
        labels=labels,
        region_index=region_index,
        spec=spec,
    )


def five_texture_spec(seed: int = 0, **kw) -> PhantomSpec:
    """All five tissue classes in equal shares, one z-slab each.

    Slabs are split by 10 mm soft-tissue septa so no window up to 8 mm mixes
    two classes.
    """
    regions = tuple(Region(t, 0.2) for t in TEXTURES)
    kw.setdefault("dims", (96, 80, 200))
    kw.setdefault("layout", "slabs")
    kw.setdefault("septum_mm", 10.0)
    return PhantomSpec(regions=regions, seed=seed, **kw)


# ---------------------------------------------------------------- cohorts

DESIGNS = ("phenotype", "two_texture", "fine_texture")


@dataclass(frozen=True)
class SyntheticCohortSpec:
    """Planted-signal cohort.

    ``design`` picks how the UIP-like class differs from the other:

    * ``phenotype``: more reticular and honeycomb tissue.
    * ``two_texture``: same tissue mix and whole-lung histogram, but the
      honeycomb share is split between a fine and a coarse cyst period, and
      UIP-like lungs hold mostly the fine one.
    * ``fine_texture``: like ``two_texture`` with sub-6 mm periods and small
      blocks, so only small windows resolve the difference.
    """

    n_per_class: int = 20
    design: str = "two_texture"
    contrast: float = 1.0
    hazard_ratio: float = 4.0
    censoring_rate: float = 0.3
    baseline_hazard_per_day: float = 1.0 / 1500.0
    fraction_jitter: float = 0.04
    honeycomb_share: float = 0.6
    block_mm: float | None = None  # None -> design default
    periods_mm: tuple[float, float] | None = None  # (fine, coarse); None -> design default
    layout: str = "blocks"
    septum_mm: float = 0.0
    dims: tuple[int, int, int] = (96, 80, 64)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.honeycomb_share <= 1:
            raise ValueError("honeycomb_share must be in (0, 1]")
        if self.n_per_class < 2:
            raise ValueError("n_per_class must be >= 2")
        if not self.hazard_ratio > 0:
            raise ValueError("hazard_ratio must be > 0")
        if not 0 <= self.censoring_rate < 1:
            raise ValueError("censoring_rate must be in [0, 1)")
        if not 0 <= self.contrast <= 1:
            raise ValueError("contrast must be in [0, 1]")
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}")


def _patient_regions(spec: SyntheticCohortSpec, uip: bool, rng):
    """Regions for one patient and its planted burden in [0, 1]."""
    half = spec.contrast / 2
    j = spec.fraction_jitter
    if spec.design == "phenotype":
        # fibrotic (reticular + honeycomb) share moves with class
        burden = float(np.clip(0.5 + (half if uip else -half) + rng.uniform(-j, j) * 2, 0, 1))
        fib = 0.10 + 0.40 * burden
        rest = 1 - fib
        fr = {
            "reticular": fib / 2, "honeycomb": fib / 2,
            "normal": rest * 0.5, "ground_glass": rest * 0.3, "hyperlucent": rest * 0.2,
        }
        return tuple(Region(t, fr[t]) for t in TEXTURES), burden, 16.0
    if spec.design == "two_texture":
        fine_p, coarse_p, block = 4.0, 16.0, 16.0
    else:
        fine_p, coarse_p, block = 2.0, 4.0, 6.0
    hc = spec.honeycomb_share
    block = spec.block_mm or block
    if spec.periods_mm is not None:
        fine_p, coarse_p = spec.periods_mm
    burden = float(np.clip(0.5 + (half if uip else -half) + rng.uniform(-j, j) * 2, 0, 1))
    other = 1 - hc
    regions = (
        Region("normal", other * 0.5),
        Region("ground_glass", other * 0.25),
        Region("hyperlucent", other * 0.25),
        Region("honeycomb", hc * burden, period_mm=fine_p),
        Region("honeycomb", hc * (1 - burden), period_mm=coarse_p),
    )
    return tuple(r for r in regions if r.fraction > 0), burden, block


def _normalise(regions):
    total = sum(r.fraction for r in regions)
    return tuple(replace(r, fraction=r.fraction / total) for r in regions)


@dataclass
class SyntheticCohort:
    records: list[CohortRecord]
    phantoms: list[Phantom]
    burdens: np.ndarray

    def write(self, outdir: str | os.PathLike) -> Path:
        """Write volumes, ground-truth masks, labels and cohort.csv; returns the CSV path."""
        outdir = Path(outdir)
        (outdir / "volumes").mkdir(parents=True, exist_ok=True)
        records = []
        for rec, ph in zip(self.records, self.phantoms):
            vpath = outdir / "volumes" / f"{rec.patient_id}.json"
            write_volume(ph.volume, vpath)
            write_mask(ph.mask, outdir / "volumes" / f"{rec.patient_id}_mask.json", ph.volume.spacing_mm)
            write_labels(ph.labels, outdir / "volumes" / f"{rec.patient_id}_labels.json", ph.volume.spacing_mm)
            records.append(replace(rec, volume_path=str(vpath)))
        csv_path = outdir / "cohort.csv"
        write_cohort(records, csv_path)
        return csv_path


def simulate_outcomes(burdens, hazard_ratio, censoring_rate, baseline_hazard, rng,
                      centre: float = 0.5):
    """Exponential event times with hazard ``baseline * HR ** (burden - centre)``.

    A subject is censored with probability ``censoring_rate``, at a time
    uniform on (0, event time).
    """
    burdens = np.asarray(burdens, dtype=float)
    rate = baseline_hazard * hazard_ratio ** (burdens - centre)
    t_event = rng.exponential(1.0 / rate)
    censored = rng.random(len(burdens)) < censoring_rate
    u = rng.uniform(0.0, 1.0, size=len(burdens))
    time = np.where(censored, t_event * u, t_event)
    return time, ~censored


def simulate_survival_groups(n_per_group: int, hazard_ratio: float, censoring_rate: float = 0.0,
                             seed: int = 0, baseline_hazard: float = 1.0 / 1000.0):
    """Two groups (0, 1) where group 1 has ``hazard_ratio`` times the hazard."""
    rng = np.random.default_rng(seed)
    group = np.repeat([0, 1], n_per_group)
    time, event = simulate_outcomes(group.astype(float), hazard_ratio, censoring_rate,
                                    baseline_hazard, rng, centre=0.0)
    return time, event, group


def generate_cohort(spec: SyntheticCohortSpec) -> SyntheticCohort:
    rng = np.random.default_rng(spec.seed)
    records, phantoms, burdens = [], [], []
    n = 2 * spec.n_per_class
    labels = ["UIP"] * spec.n_per_class + ["nonUIP"] * spec.n_per_class
    seeds = rng.integers(0, 2**31 - 1, size=n)
    for i, label in enumerate(labels):
        regions, burden, block = _patient_regions(spec, label == "UIP", rng)
        pspec = PhantomSpec(
            dims=spec.dims, spacing_mm=spec.spacing_mm, regions=_normalise(regions),
            block_mm=block, layout=spec.layout, septum_mm=spec.septum_mm, seed=int(seeds[i]),
        )
        phantoms.append(generate_phantom(pspec))
        burdens.append(burden)
    burdens = np.array(burdens)
    time, event = simulate_outcomes(burdens, spec.hazard_ratio, spec.censoring_rate,
                                    spec.baseline_hazard_per_day, rng)
    ages = np.round(rng.normal(65.0, 8.0, size=n), 1)
    genders = rng.choice(["female", "male"], size=n)
    severity = rng.integers(1, 4, size=n)
    for i, label in enumerate(labels):
        records.append(
            CohortRecord(
                patient_id=f"P{i + 1:03d}",
                age=float(ages[i]),
                gender=str(genders[i]),
                severity=int(severity[i]),
                expert_label=label,
                time_days=float(np.round(time[i], 3)),
                event=bool(event[i]),
            )
        )
    return SyntheticCohort(records, phantoms, burdens)


def segmentation_phantom_spec(seed: int, **kw) -> PhantomSpec:
    """Non-fibrotic lungs (normal, ground-glass, hyperlucent) for segmentation checks."""
    regions = (Region("normal", 0.6), Region("ground_glass", 0.2), Region("hyperlucent", 0.2))
    return PhantomSpec(regions=regions, seed=seed, **kw)
