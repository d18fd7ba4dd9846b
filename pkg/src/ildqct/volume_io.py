"""Volume, mask and cohort data model with their on-disk formats.

A volume is stored as a small JSON header next to a raw little-endian voxel
file, x varying fastest. In memory the voxels are held as a numpy array of
shape ``(nz, ny, nx)`` so that C order matches the file order.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

HU_MIN = -1024
HU_MAX = 3071

_DTYPES = {"i16-le": np.dtype("<i2"), "u8-le": np.dtype("u1")}

COHORT_COLUMNS = (
    "patient_id",
    "age",
    "gender",
    "severity",
    "expert_label",
    "time_days",
    "event",
    "volume_path",
    "mask_override_path",
)

SEVERITY_CODES = {"mild": 1, "moderate": 2, "severe": 3}
GENDER_CODES = {"F": "female", "M": "male"}
LABELS = ("UIP", "nonUIP")


class VolumeFormatError(ValueError):
    """Header or raw file does not follow the volume format."""


class SizeMismatchError(VolumeFormatError):
    pass


class CohortError(ValueError):
    """A cohort row failed validation. ``row`` is the 1-based data row."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


def _check_geometry(dims, spacing_mm):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"dims must be three integers >= 1, got {list(dims)}")
    if len(spacing_mm) != 3 or any(not float(s) > 0 for s in spacing_mm):
        raise ValueError(f"spacing_mm must be three positive reals, got {list(spacing_mm)}")


@dataclass(frozen=True)
class Volume:
    """CT attenuation grid in HU with physical spacing.

    ``voxels`` has shape ``(nz, ny, nx)``; ``dims`` is ``(nx, ny, nz)``.
    """

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValueError("voxels must be a 3-D array")
        _check_geometry(vox.shape[::-1], self.spacing_mm)
        if vox.dtype != np.int16:
            if vox.size and (vox.min() < HU_MIN or vox.max() > HU_MAX):
                raise ValueError("HU values outside [-1024, 3071]")
            vox = vox.astype(np.int16)
        elif vox.size and (vox.min() < HU_MIN or vox.max() > HU_MAX):
            raise ValueError("HU values outside [-1024, 3071]")
        vox = np.ascontiguousarray(vox)
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing_mm == other.spacing_mm
            and self.origin_mm == other.origin_mm
            and self.voxels.shape == other.voxels.shape
            and bool(np.array_equal(self.voxels, other.voxels))
        )

    __hash__ = None


@dataclass(frozen=True)
class LungMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.ascontiguousarray(np.asarray(self.bits, dtype=bool))
        if bits.ndim != 3:
            raise ValueError("mask must be a 3-D array")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.bits.shape
        return (nx, ny, nz)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def matches(self, volume: Volume) -> bool:
        return self.dims == volume.dims

    def __eq__(self, other):
        if not isinstance(other, LungMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


def flatten_index(x: int, y: int, z: int, dims: Sequence[int]) -> int:
    nx, ny, nz = dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise IndexError(f"({x}, {y}, {z}) outside dims {tuple(dims)}")
    return x + nx * (y + ny * z)


def unflatten_index(i: int, dims: Sequence[int]) -> tuple[int, int, int]:
    nx, ny, nz = dims
    if not 0 <= i < nx * ny * nz:
        raise IndexError(f"linear index {i} outside dims {tuple(dims)}")
    z, rem = divmod(i, nx * ny)
    y, x = divmod(rem, nx)
    return (x, y, z)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read_header(header_path: Path) -> dict:
    try:
        header = json.loads(header_path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read header {header_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: invalid JSON header: {exc}") from exc
    for key in ("dims", "spacing_mm", "origin_mm", "dtype", "data"):
        if key not in header:
            raise VolumeFormatError(f"{header_path}: header missing key {key!r}")
    return header


def _read_raw(header_path: str | os.PathLike, expected_dtype: str) -> tuple[np.ndarray, dict]:
    header_path = Path(header_path)
    header = _read_header(header_path)
    dtype_name = header["dtype"]
    if dtype_name not in _DTYPES or dtype_name != expected_dtype:
        raise VolumeFormatError(
            f"{header_path}: unsupported dtype {dtype_name!r} (expected {expected_dtype!r})"
        )
    dims = [int(d) for d in header["dims"]]
    spacing = [float(s) for s in header["spacing_mm"]]
    try:
        _check_geometry(dims, spacing)
    except ValueError as exc:
        raise ValueError(f"{header_path}: {exc}") from None
    raw_path = header_path.parent / header["data"]
    try:
        raw = raw_path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read raw data {raw_path}: {exc}") from exc
    dtype = _DTYPES[dtype_name]
    nx, ny, nz = dims
    expected = nx * ny * nz * dtype.itemsize
    if len(raw) != expected:
        raise SizeMismatchError(
            f"{raw_path}: expected {expected} bytes for dims {dims}, found {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(nz, ny, nx)
    return arr, header


def _write_raw(header_path, arr: np.ndarray, dtype_name: str, spacing, origin) -> None:
    header_path = Path(header_path)
    nz, ny, nx = arr.shape
    raw_name = header_path.with_suffix(".raw").name
    if raw_name == header_path.name:
        raw_name = header_path.name + ".raw"
    header = {
        "dims": [nx, ny, nz],
        "spacing_mm": [float(s) for s in spacing],
        "origin_mm": [float(o) for o in origin],
        "dtype": dtype_name,
        "data": raw_name,
    }
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
    atomic_write_bytes(header_path.parent / raw_name, data)
    atomic_write_text(header_path, json.dumps(header, indent=2) + "\n")


def read_volume(header_path: str | os.PathLike) -> Volume:
    """Read a volume header and its raw i16 data.

    Values outside the 12-bit CT range are clamped, with a logged warning count.
    """
    arr, header = _read_raw(header_path, "i16-le")
    n_out = int(np.count_nonzero((arr < HU_MIN) | (arr > HU_MAX)))
    if n_out:
        log.warning("%s: clamped %d voxels to [%d, %d] HU", header_path, n_out, HU_MIN, HU_MAX)
    voxels = np.clip(arr, HU_MIN, HU_MAX).astype(np.int16)
    return Volume(voxels, tuple(header["spacing_mm"]), tuple(header["origin_mm"]))


def write_volume(v: Volume, header_path: str | os.PathLike) -> None:
    _write_raw(header_path, v.voxels, "i16-le", v.spacing_mm, v.origin_mm)


def read_mask(header_path: str | os.PathLike) -> LungMask:
    arr, _ = _read_raw(header_path, "u8-le")
    if arr.size and arr.max() > 1:
        raise VolumeFormatError(f"{header_path}: mask values must be 0 or 1")
    return LungMask(arr.astype(bool))


def write_mask(mask: LungMask, header_path, spacing_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)) -> None:
    _write_raw(header_path, mask.bits.astype(np.uint8), "u8-le", spacing_mm, origin_mm)


def read_labels(header_path: str | os.PathLike) -> np.ndarray:
    """Per-voxel u8 class codes written alongside phantom volumes."""
    arr, _ = _read_raw(header_path, "u8-le")
    return arr.copy()


def write_labels(labels: np.ndarray, header_path, spacing_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)) -> None:
    _write_raw(header_path, np.asarray(labels, dtype=np.uint8), "u8-le", spacing_mm, origin_mm)


@dataclass(frozen=True)
class CohortRecord:
    patient_id: str
    age: float
    gender: str
    severity: int
    expert_label: str
    time_days: float
    event: bool
    volume_path: str | None = None
    mask_override_path: str | None = None

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if self.gender not in ("female", "male"):
            raise ValueError(f"unknown gender {self.gender!r}")
        if self.severity not in (1, 2, 3):
            raise ValueError(f"severity must be 1, 2 or 3, got {self.severity!r}")
        if self.expert_label not in LABELS:
            raise ValueError(f"unknown expert_label {self.expert_label!r}")
        if not (self.time_days >= 0 and np.isfinite(self.time_days)):
            raise ValueError(f"time_days must be finite and >= 0, got {self.time_days!r}")

    @property
    def is_uip(self) -> bool:
        return self.expert_label == "UIP"


def _parse_row(row: dict, base: Path) -> CohortRecord:
    def opt_path(key):
        value = (row.get(key) or "").strip()
        if not value:
            return None
        p = Path(value)
        return str(p if p.is_absolute() else base / p)

    gender_tok = row["gender"].strip()
    if gender_tok not in GENDER_CODES:
        raise ValueError(f"unknown gender token {gender_tok!r} (expected F or M)")
    sev_tok = row["severity"].strip()
    if sev_tok not in SEVERITY_CODES:
        raise ValueError(f"unknown severity token {sev_tok!r}")
    label_tok = row["expert_label"].strip()
    if label_tok not in LABELS:
        raise ValueError(f"unknown expert_label token {label_tok!r}")
    event_tok = row["event"].strip()
    if event_tok not in ("0", "1"):
        raise ValueError(f"event must be 0 or 1, got {event_tok!r}")
    time_days = float(row["time_days"])
    if time_days < 0:
        raise ValueError(f"negative time_days {time_days}")
    return CohortRecord(
        patient_id=row["patient_id"].strip(),
        age=float(row["age"]),
        gender=GENDER_CODES[gender_tok],
        severity=SEVERITY_CODES[sev_tok],
        expert_label=label_tok,
        time_days=time_days,
        event=event_tok == "1",
        volume_path=opt_path("volume_path"),
        mask_override_path=opt_path("mask_override_path"),
    )


def read_cohort(csv_path: str | os.PathLike) -> list[CohortRecord]:
    """Parse a cohort CSV. Relative paths resolve against the CSV's directory."""
    csv_path = Path(csv_path)
    records: list[CohortRecord] = []
    seen: dict[str, int] = {}
    with open(csv_path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in COHORT_COLUMNS[:7] if c not in (reader.fieldnames or [])]
        if missing:
            raise CohortError(f"{csv_path}: missing columns {missing}")
        for n, row in enumerate(reader, start=1):
            try:
                rec = _parse_row(row, csv_path.parent)
            except (ValueError, TypeError, AttributeError) as exc:
                raise CohortError(str(exc), row=n) from None
            if rec.patient_id in seen:
                raise CohortError(
                    f"duplicate patient_id {rec.patient_id!r} (first seen in row {seen[rec.patient_id]})",
                    row=n,
                )
            seen[rec.patient_id] = n
            records.append(rec)
    return records


def write_cohort(records: Sequence[CohortRecord], csv_path: str | os.PathLike) -> None:
    csv_path = Path(csv_path)
    inv_gender = {v: k for k, v in GENDER_CODES.items()}
    inv_sev = {v: k for k, v in SEVERITY_CODES.items()}
    lines = [",".join(COHORT_COLUMNS)]

    def rel(p):
        if not p:
            return ""
        try:
            return os.path.relpath(p, csv_path.parent)
        except ValueError:
            return str(p)

    for r in records:
        lines.append(
            ",".join(
                [
                    r.patient_id,
                    repr(float(r.age)),
                    inv_gender[r.gender],
                    inv_sev[r.severity],
                    r.expert_label,
                    repr(float(r.time_days)),
                    "1" if r.event else "0",
                    rel(r.volume_path),
                    rel(r.mask_override_path),
                ]
            )
        )
    atomic_write_text(csv_path, "\n".join(lines) + "\n")


def label_counts(records: Sequence[CohortRecord]) -> dict[str, int]:
    counts = {label: 0 for label in LABELS}
    for r in records:
        counts[r.expert_label] += 1
    return counts
