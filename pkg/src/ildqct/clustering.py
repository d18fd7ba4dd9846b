"""K-means tissue phenotypes over lattice feature vectors, and volume ratios."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import FEATURE_NAMES
from .lattice import FeatureMap, format_window
from .volume_io import atomic_write_text

PHENOTYPE_NAMES = ("hyperlucent", "normal", "ground-glass", "reticular", "honeycombing")
MEAN_COLUMN = FEATURE_NAMES.index("Mean")


class TooFewPointsError(ValueError):
    pass


@dataclass
class ClusterModel:
    k: int
    centers: np.ndarray  # (k, n_kept) standardised space, canonical order
    means: np.ndarray  # per feature
    scales: np.ndarray  # per feature, 1 where dropped
    kept: np.ndarray  # boolean mask of non-constant feature columns
    seed: int
    ordering: np.ndarray  # canonical label (0-based) of each raw Lloyd cluster
    objective_trace: list = field(default_factory=list)
    iterations: int = 0

    def standardize(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, dtype=float) - self.means) / self.scales
        return z[:, self.kept]

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Canonical 1-based labels of the nearest centre."""
        z = self.standardize(features)
        return _nearest(z, self.centers) + 1


def _sq_dist(z, centers):
    return ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _nearest(z, centers):
    return np.argmin(_sq_dist(z, centers), axis=1)


def farthest_point_init(z: np.ndarray, k: int, seed: int) -> np.ndarray:
    """First centre drawn from ``seed``; each next one is the point farthest from all chosen."""
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(len(z)))]
    d = ((z - z[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        idx.append(nxt)
        d = np.minimum(d, ((z - z[nxt]) ** 2).sum(axis=1))
    return z[idx].copy()


def lloyd(z: np.ndarray, centers: np.ndarray, max_iters: int = 300, tol: float = 1e-6):
    """Lloyd iterations. Returns (centers, labels, objective trace, iterations).

    The trace holds the within-cluster sum of squares after every assignment
    step. An emptied cluster keeps its previous centre.
    """
    trace = []
    k = len(centers)
    labels = _nearest(z, centers)
    trace.append(float(((z - centers[labels]) ** 2).sum()))
    it = 0
    for it in range(1, max_iters + 1):
        new = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = z[members].mean(axis=0)
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        labels = _nearest(z, centers)
        trace.append(float(((z - centers[labels]) ** 2).sum()))
        if shift < tol:
            break
    return centers, labels, trace, it


def fit_clusters(fmap: FeatureMap | np.ndarray, k: int = 5, seed: int = 0,
                 max_iters: int = 300, tol: float = 1e-6, n_init: int = 10):
    """Standardise, seed by farthest point, run Lloyd, relabel by attenuation.

    ``n_init`` farthest-point starts (first centres drawn from ``seed``) are
    run and the lowest within-cluster sum of squares wins. Canonical labels
    1..k ascend with the cluster average of the Mean feature. Returns
    ``(model, labels)``.
    """
    X = fmap.features if isinstance(fmap, FeatureMap) else np.asarray(fmap, dtype=float)
    n = len(X)
    if n < k:
        raise TooFewPointsError(f"{n} points, fewer than k={k}")
    if k < 2:
        raise ValueError("k must be >= 2")
    means = X.mean(axis=0)
    sd = X.std(axis=0)
    kept = sd > 1e-12 * np.maximum(1.0, np.abs(means))
    scales = np.where(kept, sd, 1.0)
    z = ((X - means) / scales)[:, kept]
    if z.shape[1] == 0:
        z = np.zeros((n, 1))
        kept = np.zeros(X.shape[1], dtype=bool)
    best = None
    for start_seed in np.random.SeedSequence(seed).generate_state(max(1, n_init)):
        init = farthest_point_init(z, k, int(start_seed))
        run = lloyd(z, init, max_iters, tol)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    centers, raw, trace, iters = best

    mean_attn = np.array([
        X[raw == c, MEAN_COLUMN].mean() if np.any(raw == c) else np.inf for c in range(k)
    ])
    order = np.argsort(mean_attn, kind="stable")  # canonical position -> raw cluster
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(k)
    model = ClusterModel(
        k=k, centers=centers[order], means=means, scales=scales, kept=kept, seed=seed,
        ordering=rank, objective_trace=trace, iterations=iters,
    )
    return model, rank[raw] + 1


@dataclass(frozen=True)
class VolumeRatios:
    ratios: np.ndarray
    patient_id: str = ""
    window_mm: float = float("nan")

    @property
    def k(self) -> int:
        return len(self.ratios)


def volume_ratios(labels: Sequence[int], k: int, patient_id: str = "",
                  window_mm: float = float("nan")) -> VolumeRatios:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty label list")
    if labels.min() < 1 or labels.max() > k:
        raise ValueError(f"labels must lie in 1..{k}")
    counts = np.bincount(labels - 1, minlength=k)
    return VolumeRatios(counts / labels.size, patient_id, float(window_mm))


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(v):
        v = np.asarray(v, dtype=float)
        return (v * (v - 1) / 2).sum()

    index = comb2(table)
    sa = comb2(table.sum(axis=1))
    sb = comb2(table.sum(axis=0))
    expected = sa * sb / comb2([len(a)])
    maximum = (sa + sb) / 2
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def pooled_fit(maps: Sequence[FeatureMap], k: int = 5, seed: int = 0):
    """One model over the concatenated maps of several patients.

    Returns the model and a label array per map.
    """
    X = np.concatenate([m.features for m in maps])
    model, labels = fit_clusters(X, k, seed)
    out, start = [], 0
    for m in maps:
        out.append(labels[start:start + len(m)])
        start += len(m)
    return model, out


def label_map_csv(fmap: FeatureMap, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "label"])
    for p, lab in zip(fmap.points, labels):
        w.writerow([int(p[0]), int(p[1]), int(p[2]), int(lab)])
    return buf.getvalue()


def write_label_map(fmap: FeatureMap, labels, path) -> None:
    atomic_write_text(path, label_map_csv(fmap, labels))


def ratios_csv(rows: Sequence[VolumeRatios]) -> str:
    k = rows[0].k if rows else 5
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "window_mm", *(f"r{i}" for i in range(1, k + 1))])
    for r in rows:
        w.writerow([r.patient_id, format_window(r.window_mm), *(repr(float(v)) for v in r.ratios)])
    return buf.getvalue()


def write_ratios(rows: Sequence[VolumeRatios], path) -> None:
    atomic_write_text(path, ratios_csv(rows))


def read_ratios(path) -> list[VolumeRatios]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        cols = [c for c in reader.fieldnames if c.startswith("r") and c[1:].isdigit()]
        return [
            VolumeRatios(np.array([float(row[c]) for c in cols]), row["patient_id"], float(row["window_mm"]))
            for row in reader
        ]
