"""UIP vs non-UIP classification from volume ratios and clinical covariates.

Linear SVM, a small MLP, a whole-lung histogram baseline, AUC, and
stratified cross-validation with all preprocessing fit inside training folds.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .clustering import VolumeRatios
from .features import HISTOGRAM_NAMES, gray_level_histogram, histogram_features
from .lattice import format_window
from .volume_io import CohortRecord, LungMask, Volume

C_GRID = (0.01, 0.1, 1.0, 10.0)
CLINICAL_COLUMNS = ("age", "gender", "severity")
SWEEP_ROWS = ("AUC without clinical measures", "AUC with clinical measures")
DEFAULT_WINDOWS = (4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0)


class SingleClassError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class DesignMatrix:
    X: np.ndarray
    columns: tuple[str, ...]
    y: np.ndarray  # 1 = UIP, 0 = non-UIP
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("X must be (n, p) with one label per row")
        if len(set(self.columns)) != len(self.columns) or len(self.columns) != self.X.shape[1]:
            raise ValueError("column names must be unique, one per column")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("design matrix has missing or non-finite cells")
        if not set(np.unique(self.y)) <= {0, 1}:
            raise ValueError("labels must be 0 or 1")
        if not self.ids:
            self.ids = tuple(str(i) for i in range(len(self.y)))

    def subset(self, idx) -> "DesignMatrix":
        idx = np.asarray(idx)
        return DesignMatrix(self.X[idx], self.columns, self.y[idx], tuple(np.asarray(self.ids)[idx]))


def clinical_row(rec: CohortRecord) -> list[float]:
    return [float(rec.age), 1.0 if rec.gender == "male" else 0.0, float(rec.severity)]


def design_from_ratios(ratios: Sequence[VolumeRatios], records: Sequence[CohortRecord],
                       with_clinical: bool = False) -> DesignMatrix:
    """Rows in cohort order; every record needs a ratio row."""
    by_id = {r.patient_id: r for r in ratios}
    missing = [rec.patient_id for rec in records if rec.patient_id not in by_id]
    if missing:
        raise KeyError(f"no volume ratios for patients {missing}")
    k = len(ratios[0].ratios)
    cols = tuple(f"r{i}" for i in range(1, k + 1))
    rows = []
    for rec in records:
        row = list(by_id[rec.patient_id].ratios)
        if with_clinical:
            row += clinical_row(rec)
        rows.append(row)
    if with_clinical:
        cols += CLINICAL_COLUMNS
    y = [1 if rec.is_uip else 0 for rec in records]
    return DesignMatrix(np.array(rows), cols, np.array(y), tuple(r.patient_id for r in records))


def design_from_features(features: Mapping[str, np.ndarray], names: Sequence[str],
                         records: Sequence[CohortRecord], with_clinical: bool = False) -> DesignMatrix:
    rows = []
    for rec in records:
        row = list(np.asarray(features[rec.patient_id], dtype=float))
        if with_clinical:
            row += clinical_row(rec)
        rows.append(row)
    cols = tuple(names) + (CLINICAL_COLUMNS if with_clinical else ())
    y = [1 if rec.is_uip else 0 for rec in records]
    return DesignMatrix(np.array(rows), cols, np.array(y), tuple(r.patient_id for r in records))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


# ------------------------------------------------------------------- SVM

@njit(cache=True)
def _svm_dual_cd(Z, y, cvec, tol, max_epochs):
    """Dual coordinate descent for the L1-loss linear SVM with bias as a feature."""
    n, p = Z.shape
    alpha = np.zeros(n)
    w = np.zeros(p)
    qdiag = np.empty(n)
    for i in range(n):
        qdiag[i] = Z[i] @ Z[i]
    trace = np.empty(max_epochs)
    epochs = 0
    for ep in range(max_epochs):
        worst = 0.0
        for i in range(n):
            g = y[i] * (w @ Z[i]) - 1.0
            if alpha[i] <= 0.0:
                pg = min(g, 0.0)
            elif alpha[i] >= cvec[i]:
                pg = max(g, 0.0)
            else:
                pg = g
            if abs(pg) > worst:
                worst = abs(pg)
            if pg != 0.0 and qdiag[i] > 0.0:
                new = min(max(alpha[i] - g / qdiag[i], 0.0), cvec[i])
                delta = new - alpha[i]
                if delta != 0.0:
                    alpha[i] = new
                    for j in range(p):
                        w[j] += delta * y[i] * Z[i, j]
        trace[ep] = 0.5 * (w @ w) - alpha.sum()
        epochs = ep + 1
        if worst < tol:
            break
    return w, alpha, trace[:epochs], epochs


@dataclass
class LinearSVMModel:
    weights: np.ndarray  # standardised space
    bias: float
    C: float
    standardizer: Standardizer
    columns: tuple[str, ...] = ()
    epochs: int = 0
    dual_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    primal_objective: float = float("nan")

    def decision_function(self, X) -> np.ndarray:
        return self.standardizer.transform(X) @ self.weights + self.bias

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(np.int64)

    def raw_weights(self) -> tuple[np.ndarray, float]:
        """Weights and bias acting on unstandardised columns."""
        w = self.weights / self.standardizer.scale
        return w, float(self.bias - w @ self.standardizer.mean)


def train_svm(X, y=None, C: float = 1.0, sample_weight=None, tol: float = 1e-6,
              max_epochs: int = 20000) -> LinearSVMModel:
    """L2-regularised hinge loss, minimised in the dual.

    ``X`` may be a DesignMatrix (labels taken from it) or an array with ``y``.
    Columns are standardised with statistics of these rows. The recorded
    ``dual_trace`` is the dual objective per epoch, non-increasing.
    """
    columns: tuple[str, ...] = ()
    if isinstance(X, DesignMatrix):
        columns, y, X = X.columns, X.y, X.X
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise SingleClassError("SVM training needs both classes")
    std = Standardizer.fit(X)
    Z = np.hstack([std.transform(X), np.ones((len(X), 1))])
    ys = np.where(y == 1, 1.0, -1.0)
    sw = np.ones(len(X)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    w, alpha, trace, epochs = _svm_dual_cd(np.ascontiguousarray(Z), ys, C * sw, tol, max_epochs)
    margins = ys * (Z @ w)
    primal = 0.5 * w @ w + float((C * sw * np.maximum(0.0, 1.0 - margins)).sum())
    return LinearSVMModel(w[:-1].copy(), float(w[-1]), C, std, tuple(columns), int(epochs), trace, primal)


# ------------------------------------------------------------------- AUC

def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassError("AUC needs both classes")
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    twice = int((below + not_above).sum())  # 2*(#less) + #equal
    return twice / (2 * len(pos) * len(neg))


# ------------------------------------------------------------------- MLP

@dataclass(frozen=True)
class MLPConfig:
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 300
    learning_rate: float = 0.05
    batch_size: int = 8
    l2: float = 1e-4
    seed: int = 0


@dataclass
class MLPModel:
    weights: list  # W1..WL, shapes (n_in, h1), ..., (h_last, 1)
    biases: list
    config: MLPConfig = field(default_factory=MLPConfig)
    standardizer: Standardizer | None = None
    loss_trace: list = field(default_factory=list)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def _forward(self, X):
        acts = [X]
        pre = []
        h = X
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            pre.append(z)
            h = z if k == last else np.maximum(z, 0.0)
            acts.append(h)
        logit = h[:, 0]
        return logit, pre, acts

    def predict_proba(self, X, standardized: bool = False) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if not standardized and self.standardizer is not None:
            X = self.standardizer.transform(X)
        logit, _, _ = self._forward(X)
        return _sigmoid(logit)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def init_mlp(n_in: int, config: MLPConfig = MLPConfig(), zero: bool = False) -> MLPModel:
    rng = np.random.default_rng(config.seed)
    sizes = [n_in, *config.hidden, 1]
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        if zero:
            weights.append(np.zeros((a, b)))
        else:
            weights.append(rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b)))
        biases.append(np.zeros(b))
    return MLPModel(weights, biases, config)


def mlp_loss(model: MLPModel, X, y) -> float:
    """Mean logistic loss on already-normalised inputs, plus the L2 penalty."""
    logit, _, _ = model._forward(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    # log(1 + e^t) - y t, written stably
    loss = np.mean(np.logaddexp(0.0, logit) - y * logit)
    pen = 0.5 * model.config.l2 * sum((W**2).sum() for W in model.weights)
    return loss + pen  # numpy scalar in the input precision


def mlp_gradients(model: MLPModel, X, y):
    """Gradients of ``mlp_loss`` by reverse accumulation: (dW list, db list)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    logit, pre, acts = model._forward(X)
    n = len(X)
    delta = ((_sigmoid(logit) - y) / n)[:, None]
    dWs = [None] * len(model.weights)
    dbs = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        dWs[k] = acts[k].T @ delta + model.config.l2 * model.weights[k]
        dbs[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k].T) * (pre[k - 1] > 0)
    return dWs, dbs


def train_mlp(X, y=None, config: MLPConfig = MLPConfig()) -> MLPModel:
    """Mini-batch gradient descent on standardised inputs."""
    if isinstance(X, DesignMatrix):
        y, X = X.y, X.X
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    std = Standardizer.fit(X)
    Z = std.transform(X)
    model = init_mlp(Z.shape[1], config)
    model.standardizer = std
    rng = np.random.default_rng(config.seed + 1)
    for epoch in range(config.epochs):
        order = rng.permutation(len(Z))
        for start in range(0, len(Z), config.batch_size):
            idx = order[start:start + config.batch_size]
            dWs, dbs = mlp_gradients(model, Z[idx], y[idx])
            for k in range(len(model.weights)):
                model.weights[k] -= config.learning_rate * dWs[k]
                model.biases[k] -= config.learning_rate * dbs[k]
        loss = mlp_loss(model, Z, y)
        if not math.isfinite(loss):
            raise DivergenceError(f"MLP loss became non-finite at epoch {epoch + 1}")
        model.loss_trace.append(loss)
    return model


# -------------------------------------------------------- cross-validation

def stratified_folds(y, folds: int, seed: int) -> np.ndarray:
    """Fold index per row; each class dealt round-robin after a seeded shuffle."""
    y = np.asarray(y)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    offset = 0
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = (np.arange(len(idx)) + offset) % folds
        offset += len(idx)
    for f in range(folds):
        present = set(y[fold_of == f])
        if present != {0, 1}:
            raise SingleClassError(f"fold {f} lacks a class (too few rows per class for {folds} folds)")
    return fold_of


@dataclass
class CVResult:
    pooled_auc: float
    per_fold_auc: list
    scores: np.ndarray  # out-of-fold scores in row order
    fold_of: np.ndarray
    accuracy: float
    model: str
    seed: int
    chosen_C: list = field(default_factory=list)

    def to_json(self, **extra) -> dict:
        out = {
            "model": self.model,
            "per_fold_auc": [float(a) for a in self.per_fold_auc],
            "pooled_auc": float(self.pooled_auc),
            "accuracy": float(self.accuracy),
            "seed": int(self.seed),
        }
        if self.chosen_C:
            out["chosen_C"] = [float(c) for c in self.chosen_C]
        out.update(extra)  # caller labels (window, covariate set, feature family) win
        return out


def select_C(dm: DesignMatrix, seed: int, grid=C_GRID, inner_folds: int = 3) -> float:
    """Pick C by pooled inner-CV AUC; ties go to the smaller C."""
    counts = np.bincount(dm.y, minlength=2)
    if counts.min() < inner_folds:
        return 1.0
    fold_of = stratified_folds(dm.y, inner_folds, seed)
    best_c, best_auc = grid[0], -1.0
    for c in grid:
        scores = np.empty(len(dm.y))
        for f in range(inner_folds):
            tr = fold_of != f
            m = train_svm(dm.X[tr], dm.y[tr], C=c)
            scores[~tr] = m.decision_function(dm.X[~tr])
        a = auc(scores, dm.y)
        if a > best_auc:
            best_c, best_auc = c, a
    return best_c


def fit_and_score(model: str, train: DesignMatrix, test_X, seed: int, C=None,
                  mlp_config: MLPConfig | None = None):
    """Fit on ``train`` only; return (scores for test_X, threshold, chosen C)."""
    if model in ("svm", "hm"):
        c = select_C(train, seed) if C is None else C
        m = train_svm(train, C=c)
        return m.decision_function(test_X), 0.0, c
    if model == "mlp":
        cfg = mlp_config or MLPConfig(seed=seed)
        m = train_mlp(train, config=cfg)
        return m.predict_proba(test_X), 0.5, None
    raise ValueError(f"unknown model {model!r}")


def cross_validated_auc(dm: DesignMatrix, folds: int = 5, seed: int = 0, model: str = "svm",
                        C: float | None = None, mlp_config: MLPConfig | None = None) -> CVResult:
    fold_of = stratified_folds(dm.y, folds, seed)
    scores = np.empty(len(dm.y))
    predicted = np.empty(len(dm.y), dtype=np.int64)
    per_fold, chosen = [], []
    for f in range(folds):
        te = fold_of == f
        s, thr, c = fit_and_score(model, dm.subset(np.flatnonzero(~te)), dm.X[te], seed + 1 + f, C, mlp_config)
        scores[te] = s
        predicted[te] = (s > thr).astype(np.int64)
        per_fold.append(auc(s, dm.y[te]))
        if c is not None:
            chosen.append(c)
    return CVResult(
        pooled_auc=auc(scores, dm.y), per_fold_auc=per_fold, scores=scores, fold_of=fold_of,
        accuracy=float((predicted == dm.y).mean()), model=model, seed=seed, chosen_C=chosen,
    )


# ------------------------------------------------------- histogram baseline

def hm_baseline(volume: Volume, mask: LungMask) -> np.ndarray:
    """The 12 histogram features over every masked voxel."""
    if mask.dims != volume.dims:
        raise ValueError("mask and volume dims differ")
    values = volume.voxels[mask.bits]
    if values.size == 0:
        raise ValueError("empty mask")
    return histogram_features(gray_level_histogram(values))


HM_NAMES = tuple(f"HM_{n}" for n in HISTOGRAM_NAMES)


# ------------------------------------------------------------ window sweep

@dataclass
class SweepTable:
    windows: tuple[float, ...]
    rows: dict  # row name -> list of pooled AUC per window
    results: list  # CVResult JSON dicts

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["", *(f"W={format_window(x)}mm" for x in self.windows)])
        for name in SWEEP_ROWS:
            w.writerow([name, *(repr(float(v)) for v in self.rows[name])])
        return buf.getvalue()


def window_sweep(ratios_by_window: Mapping[float, Sequence[VolumeRatios]], records: Sequence[CohortRecord],
                 windows: Sequence[float] = DEFAULT_WINDOWS, folds: int = 5, seed: int = 0,
                 model: str = "svm", mlp_config: MLPConfig | None = None) -> SweepTable:
    """Pooled CV AUC per window, without and with clinical covariates."""
    rows = {name: [] for name in SWEEP_ROWS}
    results = []
    for w in windows:
        key = float(w)
        if key not in ratios_by_window:
            raise KeyError(f"no volume ratios for window {format_window(w)} mm")
        for name, with_clin in zip(SWEEP_ROWS, (False, True)):
            dm = design_from_ratios(ratios_by_window[key], records, with_clinical=with_clin)
            res = cross_validated_auc(dm, folds, seed, model, mlp_config=mlp_config)
            rows[name].append(res.pooled_auc)
            results.append(res.to_json(window_mm=key, covariate_set="imaging+clinical" if with_clin else "imaging"))
    return SweepTable(tuple(float(w) for w in windows), rows, results)
