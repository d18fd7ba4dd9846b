"""Time-to-event analysis: ridge Cox model, Harrell's C, Kaplan-Meier, log-rank."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.stats import chi2 as chi2_dist

from .volume_io import CohortRecord


class SeparationError(RuntimeError):
    pass


class NoComparablePairsError(ValueError):
    pass


class DegenerateSplitError(ValueError):
    pass


@dataclass
class SurvivalSample:
    time: np.ndarray
    event: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event, dtype=bool)
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.time), -1)
        if len(self.event) != len(self.time):
            raise ValueError("time and event lengths differ")
        if not np.all(np.isfinite(self.time)) or np.any(self.time < 0):
            raise ValueError("times must be finite and >= 0")
        if self.X.shape[1] != len(self.names):
            raise ValueError("one name per covariate column")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("covariates must be finite")
        if not self.ids:
            self.ids = tuple(str(i) for i in range(len(self.time)))

    def __len__(self):
        return len(self.time)

    def subset(self, idx) -> "SurvivalSample":
        idx = np.asarray(idx)
        return SurvivalSample(self.time[idx], self.event[idx], self.X[idx], self.names,
                              tuple(np.asarray(self.ids)[idx]))

    def select(self, names: Sequence[str]) -> "SurvivalSample":
        cols = [self.names.index(n) for n in names]
        return SurvivalSample(self.time, self.event, self.X[:, cols], tuple(names), self.ids)


def sample_from_records(records: Sequence[CohortRecord], covariates: dict[str, np.ndarray] | None = None,
                        names: Sequence[str] = ()) -> SurvivalSample:
    """Outcomes from the cohort with covariate rows keyed by patient id."""
    X = np.zeros((len(records), len(names)))
    for i, rec in enumerate(records):
        if names:
            X[i] = covariates[rec.patient_id]
    return SurvivalSample([r.time_days for r in records], [r.event for r in records], X, tuple(names),
                          tuple(r.patient_id for r in records))


# ------------------------------------------------------------------ Cox

def cox_loglik(beta, X, time, event):
    """Breslow log partial likelihood with its gradient and Hessian."""
    beta = np.asarray(beta, dtype=float)
    X = np.asarray(X, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    eta = X @ beta
    shift = eta.max() if len(eta) else 0.0
    w = np.exp(eta - shift)
    ev = np.flatnonzero(event)
    risk = time[None, :] >= time[ev][:, None]  # (events, n)
    s0 = risk @ w
    s1 = risk @ (w[:, None] * X)
    s2 = np.einsum("en,n,na,nb->eab", risk.astype(float), w, X, X)
    mean = s1 / s0[:, None]
    ll = float(eta[ev].sum() - (np.log(s0) + shift).sum())
    grad = X[ev].sum(axis=0) - mean.sum(axis=0)
    hess = -(s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :]).sum(axis=0)
    return ll, grad, hess


@dataclass
class CoxModel:
    names: tuple[str, ...]
    beta: np.ndarray  # per raw covariate unit
    se: np.ndarray
    beta_std: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    lam: float
    loglik_trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    def linear_predictor(self, X) -> np.ndarray:
        """Risk score centred at the training means."""
        return (np.asarray(X, dtype=float) - self.means) @ self.beta


def fit_cox(samples: SurvivalSample, lam: float = 0.1, max_iter: int = 100, tol: float = 1e-8,
            max_abs_beta: float = 50.0) -> CoxModel:
    """Ridge-penalised Cox fit by Newton iterations with step halving.

    Covariates are standardised internally and the penalty ``lam/2 |b|^2``
    acts on standardised coefficients. ``beta`` is reported per raw unit.
    """
    if not samples.event.any():
        raise ValueError("Cox fit needs at least one event")
    means = samples.X.mean(axis=0)
    scales = samples.X.std(axis=0)
    const = [n for n, s in zip(samples.names, scales) if s == 0]
    if const:
        raise ValueError(f"covariates constant across subjects: {const}")
    Z = (samples.X - means) / scales
    p = Z.shape[1]
    b = np.zeros(p)

    def objective(b):
        ll, g, h = cox_loglik(b, Z, samples.time, samples.event)
        return ll - 0.5 * lam * b @ b, g - lam * b, h - lam * np.eye(p)

    f, g, h = objective(b)
    trace = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            converged = True
            it -= 1
            break
        step = np.linalg.solve(-h, g)
        for _ in range(60):
            f_new, g_new, h_new = objective(b + step)
            if f_new >= f:
                break
            step = step / 2
        b = b + step
        f, g, h = f_new, g_new, h_new
        trace.append(f)
        if np.max(np.abs(b)) > max_abs_beta:
            raise SeparationError(
                f"coefficient exceeded {max_abs_beta} in standardised units (monotone likelihood); "
                "increase the ridge penalty"
            )
    else:
        converged = np.max(np.abs(g)) < tol
    cov_std = np.linalg.inv(-h)
    se_std = np.sqrt(np.clip(np.diag(cov_std), 0, None))
    return CoxModel(samples.names, b / scales, se_std / scales, b, means, scales, lam, trace,
                    bool(converged), it)


# ------------------------------------------------------------ concordance

def concordance_counts(risk, time, event) -> tuple[int, int]:
    """(2*concordant + tied, 2*comparable) over Harrell-comparable pairs."""
    risk = np.asarray(risk, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    ev = np.flatnonzero(event)
    comparable = time[ev][:, None] < time[None, :]
    ri = risk[ev][:, None]
    conc = int(((ri > risk[None, :]) & comparable).sum())
    ties = int(((ri == risk[None, :]) & comparable).sum())
    return 2 * conc + ties, 2 * int(comparable.sum())


def c_statistic(risk, samples_or_time, event=None) -> float:
    """Harrell's C; a higher risk score should mean an earlier event."""
    if isinstance(samples_or_time, SurvivalSample):
        time, event = samples_or_time.time, samples_or_time.event
    else:
        time = samples_or_time
    num, den = concordance_counts(risk, time, event)
    if den == 0:
        raise NoComparablePairsError("no comparable pairs")
    return num / den


def survival_folds(samples: SurvivalSample, folds: int, seed: int) -> np.ndarray:
    """Fold per subject; events and censored subjects dealt separately."""
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(samples), dtype=np.int64)
    offset = 0
    for flag in (True, False):
        idx = np.flatnonzero(samples.event == flag)
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = (np.arange(len(idx)) + offset) % folds
        offset += len(idx)
    return fold_of


def cross_validated_c(samples: SurvivalSample, folds: int = 5, seed: int = 0, lam: float = 0.1) -> float:
    """Pooled out-of-fold linear predictors scored with Harrell's C."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    fold_of = survival_folds(samples, folds, seed)
    lp = np.empty(len(samples))
    for f in range(folds):
        te = fold_of == f
        model = fit_cox(samples.subset(np.flatnonzero(~te)), lam)
        lp[te] = model.linear_predictor(samples.X[te])
    return c_statistic(lp, samples)


@dataclass(frozen=True)
class ScreenEntry:
    name: str
    c_statistic: float
    error: str = ""


def univariable_screen(samples: SurvivalSample, folds: int = 5, seed: int = 0, lam: float = 0.1):
    """Cross-validated C of a one-covariate Cox model per feature.

    Returns ``(ranked, failed)``: usable entries by descending C (ties by
    name) and the features whose fits failed, with the reason.
    """
    ok, failed = [], []
    for name in sorted(samples.names):
        try:
            c = cross_validated_c(samples.select([name]), folds, seed, lam)
        except (ValueError, SeparationError, np.linalg.LinAlgError) as exc:
            failed.append(ScreenEntry(name, float("nan"), str(exc)))
            continue
        ok.append(ScreenEntry(name, c))
    ok.sort(key=lambda e: (-e.c_statistic, e.name))
    return ok, failed


# ----------------------------------------------------------- Kaplan-Meier

@dataclass
class KMCurve:
    time: np.ndarray  # distinct event times, ascending
    survival: np.ndarray  # S just after each time
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Right-continuous step function; 1 before the first event."""
        k = np.searchsorted(self.time, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[1.0], self.survival])[k]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "survival", "at_risk", "events"])
        for row in zip(self.time, self.survival, self.at_risk, self.events):
            w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])
        return buf.getvalue()


def km_curve(time, event=None) -> KMCurve:
    """Product-limit estimate, accumulated in exact rationals."""
    if isinstance(time, SurvivalSample):
        time, event = time.time, time.event
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    if len(time) == 0:
        raise ValueError("empty group")
    ts = np.unique(time[event])
    at_risk = np.array([(time >= t).sum() for t in ts], dtype=np.int64)
    d = np.array([((time == t) & event).sum() for t in ts], dtype=np.int64)
    s = Fraction(1)
    surv = []
    for n_i, d_i in zip(at_risk, d):
        s *= Fraction(int(n_i - d_i), int(n_i))
        surv.append(float(s))
    return KMCurve(ts, np.array(surv), at_risk, d)


@dataclass(frozen=True)
class LogRankResult:
    chi2: float
    p_value: float
    observed: float
    expected: float


def log_rank(time_a, event_a, time_b, event_b) -> LogRankResult:
    """Two-group log-rank test, chi-square with one degree of freedom."""
    time_a, time_b = np.asarray(time_a, dtype=float), np.asarray(time_b, dtype=float)
    event_a, event_b = np.asarray(event_a, dtype=bool), np.asarray(event_b, dtype=bool)
    if len(time_a) == 0 or len(time_b) == 0:
        raise ValueError("log-rank needs two non-empty groups")
    t_all = np.concatenate([time_a, time_b])
    e_all = np.concatenate([event_a, event_b])
    obs = exp = var = 0.0
    for t in np.unique(t_all[e_all]):
        n_a = int((time_a >= t).sum())
        n = int((t_all >= t).sum())
        d = int(((t_all == t) & e_all).sum())
        d_a = int(((time_a == t) & event_a).sum())
        obs += d_a
        exp += d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    stat = (obs - exp) ** 2 / var if var > 0 else 0.0
    return LogRankResult(float(stat), float(chi2_dist.sf(stat, 1)), obs, exp)


# ------------------------------------------------------------- partitions

@dataclass
class Partition:
    rule: str
    low: np.ndarray  # subject indices
    high: np.ndarray
    km_low: KMCurve
    km_high: KMCurve
    test: LogRankResult


def partition_by_scores(scores, samples: SurvivalSample, rule: str = "median",
                        threshold: float | None = None) -> Partition:
    """Split at the median score (or ``threshold``); ties go to the low group."""
    scores = np.asarray(scores, dtype=float)
    cut = float(np.median(scores)) if threshold is None else float(threshold)
    high = scores > cut
    if high.all() or not high.any():
        raise DegenerateSplitError("risk split leaves an empty group (all predictors equal?)")
    lo, hi = np.flatnonzero(~high), np.flatnonzero(high)
    return Partition(
        rule=rule,
        low=lo, high=hi,
        km_low=km_curve(samples.time[lo], samples.event[lo]),
        km_high=km_curve(samples.time[hi], samples.event[hi]),
        test=log_rank(samples.time[lo], samples.event[lo], samples.time[hi], samples.event[hi]),
    )


def partition_by_risk(model: CoxModel, samples: SurvivalSample, threshold: float | None = None) -> Partition:
    lp = model.linear_predictor(samples.select(model.names).X)
    rule = "median linear predictor" if threshold is None else f"linear predictor > {threshold!r}"
    return partition_by_scores(lp, samples, rule, threshold)


def partition_by_label(is_high, samples: SurvivalSample, rule: str = "expert label UIP") -> Partition:
    """Groups from a given label, e.g. the expert UIP call (high) vs the rest."""
    return partition_by_scores(np.asarray(is_high, dtype=float), samples, rule, threshold=0.5)


def survival_report(model: CoxModel, c_stat: float, risk: Partition, seed: int,
                    label: Partition | None = None, screen=None) -> dict:
    out = {
        "covariates": list(model.names),
        "beta": [float(v) for v in model.beta],
        "se": [float(v) for v in model.se],
        "lambda": float(model.lam),
        "converged": bool(model.converged),
        "c_statistic": float(c_stat),
        "logrank_p": float(risk.test.p_value),
        "logrank_chi2": float(risk.test.chi2),
        "partition_rule": risk.rule,
        "seed": int(seed),
    }
    if label is not None:
        out["label_partition"] = {
            "rule": label.rule,
            "logrank_p": float(label.test.p_value),
            "logrank_chi2": float(label.test.chi2),
        }
    if screen is not None:
        ranked, failed = screen
        out["screen"] = [{"name": e.name, "cv_c_statistic": float(e.c_statistic)} for e in ranked]
        out["screen_failures"] = [{"name": e.name, "error": e.error} for e in failed]
    return out
