"""Command-line front end: segment, extract, cluster, classify, survival, pipeline, phantom.

Exit codes: 0 success, 1 validation error (bad config, missing inputs),
2 runtime failure in a stage.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .classification import (
    C_GRID, DEFAULT_WINDOWS, HM_NAMES, SWEEP_ROWS, MLPConfig, SweepTable, cross_validated_auc,
    design_from_features, hm_baseline, window_sweep,
)
from .clustering import (
    fit_clusters, pooled_fit, read_ratios, volume_ratios, write_label_map, write_ratios,
)
from .features import TextureConfig
from .lattice import LatticeConfig, compute_feature_map, feature_map_filename, format_window, read_feature_map, write_feature_map
from .phantom import DESIGNS, SyntheticCohortSpec, generate_cohort
from .plotting import plot_auc_sweep, plot_km
from .segmentation import SegmentationConfig, segment_lung
from .survival import (
    cross_validated_c, fit_cox, partition_by_label, partition_by_risk, sample_from_records,
    survival_report, univariable_screen,
)
from .volume_io import CohortError, VolumeFormatError, atomic_write_text, read_cohort, read_mask, read_volume, write_mask

CLINICAL = ("age", "gender", "severity")


class ValidationError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, patient_id: str | None, cause: Exception):
        who = f" for patient {patient_id}" if patient_id else ""
        super().__init__(f"stage {stage!r} failed{who}: {cause}")
        self.stage = stage
        self.patient_id = patient_id


# ------------------------------------------------------------------ config

@dataclass
class ClusteringSection:
    k: int = 5
    n_init: int = 10
    max_iters: int = 300
    tol: float = 1e-6
    pooled: bool = False


@dataclass
class ClassificationSection:
    folds: int = 5
    model: str = "svm"
    C: float | None = None  # None -> inner grid
    with_clinical: bool = False
    mlp_hidden: tuple = (64, 64)
    mlp_epochs: int = 300
    mlp_learning_rate: float = 0.05
    mlp_batch_size: int = 8
    mlp_l2: float = 1e-4


@dataclass
class SurvivalSection:
    window_mm: float = 8.0
    lam: float = 0.1
    folds: int = 5
    top_m: int = 3


@dataclass
class LatticeSection:
    lattice_step_mm: float | None = None
    min_lung_fraction: float = 0.5
    levels: int = 32
    hu_range: tuple = (-1024.0, 240.0)
    distance: int = 1


@dataclass
class RunConfig:
    cohort_csv: str = ""
    output_dir: str = "out"
    windows_mm: tuple = DEFAULT_WINDOWS
    seed: int = 0
    workers: int = 1
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    lattice: LatticeSection = field(default_factory=LatticeSection)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    classification: ClassificationSection = field(default_factory=ClassificationSection)
    survival: SurvivalSection = field(default_factory=SurvivalSection)

    def to_json(self) -> dict:
        d = asdict(self)
        d["windows_mm"] = list(self.windows_mm)
        return d

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def lattice_config(self, window_mm: float) -> LatticeConfig:
        s = self.lattice
        tex = TextureConfig(levels=s.levels, hu_range=tuple(s.hu_range), distance=s.distance)
        return LatticeConfig(window_mm, s.lattice_step_mm, s.min_lung_fraction, tex, workers=1)

    def mlp_config(self) -> MLPConfig:
        c = self.classification
        return MLPConfig(tuple(c.mlp_hidden), c.mlp_epochs, c.mlp_learning_rate, c.mlp_batch_size, c.mlp_l2, self.seed)


_SECTIONS = {
    "segmentation": SegmentationConfig, "lattice": LatticeSection, "clustering": ClusteringSection,
    "classification": ClassificationSection, "survival": SurvivalSection,
}


def _build_section(cls, data, name):
    if not isinstance(data, dict):
        raise ValidationError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {name!r} section: {exc}") from None


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{p}: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kw[key] = _build_section(_SECTIONS[key], value, key)
        elif key == "windows_mm":
            kw[key] = tuple(float(w) for w in value)
        elif key in ("cohort_csv", "output_dir") and value:
            q = Path(value)
            kw[key] = str(q if q.is_absolute() else p.parent / q)
        else:
            kw[key] = value
    return RunConfig(**kw)


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "cohort", None):
        cfg = replace(cfg, cohort_csv=args.cohort)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "windows", None):
        try:
            ws = tuple(float(w) for w in args.windows.split(",") if w.strip())
        except ValueError:
            raise ValidationError(f"--windows must be comma-separated numbers, got {args.windows!r}") from None
        cfg = replace(cfg, windows_mm=ws)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, segmentation=replace(cfg.segmentation, seed=args.seed))
    if getattr(args, "workers", None) is not None:
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "with_clinical", False):
        cfg = replace(cfg, classification=replace(cfg.classification, with_clinical=True))
    if getattr(args, "model", None):
        cfg = replace(cfg, classification=replace(cfg.classification, model=args.model))
    return cfg


def validate(cfg: RunConfig, need_cohort: bool = True) -> None:
    if not cfg.windows_mm:
        raise ValidationError("window list is empty")
    bad = [w for w in cfg.windows_mm if not 4 <= w <= 20]
    if bad:
        raise ValidationError(f"window sizes must lie in [4, 20] mm, got {bad}")
    if cfg.workers < 1:
        raise ValidationError("workers must be >= 1")
    if cfg.classification.model not in ("svm", "mlp", "hm"):
        raise ValidationError(f"unknown model {cfg.classification.model!r}")
    if cfg.classification.folds < 2 or cfg.survival.folds < 2:
        raise ValidationError("folds must be >= 2")
    if cfg.clustering.k < 2:
        raise ValidationError("clustering k must be >= 2")
    if need_cohort:
        if not cfg.cohort_csv:
            raise ValidationError("no cohort CSV given (config cohort_csv or --cohort)")
        if not Path(cfg.cohort_csv).is_file():
            raise ValidationError(f"cohort CSV not found: {cfg.cohort_csv}")


def load_records(cfg: RunConfig, need_volumes: bool = False):
    try:
        records = read_cohort(cfg.cohort_csv)
    except CohortError as exc:
        raise ValidationError(f"{cfg.cohort_csv}: {exc}") from None
    if not records:
        raise ValidationError(f"{cfg.cohort_csv}: no patient rows")
    if need_volumes:
        for row, rec in enumerate(records, start=1):
            if not rec.volume_path:
                raise ValidationError(f"row {row} ({rec.patient_id}): no volume_path")
            if not Path(rec.volume_path).is_file():
                raise ValidationError(f"row {row} ({rec.patient_id}): volume file not found: {rec.volume_path}")
            if rec.mask_override_path and not Path(rec.mask_override_path).is_file():
                raise ValidationError(
                    f"row {row} ({rec.patient_id}): mask override not found: {rec.mask_override_path}"
                )
    return records


# ------------------------------------------------------------------ paths

def mask_path(cfg, pid):
    return cfg.out / "segmentation" / f"{pid}_mask.json"


def fmap_path(cfg, pid, w):
    return cfg.out / "features" / feature_map_filename(pid, w)


def hm_path(cfg):
    return cfg.out / "features" / "hm_baseline.csv"


def labels_path(cfg, pid, w):
    return cfg.out / "clusters" / f"{pid}_W{format_window(w)}_labels.csv"


def ratios_path(cfg, w):
    return cfg.out / "ratios" / f"ratios_W{format_window(w)}.csv"


def _map_patients(cfg, fn, records):
    """Apply ``fn`` per patient with up to ``workers`` threads; results in cohort order."""
    def guarded(rec):
        try:
            return fn(rec)
        except (ValidationError, StageError):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the patient named
            raise StageError(fn.__name__.lstrip("_"), rec.patient_id, exc) from exc

    if cfg.workers == 1 or len(records) == 1:
        return [guarded(r) for r in records]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(guarded, records))


# ------------------------------------------------------------------ stages

def run_segment(cfg: RunConfig, records) -> list[Path]:
    def segment(rec):
        try:
            vol = read_volume(rec.volume_path)
        except (OSError, VolumeFormatError) as exc:
            raise ValidationError(f"{rec.patient_id}: cannot read volume: {exc}") from None
        mask = segment_lung(vol, cfg.segmentation, rec)
        path = mask_path(cfg, rec.patient_id)
        write_mask(mask, path, vol.spacing_mm, vol.origin_mm)
        return path

    return _map_patients(cfg, segment, records)


def _load_mask(cfg, rec, vol):
    p = mask_path(cfg, rec.patient_id)
    if not p.is_file():
        raise ValidationError(f"{rec.patient_id}: no segmentation at {p}; run 'segment' first")
    mask = read_mask(p)
    if not mask.matches(vol):
        raise ValidationError(f"{rec.patient_id}: mask dims {mask.dims} differ from volume {vol.dims}")
    return mask


def run_extract(cfg: RunConfig, records) -> list[Path]:
    def extract(rec):
        vol = read_volume(rec.volume_path)
        mask = _load_mask(cfg, rec, vol)
        out = []
        for w in cfg.windows_mm:
            fmap = compute_feature_map(vol, mask, cfg.lattice_config(w))
            path = fmap_path(cfg, rec.patient_id, w)
            write_feature_map(fmap, path)
            out.append(path)
        return out, hm_baseline(vol, mask)

    results = _map_patients(cfg, extract, records)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["patient_id", *HM_NAMES])
    for rec, (_, hm) in zip(records, results):
        wr.writerow([rec.patient_id, *(repr(float(v)) for v in hm)])
    atomic_write_text(hm_path(cfg), buf.getvalue())
    return [p for paths, _ in results for p in paths] + [hm_path(cfg)]


def run_cluster(cfg: RunConfig, records) -> list[Path]:
    c = cfg.clustering
    written = []
    for w in cfg.windows_mm:
        paths = [fmap_path(cfg, r.patient_id, w) for r in records]
        for rec, p in zip(records, paths):
            if not p.is_file():
                raise ValidationError(f"{rec.patient_id}: missing feature map {p}; run 'extract' first")
        maps = [read_feature_map(p, w) for p in paths]
        if c.pooled:
            _, labels = pooled_fit(maps, c.k, cfg.seed)
        else:
            by_id = {rec.patient_id: fmap for rec, fmap in zip(records, maps)}

            def cluster(rec):
                return fit_clusters(by_id[rec.patient_id], c.k, cfg.seed, c.max_iters, c.tol, c.n_init)[1]

            labels = _map_patients(cfg, cluster, records)
        rows = []
        for rec, fmap, lab in zip(records, maps, labels):
            path = labels_path(cfg, rec.patient_id, w)
            write_label_map(fmap, lab, path)
            written.append(path)
            rows.append(volume_ratios(lab, c.k, rec.patient_id, w))
        write_ratios(rows, ratios_path(cfg, w))
        written.append(ratios_path(cfg, w))
    return written


def _read_hm(cfg, records):
    p = hm_path(cfg)
    if not p.is_file():
        return None
    with open(p, newline="") as f:
        rows = {r["patient_id"]: np.array([float(r[n]) for n in HM_NAMES]) for r in csv.DictReader(f)}
    missing = [r.patient_id for r in records if r.patient_id not in rows]
    if missing:
        raise ValidationError(f"{p}: no histogram features for {missing}")
    return rows


def effective_folds(requested: int, y) -> int:
    """Fold count capped at the smaller class size."""
    counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=2)
    folds = min(requested, int(counts.min()))
    if folds < 2:
        raise ValidationError(f"need at least 2 patients per class for cross-validation, got {counts.tolist()}")
    return folds


def run_classify(cfg: RunConfig, records) -> list[Path]:
    cc = cfg.classification
    outdir = cfg.out / "classification"
    y = [r.is_uip for r in records]
    folds = effective_folds(cc.folds, y)
    mlp_cfg = cfg.mlp_config()
    written = []
    results = []
    series = {}

    if cc.model in ("svm", "mlp"):
        ratios = {}
        for w in cfg.windows_mm:
            p = ratios_path(cfg, w)
            if not p.is_file():
                raise ValidationError(f"missing ratios for window {format_window(w)} mm: {p}")
            ratios[float(w)] = read_ratios(p)
        try:
            table = window_sweep(ratios, records, cfg.windows_mm, folds, cfg.seed, cc.model, mlp_cfg)
        except KeyError as exc:
            raise ValidationError(str(exc.args[0])) from None
        sweep = outdir / f"sweep_{cc.model}.csv"
        atomic_write_text(sweep, table.to_csv())
        written.append(sweep)
        results.extend(table.results)
        for name in SWEEP_ROWS:
            series[f"TM {cc.model.upper()}: {name}"] = table.rows[name]

    hm = _read_hm(cfg, records)
    if cc.model == "hm" and hm is None:
        raise ValidationError(f"missing histogram baseline {hm_path(cfg)}; run 'extract' first")
    if hm is not None:
        hm_rows = {}
        for name, with_clin in zip(SWEEP_ROWS, (False, True)):
            dm = design_from_features(hm, HM_NAMES, records, with_clinical=with_clin)
            res = cross_validated_auc(dm, folds, cfg.seed, "svm", cc.C)
            hm_rows[name] = res.pooled_auc
            results.append(res.to_json(window_mm=None, covariate_set="imaging+clinical" if with_clin else "imaging",
                                       features="HM", model="hm"))
            series[f"HM: {name}"] = [res.pooled_auc] * len(cfg.windows_mm)
        if cc.model == "hm":
            hm_table = SweepTable(tuple(cfg.windows_mm), {k: [v] * len(cfg.windows_mm) for k, v in hm_rows.items()}, [])
            sweep = outdir / "sweep_hm.csv"
            atomic_write_text(sweep, hm_table.to_csv())
            written.append(sweep)

    res_path = outdir / f"results_{cc.model}.json"
    payload = {"model": cc.model, "folds": folds, "seed": cfg.seed, "C_grid": list(C_GRID) if cc.C is None else [cc.C],
               "results": results}
    atomic_write_text(res_path, json.dumps(payload, indent=2) + "\n")
    written.append(res_path)
    fig = outdir / f"auc_vs_window_{cc.model}.svg"
    plot_auc_sweep(cfg.windows_mm, series, fig, title=f"Pooled {folds}-fold AUC vs window size")
    written.append(fig)
    return written


def run_survival(cfg: RunConfig, records) -> list[Path]:
    sc = cfg.survival
    outdir = cfg.out / "survival"
    w = sc.window_mm
    p = ratios_path(cfg, w)
    if not p.is_file():
        raise ValidationError(f"missing ratios for survival window {format_window(w)} mm: {p}")
    rows = {r.patient_id: r for r in read_ratios(p)}
    missing = [r.patient_id for r in records if r.patient_id not in rows]
    if missing:
        raise ValidationError(f"{p}: no ratios for {missing}")
    k = len(next(iter(rows.values())).ratios)
    names = [f"r{i}" for i in range(1, k + 1)]
    covs = {}
    for rec in records:
        row = list(rows[rec.patient_id].ratios)
        if cfg.classification.with_clinical:
            row += [rec.age, 1.0 if rec.gender == "male" else 0.0, float(rec.severity)]
        covs[rec.patient_id] = np.array(row)
    if cfg.classification.with_clinical:
        names += list(CLINICAL)
    samples = sample_from_records(records, covs, names)
    n_events = int(samples.event.sum())
    if n_events < 2:
        raise ValidationError(f"survival analysis needs at least 2 events, cohort has {n_events}")
    folds = min(sc.folds, n_events)
    try:
        screen = univariable_screen(samples, folds, cfg.seed, sc.lam)
        ranked = screen[0]
        if not ranked:
            raise RuntimeError("every covariate failed univariable screening")
        chosen = [e.name for e in ranked[: sc.top_m]]
        sub = samples.select(chosen)
        model = fit_cox(sub, sc.lam)
        c_cv = cross_validated_c(sub, folds, cfg.seed, sc.lam)
        risk = partition_by_risk(model, sub)
        label = partition_by_label([r.is_uip for r in records], samples)
    except ValidationError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError("survival", None, exc) from exc
    report = survival_report(model, c_cv, risk, cfg.seed, label, screen)
    report.update(window_mm=float(w), folds=folds, with_clinical=cfg.classification.with_clinical,
                  c_statistic_kind="cross-validated Harrell C")
    written = []
    jpath = outdir / "survival.json"
    atomic_write_text(jpath, json.dumps(report, indent=2) + "\n")
    written.append(jpath)
    for tag, part in (("risk", risk), ("label", label)):
        for grp, km in (("low", part.km_low), ("high", part.km_high)):
            kp = outdir / f"km_{tag}_{grp}.csv"
            atomic_write_text(kp, km.to_csv())
            written.append(kp)
    fig_risk = outdir / "km_risk.svg"
    plot_km({f"low risk (n={len(risk.low)})": risk.km_low, f"high risk (n={len(risk.high)})": risk.km_high},
            fig_risk, risk.test.p_value, title="Partition by Cox risk score")
    fig_label = outdir / "km_label.svg"
    plot_km({f"non-UIP (n={len(label.low)})": label.km_low, f"UIP (n={len(label.high)})": label.km_high},
            fig_label, label.test.p_value, title="Partition by expert label")
    written += [fig_risk, fig_label]
    return written


# ---------------------------------------------------------------- manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _with_raw(paths):
    """Volume-style headers come with a .raw payload; list both."""
    out = []
    for p in paths:
        p = Path(p)
        out.append(p)
        raw = p.with_suffix(".raw")
        if p.suffix == ".json" and raw.is_file():
            out.append(raw)
    return out


def write_manifest(cfg: RunConfig, stages: dict, status: str, failure: str | None = None) -> Path:
    artifacts = []
    for stage, paths in stages.items():
        for p in _with_raw(paths):
            artifacts.append({
                "stage": stage,
                "path": Path(p).relative_to(cfg.out).as_posix(),
                "sha256": sha256_file(p),
            })
    manifest = {
        "version": __version__,
        "status": status,
        "seed": cfg.seed,
        "windows_mm": list(cfg.windows_mm),
        "artifacts": artifacts,
    }
    if failure:
        manifest["failure"] = failure
    path = cfg.out / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return path


# --------------------------------------------------------------- commands

def cmd_segment(cfg):
    validate(cfg)
    written = run_segment(cfg, load_records(cfg, need_volumes=True))
    print(f"wrote {len(written)} masks to {cfg.out / 'segmentation'}")


def cmd_extract(cfg):
    validate(cfg)
    written = run_extract(cfg, load_records(cfg, need_volumes=True))
    print(f"wrote {len(written)} files to {cfg.out / 'features'}")


def cmd_cluster(cfg):
    validate(cfg)
    written = run_cluster(cfg, load_records(cfg))
    print(f"wrote {len(written)} files under {cfg.out}")


def cmd_classify(cfg):
    validate(cfg)
    records = load_records(cfg)
    run_classify(cfg, records)
    res = json.loads((cfg.out / "classification" / f"results_{cfg.classification.model}.json").read_text())
    for r in res["results"]:
        w = "all" if r["window_mm"] is None else format_window(r["window_mm"])
        print(f"{r['model']:>4}  W={w:>4}  {r['covariate_set']:<17} pooled AUC {r['pooled_auc']:.3f}")


def cmd_survival(cfg):
    validate(cfg)
    run_survival(cfg, load_records(cfg))
    rep = json.loads((cfg.out / "survival" / "survival.json").read_text())
    print(f"covariates {rep['covariates']}  C={rep['c_statistic']:.3f}  "
          f"risk log-rank p={rep['logrank_p']:.3g}  label log-rank p={rep['label_partition']['logrank_p']:.3g}")


def cmd_pipeline(cfg):
    validate(cfg)
    records = load_records(cfg, need_volumes=True)
    stages = {}
    steps = (("segment", run_segment), ("extract", run_extract), ("cluster", run_cluster),
             ("classify", run_classify), ("survival", run_survival))
    for name, fn in steps:
        try:
            stages[name] = fn(cfg, records)
        except StageError as exc:
            write_manifest(cfg, stages, "partial", str(exc))
            raise
    path = write_manifest(cfg, stages, "complete")
    n = sum(len(_with_raw(v)) for v in stages.values())
    print(f"pipeline complete: {n} artifacts listed in {path}")


def cmd_phantom(cfg, args):
    spec = SyntheticCohortSpec(
        n_per_class=args.n_per_class, design=args.design, contrast=args.contrast,
        hazard_ratio=args.hazard_ratio, censoring_rate=args.censoring_rate,
        dims=tuple(args.dims), seed=cfg.seed,
    )
    cohort = generate_cohort(spec)
    path = cohort.write(cfg.out)
    print(f"wrote {len(cohort.records)} phantom patients; cohort table {path}")


COMMANDS = {
    "segment": cmd_segment, "extract": cmd_extract, "cluster": cmd_cluster, "classify": cmd_classify,
    "survival": cmd_survival, "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--cohort", help="cohort CSV (overrides config cohort_csv)")
    common.add_argument("--out", help="output directory (overrides config output_dir)")
    common.add_argument("--windows", help="comma-separated window sizes in mm, e.g. 4,8,12")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--workers", type=int, help="patient-level worker threads")
    common.add_argument("--with-clinical", action="store_true", help="add age, gender, severity to the survival model")
    common.add_argument("--model", choices=("svm", "mlp", "hm"), help="classifier for the window sweep")

    parser = argparse.ArgumentParser(prog="ildqct", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "segment": "lung masks for every cohort volume",
        "extract": "lattice feature maps per window and the whole-lung histogram baseline",
        "cluster": "K-means phenotypes, label maps and volume ratios per window",
        "classify": "cross-validated UIP classification across windows",
        "survival": "Cox screening, risk partition, Kaplan-Meier and log-rank",
        "pipeline": "all stages in order plus a hashed manifest",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    ph = sub.add_parser("phantom", parents=[common], help="write a synthetic cohort with planted signal")
    ph.add_argument("--design", choices=DESIGNS, default="two_texture")
    ph.add_argument("--n-per-class", type=int, default=20)
    ph.add_argument("--contrast", type=float, default=1.0)
    ph.add_argument("--hazard-ratio", type=float, default=4.0)
    ph.add_argument("--censoring-rate", type=float, default=0.3)
    ph.add_argument("--dims", type=int, nargs=3, default=(96, 80, 64), metavar=("NX", "NY", "NZ"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_flags(load_config(args.config), args)
        if args.command == "phantom":
            if cfg.workers < 1:
                raise ValidationError("workers must be >= 1")
            try:
                cmd_phantom(cfg, args)
            except ValueError as exc:
                raise ValidationError(str(exc)) from None
        else:
            COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
