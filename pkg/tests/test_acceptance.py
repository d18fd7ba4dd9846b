"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and
then asserts, so a failing criterion also fails the run.
"""

import csv
import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ildqct.classification import (
    MLPConfig, cross_validated_auc, design_from_ratios, init_mlp, mlp_gradients, mlp_loss,
)
from ildqct.cli import main
from ildqct.clustering import adjusted_rand_index, fit_clusters, volume_ratios
from ildqct.features import FEATURE_NAMES, TextureConfig, as_dict, build_rlm, compute_feature_vector, rlm_features
from ildqct.lattice import LatticeConfig, compute_feature_map
from ildqct.phantom import (
    TEXTURES, PhantomSpec, Region, SyntheticCohortSpec, five_texture_spec, generate_cohort, generate_phantom,
    segmentation_phantom_spec, simulate_survival_groups,
)
from ildqct.segmentation import dice, segment_lung
from ildqct.survival import SurvivalSample, c_statistic, cox_loglik, fit_cox, km_curve, log_rank
from oracles import feature_vector_oracle, harrell_c_oracle

CORES = os.cpu_count()


def report(n, ok, text):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {text}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def rel_err(a, b):
    if a == b:
        return 0.0
    return float(abs(a - b) / max(abs(a), abs(b)))


# ---------------------------------------------------------------- 1

def test_c01_feature_oracle_suite():
    rng = np.random.default_rng(2024)
    worst = 0.0
    worst_name = ""
    impl_time = 0.0
    for i in range(1000):
        shape = tuple(int(s) for s in rng.integers(3, 10, size=3))
        G = int(rng.choice([8, 16, 32]))
        w = rng.integers(-1024, 500, size=shape)
        if i % 3 == 0:
            w = np.where(rng.random(shape) < 0.5, w, rng.integers(-900, -800))  # add flat patches
        mask = rng.random(shape) < rng.uniform(0.5, 1.0)
        mask.flat[:2] = True
        t = time.perf_counter()
        got = compute_feature_vector(w, mask, TextureConfig(levels=G))
        impl_time += time.perf_counter() - t
        want = feature_vector_oracle(w, mask, G)
        for name, g, x in zip(FEATURE_NAMES, got, want):
            e = rel_err(g, x) if max(abs(g), abs(x)) > 1e-12 else abs(g - x)
            if e > worst:
                worst, worst_name = e, name
    ok = worst <= 1e-9 and impl_time < 60
    report(1, ok, f"1000 windows 3^3..9^3, G in {{8,16,32}}: worst rel err {worst:.2e} ({worst_name or '-'}), "
                  f"feature time {impl_time:.1f} s")


# ---------------------------------------------------------------- 2

def test_c02_trivial_values():
    d = as_dict(compute_feature_vector(np.full((6, 6, 6), -850)))
    exact = d["Sigma"] == 0 and d["Entropy"] == 0 and d["Energy"] == 1 and d["Inertia"] == 0 \
        and d["InverseDifferenceMoment"] == 1
    # a constant run of n voxels scanned along its own axis is one run over n voxels
    rp_ok = True
    for n in (2, 5, 9, 64):
        r = build_rlm(np.full(n, 7), 32, directions=[(0, 0, 1)])
        rp_ok &= dict(zip(FEATURE_NAMES[19:], rlm_features(r)))["RunPercentage"] == 1 / n
    # the 3D constant window: one run per scan line in each of the 13 directions
    s = 6
    lines = 3 * s * s + 6 * s * (2 * s - 1) + 4 * (3 * s * s - 3 * s + 1)
    cube_ok = d["RunPercentage"] == lines / (13 * s**3)
    report(2, exact and rp_ok and cube_ok,
           "constant window Sigma=0 Entropy=0 Energy=1 Inertia=0 IDM=1 exactly; RunPercentage=1/n exactly for a "
           "constant n-voxel run along its axis (n in 2,5,9,64), 3D cube equals lines/(13 n)")


# ---------------------------------------------------------------- 3

def test_c03_lattice_determinism():
    regions = tuple(Region(t, 0.2) for t in TEXTURES)
    ph = generate_phantom(PhantomSpec(dims=(64, 64, 64), regions=regions, block_mm=12.0,
                                      lung_semi_axes=(0.2, 0.38, 0.45), lung_offset_x=0.23, seed=7))
    cfg = LatticeConfig(8.0)
    maps = {w: compute_feature_map(ph.volume, ph.mask, cfg, workers=w) for w in (1, 2, 8)}
    same = all(
        maps[w].points.tobytes() == maps[1].points.tobytes()
        and maps[w].features.tobytes() == maps[1].features.tobytes()
        and maps[w].occupancy.tobytes() == maps[1].occupancy.tobytes()
        for w in (2, 8)
    )
    report(3, same, f"64^3 phantom, W=8 mm, {len(maps[1])} points: bytes identical for workers 1, 2, 8")


# ---------------------------------------------------------------- 4

def test_c04_throughput():
    regions = tuple(Region(t, 0.2) for t in TEXTURES)
    spec = PhantomSpec(dims=(256, 256, 256), regions=regions, lung_semi_axes=(0.225, 0.41, 0.49),
                       lung_offset_x=0.23, seed=1)
    ph = generate_phantom(spec)
    frac = ph.mask.bits.mean()
    workers = 4
    t = time.perf_counter()
    fmap = compute_feature_map(ph.volume, ph.mask, LatticeConfig(8.0, lattice_step_mm=4.0), workers=workers)
    dt = time.perf_counter() - t
    report(4, dt < 60 and 0.35 <= frac <= 0.45,
           f"256^3, lung {frac:.0%}, W=8 mm step 4 mm: {len(fmap)} points x 26 features in {dt:.1f} s "
           f"({workers} worker threads on {CORES} available core(s))")


# ---------------------------------------------------------------- 5

def test_c05_segmentation_dice():
    scores = []
    for seed in range(10):
        ph = generate_phantom(segmentation_phantom_spec(seed=seed))
        scores.append(dice(segment_lung(ph.volume), ph.mask))
    report(5, min(scores) >= 0.95, f"10 seeded phantoms: Dice min {min(scores):.4f}, mean {np.mean(scores):.4f}")


# ---------------------------------------------------------------- 6

def test_c06_clustering_ari():
    ph = generate_phantom(five_texture_spec(seed=0))
    fmap = compute_feature_map(ph.volume, ph.mask, LatticeConfig(8.0))
    model, labels = fit_clusters(fmap, k=5, seed=0)
    x, y, z = fmap.points.T
    truth = ph.labels[z, y, x]
    ari = adjusted_rand_index(labels, truth)
    trace = model.objective_trace
    mono = all(b <= a for a, b in zip(trace, trace[1:]))
    report(6, ari >= 0.8 and mono,
           f"five-texture phantom, W=8 mm, K=5, {len(fmap)} points: ARI {ari:.3f}; "
           f"objective non-increasing over {len(trace)} steps: {mono}")


# ------------------------------------------------------ shared cohort run

@pytest.fixture(scope="module")
def cohort_runs(tmp_path_factory):
    """Full 40-patient phantom cohort through the pipeline, twice."""
    root = tmp_path_factory.mktemp("acceptance")
    assert main(["phantom", "--out", str(root / "cohort"), "--seed", "0"]) == 0
    runs = []
    for i, workers in enumerate((1, 4)):
        out = root / f"run{i}"
        t = time.perf_counter()
        rc = main(["pipeline", "--cohort", str(root / "cohort" / "cohort.csv"), "--out", str(out),
                   "--seed", "0", "--workers", str(workers)])
        runs.append((rc, out, time.perf_counter() - t, workers))
    return runs


def _ratios_at(records, phantoms, window):
    rows = []
    for rec, ph in zip(records, phantoms):
        mask = segment_lung(ph.volume)
        fmap = compute_feature_map(ph.volume, mask, LatticeConfig(window))
        _, labels = fit_clusters(fmap, k=5, seed=0)
        rows.append(volume_ratios(labels, 5, rec.patient_id, window))
    return rows


# ---------------------------------------------------------------- 7

def test_c07_classification(cohort_runs):
    rc, out, _, _ = cohort_runs[0]
    assert rc == 0
    res = json.loads((out / "classification" / "results_svm.json").read_text())
    tm = next(r for r in res["results"] if r.get("window_mm") == 8.0 and r["covariate_set"] == "imaging"
              and r["model"] == "svm")["pooled_auc"]
    hm = next(r for r in res["results"] if r["model"] == "hm" and r["covariate_set"] == "imaging")["pooled_auc"]
    with open(out / "classification" / "sweep_svm.csv", newline="") as f:
        sweep = list(csv.reader(f))
    best = max(float(v) for v in sweep[1][1:])

    fine = generate_cohort(SyntheticCohortSpec(design="fine_texture", seed=0))
    auc_w = {}
    for w in (4.0, 20.0):
        dm = design_from_ratios(_ratios_at(fine.records, fine.phantoms, w), fine.records)
        auc_w[w] = cross_validated_auc(dm, 5, 0).pooled_auc
    ok = tm >= 0.9 and tm >= hm and auc_w[4.0] > auc_w[20.0]
    report(7, ok, f"two-texture cohort n=40: TM SVM AUC(W=8) {tm:.3f} (best window {best:.3f}) vs HM {hm:.3f}; "
                  f"fine-texture cohort AUC(W=4) {auc_w[4.0]:.3f} > AUC(W=20) {auc_w[20.0]:.3f}")


# ---------------------------------------------------------------- 8

def test_c08_mlp_gradient_check():
    rng = np.random.default_rng(8)
    h = np.longdouble(1e-5)
    worst = 0.0
    n_params = 0
    for batch in range(5):
        model = init_mlp(8, MLPConfig(seed=batch))
        for b in model.biases:
            b += rng.normal(0, 0.05, size=b.shape)
        X = rng.normal(size=(8, 8))
        y = rng.integers(0, 2, 8).astype(float)
        dWs, dbs = mlp_gradients(model, X, y)
        # differences taken in extended precision; in float64 the rounding of
        # the loss alone is ~1e-11 / h, comparable to the smallest gradients
        ext = replace(model, weights=[W.astype(np.longdouble) for W in model.weights],
                      biases=[b.astype(np.longdouble) for b in model.biases])
        Xl, yl = X.astype(np.longdouble), y.astype(np.longdouble)
        for params, grads in ((ext.weights, dWs), (ext.biases, dbs)):
            for P, G in zip(params, grads):
                for idx in np.ndindex(P.shape):
                    old = P[idx]
                    P[idx] = old + h
                    up = mlp_loss(ext, Xl, yl)
                    P[idx] = old - h
                    dn = mlp_loss(ext, Xl, yl)
                    P[idx] = old
                    num = (up - dn) / (2 * h)
                    worst = max(worst, rel_err(num, G[idx]))
                    n_params += 1
    report(8, worst <= 1e-4, f"[8, 64, 64, 1] net, 5 random batches of 8, {n_params} parameter checks: "
                             f"worst relative error {worst:.2e}")


# ---------------------------------------------------------------- 9

def test_c09_cox_correctness():
    rng = np.random.default_rng(9)
    n = 40
    X = rng.normal(size=(n, 3))
    t = np.round(rng.exponential(1 / np.exp(X @ [0.7, -0.4, 0.2])), 1)
    ev = rng.random(n) < 0.75
    beta = np.array([0.3, -0.2, 0.5])
    _, g, H = cox_loglik(beta, X, t, ev)
    hstep = 1e-5
    worst = 0.0
    for k in range(3):
        e = np.zeros(3)
        e[k] = hstep
        up, dn = cox_loglik(beta + e, X, t, ev), cox_loglik(beta - e, X, t, ev)
        worst = max(worst, rel_err((up[0] - dn[0]) / (2 * hstep), g[k]))
        for j in range(3):
            worst = max(worst, rel_err((up[1][j] - dn[1][j]) / (2 * hstep), H[j, k]))

    two = SurvivalSample([1.0, 2.0], [True, False], [[0.0], [1.0]], ("x",))
    grid = np.linspace(-10, 10, 2_000_001)
    objective = -np.log1p(np.exp(grid)) - 0.5 * 0.1 * (grid * 0.5) ** 2  # standardised x has scale 0.5
    grid_beta = grid[np.argmax(objective)]
    fitted = fit_cox(two, lam=0.1).beta[0]

    s = SurvivalSample(t, ev, X, ("a", "b", "c"))
    base = fit_cox(s).beta
    scale_err = 0.0
    for c in (0.01, 3.0, 250.0):
        scaled = fit_cox(SurvivalSample(t, ev, X * c, s.names)).beta
        scale_err = max(scale_err, max(rel_err(a, b * c) for a, b in zip(base, scaled)))
    ok = worst <= 1e-6 and abs(fitted - grid_beta) <= 1e-3 and scale_err <= 1e-6
    report(9, ok, f"gradient/Hessian worst rel err {worst:.2e}; 2-subject beta {fitted:.5f} vs grid {grid_beta:.5f}; "
                  f"scaling worst rel err {scale_err:.2e}")


# --------------------------------------------------------------- 10

def test_c10_survival_statistics():
    km = km_curve([1.0, 2.0, 3.0], [True, False, True])
    km_ok = km.time.tolist() == [1.0, 3.0] and km.survival.tolist() == [2 / 3, 0.0]
    same = log_rank([1, 2, 3, 4], [1, 0, 1, 1], [1, 2, 3, 4], [1, 0, 1, 1]).p_value == 1.0
    rng = np.random.default_rng(10)
    c_ok = True
    for _ in range(20):
        risk = rng.integers(0, 6, 30).astype(float)
        tt = rng.integers(1, 20, 30).astype(float)
        ee = rng.random(30) < 0.6
        c_ok &= c_statistic(risk, tt, ee) == harrell_c_oracle(risk, tt, ee)

    def rate(hr):
        hits = 0
        for seed in range(100):
            t, e, g = simulate_survival_groups(20, hr, 0.3, seed)
            hits += log_rank(t[g == 0], e[g == 0], t[g == 1], e[g == 1]).p_value < 0.05
        return hits / 100

    power, null = rate(4.0), rate(1.0)
    ok = km_ok and same and c_ok and power >= 0.8 and null <= 0.1
    report(10, ok, f"3-subject KM exact {km_ok}; identical groups p=1 {same}; C == oracle on 20 sets of 30 {c_ok}; "
                   f"HR 4 (20/group, 30% censored) p<0.05 in {power:.0%} of 100 seeds; null in {null:.0%}")


# --------------------------------------------------------------- 11

def test_c11_reproducibility(cohort_runs):
    (rc0, out0, t0, w0), (rc1, out1, t1, w1) = cohort_runs
    m0 = json.loads((out0 / "manifest.json").read_text()) if rc0 == 0 else {}
    m1 = json.loads((out1 / "manifest.json").read_text()) if rc1 == 0 else {}
    hashes0 = [(a["path"], a["sha256"]) for a in m0.get("artifacts", [])]
    hashes1 = [(a["path"], a["sha256"]) for a in m1.get("artifacts", [])]
    ok = rc0 == rc1 == 0 and m0.get("status") == "complete" and hashes0 == hashes1 and max(t0, t1) < 15 * 60
    report(11, ok, f"40-patient phantom cohort, 9 windows: {len(hashes0)} artifacts, hashes identical "
                   f"{hashes0 == hashes1} (workers {w0} vs {w1}); runtimes {t0:.0f} s and {t1:.0f} s "
                   f"on {CORES} core(s)")
