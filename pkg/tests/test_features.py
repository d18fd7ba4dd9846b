import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ildqct.features import (
    FEATURE_NAMES, DegenerateWindowError, TextureConfig, as_dict, build_glcm, build_rlm,
    compute_feature_vector, glcm_features, gray_level_histogram, histogram_features, quantize,
    rlm_features,
)
from oracles import feature_vector_oracle, glcm_oracle, histogram_oracle, offsets13, rlm_oracle

X_DIR = [(0, 0, 1)]


def close(a, b, rel=1e-9, abs_=1e-12):
    return abs(a - b) <= rel * max(abs(a), abs(b)) + abs_


# ---------------------------------------------------------------- quantize

def test_quantize_bounds():
    assert quantize([-1024], 32, (-1024, 240))[0] == 0
    assert quantize([240], 32, (-1024, 240))[0] == 31
    assert quantize([-5000, 5000], 32, (-1024, 240)).tolist() == [0, 31]


def test_quantize_midpoint():
    assert quantize([-499], 2, (-1000, 0))[0] == 1


def test_quantize_errors():
    with pytest.raises(ValueError):
        quantize([], 8, (0, 1))
    with pytest.raises(ValueError):
        quantize([0], 1, (0, 1))
    with pytest.raises(ValueError):
        quantize([0], 8, (1, 1))


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-3000, 3000)), st.sampled_from([2, 8, 16, 32]))
def test_quantize_monotone(values, G):
    v = np.sort(values)
    q = quantize(v, G, (-1024, 240))
    assert np.all(np.diff(q) >= 0)
    assert q.min() >= 0 and q.max() <= G - 1


# -------------------------------------------------------------- histogram

def test_constant_histogram():
    h = histogram_features(gray_level_histogram(np.full(27, -850)))
    d = dict(zip(FEATURE_NAMES[:12], h))
    assert d["Mean"] == -850 and d["Min"] == -850 and d["Max"] == -850
    assert d["Sigma"] == 0 and d["Entropy"] == 0 and d["Kurtosis"] == 0 and d["Skewness"] == 0
    assert d["Sum"] == -850 * 27


def test_two_equal_bins():
    a, b = -900, -100
    d = dict(zip(FEATURE_NAMES[:12], histogram_features(gray_level_histogram([a] * 10 + [b] * 10))))
    assert d["Mean"] == (a + b) / 2
    assert close(d["Entropy"], math.log(2))
    assert d["Skewness"] == 0


def test_histogram_matches_oracle_64_voxels():
    rng = np.random.default_rng(11)
    for _ in range(20):
        vals = rng.integers(-1024, 400, size=64)
        got = histogram_features(gray_level_histogram(vals))
        want = histogram_oracle(vals)
        assert all(close(g, w) for g, w in zip(got, want)), (got, want)


def test_frozen_histogram_values():
    # hand-computed for {-10, 0, 0, 10}
    d = dict(zip(FEATURE_NAMES[:12], histogram_features(gray_level_histogram([-10, 0, 0, 10]))))
    assert d["Mean"] == 0 and d["Sum"] == 0
    assert close(d["Sigma"], math.sqrt(50))
    assert close(d["Entropy"], 1.5 * math.log(2))
    assert close(d["Kurtosis"], 5000 / 2500)
    assert d["5thPercentile"] == -10 and d["95thPercentile"] == 10
    assert d["5thMean"] == -10 and d["95thMean"] == 10


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1024, 3071), min_size=1, max_size=80), st.randoms(use_true_random=False))
def test_histogram_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    a = histogram_features(gray_level_histogram(values))
    b = histogram_features(gray_level_histogram(shuffled))
    assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1024, 2000), min_size=2, max_size=60), st.integers(-500, 500))
def test_histogram_shift_equivariance(values, c):
    a = dict(zip(FEATURE_NAMES[:12], histogram_features(gray_level_histogram(values))))
    b = dict(zip(FEATURE_NAMES[:12], histogram_features(gray_level_histogram([v + c for v in values]))))
    for k in ("Mean", "Min", "Max", "5thPercentile", "95thPercentile", "5thMean", "95thMean"):
        assert close(b[k], a[k] + c, abs_=1e-9)
    assert close(b["Sum"], a["Sum"] + c * len(values), abs_=1e-6)
    for k in ("Sigma", "Entropy", "Kurtosis", "Skewness"):
        assert close(b[k], a[k], rel=1e-7, abs_=1e-9)


def test_histogram_ordering_invariant():
    rng = np.random.default_rng(2)
    d = dict(zip(FEATURE_NAMES[:12], histogram_features(gray_level_histogram(rng.normal(-700, 80, 500).round()))))
    assert d["Min"] <= d["5thPercentile"] <= d["Mean"] <= d["95thPercentile"] <= d["Max"]
    h = gray_level_histogram(rng.normal(-700, 80, 500).round())
    assert abs(h.freq.sum() - 1) < 1e-9


# ------------------------------------------------------------------ GLCM

def test_constant_glcm():
    m = build_glcm(np.full((4, 4, 4), 5), 32)
    f = m.f
    assert f[5, 5] == 1 and f.sum() == 1
    e = dict(zip(FEATURE_NAMES[12:19], glcm_features(m)))
    assert e["Energy"] == 1 and e["GLCMEntropy"] == 0 and e["Inertia"] == 0 and e["InverseDifferenceMoment"] == 1
    assert e["Correlation"] == 0 and e["HaralickCorrelation"] == 0


def test_strip_pairs():
    f = build_glcm(np.array([0, 1, 0, 1]), 2, directions=X_DIR).f
    assert f.tolist() == [[0.0, 0.5], [0.5, 0.0]]


def test_checkerboard_horizontal():
    board = (np.indices((6, 6)).sum(axis=0) % 2)
    e = dict(zip(FEATURE_NAMES[12:19], glcm_features(build_glcm(board, 2, directions=X_DIR))))
    assert e["Inertia"] == 1 and e["InverseDifferenceMoment"] == 0.5


def test_glcm_degenerate():
    with pytest.raises(DegenerateWindowError):
        build_glcm(np.zeros((1, 1, 1), dtype=int), 8)


def test_glcm_matches_pair_enumeration():
    rng = np.random.default_rng(5)
    q = rng.integers(0, 8, size=(6, 6, 6))
    mask = rng.random((6, 6, 6)) > 0.2
    m = build_glcm(q, 8, mask)
    want, counts = glcm_oracle(q, mask, 8)
    dense = np.zeros((8, 8), dtype=np.int64)
    for (i, j), c in counts.items():
        dense[i, j] = c
    assert np.array_equal(m.counts, dense)
    assert np.array_equal(m.counts, m.counts.T)
    assert abs(m.f.sum() - 1) < 1e-12
    # marginals recomputed from f
    f = m.f
    idx = np.arange(1, 9)
    mu_i = (idx[:, None] * f).sum()
    sd_i = math.sqrt((((idx[:, None] - mu_i) ** 2) * f).sum())
    got = m.marginals()
    assert close(got[0], mu_i) and close(got[2], sd_i)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([4, 8, 32]))
def test_glcm_symmetric_property(seed, G):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 6, size=3))
    q = rng.integers(0, G, size=shape)
    if np.prod(shape) < 2:
        return
    try:
        m = build_glcm(q, G)
    except DegenerateWindowError:
        return
    assert np.array_equal(m.counts, m.counts.T)


# ------------------------------------------------------------- run length

def test_constant_strip_single_run():
    r = build_rlm(np.full(8, 3), 4, directions=X_DIR)
    assert r.runs[3, 8] == 1 and r.n_runs == 1
    d = dict(zip(FEATURE_NAMES[19:], rlm_features(r)))
    assert d["RunPercentage"] == 1 / 8 and d["ShortRunEmphasis"] == 1 / 64 and d["LongRunEmphasis"] == 64


def test_strip_maximal_runs():
    r = build_rlm(np.array([0, 0, 1, 1, 1]), 2, directions=X_DIR)
    assert r.runs[0, 2] == 1 and r.runs[1, 3] == 1 and r.n_runs == 2


def test_all_unit_runs():
    d = dict(zip(FEATURE_NAMES[19:], rlm_features(build_rlm(np.array([0, 1, 0, 1, 0, 1]), 2, directions=X_DIR))))
    assert d["ShortRunEmphasis"] == 1 and d["LongRunEmphasis"] == 1 and d["RunPercentage"] == 1


def test_rlm_matches_scanline_oracle_and_conservation():
    rng = np.random.default_rng(8)
    q = rng.integers(0, 3, size=(6, 6, 6))
    mask = rng.random((6, 6, 6)) > 0.25
    r = build_rlm(q, 3, mask)
    runs, per_dir = rlm_oracle(q, mask)
    dense = np.zeros_like(r.runs)
    for (i, j), c in runs.items():
        dense[i, j] = c
    assert np.array_equal(r.runs, dense)
    # every masked voxel is visited once per direction
    assert per_dir == [int(mask.sum())] * 13
    for k, off in enumerate(offsets13()):
        one = build_rlm(q, 3, mask, directions=[off])
        assert one.pixels == per_dir[k]
    assert r.runs.shape[1] - 1 <= 6


def test_rlm_empty_raises():
    r = build_rlm(np.zeros((2, 2, 2), dtype=int), 2, mask=np.zeros((2, 2, 2), bool))
    with pytest.raises(ValueError):
        rlm_features(r)


# --------------------------------------------------------- full vector

def test_constant_window_vector():
    d = as_dict(compute_feature_vector(np.full((5, 5, 5), -850)))
    assert d["Sigma"] == 0 and d["Entropy"] == 0
    assert d["Energy"] == 1 and d["Inertia"] == 0 and d["InverseDifferenceMoment"] == 1
    # constant s^3 cube: every scan line is one run, so RP = lines / (13 s^3)
    s = 5
    lines = 3 * s * s + 6 * s * (2 * s - 1) + 4 * (3 * s * s - 3 * s + 1)
    assert d["RunPercentage"] == lines / (13 * s**3)


def test_translation_invariance():
    rng = np.random.default_rng(1)
    big = rng.integers(-1000, 100, size=(12, 12, 12))
    a = compute_feature_vector(big[1:6, 2:7, 3:8])
    b = compute_feature_vector(big[1:6, 2:7, 3:8].copy())
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0, 1, 2]))
def test_flip_invariance(seed, axis):
    rng = np.random.default_rng(seed)
    w = rng.integers(-1024, 300, size=(4, 5, 3))
    a = compute_feature_vector(w)
    b = compute_feature_vector(np.flip(w, axis=axis))
    assert all(close(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("G", [8, 16, 32])
def test_vector_matches_oracle(G):
    rng = np.random.default_rng(G)
    for _ in range(15):
        side = rng.integers(3, 7, size=3)
        w = rng.integers(-1024, 400, size=tuple(side))
        mask = rng.random(tuple(side)) > 0.2
        mask.flat[0] = mask.flat[1] = True
        got = compute_feature_vector(w, mask, TextureConfig(levels=G))
        want = feature_vector_oracle(w, mask, G)
        bad = [(n, g, x) for n, g, x in zip(FEATURE_NAMES, got, want) if not close(g, x)]
        assert not bad


def test_vector_config_errors():
    with pytest.raises(ValueError):
        compute_feature_vector(np.zeros((2, 2, 2)), mask=np.zeros((2, 2, 2), bool))
    with pytest.raises(ValueError):
        TextureConfig(levels=1)
