import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcr_lab.conflict import (
    ConflictConfig,
    Granularity,
    Method,
    Mode,
    NoStabilityDirection,
    Scope,
    VarianceNorm,
    cosine,
    decompose,
    detect_conflict,
    estimate_gaussian,
    fixed_alpha_layer,
    isotropic_variance,
    pcgrad_layer,
    pcr_layer,
    resolve_batch,
    retention_coefficient,
    soft_project,
)
from pcr_lab.grpo import total_grad_naive
from pcr_lab.tensor import Entry, GradSet, LayerTag, StructureError, dot, mean_of, norm_sq

LAYOUT = [
    ("emb", LayerTag.EMBEDDING, (3, 2)),
    ("attn", LayerTag.ATTENTION, (4,)),
    ("ln", LayerTag.NORM, (2,)),
    ("mlp.w", LayerTag.MLP, (3, 3)),
    ("mlp.b", LayerTag.MLP, (3,)),
    ("head", LayerTag.HEAD, (5,)),
]


def _random_sets(rng, n, shift=0.0):
    return [
        GradSet(Entry(name, tag, shift + rng.standard_normal(shape)) for name, tag, shape in LAYOUT)
        for _ in range(n)
    ]


def _conflicting_streams(seed, n=4):
    """Per-query streams whose means point in opposite directions in every layer."""
    rng = np.random.default_rng(seed)
    pla = _random_sets(rng, n, shift=1.0)
    sta = _random_sets(rng, n, shift=-1.0)
    return pla, sta


def _brute_variance(samples):
    X = np.stack([np.asarray(s, dtype=float).reshape(-1) for s in samples])
    N, d = X.shape
    return np.trace(np.atleast_2d(np.cov(X, rowvar=False, ddof=1))) / (d * N)


# -- estimator ------------------------------------------------------------------


def test_estimator_examples():
    mean, var = isotropic_variance([np.array([0.0, 0.0]), np.array([2.0, 0.0])])
    np.testing.assert_array_equal(mean, [1.0, 0.0])
    assert var == 0.5
    _, raw = isotropic_variance([np.array([0.0, 0.0]), np.array([2.0, 0.0])], VarianceNorm.RAW_TRACE)
    assert raw == 2.0

    same = [GradSet([Entry("w", LayerTag.MLP, np.array([1.0, 2.0]))])] * 3
    est = estimate_gaussian(same)
    assert est["w"].variance == 0.0 and est["w"].degenerate


def test_estimator_homogeneity_and_errors():
    rng = np.random.default_rng(0)
    xs = [rng.standard_normal(5) for _ in range(4)]
    m, v = isotropic_variance(xs)
    m3, v3 = isotropic_variance([3.0 * x for x in xs])
    np.testing.assert_allclose(m3, 3 * m, rtol=1e-14)
    assert v3 == pytest.approx(9 * v, rel=1e-13)
    with pytest.raises(ValueError):
        isotropic_variance(xs[:1])
    with pytest.raises(StructureError):
        isotropic_variance([np.zeros(2), np.zeros(3)])
    with pytest.raises(ValueError):
        estimate_gaussian(_random_sets(rng, 1))
    bad = [GradSet([Entry("w", LayerTag.MLP, np.zeros(2))]), GradSet([Entry("w", LayerTag.MLP, np.zeros(3))])]
    with pytest.raises(StructureError):
        estimate_gaussian(bad)


def test_estimator_matches_covariance_trace():
    rng = np.random.default_rng(1)
    for N in (2, 4, 8):
        for d in (3, 17):
            sets = [GradSet([Entry("w", LayerTag.MLP, rng.standard_normal(d))]) for _ in range(N)]
            est = estimate_gaussian(sets)
            vals = [s["w"] for s in sets]
            assert abs(est["w"].variance - _brute_variance(vals)) < 1e-12
            np.testing.assert_allclose(est["w"].mean, np.mean(vals, axis=0), rtol=0, atol=1e-10)


def test_global_granularity_concatenates():
    rng = np.random.default_rng(2)
    sets = _random_sets(rng, 3)
    est = estimate_gaussian(sets, Granularity.GLOBAL)
    assert len(est.layers) == 1
    blocks = [s.flat() for s in sets]
    assert abs(est.layers[0].variance - _brute_variance(blocks)) < 1e-12
    sub = estimate_gaussian(sets, Granularity.GLOBAL, names=["mlp.w", "mlp.b"])
    assert sub.layers[0].mean.size == 12


# -- geometry -------------------------------------------------------------------


@pytest.mark.parametrize("a,b,expected", [((1, 1), (-1, 0), True), ((0, 1), (1, 0), False), ((1, 0), (2, 0), False)])
def test_detect_conflict(a, b, expected):
    assert detect_conflict(a, b) is expected


@pytest.mark.parametrize("p,s,perp,par", [
    ((1, 1), (-1, 0), (0, 1), (1, 0)),
    ((0, 1), (1, 0), (0, 1), (0, 0)),
    ((2, 4), (1, 2), (0, 0), (2, 4)),
])
def test_decompose_examples(p, s, perp, par):
    a, b = decompose(p, s)
    np.testing.assert_allclose(a, perp, atol=1e-15)
    np.testing.assert_allclose(b, par, atol=1e-15)


def test_decompose_zero_stability():
    with pytest.raises(NoStabilityDirection):
        decompose([1.0, 1.0], [0.0, 0.0])


def _conflicting_pair(rng, d):
    p = rng.standard_normal(d)
    s = rng.standard_normal(d)
    if dot(p, s) >= 0:
        s = -s
    return p, s


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), d=st.sampled_from([2, 8, 512]), alpha=st.floats(0, 1))
def test_geometry_properties(seed, d, alpha):
    rng = np.random.default_rng(seed)
    p, s = _conflicting_pair(rng, d)
    if dot(p, s) >= 0:
        return
    perp, par = decompose(p, s)
    # perp is the difference by construction; the re-sum is exact up to one rounding per coordinate
    assert np.array_equal(perp, p - par)
    assert np.all(np.abs(perp + par - p) <= np.spacing(np.maximum(np.abs(p), np.abs(par))))
    scale = math.sqrt(norm_sq(p) * norm_sq(s))
    assert abs(dot(perp, s)) <= 1e-9 * scale
    out = soft_project(p, s, alpha)
    assert abs(dot(out, s) - (1 - alpha) * dot(p, s)) <= 1e-9 * abs(dot(p, s))
    safe = out - (dot(out, s) / norm_sq(s)) * s
    assert np.abs(safe - perp).max() <= 1e-10 * max(1.0, np.abs(p).max())
    dist = math.sqrt(norm_sq(out - perp))
    assert dist == pytest.approx((1 - alpha) * math.sqrt(norm_sq(par)), rel=1e-9, abs=1e-12)


def test_interpolation_monotone():
    rng = np.random.default_rng(3)
    p, s = _conflicting_pair(rng, 8)
    perp, _ = decompose(p, s)
    dists = [math.sqrt(norm_sq(soft_project(p, s, a) - perp)) for a in np.linspace(0, 1, 11)]
    assert all(x > y for x, y in zip(dists, dists[1:]))


# -- arbitration ----------------------------------------------------------------


def test_retention_examples():
    r = retention_coefficient(2.0, 2.0)
    assert r.k == 0.5 and r.alpha == 0.5
    r = retention_coefficient(1.0, 3.0)
    assert r.k == pytest.approx(0.75, abs=1e-12) and r.alpha == pytest.approx(0.25, abs=1e-12)
    assert r.lambda_pla == 1.0 and r.lambda_sta == pytest.approx(1 / 3, abs=1e-15)
    assert retention_coefficient(0.0, 1.0).k > 1 - 1e-11
    # zero variance is clamped rather than producing infinite precision
    assert math.isfinite(retention_coefficient(0.0, 0.0).k)


@settings(max_examples=300, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30))
def test_retention_bounds(lp, ls):
    r = retention_coefficient(10.0 ** lp, 10.0 ** ls)
    assert 0.0 <= r.k <= 1.0 and 0.0 <= r.alpha <= 1.0
    assert abs(r.k + r.alpha - 1.0) <= 1e-12


# -- per-layer rules ------------------------------------------------------------


def test_pcr_layer_examples_and_limits():
    p, s = np.array([1.0, 1.0]), np.array([-1.0, 0.0])
    out, rep = pcr_layer(p, s, 1.0, 1.0, 0.04)
    np.testing.assert_allclose(out, [0.5, 1.0], atol=1e-15)
    assert rep.method == Method.PCR_SOFT and rep.conflict

    to_pcgrad, _ = pcr_layer(p, s, 1.0, 1e-8, 0.04, ConflictConfig(variance_floor=1e-12))
    np.testing.assert_allclose(to_pcgrad, pcgrad_layer(p, s, 0.04), atol=1e-6)
    to_pla, _ = pcr_layer(p, s, 1e-8, 1.0, 0.04)
    np.testing.assert_allclose(to_pla, p, atol=1e-6)

    out, rep = pcr_layer([1.0, 0.0], [2.0, 0.0], 1.0, 1.0, 0.5)
    np.testing.assert_array_equal(out, [2.0, 0.0])
    assert rep.method == Method.NO_CONFLICT_FALLBACK

    out, rep = pcr_layer([1.0, 0.0], [0.0, 0.0], 1.0, 1.0, 0.5)
    np.testing.assert_array_equal(out, [1.0, 0.0])
    assert rep.method == Method.SKIPPED_ZERO_STA

    cfg = ConflictConfig(add_beta_sta_in_pcr=True)
    out, _ = pcr_layer(p, s, 1.0, 1.0, 0.5, cfg)
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-15)


def test_pcgrad_examples():
    np.testing.assert_array_equal(pcgrad_layer([1.0, 1.0], [-1.0, 0.0], 0.04), [0.0, 1.0])
    np.testing.assert_array_equal(pcgrad_layer([1.0, 0.0], [2.0, 0.0], 0.5), [2.0, 0.0])
    assert dot(pcgrad_layer([1.0, 1.0], [-1.0, 0.0], 0.0), [-1.0, 0.0]) == 0.0


def test_pcr_is_asymmetric():
    rng = np.random.default_rng(4)
    a, b = _conflicting_pair(rng, 6)
    ab, _ = pcr_layer(a, b, 1.0, 2.0, 0.0)
    ba, _ = pcr_layer(b, a, 1.0, 2.0, 0.0)
    assert not np.allclose(ab, ba)


def test_cosine_bounds_and_zero():
    assert cosine([0.0, 0.0], [1.0, 0.0]) == 0.0
    assert cosine([1.0, 0.0], [-3.0, 0.0]) == -1.0


# -- whole-model resolution -----------------------------------------------------


def test_naive_mode_equals_total_grad():
    pla, sta = _conflicting_streams(5)
    out, rep = resolve_batch(pla, sta, 0.04, ConflictConfig(mode=Mode.NAIVE_SUM))
    expected = total_grad_naive(mean_of(pla), mean_of(sta), 0.04)
    assert np.array_equal(out.flat(), expected.flat())
    assert all(r.method == Method.NAIVE_SUM for r in rep.layers)


def test_pcr_mlp_only_scope():
    pla, sta = _conflicting_streams(6)
    naive, _ = resolve_batch(pla, sta, 0.04, ConflictConfig(mode=Mode.NAIVE_SUM))
    out, rep = resolve_batch(pla, sta, 0.04, ConflictConfig(mode=Mode.PCR))
    for e, n in zip(out.entries, naive.entries):
        if e.tag == LayerTag.MLP:
            assert not np.array_equal(e.value, n.value)
        else:
            assert np.array_equal(e.value, n.value)
    assert {r.method for r in rep.layers if r.tag == LayerTag.MLP} == {Method.PCR_SOFT}
    all_layers, rep_all = resolve_batch(pla, sta, 0.04, ConflictConfig(mode=Mode.PCR, pcr_scope=Scope.ALL_LAYERS))
    assert all(r.method == Method.PCR_SOFT for r in rep_all.layers)


def test_fixed_one_equals_pcgrad():
    pla, sta = _conflicting_streams(7)
    scope = Scope.ALL_LAYERS
    a, _ = resolve_batch(pla, sta, 0.04, ConflictConfig(mode=Mode.FIXED_ALPHA, fixed_alpha=1.0, pcr_scope=scope))
    b, _ = resolve_batch(pla, sta, 0.04, ConflictConfig(mode=Mode.PCGRAD, pcr_scope=scope))
    assert np.array_equal(a.flat(), b.flat())
    p, s = np.array([1.0, 2.0, -3.0]), np.array([-0.5, 0.1, 0.7])
    assert np.array_equal(fixed_alpha_layer(p, s, 1.0, 0.1), pcgrad_layer(p, s, 0.1))


def test_global_granularity_resolution():
    pla, sta = _conflicting_streams(8)
    cfg = ConflictConfig(mode=Mode.PCR, granularity=Granularity.GLOBAL)
    out, rep = resolve_batch(pla, sta, 0.04, cfg)
    mlp = [e.name for e in pla[0].entries if e.tag == LayerTag.MLP]
    gp = np.concatenate([mean_of(pla)[n].reshape(-1) for n in mlp])
    gs = np.concatenate([mean_of(sta)[n].reshape(-1) for n in mlp])
    est_p = estimate_gaussian(pla, Granularity.GLOBAL, names=mlp).layers[0]
    est_s = estimate_gaussian(sta, Granularity.GLOBAL, names=mlp).layers[0]
    expected, _ = pcr_layer(gp, gs, est_p.variance, est_s.variance, 0.04)
    got = np.concatenate([out[n].reshape(-1) for n in mlp])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)
    alphas = {r.arbitration.alpha for r in rep.layers if r.arbitration is not None}
    assert len(alphas) == 1


def test_report_jsonl_fields():
    pla, sta = _conflicting_streams(9)
    _, rep = resolve_batch(pla, sta, 0.04)
    lines = rep.to_jsonl(step=3).splitlines()
    assert len(lines) == len(LAYOUT)
    fields = {"step", "layer", "tag", "dot", "cosine", "conflict", "k", "alpha", "method",
              "norm_pla", "norm_sta", "var_pla", "var_sta"}
    for line, (name, tag, _) in zip(lines, LAYOUT):
        rec = json.loads(line)
        assert set(rec) == fields
        assert rec["step"] == 3 and rec["layer"] == name and rec["tag"] == tag.value
        assert rec["conflict"] == (rec["dot"] < 0)
        assert -1.0 <= rec["cosine"] <= 1.0
    assert 0.0 <= rep.conflict_fraction() <= 1.0
    assert all(0.0 <= a <= 1.0 for a in rep.alphas())


def test_resolve_batch_errors():
    pla, sta = _conflicting_streams(10)
    with pytest.raises(ValueError):
        resolve_batch(pla[:1], sta, 0.04)
    other = [GradSet([Entry("x", LayerTag.MLP, np.zeros(2))])] * 2
    with pytest.raises(StructureError):
        resolve_batch(pla, other, 0.04)


def test_config_validation():
    with pytest.raises(ValueError):
        ConflictConfig(fixed_alpha=1.5)
    with pytest.raises(ValueError):
        ConflictConfig(variance_floor=0.0)
    with pytest.raises(ValueError):
        ConflictConfig(mode="nonsense")
