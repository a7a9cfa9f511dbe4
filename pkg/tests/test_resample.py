import numpy as np
import pytest
from hypothesis import given, strategies as st

from plumebias.resample import BinSpec, assign_bin, assign_bins, build_plan, draw_epoch, plan_from_arrays
from plumebias.synthgen import GenConfig, coverage_draws, plume_probability
from plumebias.tiles import Dataset, Tile


def test_assign_bin_examples():
    spec = BinSpec(10)
    assert assign_bin(0.0, spec) == 0
    assert assign_bin(1.0, spec) == 9
    assert assign_bin(0.25, spec) == 2
    with pytest.raises(ValueError):
        assign_bin(1.01, spec)


@given(st.lists(st.floats(0, 1), max_size=50), st.integers(1, 40))
def test_assign_bins_matches_scalar(covs, k):
    spec = BinSpec(k)
    assert assign_bins(np.array(covs), spec).tolist() == [assign_bin(c, spec) for c in covs]


def test_one_pos_three_neg():
    plan = plan_from_arrays(np.array([1, 0, 0, 0]), np.full(4, 0.35), BinSpec())
    w = plan.weights
    assert w[0] == pytest.approx(3 * w[1], rel=1e-12)
    # enumerate the categorical distribution
    assert sum(wi for wi, y in zip(w, plan.labels) if y == 1) == pytest.approx(0.5, abs=1e-12)


def test_balanced_bins_give_uniform_weights():
    plan = plan_from_arrays(np.array([0, 1, 0, 1, 1, 0]), np.array([0.1, 0.1, 0.5, 0.5, 0.95, 0.95]), BinSpec())
    np.testing.assert_allclose(plan.weights, 1 / 6, rtol=0, atol=1e-15)


def test_single_class_bin_keeps_its_mass():
    labels = np.array([0, 0, 0, 1, 0])
    covs = np.array([0.05, 0.06, 0.07, 0.85, 0.86])
    plan = plan_from_arrays(labels, covs, BinSpec())
    m = plan.class_mass()
    assert m[(0, 0)] == pytest.approx(3 / 5, abs=1e-12)
    np.testing.assert_allclose(plan.weights[:3], 1 / 5, atol=1e-12)
    assert m[(8, 0)] == pytest.approx(m[(8, 1)], abs=1e-12)
    assert m[(8, 0)] + m[(8, 1)] == pytest.approx(2 / 5, abs=1e-12)


@st.composite
def labeled(draw):
    n = draw(st.integers(1, 200))
    labels = np.array(draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    covs = np.array(draw(st.lists(st.floats(0, 1), min_size=n, max_size=n)))
    return labels, covs


@given(labeled(), st.integers(1, 20))
def test_plan_invariants(data, k):
    labels, covs = data
    spec = BinSpec(k)
    plan = plan_from_arrays(labels, covs, spec)
    assert abs(plan.weights.sum() - 1.0) <= 1e-12
    assert (plan.weights > 0).all()
    mass = plan.class_mass()
    bins = assign_bins(covs, spec)
    n = len(labels)
    for b in set(bins.tolist()):
        in_bin = bins == b
        total = mass.get((b, 0), 0.0) + mass.get((b, 1), 0.0)
        # bin mass proportional to its tile share
        assert total == pytest.approx(in_bin.sum() / n, abs=1e-12)
        if (b, 0) in mass and (b, 1) in mass:
            assert abs(mass[(b, 0)] - mass[(b, 1)]) <= 1e-12
        # within a (bin, class), weights are equal
        for y in (0, 1):
            sel = in_bin & (labels == y)
            if sel.any():
                assert np.ptp(plan.weights[sel]) <= 1e-15


def test_build_plan_requires_labels():
    t = Tile("u", np.zeros((1, 2, 2)), np.ones((2, 2), bool), None)
    with pytest.raises(ValueError):
        build_plan(Dataset.from_tiles([t]))
    with pytest.raises(ValueError):
        build_plan(Dataset((), 1, 2, 2))


def test_draw_degenerate_and_empty():
    plan = plan_from_arrays(np.array([1]), np.array([0.5]), BinSpec())
    assert draw_epoch(plan, 5, 0).tolist() == [0] * 5
    assert draw_epoch(plan, 0, 0).tolist() == []


def test_draw_is_deterministic():
    plan = plan_from_arrays(np.array([1, 0, 0, 0]), np.full(4, 0.3), BinSpec())
    a = draw_epoch(plan, 1000, 42)
    np.testing.assert_array_equal(a, draw_epoch(plan, 1000, 42))
    assert not np.array_equal(a, draw_epoch(plan, 1000, 43))


def test_draw_positive_fraction_one_pos_three_neg():
    plan = plan_from_arrays(np.array([1, 0, 0, 0]), np.full(4, 0.3), BinSpec())
    for seed in range(5):
        idx = draw_epoch(plan, 10_000, seed)
        assert abs(plan.labels[idx].mean() - 0.5) <= 0.02


def test_draw_frequencies_match_plan():
    rng = np.random.default_rng(3)
    labels = (rng.random(500) < 0.3).astype(int)
    covs = rng.random(500)
    plan = plan_from_arrays(labels, covs, BinSpec(5))
    n = 100_000
    idx = draw_epoch(plan, n, 8)
    for (b, y), p in plan.class_mass().items():
        freq = np.count_nonzero((plan.bin_of[idx] == b) & (plan.labels[idx] == y))
        assert abs(freq - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_resampling_removes_label_coverage_correlation():
    cfg = GenConfig(n_tiles=4000, bias=1.0, seed=21)
    cov, u = coverage_draws(cfg)
    labels = (u < plume_probability(cov, cfg.plume_rate, cfg.bias)).astype(int)
    assert np.corrcoef(labels, cov)[0, 1] > 0.3
    plan = plan_from_arrays(labels, cov, BinSpec())
    idx = draw_epoch(plan, 10_000, 1)
    assert abs(np.corrcoef(labels[idx], cov[idx])[0, 1]) <= 0.05
    uniform = np.random.default_rng(1).integers(0, len(labels), 10_000)
    assert np.corrcoef(labels[uniform], cov[uniform])[0, 1] > 0.3
