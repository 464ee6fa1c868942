import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moeprune.allocation import CapacityPlan
from moeprune.analysis import (
    OverlapReport, excess_iou, monte_carlo_iou, overlap_row, random_baseline_iou, retained_iou, write_layer_sets,
)
from moeprune.numerics import ContractError
from moeprune.surgeon import PruneMask


def plan(caps, E):
    return CapacityPlan(E - sum(caps) // len(caps), list(caps), "uniform", E, 2)


def test_observed_iou_examples():
    a, b = PruneMask([[0, 1, 2, 3]]), PruneMask([[2, 3, 4, 5]])
    assert retained_iou([a, b]) == (pytest.approx(2 / 6), pytest.approx(2 / 6))
    assert retained_iou([a, a]) == (1.0, 1.0)
    assert retained_iou([PruneMask([[0, 1], [2]]), PruneMask([[2, 3], [0]])]) == (0.0, 0.0)
    c = PruneMask([[1, 2, 3, 4]])
    pw, alln = retained_iou([a, b, c])
    assert pw == pytest.approx((2 / 6 + 3 / 5 + 3 / 5) / 3) and alln == pytest.approx(2 / 6)
    with pytest.raises(ContractError):
        retained_iou([a, PruneMask([[0], [1]])])


def test_iou_uses_original_ids():
    a = PruneMask([[0, 1]], [[4, 6]])
    b = PruneMask([[0, 1]], [[6, 7]])
    assert retained_iou([a, b])[0] == pytest.approx(1 / 3)


def test_analytic_baseline_examples():
    assert random_baseline_iou([plan([4], 8), plan([4], 8)])[0] == pytest.approx(1 / 3)
    assert random_baseline_iou([plan([8], 8), plan([8], 8)]) == (1.0, 1.0)
    assert random_baseline_iou([plan([8], 8), plan([3], 8)])[0] == pytest.approx(3 / 8)


def test_monte_carlo_examples():
    mc = monte_carlo_iou([plan([4], 8), plan([4], 8)], trials=10_000, seed=0)
    assert abs(mc.pairwise - 1 / 3) < 0.01
    # the mean of per-trial ratios is a different (larger) quantity
    assert mc.pairwise_mean_ratio > mc.pairwise
    full = monte_carlo_iou([plan([8], 8), plan([8], 8)], trials=50)
    assert full.pairwise == full.alln == 1.0 and full.pairwise_se == 0.0
    one = monte_carlo_iou([plan([4, 3], 8), plan([5, 2], 8)], trials=1, seed=7)
    assert one == monte_carlo_iou([plan([4, 3], 8), plan([5, 2], 8)], trials=1, seed=7)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31))
def test_analytic_within_three_se_of_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    L, E, n = int(rng.integers(1, 5)), int(rng.integers(3, 12)), int(rng.integers(2, 5))
    plans = [plan(rng.integers(2, E + 1, size=L).tolist(), E) for _ in range(n)]
    pw, al = random_baseline_iou(plans)
    mc = monte_carlo_iou(plans, trials=1500, seed=seed)
    if mc.pairwise_se > 0:
        assert abs(pw - mc.pairwise) <= 3 * mc.pairwise_se + 1e-12
    if mc.alln_se > 0:
        assert abs(al - mc.alln) <= 3 * mc.alln_se + 1e-12


def test_excess_iou():
    assert excess_iou(0.4, 0.4) == 0.0
    assert excess_iou(1.0, 0.3) == 1.0
    assert excess_iou(0.794, 0.436) == pytest.approx(0.636, abs=0.002)
    with pytest.raises(ContractError):
        excess_iou(1.0, 1.0)


def test_overlap_row_and_csv(tmp_path):
    masks = [PruneMask([[0, 1, 2, 3]]), PruneMask([[0, 1, 2, 4]])]
    plans = [plan([4], 8), plan([4], 8)]
    row = overlap_row(masks, plans)
    assert row.k == 4 and row.pct_dropped == 50.0
    assert row.pairwise_obs == pytest.approx(3 / 5) and row.pairwise_excess == pytest.approx((0.6 - 1 / 3) / (2 / 3))
    OverlapReport([row]).to_csv(tmp_path / "o.csv")
    head = (tmp_path / "o.csv").read_text().splitlines()[0]
    assert head == "k,pct_dropped,pairwise_obs,pairwise_rand,pairwise_excess,alln_obs,alln_rand,alln_excess"
    write_layer_sets({"a": masks[0]}, tmp_path / "sets.csv")
    assert (tmp_path / "sets.csv").read_text().splitlines()[1] == "a,0,0"
