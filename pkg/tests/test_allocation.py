import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moeprune.allocation import (
    CapacityPlan, DivergenceProfile, allocate, allocate_dynamic, allocate_inverse_dynamic, allocate_uniform,
    divergence_profile, dynamic_real, hamilton_round, js_divergence, read_plans, read_profiles, write_plans,
    write_profiles,
)
from moeprune.model import ModelConfig, init_model
from moeprune.numerics import ContractError


def cfg(L, E, K=2):
    return ModelConfig.uniform(L, E, top_k=K, d_model=4, d_ff=4, vocab_size=10, max_seq_len=8)


def test_js_examples():
    assert js_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert js_divergence([1, 0, 0], [0, 0.5, 0.5]) == pytest.approx(1.0, abs=1e-12)
    # 1.5 - 0.75 * log2(3)
    assert js_divergence([1, 0], [0.5, 0.5]) == pytest.approx(1.5 - 0.75 * math.log2(3), abs=1e-12)


def test_js_contract():
    with pytest.raises(ContractError):
        js_divergence([-0.1, 1.1], [0.5, 0.5])
    with pytest.raises(ContractError):
        js_divergence([0.5, 0.4], [0.5, 0.5])
    with pytest.raises(ContractError):
        js_divergence([1.0], [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**31))
def test_js_symmetric_and_bounded(n, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.full(n, 0.5)), rng.dirichlet(np.full(n, 0.5))
    a, b = js_divergence(p, q), js_divergence(q, p)
    assert a == pytest.approx(b, abs=1e-12) and 0.0 <= a <= 1.0


def test_uniform_plans():
    assert allocate_uniform(cfg(6, 16), 0).capacities == [16] * 6
    assert allocate_uniform(cfg(6, 16), 14).capacities == [2] * 6
    p = allocate_uniform(cfg(6, 16), 4)
    assert p.capacities == [12] * 6 and p.total == 72
    with pytest.raises(ContractError):
        allocate_uniform(cfg(6, 16), 15)


def test_dynamic_hand_traces():
    assert allocate_dynamic([0.1, 0.2, 0.3], cfg(3, 8), 4).capacities == [3, 4, 5]
    assert dynamic_real([0.0, 0.1, 0.5], 3, 6, 2, 2) == pytest.approx([2, 4, 6])
    assert allocate_dynamic([0.0, 0.1, 0.5], cfg(3, 6), 2).capacities == [2, 4, 6]


def test_dynamic_uniform_profile_matches_uniform():
    for k in range(15):
        assert allocate_dynamic([0.2] * 6, cfg(6, 16), k).capacities == allocate_uniform(cfg(6, 16), k).capacities


def test_zero_profile_splits_equally():
    assert allocate_dynamic([0.0] * 3, cfg(3, 8), 3).capacities == [5, 5, 5]
    # the two open layers get nothing proportional once the third is full
    assert dynamic_real([0.0, 0.0, 1.0], 3, 6, 2, 1) == pytest.approx([4.5, 4.5, 6.0])


def test_hamilton_examples():
    assert hamilton_round([2.4, 3.9, 5.7], 12, 2, 8) == [2, 4, 6]
    assert hamilton_round([3.0, 5.0, 4.0], 12, 2, 8) == [3, 5, 4]
    assert hamilton_round([2.5, 2.5], 5, 2, 8) == [3, 2]


def test_inverse_dynamic():
    d = [0.1, 0.3]
    dyn = allocate_dynamic(d, cfg(2, 8), 2)
    inv = allocate_inverse_dynamic(d, cfg(2, 8), 2)
    assert inv.capacities == dyn.capacities[::-1] and inv.capacities[0] > inv.capacities[1]
    assert allocate_inverse_dynamic([0.2] * 4, cfg(4, 8), 2).capacities == allocate_dynamic([0.2] * 4, cfg(4, 8), 2).capacities
    assert inv.method == "inverse-dynamic" and inv.total == 2 * 6


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 7), st.integers(2, 16), st.integers(1, 3), st.integers(0, 2**31))
def test_budget_and_bounds(L, E, K, seed):
    if K > E:
        return
    rng = np.random.default_rng(seed)
    d = rng.random(L) * (rng.random(L) < 0.8)
    c = cfg(L, E, K)
    for k in range(E - K + 1):
        for method in ("dynamic", "inverse-dynamic"):
            p = allocate(method, c, k, d)
            assert p.total == L * (E - k)
            assert all(K <= x <= E for x in p.capacities)
            assert all(abs(x - r) < 1 for x, r in zip(allocate_dynamic(d, c, k).capacities, allocate_dynamic(d, c, k).real))


def test_single_pass_monotone():
    d = [0.05, 0.4, 0.2, 0.1]
    real = dynamic_real(d, 4, 16, 2, 8)
    order = np.argsort(d)
    assert all(real[a] <= real[b] for a, b in zip(order, order[1:]))


def test_allocate_needs_profile_for_dynamic():
    with pytest.raises(ValueError):
        allocate("dynamic", cfg(2, 8), 2)
    with pytest.raises(ValueError):
        allocate("bogus", cfg(2, 8), 2, [0.1, 0.2])


def test_plan_and_profile_csv(tmp_path):
    plans = [allocate_dynamic([0.1, 0.2, 0.3], cfg(3, 8), 4), allocate_uniform(cfg(3, 8), 2)]
    write_plans(plans, tmp_path / "plans.csv")
    back = read_plans(tmp_path / "plans.csv", 8, 2)
    assert [(p.method, p.k, p.capacities) for p in back] == [(p.method, p.k, p.capacities) for p in plans]
    assert (tmp_path / "plans.csv").read_text().splitlines()[0] == "layer,retained,pruned,method,k,real"
    prof = DivergenceProfile(2, np.array([0.1, 0.25]))
    write_profiles([prof], tmp_path / "d.csv")
    got = read_profiles(tmp_path / "d.csv")
    assert got[0].lang == 2 and got[0].scores.tolist() == [0.1, 0.25]


def test_self_divergence_is_zero(tiny_model, tiny_corpus):
    p = divergence_profile(tiny_model, tiny_corpus, 0, passage_ids=[0, 1, 2])
    assert np.all(p.scores == 0)
    q = divergence_profile(tiny_model, tiny_corpus, 2, passage_ids=[0, 1, 2])
    assert np.all((q.scores >= 0) & (q.scores <= 1)) and q.n_passages == 3


def test_untrained_uniform_router_gives_near_zero_profile(tiny_corpus):
    m = init_model(ModelConfig.uniform(2, 4, d_model=8, d_ff=8, vocab_size=tiny_corpus.vocab_size, max_seq_len=24))
    for l in range(2):
        m.params[f"layers.{l}.router.weight"][:] = 0
    p = divergence_profile(m, tiny_corpus, 1, passage_ids=[0, 1])
    assert np.allclose(p.scores, 0)
