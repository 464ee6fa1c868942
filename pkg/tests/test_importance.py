import numpy as np
import pytest

from moeprune.importance import (
    CalibrationSpec, ImportanceTable, RoutingAccumulator, build_calibration_episodes, invert,
    merge_multilingual, norm_weighted, random_scores, routing_mass,
)
from moeprune.model import LayerRouting, RoutingTrace


def _trace(indices, weights, E, norms=None):
    idx = np.asarray(indices)
    w = np.asarray(weights, float)
    n = np.ones_like(w) if norms is None else np.asarray(norms, float)
    return RoutingTrace([LayerRouting(idx, w, n, np.zeros((len(idx), E)))])


def test_hand_averaged_routing_mass_row():
    acc = RoutingAccumulator([4])
    acc.add(_trace([[0, 1], [1, 2]], [[0.5, 0.5], [0.75, 0.25]], 4))
    assert np.allclose(acc.scores()[0], [0.25, 0.625, 0.125, 0.0])


def test_episode_mean_of_two_single_tokens():
    acc = RoutingAccumulator([3])
    acc.add(_trace([[0, 1]], [[0.6, 0.4]], 3))
    acc.add(_trace([[1, 2]], [[0.8, 0.2]], 3))
    assert np.allclose(acc.scores()[0], [0.3, 0.6, 0.1])


def test_norm_weighted_plug_in_and_factorization():
    acc = RoutingAccumulator([3], norm_weighted=True)
    acc.add(_trace([[1, 0]], [[1.0, 0.0]], 3, norms=[[2.5, 7.0]]))
    assert acc.scores()[0].tolist() == [0.0, 2.5, 0.0]
    plain, scaled = RoutingAccumulator([4]), RoutingAccumulator([4], norm_weighted=True)
    tr = _trace([[0, 1], [1, 2]], [[0.5, 0.5], [0.75, 0.25]], 4, norms=[[3.0, 3.0], [3.0, 3.0]])
    plain.add(tr)
    scaled.add(tr)
    assert np.allclose(scaled.scores()[0], 3.0 * plain.scores()[0])


def test_accumulation_order_and_merge_are_bit_identical():
    rng = np.random.default_rng(0)
    traces = []
    for _ in range(12):
        t = int(rng.integers(1, 9))
        idx = np.stack([rng.choice(5, 2, replace=False) for _ in range(t)])
        w = rng.dirichlet([1, 1], size=t)
        traces.append(_trace(idx, w, 5))
    a = RoutingAccumulator([5])
    for tr in traces:
        a.add(tr)
    b = RoutingAccumulator([5])
    for tr in reversed(traces):
        b.add(tr)
    c1, c2 = RoutingAccumulator([5]), RoutingAccumulator([5])
    for tr in traces[:5]:
        c1.add(tr)
    for tr in traces[5:]:
        c2.add(tr)
    ref = a.scores()[0]
    assert ref.tobytes() == b.scores()[0].tobytes() == c2.merge(c1).scores()[0].tobytes()


def test_routing_mass_rows_are_distributions(tiny_model, tiny_corpus):
    spec = CalibrationSpec([(0, 1), (0, 2)], list(range(6)), use_generated_target=False)
    eps, fb = build_calibration_episodes(tiny_corpus, spec, tiny_model)
    assert len(eps) == 12 and fb == 0
    table = routing_mass(eps, tiny_model)
    for row in table.scores:
        assert np.all(row >= 0) and abs(row.sum() - 1) < 1e-6
    nw = norm_weighted(eps, tiny_model)
    assert all(np.all(r >= 0) for r in nw.scores)


def test_reference_targets_when_flag_off(tiny_model, tiny_corpus):
    spec = CalibrationSpec([(0, 3)], [0, 1], use_generated_target=False)
    eps, _ = build_calibration_episodes(tiny_corpus, spec, tiny_model)
    assert [e.tokens for e in eps] == [tiny_corpus.episode("dev", i, 0, 3).tokens for i in (0, 1)]
    assert build_calibration_episodes(tiny_corpus, CalibrationSpec([], []), tiny_model)[0] == []


def test_generated_targets_fall_back_on_degeneration(tiny_model, tiny_corpus):
    # an untrained model rarely emits a clean target, so most passages fall back
    spec = CalibrationSpec([(0, 1)], list(range(4)))
    eps, fb = build_calibration_episodes(tiny_corpus, spec, tiny_model)
    assert len(eps) == 4 and 0 <= fb <= 4


def test_random_scores_seeded(tiny_model):
    a, b = random_scores(tiny_model.config, 3), random_scores(tiny_model.config, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.scores, b.scores))
    c = random_scores(tiny_model.config, 4)
    assert any(not np.array_equal(x, y) for x, y in zip(a.scores, c.scores))
    assert [len(r) for r in a.scores] == list(tiny_model.config.experts_per_layer)


def test_invert_reverses_rankings():
    t = ImportanceTable("routing-mass", [np.array([0.1, 0.5, 0.4]), np.full(3, 1 / 3)])
    inv = invert(t)
    assert t.ranking(0) == [1, 2, 0] and inv.ranking(0) == [0, 2, 1]
    assert inv.ranking(1) == t.ranking(1) == [0, 1, 2]
    assert inv.method == "inverted-routing-mass"
    back = invert(inv)
    assert back.method == "routing-mass" and back.ranking(0) == t.ranking(0)


def test_merge_is_an_unweighted_mean():
    a = ImportanceTable("routing-mass", [np.array([0.2, 0.8])])
    b = ImportanceTable("routing-mass", [np.array([0.6, 0.4])])
    m = merge_multilingual([a, b])
    assert np.allclose(m.scores[0], [0.4, 0.6]) and abs(m.scores[0].sum() - 1) < 1e-12
    assert np.array_equal(merge_multilingual([a, a]).scores[0], a.scores[0])
    with pytest.raises(Exception):
        merge_multilingual([a, ImportanceTable("routing-mass", [np.array([0.2, 0.3, 0.5])])])


def test_csv_round_trip(tmp_path):
    t = ImportanceTable("norm-weighted", [np.array([0.125, 3.5]), np.array([1 / 3, 0.0])], {"lang": 2})
    t.to_csv(tmp_path / "imp.csv")
    back = ImportanceTable.from_csv(tmp_path / "imp.csv")
    assert back.method == "norm-weighted"
    assert all(np.array_equal(x, y) for x, y in zip(t.scores, back.scores))
