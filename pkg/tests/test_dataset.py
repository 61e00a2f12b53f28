import numpy as np
import pytest

from minagg.dataset import (
    DatasetManifest,
    gen_er_family,
    gen_er_sparse,
    gen_experiment_train,
    gen_gadget_h,
    gen_gk,
    gen_h_small,
    gen_path,
    gen_scale_set,
    gen_test_suite,
    verify_manifest,
)
from minagg.graph import GraphValidationError, bf_k, reachable_mask


def test_gen_path_examples():
    g = gen_path(0, [1.0])
    assert g.features.tolist() == [0.0, g.beta]
    assert g.beta == 2.0
    assert gen_path(1, [3.0, 0.0]).features.tolist() == [0.0, 3.0, 4.0]
    assert gen_path(2, [2.0, 0.0]).features.tolist() == [0.0, 2.0, 2.0]
    assert gen_path(2, [2.0, 0.0]).step == 2


def test_gen_path_rejects_bad_input():
    with pytest.raises(GraphValidationError):
        gen_path(0, [1.0, -2.0])
    with pytest.raises(ValueError):
        gen_path(0, [])


def test_h_small():
    m = gen_h_small()
    assert len(m.pairs) == 8
    assert m.M == 20  # targets: 4 two-node paths, 4 three-node paths
    first = m.pairs[0]
    assert first.input.weight.tolist() == [2.0]
    assert first.target.features.tolist() == [0.0, 2.0]
    assert [p.input.weight[0] for p in m.pairs] == [2.0 * i for i in range(1, 9)]
    assert all(p.input.n == 3 for p in m.pairs[4:])


@pytest.mark.parametrize("K, k_range, count", [(2, {2}, 10), (2, None, 20), (3, None, 42), (1, None, 6)])
def test_scale_set_size(K, k_range, count):
    graphs = gen_scale_set(K, k_range)
    assert len(graphs) == count
    assert all(g.num_edges == K + 1 and g.step == 1 for g in graphs)


def test_scale_set_places_b_on_edge_after_k():
    graphs = gen_scale_set(2, {1})
    assert graphs[1].weight.tolist() == [0.0, 5.0, 0.0]
    graphs = gen_scale_set(2, {2})
    assert graphs[1].weight.tolist() == [0.0, 0.0, 5.0]
    zero = graphs[0]
    assert zero.weight.tolist() == [0.0, 0.0, 0.0]
    assert bf_k(zero, 2).features.tolist() == [0.0] * 4


def test_scale_set_range_checked():
    with pytest.raises(ValueError):
        gen_scale_set(2, {3})


def test_gadget_shape():
    g = gen_gadget_h(2)
    assert g.n == 6 and g.num_edges == 8
    assert g.weight.sum() == 4.0 and g.beta == 5.0
    out = bf_k(g, 2).features
    assert out[:3].tolist() == [0.0, 0.0, 0.0]
    assert out[4:].tolist() == [1.0, 1.0]


def test_gk_contents():
    m = gen_gk(2)
    assert len(m.pairs) == 23
    assert m.M == 91
    assert sum(p.input.n == 6 for p in m.pairs) == 1
    unit = m.pairs[20]
    assert unit.input.n == 2 and unit.target.features.tolist() == [0.0, 1.0]
    assert verify_manifest(m) == []


def test_experiment_train():
    m = gen_experiment_train(2, seed=3)
    assert len(m.pairs) == 31
    assert m.M == 123
    extra = m.pairs[23:]
    assert [p.input.n for p in extra] == [3] * 4 + [5] * 4
    for p in extra[4:]:
        assert int(reachable_mask(p.input).sum()) == 3
    for p in extra:
        assert set(p.input.weight.tolist()) <= set(map(float, range(1, 9)))
    assert gen_experiment_train(2, seed=3).to_json() == m.to_json()
    assert gen_experiment_train(2, seed=4).to_json() != m.to_json()


def test_experiment_train_needs_two_steps():
    with pytest.raises(ValueError):
        gen_experiment_train(3)


def test_manifest_round_trip_is_byte_identical():
    m = gen_experiment_train(2, seed=1)
    s = m.to_json()
    back = DatasetManifest.from_json(s)
    assert back.to_json() == s
    assert back.M == m.M


def test_manifest_rejects_wrong_count():
    d = gen_h_small().to_dict()
    d["M"] = 13
    with pytest.raises(GraphValidationError):
        DatasetManifest.from_dict(d)


def test_verify_manifest_flags_tampered_target():
    m = gen_h_small()
    d = m.to_dict()
    d["pairs"][2]["target"]["features"][1] -= 1.0
    assert verify_manifest(DatasetManifest.from_dict(d)) == [2]


def test_test_suite_composition():
    suite = gen_test_suite(0)
    assert len(suite) == 200
    assert [g.n for g in suite[:50]] == [3] * 50
    assert [g.n for g in suite[50:100]] == [4] * 50
    for g in suite[100:150]:
        assert 5 <= g.n <= 200
        assert g.num_edges == g.n * (g.n - 1) // 2
    assert all(5 <= g.n <= 50 for g in suite[150:])
    assert all(g.features[0] == 0.0 and g.step == 0 for g in suite)
    assert all(np.all(g.weight < 10) for g in suite)
    again = gen_test_suite(0)
    assert all(a.same_as(b) for a, b in zip(suite, again))


def test_er_sparse():
    g = gen_er_sparse(100, seed=0)
    g.validate()
    assert g.n == 100
    assert gen_er_sparse(100, seed=0).same_as(g)
    big = gen_er_family(1000, 10, seed=0)
    mean_deg = np.mean([2 * h.num_edges / h.n for h in big])
    assert 4.5 < mean_deg < 5.5
    with pytest.raises(ValueError):
        gen_er_sparse(5)


@pytest.mark.parametrize("K", [1, 2])
def test_reachable_count_matches_walk_enumeration(K):
    from minagg.graph import brute_force_khop

    m = gen_gk(K)
    walks = sum(int(np.sum(brute_force_khop(p.input, K) != p.input.beta)) for p in m.pairs)
    assert m.M == walks
