import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import history, labelled, make_model
from ragforget.exceptions import EmptyHistory, GridMismatch
from ragforget.retrieval import (
    AttentionConfig,
    AttentionFilter,
    ForgetRequest,
    PerfMatrix,
    PreferenceFilter,
    allocate_quotas,
    attention_filter,
    attention_matrix,
    attention_weights,
    diversity_filter,
    filter_unlearn,
    make_filter,
    parse_requests,
    preference_filter,
    random_filter,
    resolve_requests,
    retention_budget,
    sample_by_retention,
    solve_knapsack,
)
from ragforget.retrieval import attention as attention_mod
from ragforget.corpus import Dataset

GRID = tuple(range(0, 101, 10))


class TestFilterUnlearn:
    def test_empty_forget_is_identity(self):
        h = history(1, [1, 2, 3])
        assert filter_unlearn(h, set()).kept == tuple(h)

    def test_forget_everything(self):
        h = history(1, [1, 2, 3])
        assert filter_unlearn(h, {(1, 1), (1, 2), (1, 3), (1, 9)}).kept == ()

    def test_partial(self):
        h = history(1, [1, 2, 3, 4, 5])
        out = filter_unlearn(h, {(1, 2), (1, 4)})
        assert len(out) == 3
        assert not out.pairs() & {(1, 2), (1, 4)}

    def test_other_users_pairs_do_not_apply(self):
        assert len(filter_unlearn(history(1, [1, 2]), {(2, 1)})) == 2


class TestQuotas:
    def test_single_category(self):
        cats = labelled({"A": range(10)})
        assert allocate_quotas(history(1, range(10)), cats, 5).per_category == {"A": 5}

    def test_exact_floors(self):
        cats = labelled({"A": range(6), "B": range(6, 10)})
        assert allocate_quotas(history(1, range(10)), cats, 5).per_category == {"A": 3, "B": 2}

    def test_largest_remainder(self):
        # Exact shares 2.0, 1.2, 0.8; the leftover unit goes to C.
        cats = labelled({"A": range(5), "B": range(5, 8), "C": range(8, 10)})
        q = allocate_quotas(history(1, range(10)), cats, 4).per_category
        assert (q["A"], q["B"], q["C"]) == (2, 1, 1)

    def test_empty_history(self):
        with pytest.raises(EmptyHistory):
            allocate_quotas([], labelled({"A": [1]}), 3)

    @settings(max_examples=200, deadline=None)
    @given(labels=st.lists(st.sets(st.sampled_from("ABCD"), min_size=1, max_size=3),
                           min_size=1, max_size=40),
           k=st.integers(1, 60), seed=st.integers(0, 2**32 - 1))
    def test_conservation(self, labels, k, seed):
        cats = labelled({c: [i for i, ls in enumerate(labels) if c in ls] for c in "ABCD"})
        h = history(1, range(len(labels)))
        alloc = allocate_quotas(h, cats, k)
        assert sum(alloc.per_category.values()) == min(k, len(h)) == alloc.total
        kept = preference_filter(h, cats, k, seed)
        assert len(kept) == min(k, len(h))
        assert set(kept.kept) <= set(h)


class TestPreference:
    def test_budget_exceeds_supply(self):
        h = history(1, range(4))
        assert preference_filter(h, labelled({"A": range(4)}), 10).kept == tuple(h)

    def test_quota_contract(self):
        cats = labelled({"A": range(6), "B": range(6, 10)})
        kept = preference_filter(history(1, range(10)), cats, 5, seed=4)
        assert sum(i < 6 for i in kept.items) == 3
        assert sum(i >= 6 for i in kept.items) == 2

    def test_deterministic(self):
        cats = labelled({"A": range(6), "B": range(6, 10)})
        h = history(1, range(10))
        assert preference_filter(h, cats, 5, 9).kept == preference_filter(h, cats, 5, 9).kept

    def test_full_budget_is_identity(self):
        cats = labelled({"A": [0, 1, 2], "B": [2, 3]})
        h = history(1, range(5))
        assert preference_filter(h, cats, len(h), 0).kept == tuple(h)

    def test_random_filter(self):
        h = history(1, range(20))
        out = random_filter(h, 5, seed=1)
        assert len(out) == 5 and out.strategy == "none"
        assert random_filter(h[:3], 5).kept == tuple(h[:3])


def brute_force(m, k_prime):
    """Best objective over every allocation, left-to-right float sums."""
    best = None
    n = len(m.categories)
    for alloc in itertools.product(m.grid, repeat=n):
        if sum(alloc) != k_prime:
            continue
        val = 0.0
        for c in range(n):
            val += float(m.values[c, m.grid.index(alloc[c])])
        if best is None or val > best[0] or (val == best[0] and alloc < best[1]):
            best = (val, alloc)
    return best


class TestKnapsack:
    def test_single_category(self):
        m = PerfMatrix(GRID, ("A",), np.linspace(0, 1, 11)[None])
        assert solve_knapsack(m, 40).allocation == {"A": 40}

    def test_zero_budget(self):
        rng = np.random.default_rng(0)
        m = PerfMatrix(GRID, ("A", "B"), rng.random((2, 11)))
        res = solve_knapsack(m, 0)
        assert res.allocation == {"A": 0, "B": 0}
        assert res.objective == float(m.values[0, 0]) + float(m.values[1, 0])

    def test_off_lattice(self):
        m = PerfMatrix(GRID, ("A",), np.zeros((1, 11)))
        with pytest.raises(GridMismatch):
            solve_knapsack(m, 15)

    def test_infeasible_total_is_flagged(self):
        m = PerfMatrix((0, 10, 20), ("A", "B"), np.full((2, 3), 0.5))
        res = solve_knapsack(m, 60)
        assert not res.exact and res.total == 40

    @pytest.mark.parametrize("seed", range(100))
    def test_three_categories_half_grid(self, seed):
        rng = np.random.default_rng(seed)
        m = PerfMatrix(tuple(range(0, 51, 10)), ("A", "B", "C"), rng.random((3, 6)))
        res = solve_knapsack(m, 60)
        val, alloc = brute_force(m, 60)
        assert res.objective == val
        assert res.as_tuple(m.categories) == alloc

    def test_perf_matrix_validation(self, tmp_path):
        with pytest.raises(ValueError):
            PerfMatrix(GRID, ("A",), np.full((1, 11), 1.5))
        m = PerfMatrix(GRID, ("A", "B"), np.random.default_rng(1).random((2, 11)))
        m.save(tmp_path / "m.json")
        again = PerfMatrix.load(tmp_path / "m.json")
        np.testing.assert_array_equal(again.values, m.values)
        assert again.restrict({"B"}).categories == ("B",)


class TestDiversity:
    CATS = labelled({"A": range(4), "B": range(4, 10)})

    def test_full_and_empty_retention(self):
        h = history(1, range(10))
        assert sample_by_retention(h, self.CATS, {"A": 100, "B": 100}).kept == tuple(h)
        assert sample_by_retention(h, self.CATS, {"A": 0, "B": 0}).kept == ()

    def test_ceiling_arithmetic(self):
        kept = sample_by_retention(history(1, range(10)), self.CATS, {"A": 50, "B": 0}, seed=3)
        assert len(kept) == 2 and all(i < 4 for i in kept.items)

    def test_knapsack_driven(self):
        # B only pays off at 100%, A is flat, so all of a 100-point budget goes to B.
        values = np.zeros((2, 11))
        values[1, 10] = 1.0
        m = PerfMatrix(GRID, ("A", "B"), values)
        kept = diversity_filter(history(1, range(10)), self.CATS, m, 100, seed=0)
        assert set(kept.items) == set(range(4, 10))
        kept = diversity_filter(history(1, range(10)), self.CATS, m, 200, seed=0)
        assert len(kept) == 10

    def test_retention_budget(self):
        h = history(1, range(10))
        assert retention_budget(h, self.CATS, 5) == 100
        assert retention_budget(h, self.CATS, 50) == 200


def identity_cfg(d):
    return AttentionConfig(num_heads=1, key_dim=d, value_dim=d, model_dim=d)


def scalar_attention(cand, hist):
    """Single-head, identity-projection weights computed with plain floats."""
    d = len(cand)
    inner = [math.exp(sum(a * b for a, b in zip(cand, h)) / math.sqrt(d)) for h in hist]
    z = sum(inner)
    scores = [(w / z) * sum(a * b for a, b in zip(h, cand)) for w, h in zip(inner, hist)]
    e = [math.exp(s) for s in scores]
    return [x / sum(e) for x in e]


class TestAttention:
    def test_singleton(self):
        m = make_model({1: [1, 0]}, {1: [0.3, 0.1], 2: [1.0, 2.0]})
        alpha = attention_weights(2, history(1, [1]), m, identity_cfg(2), np.eye(2))
        np.testing.assert_allclose(alpha, [1.0])

    def test_identical_rows_uniform(self):
        items = {i: [0.5, -0.2, 0.1, 0.7] for i in range(1, 8)}
        items[99] = [1.0, 0.3, -0.4, 0.2]
        m = make_model({1: [0, 0, 0, 0]}, items)
        alpha = attention_weights(99, history(1, range(1, 8)), m)
        np.testing.assert_allclose(alpha, np.full(7, 1 / 7), atol=1e-12)

    def test_hand_computed_two_dims(self):
        cand, h1, h2 = [1.0, 0.5], [0.5, 0.0], [1.0, 1.0]
        alpha = attention_matrix([cand], [h1, h2], identity_cfg(2), np.eye(2))[0]
        np.testing.assert_allclose(alpha, scalar_attention(cand, [h1, h2]), rtol=1e-12)

    def test_default_projection_is_orthogonal(self):
        w = attention_mod.output_projection(AttentionConfig.for_dim(16, 4, projection_seed=3))
        np.testing.assert_allclose(w.T @ w, np.eye(16), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(1, 30), heads=st.sampled_from([1, 2, 4]))
    def test_normalized(self, seed, m, heads):
        rng = np.random.default_rng(seed)
        alpha = attention_matrix(rng.normal(size=(5, 16)), rng.normal(size=(m, 16)),
                                 AttentionConfig.for_dim(16, heads, seed))
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-6)
        assert (alpha >= 0).all()

    def test_head_budget_checked(self):
        with pytest.raises(ValueError):
            attention_matrix(np.ones((1, 4)), np.ones((2, 4)), AttentionConfig(2, 4, 4, 4))

    def test_filter_keeps_highest_weights(self, monkeypatch):
        m = make_model({1: [0.0]}, {1: [1.0], 2: [1.0], 3: [1.0], 9: [1.0]})
        monkeypatch.setattr(attention_mod, "attention_matrix",
                            lambda *a, **k: np.array([[0.6, 0.3, 0.1]]))
        kept = attention_filter(history(1, [1, 2, 3]), [9], m, k=2)
        assert kept.items == (1, 2)

    def test_filter_budget_exceeds_history(self):
        m = make_model({1: [0.0, 0.0]}, {1: [1.0, 0.0], 9: [0.0, 1.0]})
        h = history(1, [1])
        assert attention_filter(h, [9], m, k=5).kept == tuple(h)

    def test_union_rule(self):
        items = {1: [3, 0, 0, 0], 2: [0, 3, 0, 0], 3: [0, 0, 0.1, 0],
                 10: [3, 0, 0, 0], 11: [0, 3, 0, 0]}
        m = make_model({1: [0, 0, 0, 0]}, items)
        cfg, proj = identity_cfg(4), np.eye(4)
        h = history(1, [1, 2, 3])
        per_cand = [attention_weights(c, h, m, cfg, proj) for c in (10, 11)]
        assert np.argmax(per_cand[0]) != np.argmax(per_cand[1])
        # Brute force: the k interactions with the largest weight under any candidate.
        best = np.max(per_cand, axis=0)
        expected = {h[p].item_id for p in np.argsort(-best)[:2]}
        kept = attention_filter(h, [10, 11], m, cfg, k=2, projection=proj)
        assert set(kept.items) == expected == {1, 2}


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 40), forget=st.sets(st.integers(0, 50)), k=st.integers(1, 30),
       strategy=st.sampled_from(["unlearn_only", "none", "preference", "diversity", "attention"]),
       seed=st.integers(0, 1000))
def test_no_strategy_keeps_forgotten_pairs(n, forget, k, strategy, seed):
    rng = np.random.default_rng(seed)
    items = {i: rng.normal(size=8).tolist() for i in range(60)}
    model = make_model({1: rng.normal(size=8).tolist()}, items)
    cats = labelled({"A": range(0, 60, 2), "B": range(0, 60, 3)})
    perf = PerfMatrix(GRID, ("A", "B", "unknown"), rng.random((3, 11)))
    flt = make_filter(strategy, k, seed).fit(cats, model, perf)
    pairs = {(1, i) for i in forget}
    kept = flt.transform(filter_unlearn(history(1, range(n)), pairs), [50, 51, 52])
    assert not kept.pairs() & pairs
    if strategy in ("preference", "attention"):
        assert len(kept) == min(k, len(range(n)) - len(forget & set(range(n))))


def test_estimator_params():
    f = PreferenceFilter(k=7, seed=3)
    assert f.get_params() == {"k": 7, "seed": 3}
    assert AttentionFilter(num_heads=2).get_params()["num_heads"] == 2
    with pytest.raises(ValueError):
        make_filter("bogus")


class TestRequests:
    def test_parse_and_resolve(self):
        reqs = parse_requests([{"user": 1, "items": "ALL"}, {"user": 2, "items": [5]}])
        assert reqs[0].forget_all and reqs[1].items == {5}
        data = Dataset([1, 1, 2], [3, 4, 5], [5, 5, 5])
        assert resolve_requests(reqs, data) == {(1, 3), (1, 4), (2, 5)}

    @pytest.mark.parametrize("bad", [{}, [{"user": 1}], [{"user": 1, "items": 3}]])
    def test_rejects_bad_shape(self, bad):
        with pytest.raises(ValueError):
            parse_requests(bad)

    def test_json_round_trip(self):
        req = ForgetRequest(4, frozenset({9, 2}))
        assert parse_requests([req.to_json()]) == [req]
