from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from qflsim.aggregators import (
    Aggregator,
    AggregatorConfigError,
    AggregatorState,
    ClientUpdate,
    ProtocolError,
    default_krum_f,
    fedavg,
    flguardian_screen,
    foolsgold,
    foolsgold_weights,
    krum,
    krum_scores,
    krum_selection,
    mudhog,
    mudhog_select,
    multi_krum,
    server_apply,
)


def ups(deltas, weights=None, ids=None):
    deltas = [np.atleast_1d(np.asarray(d, dtype=float)) for d in deltas]
    weights = weights or [1.0] * len(deltas)
    ids = ids or list(range(len(deltas)))
    return [ClientUpdate(i, 0, d, w) for i, d, w in zip(ids, deltas, weights)]


def brute_krum_scores(deltas, f):
    n = len(deltas)
    out = []
    for i in range(n):
        d = sorted(float(np.sum((deltas[i] - deltas[j]) ** 2)) for j in range(n) if j != i)
        out.append(sum(d[: n - f - 2]))
    return out


def reference_foolsgold(hist, kappa=1.0):
    """FoolsGold weighting written from the published pseudocode, one client at a time."""
    n = len(hist)
    cs = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                cs[i, j] = hist[i] @ hist[j] / (np.linalg.norm(hist[i]) * np.linalg.norm(hist[j]))
    v = cs.max(axis=1)
    for i in range(n):
        for j in range(n):
            if v[j] > v[i]:
                cs[i, j] *= v[i] / v[j]
    alpha = np.clip(1 - cs.max(axis=1), 0, 1)
    alpha = alpha / alpha.max()
    alpha = np.where(alpha == 1, 0.99, alpha)
    with np.errstate(divide="ignore"):
        alpha = kappa * (np.log(alpha / (1 - alpha)) + 0.5)
    return np.clip(alpha, 0, 1)


class TestFedAvg:
    def test_equal_weights(self):
        assert_allclose(fedavg(ups([[1, 2], [3, 4]])), [2, 3])

    def test_single(self):
        assert_allclose(fedavg(ups([[5, -1]])), [5, -1])

    def test_weighted(self):
        assert_allclose(fedavg(ups([[10, 0], [0, 10]], [0.9, 0.1])), [9, 1])

    def test_empty(self):
        with pytest.raises(ProtocolError):
            fedavg([])

    @given(st.floats(-100, 100), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_linearity(self, c, seed):
        d = np.random.default_rng(seed).normal(size=(4, 3))
        assert_allclose(fedavg(ups(c * d)), c * fedavg(ups(d)), atol=1e-12)

    def test_weights_normalized(self):
        assert_allclose(fedavg(ups([[1.0], [3.0]], [2, 2])), [2.0])


class TestKrum:
    def test_worked_example(self):
        d = np.array([[0.0], [0.1], [0.2], [10.0]])
        assert_allclose(krum_scores(d, 1), [0.01, 0.01, 0.01, 96.04], atol=1e-12)
        assert_allclose(krum(ups(d), 1), [0.0])
        assert krum_selection(ups(d), 1) == [0]

    def test_multi_krum_example(self):
        d = [[0.0], [0.1], [0.2], [10.0]]
        assert_allclose(multi_krum(ups(d), 1, 1), krum(ups(d), 1))
        chosen = krum_selection(ups(d), 1, m_select=3)
        assert chosen == [0, 1, 2]
        assert_allclose(np.mean([d[i] for i in chosen]), 0.1, atol=1e-12)
        with pytest.raises(AggregatorConfigError):
            multi_krum(ups(d), 1, 3)  # only n - f - 2 = 1 allowed here

    def test_multi_krum_three_of_five(self):
        d = [[0.0], [0.1], [0.2], [10.0], [0.15]]
        assert_allclose(multi_krum(ups(d), 0, 3), [0.15], atol=1e-12)
        assert_allclose(multi_krum(ups([[0.0], [0.1], [0.2], [10.0], [0.35]]), 0, 3), [0.1], atol=1e-12)

    def test_identical_picks_first(self):
        assert krum_selection(ups([[1.0, 1.0]] * 5, ids=[4, 2, 9, 3, 7]), 1) == [2]

    def test_too_few(self):
        with pytest.raises(AggregatorConfigError):
            krum(ups([[0], [1], [2]]), 1)

    def test_brute_force_equivalence(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(3, 11))
            f = int(rng.integers(0, n - 2))
            d = rng.normal(size=(n, int(rng.integers(1, 5))))
            if rng.random() < 0.2:
                d[rng.integers(n)] = d[rng.integers(n)]  # force ties sometimes
            scores = brute_krum_scores(d, f)
            want = min(range(n), key=lambda i: (scores[i], i))
            assert krum_selection(ups(d), f) == [want]
            m = int(rng.integers(1, n - f - 1))
            order = sorted(range(n), key=lambda i: (scores[i], i))[:m]
            assert_allclose(multi_krum(ups(d), f, m), d[order].mean(axis=0), atol=1e-12)

    def test_default_f(self):
        assert default_krum_f(0.2, 5) == 1
        assert default_krum_f(0.05, 20) == 1
        assert default_krum_f(0.0, 5) == 0


class TestFoolsGold:
    def test_duplicates_suppressed(self):
        h = np.array([[1.0, 0.2, 0.0], [1.0, 0.2, 0.0], [0.0, 1.0, 0.3]])
        w = foolsgold_weights(h)
        assert w[0] <= 1e-6 and w[1] <= 1e-6
        assert (w[0] + w[1]) / w.sum() < 0.01

    def test_orthogonal_equal(self):
        w = foolsgold_weights(np.eye(4))
        assert_allclose(w, w[0], atol=1e-9)
        assert w[0] > 0

    def test_single_client(self):
        assert_allclose(foolsgold(ups([[3.0, 4.0]]), AggregatorState()), [3.0, 4.0])

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(2, 8))
            h = rng.normal(size=(n, 5))
            assert_allclose(foolsgold_weights(h), reference_foolsgold(h), atol=1e-12)

    def test_zero_histories_fall_back(self):
        state = AggregatorState()
        out = foolsgold(ups([[0.0, 0.0], [0.0, 0.0]]), state)
        assert_allclose(out, [0.0, 0.0])

    def test_sybils_ignored_in_aggregate(self):
        state = AggregatorState()
        out = foolsgold(ups([[5.0, 5.0], [5.0, 5.0], [1.0, 0.0], [0.0, 1.0]]), state)
        assert_allclose(out, [0.5, 0.5], atol=1e-6)

    def test_history_accumulates(self):
        state = AggregatorState()
        foolsgold(ups([[1.0, 0.0], [0.0, 1.0]]), state)
        foolsgold(ups([[1.0, 0.0], [0.0, 1.0]]), state)
        assert_allclose(state.history[0], [2.0, 0.0])
        assert state.rounds_seen == 2


class TestMudHog:
    def test_reversed_client_excluded(self):
        rng = np.random.default_rng(2)
        base = rng.normal(size=6)
        state = AggregatorState()
        for _ in range(3):
            deltas = [base + 0.1 * rng.normal(size=6) for _ in range(9)] + [-base]
            out = mudhog(ups(deltas), state)
        assert 9 not in mudhog_select(ups(deltas), state)
        assert_allclose(out, np.mean(deltas[:9], axis=0), atol=1e-12)

    def test_aligned_equals_fedavg(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=4)
        deltas = [base * s for s in (1.0, 1.5, 0.7, 2.0)]
        assert_allclose(mudhog(ups(deltas), AggregatorState()), fedavg(ups(deltas)), atol=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        rounds = [rng.normal(size=(5, 3)) for _ in range(2)]
        outs = []
        for _ in range(2):
            state = AggregatorState()
            outs.append([mudhog(ups(r), state) for r in rounds])
        for a, b in zip(*outs):
            assert np.array_equal(a, b)

    def test_equal_clusters_keep_all(self):
        deltas = [[1.0, 0.0], [1.0, 0.01], [-1.0, 0.0], [-1.0, 0.01]]
        state = AggregatorState()
        state.accumulate(ups(deltas))
        assert mudhog_select(ups(deltas), state) == [0, 1, 2, 3]


class TestFLGuardian:
    def test_norm_outlier_dropped(self):
        rng = np.random.default_rng(5)
        base = np.ones(4)
        benign = [base + 0.1 * rng.normal(size=4) for _ in range(9)]
        out = flguardian_screen(ups(benign + [100 * base]))
        assert_allclose(out, np.mean(benign, axis=0), atol=1e-12)

    def test_identical(self):
        assert_allclose(flguardian_screen(ups([[1.0, 2.0]] * 4)), [1.0, 2.0])

    def test_anti_aligned_dropped(self):
        d = [[1.0, 1.0], [1.1, 0.9], [0.9, 1.1], [-1.0, -1.0]]
        assert_allclose(flguardian_screen(ups(d)), np.mean(d[:3], axis=0), atol=1e-12)

    def test_never_empty(self):
        # zero center: nothing anti-aligned, nothing flagged
        d = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
        out = flguardian_screen(ups(d))
        assert out.shape == (2,)

    @pytest.mark.parametrize("k", [3, 4, 5])
    def test_norm_screen_silent_below_six_clients(self, k):
        # one outlier among k gives z = sqrt(k - 1) < 2.5, so only the cosine leg can act
        d = [[1.0, 1.0]] * (k - 1) + [[1e6, 1e6]]
        assert_allclose(flguardian_screen(ups(d)), np.mean(d, axis=0))


class TestServerApply:
    def test_zero_beta(self):
        theta = np.arange(3.0)
        assert_allclose(server_apply(theta, np.ones(3), 0.0)[0], theta)

    def test_unit_beta(self):
        assert_allclose(server_apply(np.arange(3.0), np.ones(3), 1.0)[0], [1, 2, 3])

    def test_half_twice(self):
        theta, g = np.random.default_rng(6).normal(size=(2, 5))
        once, _ = server_apply(theta, g, 1.0)
        twice, _ = server_apply(server_apply(theta, g, 0.5)[0], g, 0.5)
        assert_allclose(twice, once, atol=1e-12)

    def test_non_finite_rejected(self):
        theta = np.zeros(2)
        out, ok = server_apply(theta, np.array([np.inf, 0.0]), 1.0)
        assert not ok and np.array_equal(out, theta)


class TestProperties:
    @pytest.mark.parametrize("defense", ["fedavg", "krum", "mkrum", "foolsgold", "mudhog", "flguardian"])
    def test_permutation_invariance(self, defense):
        rng = np.random.default_rng(7)
        d = rng.normal(size=(5, 4))
        d[4] *= -3
        outs = []
        for perm in list(permutations(range(5)))[::17]:
            agg = Aggregator(defense, f=1)
            updates = [ClientUpdate(i, 0, d[i]) for i in perm]
            outs.append(agg(updates))
        for o in outs[1:]:
            assert_allclose(o, outs[0], atol=1e-12)

    def test_record_names(self):
        assert Aggregator("mudhog").record_name == "mudhog-proxy"
        assert Aggregator("flguardian").record_name == "flguardian-proxy"
        assert Aggregator("mkrum").record_name == "mkrum"

    def test_unknown_defense(self):
        with pytest.raises(AggregatorConfigError):
            Aggregator("median")
