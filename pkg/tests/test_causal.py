import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivae_lab import causal, datagen
from ivae_lab.causal import HsicConfig


def reference_statistic(a, b):
    """trace(K H L H) / N^2 with explicit matrices and median-heuristic widths."""
    def gram(v):
        d = np.abs(v[:, None] - v[None, :])
        width = np.median(d[np.triu_indices(len(v), 1)])
        return np.exp(-d**2 / (2 * width**2))

    n = len(a)
    H = np.eye(n) - np.ones((n, n)) / n
    return np.trace(gram(a) @ H @ gram(b) @ H) / n**2


class TestHsic:
    def test_statistic_matches_explicit_trace(self):
        gen = np.random.default_rng(0)
        a = gen.normal(size=120)
        b = np.sin(a) + 0.5 * gen.normal(size=120)
        res = causal.hsic(a, b, num_perms=100)
        assert res.statistic == pytest.approx(reference_statistic(a, b), rel=1e-10)

    def test_identical_inputs_hit_p_value_floor(self):
        a = np.random.default_rng(1).normal(size=200)
        res = causal.hsic(a, a, num_perms=200)
        assert res.statistic > 0
        assert res.p_value == pytest.approx(1 / 201)
        assert res.reject

    def test_power_on_quadratic_dependence(self):
        gen = np.random.default_rng(2)
        a = gen.normal(size=500)
        res = causal.hsic(a, a**2 + 0.1 * gen.normal(size=500), seed=2)
        assert res.p_value < 0.01

    def test_independent_inputs_usually_accepted(self):
        gen = np.random.default_rng(3)
        rejections = sum(causal.hsic(gen.normal(size=100), gen.normal(size=100), num_perms=100, seed=s).reject
                         for s in range(40))
        assert rejections <= 6

    def test_deterministic_per_seed(self):
        gen = np.random.default_rng(4)
        a, b = gen.normal(size=80), gen.normal(size=80)
        assert causal.hsic(a, b, num_perms=100, seed=5) == causal.hsic(a, b, num_perms=100, seed=5)

    def test_bandwidths_are_median_distances(self):
        a = np.arange(60.0)
        res = causal.hsic(a, a[::-1].copy(), num_perms=100)
        d = np.abs(a[:, None] - a[None, :])[np.triu_indices(60, 1)]
        assert res.bandwidths == (np.median(d), np.median(d))

    @pytest.mark.parametrize("a,b,perms,match", [
        (np.ones(100), np.arange(100.0), 100, "constant"),
        (np.arange(100.0), np.arange(99.0), 100, "length"),
        (np.arange(100.0), np.arange(100.0), 50, "permutations"),
        (np.arange(20.0), np.arange(20.0), 100, "50 samples"),
    ])
    def test_errors(self, a, b, perms, match):
        with pytest.raises(ValueError, match=match):
            causal.hsic(a, b, num_perms=perms)

    def test_subsampling(self):
        gen = np.random.default_rng(6)
        a = gen.normal(size=3000)
        res = causal.hsic(a, a + gen.normal(size=3000), num_perms=100, max_samples=300)
        assert res.reject
        assert res.to_dict()["num_perms"] == 100


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift_a=st.floats(-100, 100), shift_b=st.floats(-100, 100))
def test_statistic_invariant_to_shifts(seed, shift_a, shift_b):
    gen = np.random.default_rng(seed)
    a = gen.normal(size=60)
    b = a * gen.normal() + gen.normal(size=60)
    base = causal.hsic(a, b, num_perms=100).statistic
    moved = causal.hsic(a + shift_a, b + shift_b, num_perms=100).statistic
    assert abs(moved - base) < 1e-10


class TestDecisionTable:
    def test_x1_causes_x2(self):
        p = dict(zip(causal.PAIRS, (0.001, 0.4, 0.001, 0.001)))
        assert causal.verdict_from_p_values(p, 0.05) == "x1_causes_x2"

    def test_x2_causes_x1(self):
        p = dict(zip(causal.PAIRS, (0.001, 0.001, 0.3, 0.001)))
        assert causal.verdict_from_p_values(p, 0.05) == "x2_causes_x1"

    def test_all_reject(self):
        assert causal.verdict_from_p_values(dict.fromkeys(causal.PAIRS, 0.001), 0.05) == "none"

    def test_two_accepted(self):
        p = dict(zip(causal.PAIRS, (0.001, 0.4, 0.3, 0.001)))
        assert causal.verdict_from_p_values(p, 0.05) == "none"

    def test_boundary_is_not_a_rejection(self):
        p = dict(zip(causal.PAIRS, (0.01, 0.05, 0.01, 0.01)))
        assert causal.verdict_from_p_values(p, 0.05) == "x1_causes_x2"

    @settings(max_examples=100, deadline=None)
    @given(ps=st.lists(st.floats(0, 1), min_size=4, max_size=4), alpha=st.floats(0.001, 0.2))
    def test_depends_only_on_rejection_pattern(self, ps, alpha):
        p = dict(zip(causal.PAIRS, ps))
        snapped = {k: (0.0 if v < alpha else 1.0) for k, v in p.items()}
        assert causal.verdict_from_p_values(p, alpha) == causal.verdict_from_p_values(snapped, alpha)


class TestDecideDirection:
    def _sem(self, seed=0, N=500):
        gen = np.random.default_rng(seed)
        n = gen.uniform(-1, 1, (N, 2)) * np.array([1.0, 0.3])
        x1 = n[:, 0]
        x2 = np.tanh(2 * x1) + n[:, 1]
        return np.column_stack([x1, x2]), n

    def test_true_disturbances_give_correct_direction(self):
        # the independent pair is falsely rejected about alpha of the time, so count over seeds
        verdicts = []
        for seed in range(10):
            x, n = self._sem(seed, N=300)
            verdicts.append(causal.decide_direction(x, n, HsicConfig(num_perms=200, seed=seed)).verdict)
        assert verdicts.count("x1_causes_x2") >= 7
        assert verdicts.count("x2_causes_x1") == 0

    def test_columns_are_matched_before_testing(self):
        x, n = self._sem()
        cfg = HsicConfig(num_perms=200)
        flipped = causal.decide_direction(x, n[:, ::-1] * -2.0, cfg)
        straight = causal.decide_direction(x, n, cfg)
        assert flipped.matching == [1, 0]
        assert flipped.verdict == straight.verdict
        assert flipped.p_values == straight.p_values

    def test_json(self):
        x, n = self._sem(N=100)
        out = json.loads(causal.decide_direction(x, n, HsicConfig(num_perms=100)).to_json())
        assert set(out["p_values"]) == set(causal.PAIRS)
        assert out["config"]["num_perms"] == 100

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            causal.decide_direction(np.zeros((10, 3)), np.zeros((10, 3)))


def test_recover_disturbances_requires_causal_data():
    ds = datagen.generate(datagen.GenConfig(M=3, L=20, n=2, d=2))
    with pytest.raises(ValueError, match="causal_sem"):
        causal.recover_disturbances(ds, causal.mdl.TrainConfig(epochs=1))


def test_recover_disturbances_is_deterministic():
    ds = datagen.generate(datagen.GenConfig(M=3, L=40, n=2, d=2, variant="causal_sem", seed=2))
    cfg = causal.mdl.TrainConfig(epochs=2, batch_size=32, seed=1)
    a = causal.recover_disturbances(ds, cfg)
    b = causal.recover_disturbances(ds, cfg)
    assert a.shape == (120, 2)
    np.testing.assert_array_equal(a, b)
