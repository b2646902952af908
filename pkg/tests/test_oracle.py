import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmboot.bootstrap import ResampleScheme
from mmboot.inference import FitConfig, profiled_objective, sandwich
from mmboot.model import Dataset, ModelParams, sample_dataset
from mmboot.oracle import (ENUMERATION_LIMIT, align_permutation, all_patterns,
                           coverage_experiment, estimate_theta_elbo, exact_log_likelihood,
                           kolmogorov_distance, pattern_log_probs, population_theta_elbo)

DESIGN_E = ModelParams([0.3, 0.4], [[0.05, 0.95]] * 4 + [[0.3, 0.7]])


def test_exact_likelihood_k1_closed_form():
    pi = np.array([0.2, 0.7, 0.4])
    x = np.array([[1, 0, 1], [0, 0, 1], [1, 1, 1]], dtype=np.uint8)
    ref = np.sum(x * np.log(pi) + (1 - x) * np.log(1 - pi))
    assert exact_log_likelihood(ModelParams([2.0], pi), Dataset(x)) == pytest.approx(ref, abs=1e-12)


def test_exact_likelihood_single_item_mixture():
    theta = ModelParams([1.0, 1.0], [[0.2, 0.6]])
    assert exact_log_likelihood(theta, Dataset([[1]])) == pytest.approx(math.log(0.4))
    assert exact_log_likelihood(theta, Dataset([[0]])) == pytest.approx(math.log(0.6))


@pytest.mark.parametrize("seed", [0, 1])
def test_exact_likelihood_matches_monte_carlo_integration(seed):
    rng = np.random.default_rng(seed)
    theta = ModelParams(rng.uniform(0.3, 2.0, 2), rng.uniform(0.1, 0.9, (3, 2)))
    lam = rng.dirichlet(theta.alpha, size=1_000_000)
    for x in itertools.product([0, 1], repeat=3):
        x = np.array(x)
        # P(x | lambda) = prod_j sum_k lambda_k Bern(x_j; pi_jk)
        per_item = lam @ np.where(x[:, None] == 1, theta.pi, 1 - theta.pi).T
        p = per_item.prod(axis=1)
        mc, se = p.mean(), p.std() / np.sqrt(p.size)
        exact = math.exp(exact_log_likelihood(theta, Dataset(x[None])))
        assert abs(exact - mc) < 3 * se


def test_pattern_probabilities_sum_to_one():
    theta = ModelParams([0.4, 1.3, 0.8], np.random.default_rng(2).uniform(0.1, 0.9, (4, 3)))
    assert np.exp(pattern_log_probs(theta, all_patterns(4))).sum() == pytest.approx(1.0, abs=1e-12)


def test_enumeration_guard():
    theta = ModelParams(np.ones(4), np.full((11, 4), 0.5))
    assert 4 ** 11 > ENUMERATION_LIMIT
    with pytest.raises(ValueError):
        exact_log_likelihood(theta, Dataset(np.zeros((1, 11), dtype=np.uint8)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 20), st.integers(1, 6))
def test_profiled_elbo_is_a_lower_bound(seed, n, J):
    rng = np.random.default_rng(seed)
    theta = ModelParams(rng.uniform(0.1, 3.0, 2), rng.uniform(0.02, 0.98, (J, 2)))
    x = (rng.random((n, J)) < 0.5).astype(np.uint8)
    total = sum(profiled_objective(theta, row) for row in x)
    assert total <= exact_log_likelihood(theta, Dataset(x)) + 1e-8


# ---------------------------------------------------------------------------
# population targets
# ---------------------------------------------------------------------------

def test_single_group_target_is_theta0():
    theta0 = ModelParams([1.0], [0.2, 0.5, 0.85])
    t = population_theta_elbo(theta0)
    assert t.converged and np.allclose(t.theta.pi, theta0.pi, atol=1e-6)
    big = estimate_theta_elbo(theta0, 50_000, seed=1)
    assert np.allclose(big.theta.pi, theta0.pi, atol=1e-2)


def test_large_sample_targets_agree():
    a = estimate_theta_elbo(DESIGN_E, 100_000, seed=0)
    b = estimate_theta_elbo(DESIGN_E, 100_000, seed=1)
    assert a.se_scale == pytest.approx(math.sqrt(DESIGN_E.d / 100_000))
    assert np.max(np.abs(a.theta.to_vector() - b.theta.to_vector())) < 2 * a.se_scale


def test_large_sample_target_is_stationary():
    t = estimate_theta_elbo(DESIGN_E, 100_000, seed=0)
    data, _ = sample_dataset(DESIGN_E, 100_000, 0)
    assert sandwich(t.theta, data).mean_gradient_norm < 1e-3


def test_exact_and_sampled_targets_agree():
    exact = population_theta_elbo(DESIGN_E)
    big = estimate_theta_elbo(DESIGN_E, 100_000, seed=2)
    assert np.max(np.abs(exact.theta.to_vector() - big.theta.to_vector())) < 3 * big.se_scale


def test_sampled_target_needs_a_large_sample():
    with pytest.raises(ValueError):
        estimate_theta_elbo(DESIGN_E, 1000)


# ---------------------------------------------------------------------------
# Kolmogorov distance and alignment
# ---------------------------------------------------------------------------

def test_kolmogorov_examples():
    assert kolmogorov_distance([1, 2, 3], [3, 1, 2]) == 0.0
    assert kolmogorov_distance([0], [1]) == 1.0
    assert kolmogorov_distance([1, 2, 3, 4], [1.5, 2.5, 3.5, 4.5]) == 0.25
    with pytest.raises(ValueError):
        kolmogorov_distance([], [1])


def brute_kolmogorov(a, b):
    pts = np.concatenate([a, b])
    return max(abs(np.mean(a <= t) - np.mean(b <= t)) for t in pts)


samples = st.lists(st.integers(-20, 20).map(lambda v: v / 4), min_size=1, max_size=25)


@settings(max_examples=200, deadline=None)
@given(samples, samples, samples)
def test_kolmogorov_is_a_metric(a, b, c):
    a, b, c = map(np.array, (a, b, c))
    dab, dba = kolmogorov_distance(a, b), kolmogorov_distance(b, a)
    assert dab == dba
    assert dab == pytest.approx(brute_kolmogorov(a, b), abs=1e-15)
    assert kolmogorov_distance(a, c) <= dab + kolmogorov_distance(b, c) + 1e-15
    assert kolmogorov_distance(a, a) == 0.0


def test_align_permutation_undoes_a_relabelling():
    ref = ModelParams([0.3, 0.5, 0.9], [[0.1, 0.5, 0.9], [0.8, 0.2, 0.5]])
    for perm in itertools.permutations(range(3)):
        moved = ref.permuted(perm)
        back = align_permutation(moved, ref)
        assert np.array_equal(moved.permuted(back).pi, ref.pi)


# ---------------------------------------------------------------------------
# coverage harness
# ---------------------------------------------------------------------------

K1 = ModelParams([1.0], [0.25, 0.5, 0.7])


def test_full_level_gives_full_coverage():
    rep = coverage_experiment(K1, n=60, B=20, M=5, level=1.0, seed=1)
    assert np.all(rep.coverage["percentile"][1:] == 1.0)
    assert np.isnan(rep.coverage["percentile"][0])        # alpha unscored at K = 1


def test_coverage_report_is_deterministic_and_worker_independent():
    a = coverage_experiment(K1, n=80, B=20, M=6, seed=3, workers=1)
    b = coverage_experiment(K1, n=80, B=20, M=6, seed=3, workers=2)
    assert a.to_json() == b.to_json()
    assert all(0 <= c <= 1 for c in a.coverage["percentile"][1:])
    assert np.all(a.variance_ratio[1:] > 0)
    assert len(a.rows) == 6 * 4


def test_bootstrap_reps_limits_the_bootstrapped_repetitions():
    rep = coverage_experiment(K1, n=80, B=20, M=8, seed=3, bootstrap_reps=3)
    assert {r["rep"] for r in rep.rows} == {0, 1, 2}
    full = coverage_experiment(K1, n=80, B=20, M=8, seed=3)
    # the Monte Carlo variance uses every repetition either way
    assert np.array_equal(rep.mc_variance, full.mc_variance)


def test_coverage_rows_csv(tmp_path):
    rep = coverage_experiment(K1, n=50, B=10, M=3, seed=0, scheme=ResampleScheme("weighted"))
    rep.write_rows_csv(tmp_path / "rows.csv")
    head = (tmp_path / "rows.csv").read_text().splitlines()[0].split(",")
    assert head[:4] == ["rep", "param", "estimate", "boot_var"]
    assert rep.to_json()["config"]["scheme"] == "weighted"


def test_coverage_argument_checks():
    with pytest.raises(ValueError):
        coverage_experiment(K1, n=10, B=1, M=2)
    with pytest.raises(ValueError):
        coverage_experiment(K1, n=10, B=5, M=2, level=0.0)


def test_target_cfg_does_not_loosen_tolerances():
    t = population_theta_elbo(K1, FitConfig(elbo_rel_tol=1e-6))
    assert t.converged
