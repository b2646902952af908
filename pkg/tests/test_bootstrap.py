import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import mmboot.bootstrap as bs
from mmboot.bootstrap import (ParametricBootstrapWarning, ResampleScheme, bootstrap_covariance,
                              bootstrap_run, bootstrap_variance, empirical_quantile,
                              percentile_ci, pivotal_ci, replicate_seed, resample)
from mmboot.inference import fit
from mmboot.model import Dataset, ModelParams, sample_dataset

SEPARATED = ModelParams([0.5, 0.5], [[0.1, 0.9], [0.85, 0.15], [0.1, 0.8], [0.9, 0.2],
                                     [0.2, 0.85]])


@pytest.fixture(scope="module")
def separated_fit():
    data, _ = sample_dataset(SEPARATED, 300, 21)
    return data, fit(data, 2, init=SEPARATED)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def test_scheme_names_and_aliases():
    assert ResampleScheme("np").kind == "nonparametric"
    assert ResampleScheme("w").weights_law == "exponential(1)"
    assert ResampleScheme().weights_law is None
    with pytest.raises(ValueError):
        ResampleScheme("jackknife")


def test_single_row_resample_is_that_row():
    data = Dataset([[1, 0, 1]])
    for s in range(5):
        assert np.array_equal(resample(data, ResampleScheme(), seed=s).x, data.x)


def test_inclusion_frequency_matches_binomial():
    n, B = 20, 4000
    data = Dataset(np.eye(n, dtype=np.uint8))
    hits = np.zeros(n)
    for b in range(B):
        rows = bs.resample_rows(n, replicate_seed(0, b))
        hits[np.unique(rows)] += 1
    p = 1 - (1 - 1 / n) ** n
    assert np.all(np.abs(hits / B - p) < 3 * np.sqrt(p * (1 - p) / B))
    assert resample(data, ResampleScheme(), seed=1).n == n


def test_weighted_mean_weight_is_one():
    n = 5000
    w = resample(Dataset(np.zeros((n, 1))), ResampleScheme("weighted"), seed=3)
    assert w.shape == (n,) and np.all(w > 0)
    assert abs(w.mean() - 1) < 3 / np.sqrt(n)


def test_parametric_resample_needs_theta():
    data = Dataset(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        resample(data, ResampleScheme("parametric"), seed=0)
    out = resample(data, ResampleScheme("param"), ModelParams([1.0], [0.5, 0.5]), seed=0)
    assert out.n == 4 and out.J == 2


def test_replicate_seeds_depend_only_on_master_and_index():
    assert replicate_seed(5, 3) == replicate_seed(5, 3)
    assert len({replicate_seed(5, j) for j in range(1000)}) == 1000
    assert replicate_seed(5, 3) != replicate_seed(6, 3)


# ---------------------------------------------------------------------------
# variance and intervals
# ---------------------------------------------------------------------------

def test_variance_examples():
    assert np.array_equal(bootstrap_variance(np.full((7, 3), 2.5)), np.zeros(3))
    assert bootstrap_variance(np.array([[1.0], [3.0]]))[0] == 1.0
    with pytest.raises(ValueError):
        bootstrap_variance(np.ones((1, 2)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=30))
def test_variance_matches_exact_rational_arithmetic(vals):
    est = np.array(vals, dtype=float) / 8.0
    fr = [Fraction(v, 8) for v in vals]
    mean = sum(fr) / len(fr)
    exact = sum((f - mean) ** 2 for f in fr) / len(fr)
    assert abs(bootstrap_variance(est[:, None])[0] - float(exact)) <= 1e-12 * max(1, float(exact))


def test_variance_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    est = rng.normal(3.0, 2.0, (250, 6))
    ref = [sum((x - sum(col) / len(col)) ** 2 for x in col) / len(col) for col in est.T.tolist()]
    assert np.allclose(bootstrap_variance(est), ref, rtol=0, atol=1e-12)
    C = bootstrap_covariance(est)
    assert np.allclose(np.diag(C), ref, atol=1e-12) and np.allclose(C, C.T)


def test_empirical_quantile_convention():
    v = [-2, -1, 1, 2]
    assert empirical_quantile(v, 0.25) == -2
    assert empirical_quantile(v, 0.26) == -1
    assert empirical_quantile(v, 0.75) == 1
    assert empirical_quantile(v, 1.0) == 2
    assert empirical_quantile(v, 0.0) == -np.inf


def test_percentile_interval_from_four_centered_replicates():
    theta_hat = 10.0
    est = theta_hat + np.array([-2.0, -1.0, 1.0, 2.0])
    # G^-1(0.75) = 1 and G^-1(0.25) = -2 under inf{t : G(t) >= q}
    assert np.array_equal(percentile_ci(est, [theta_hat], 0.5)[0], [theta_hat - 2, theta_hat + 1])
    assert np.array_equal(percentile_ci(est, [theta_hat], 0.5, "basic")[0],
                          [theta_hat - 1, theta_hat + 2])


def test_percentile_interval_degenerate_and_errors():
    est = np.full((5, 2), 3.0)
    assert np.array_equal(percentile_ci(est, [3.0, 3.0]), [[3.0, 3.0], [3.0, 3.0]])
    with pytest.raises(ValueError):
        percentile_ci(est, [3.0, 3.0], 1.0)
    with pytest.raises(ValueError):
        percentile_ci(est, [3.0, 3.0], 0.1, "sideways")
    assert np.all(np.isinf(percentile_ci(est, [3.0, 3.0], 0.0)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40), st.floats(-1e3, 1e3),
       st.floats(0.01, 0.99))
def test_percentile_endpoints_are_shifted_order_statistics(vals, theta_hat, a):
    est = np.array(vals)
    for orient in ("displayed", "basic"):
        lo, hi = percentile_ci(est, [theta_hat], a, orient)[0]
        assert lo <= hi
    lo, hi = percentile_ci(est, [theta_hat], a)[0]
    # the displayed interval is spanned by replicate values themselves
    assert np.any(np.isclose(est, lo, rtol=0, atol=1e-9 * (1 + abs(lo))))
    assert np.any(np.isclose(est, hi, rtol=0, atol=1e-9 * (1 + abs(hi))))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=40), st.floats(0.01, 0.99))
def test_percentile_interval_contains_theta_hat_when_replicates_straddle(vals, a):
    est = np.array(vals)
    theta_hat = float(np.median(est))
    lo, hi = percentile_ci(est, [theta_hat], a)[0]
    if a <= 0.5 and est.min() < theta_hat < est.max():
        # at least half the replicates lie on each side of the median
        assert lo <= theta_hat <= hi


def test_pivotal_examples():
    theta_hat, sigma = 5.0, 0.5
    est = theta_hat + np.array([1.0, -2.0, 3.0, -4.0])
    lo, hi = pivotal_ci(est, [theta_hat], [sigma], 0.5, np.ones(4))[0]
    assert (lo, hi) == (theta_hat - 3 * sigma, theta_hat + 3 * sigma)
    est = theta_hat + np.array([0.7, -0.7, 0.7])
    lo, hi = pivotal_ci(est, [theta_hat], [sigma], 0.1, np.ones(3))[0]
    assert (lo, hi) == pytest.approx((theta_hat - 0.7 * sigma, theta_hat + 0.7 * sigma))


def test_pivotal_unavailable_without_standard_errors():
    est = np.arange(4.0)[:, None] * np.ones((1, 2))
    se = np.ones((4, 2))
    se[2, 1] = 0.0
    out = pivotal_ci(est, [1.0, 1.0], [0.3, np.nan], 0.1, se)
    assert np.all(np.isnan(out[1])) and np.all(np.isfinite(out[0]))
    with pytest.raises(ValueError):
        pivotal_ci(est, [1.0, 1.0], [0.3, 0.3], 0.1)


# ---------------------------------------------------------------------------
# the replicate loop
# ---------------------------------------------------------------------------

def test_identity_resample_reproduces_the_estimate(separated_fit, monkeypatch):
    data, fr = separated_fit
    monkeypatch.setattr(bs, "resample_rows", lambda n, seed: np.arange(n))
    s = bootstrap_run(data, 2, fr, B=1, seed=0)
    assert s.estimates.shape == (1, 12) and s.failures == 0
    assert np.allclose(s.estimates[0], fr.theta.to_vector(), rtol=1e-5, atol=1e-6)


def test_summary_shapes_and_invariants(separated_fit):
    data, fr = separated_fit
    s = bootstrap_run(data, 2, fr, B=40, seed=1)
    assert s.failures + s.estimates.shape[0] == 40
    assert s.estimates.shape[1] == 12 and np.all(s.variance >= 0)
    assert np.all(s.percentile_ci[:, 0] <= s.percentile_ci[:, 1])
    assert np.allclose(s.proportions().sum(axis=1), 1.0)
    js = s.to_json()
    assert js["schema_version"] == 1 and js["B"] == 40 and len(js["names"]) == 12


def test_deterministic_across_worker_counts(separated_fit):
    data, fr = separated_fit
    a = bootstrap_run(data, 2, fr, B=12, seed=4, workers=1)
    b = bootstrap_run(data, 2, fr, B=12, seed=4, workers=3)
    assert np.array_equal(a.estimates, b.estimates)
    assert np.array_equal(a.percentile_ci, b.percentile_ci)
    c = bootstrap_run(data, 2, fr, B=12, seed=5)
    assert not np.array_equal(a.estimates, c.estimates)


def test_no_label_switching_with_separated_groups(separated_fit):
    data, fr = separated_fit
    s = bootstrap_run(data, 2, fr, B=60, seed=7)
    u_hat = fr.theta.clamped().to_chart()
    u_swap = fr.theta.clamped().permuted([1, 0]).to_chart()
    for v in s.estimates:
        u = ModelParams.from_vector(v, 2).clamped().to_chart()
        assert np.linalg.norm(u - u_hat) < np.linalg.norm(u - u_swap)


def test_k1_bootstrap_sd_matches_binomial():
    pi = np.array([0.3, 0.6])
    data, _ = sample_dataset(ModelParams([1.0], pi), 500, 9)
    fr = fit(data, 1)
    s = bootstrap_run(data, 1, fr, B=500, seed=2)
    p = data.column_means()
    ref = np.sqrt(p * (1 - p) / data.n)
    assert np.all(np.abs(np.sqrt(s.variance[1:]) / ref - 1) < 0.2)


def test_weighted_scheme_runs(separated_fit):
    data, fr = separated_fit
    s = bootstrap_run(data, 2, fr, ResampleScheme("weighted"), B=10, seed=3)
    assert s.scheme == "weighted" and s.estimates.shape[0] + s.failures == 10


def test_parametric_scheme_warns(separated_fit):
    data, fr = separated_fit
    with pytest.warns(ParametricBootstrapWarning):
        s = bootstrap_run(data, 2, fr, ResampleScheme("parametric"), B=5, seed=3)
    assert any("parametric" in n for n in s.notes)


def test_fixed_pi_replicates_keep_pi(separated_fit):
    data, fr = separated_fit
    s = bootstrap_run(data, 2, fr, B=5, seed=3, fix_pi=True)
    assert np.allclose(s.estimates[:, 2:], fr.theta.clamped().pi.reshape(-1))


def test_all_equal_replicates_are_flagged():
    data = Dataset(np.ones((20, 2), dtype=np.uint8))
    fr = fit(data, 1)
    s = bootstrap_run(data, 1, fr, B=5, seed=0)
    assert np.all(s.percentile_ci[1:, 0] == s.percentile_ci[1:, 1])
    assert any("zero-width" in n for n in s.notes)


def test_studentized_run_reports_pivotal_intervals():
    data, _ = sample_dataset(ModelParams([1.0], [0.3, 0.6]), 200, 1)
    fr = fit(data, 1)
    s = bootstrap_run(data, 1, fr, B=30, seed=2, studentize=True)
    assert s.pivotal_ci is not None and s.t_stats.shape == (30, 3)
    assert np.all(np.isnan(s.pivotal_ci[0]))            # alpha is inert at K = 1
    assert np.all(np.isfinite(s.pivotal_ci[1:]))
    assert np.all(s.pivotal_ci[1:, 0] < fr.theta.pi[:, 0])


def test_bad_arguments(separated_fit):
    data, fr = separated_fit
    with pytest.raises(ValueError):
        bootstrap_run(data, 2, fr, B=0)
    with pytest.raises(ValueError):
        bootstrap_run(data, 3, fr, B=2)


def test_replicate_csv(tmp_path, separated_fit):
    data, fr = separated_fit
    s = bootstrap_run(data, 2, fr, B=3, seed=0)
    s.write_replicates_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("replicate,alpha_1") and len(lines) == 1 + s.estimates.shape[0]


def test_nonconverged_fit_warns():
    data, _ = sample_dataset(SEPARATED, 50, 2)
    from mmboot.inference import FitConfig
    fr = fit(data, 2, init=SEPARATED, cfg=FitConfig(max_outer_iters=1))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        bootstrap_run(data, 2, fr, B=2, seed=0)
    assert any("non-converged" in str(x.message) for x in w)
