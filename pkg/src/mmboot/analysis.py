"""Choosing the number of groups by pseudo-BIC, and comparing group
proportions between two samples with a bootstrap Wald test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bootstrap import (ResampleScheme, bootstrap_covariance, bootstrap_run, replicate_seed)
from .inference import FitConfig, multi_start_fit
from .model import Dataset, FitResult, ModelParams
from .special import regularized_gamma_q


class SingularCovarianceError(ArithmeticError):
    pass


def chi_square_sf(x: float, df: int) -> float:
    """P(chi^2_df > x)."""
    if df < 1 or int(df) != df:
        raise ValueError("df must be a positive integer")
    if not x >= 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    return regularized_gamma_q(df / 2.0, x / 2.0)


def n_parameters(K: int, J: int) -> int:
    return K + J * K


def pseudo_bic(elbo: float, K: int, J: int, n: int) -> float:
    return n_parameters(K, J) * math.log(n) - 2.0 * elbo


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionRow:
    K: int
    elbo: float
    pbic: float
    n_params: int
    n_starts: int
    n_distinct_modes: int
    nonconverged_starts: int
    converged: bool


@dataclass(frozen=True, eq=False)
class ModelSelectionResult:
    per_K: tuple
    chosen_K: int
    n: int
    J: int
    fits: dict = field(repr=False, default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "n": self.n,
            "J": self.J,
            "chosen_K": self.chosen_K,
            "per_K": [vars(r) for r in self.per_K],
            "post_selection_inference": "intervals reported after selection are not adjusted "
                                        "for the choice of K",
        }


def select_K(data: Dataset, K_range: Sequence[int], n_starts: int = 20, seed: int = 0,
             cfg: FitConfig = FitConfig(), workers: int = 1) -> ModelSelectionResult:
    """Best-of-n_starts fit for each K; chosen K minimizes the pseudo-BIC
    (ties go to the smaller K)."""
    Ks = sorted(set(int(k) for k in K_range))
    if not Ks:
        raise ValueError("K_range is empty")
    if Ks[0] < 1:
        raise ValueError("K must be at least 1")
    rows, fits = [], {}
    for K in Ks:
        fr = multi_start_fit(data, K, n_starts, replicate_seed(seed, K), cfg, workers)
        fits[K] = fr
        diag = fr.diagnostics
        rows.append(SelectionRow(K, fr.elbo, pseudo_bic(fr.elbo, K, data.J, data.n),
                                 n_parameters(K, data.J), n_starts,
                                 int(diag.get("n_distinct_modes", 1)),
                                 int(diag.get("nonconverged_starts", 0)), fr.converged))
    chosen = min(rows, key=lambda r: (r.pbic, r.K)).K
    return ModelSelectionResult(tuple(rows), chosen, data.n, data.J, fits)


# ---------------------------------------------------------------------------
# two-sample comparison of group proportions
# ---------------------------------------------------------------------------

def fit_alpha_given_pi(data: Dataset, pi_fixed, n_starts: int = 20, seed: int = 0,
                       cfg: FitConfig = FitConfig(), workers: int = 1):
    """Maximize the ELBO over alpha with pi held at ``pi_fixed``.

    Returns (alpha, FitResult). With K = 1 alpha does not enter the
    likelihood; the starting value comes back unchanged and the fit carries
    ``alpha_inert = True`` in its diagnostics.
    """
    pi_fixed = np.asarray(pi_fixed, dtype=np.float64)
    ModelParams(np.ones(pi_fixed.shape[1]), pi_fixed)     # validates pi
    if pi_fixed.shape[0] != data.J:
        raise ValueError("pi_fixed has the wrong number of items")
    fr = multi_start_fit(data, pi_fixed.shape[1], n_starts, seed, cfg, workers,
                         fixed_pi=pi_fixed)
    if pi_fixed.shape[1] == 1:
        fr.diagnostics["alpha_inert"] = True
    return fr.theta.alpha.copy(), fr


def proportions(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    return a / a.sum(axis=-1, keepdims=True)


def _drop(K: int, drop: Optional[int]) -> np.ndarray:
    drop = K - 1 if drop is None else int(drop)
    if not 0 <= drop < K:
        raise ValueError("drop index out of range")
    return np.array([k for k in range(K) if k != drop], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class TwoSampleResult:
    alpha_hat_a: np.ndarray
    alpha_hat_b: np.ndarray
    p_hat_a: np.ndarray
    p_hat_b: np.ndarray
    V_hat_a: np.ndarray
    V_hat_b: np.ndarray
    wald: float
    df: int
    p_value: float
    dropped: int
    jitter: bool = False
    condition_number: float = float("nan")
    notes: tuple = ()
    replicates_a: Optional[np.ndarray] = field(default=None, repr=False)
    replicates_b: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "alpha_hat_a": self.alpha_hat_a.tolist(),
            "alpha_hat_b": self.alpha_hat_b.tolist(),
            "p_hat_a": self.p_hat_a.tolist(),
            "p_hat_b": self.p_hat_b.tolist(),
            "V_hat_a": self.V_hat_a.tolist(),
            "V_hat_b": self.V_hat_b.tolist(),
            "wald": self.wald,
            "df": self.df,
            "p_value": self.p_value,
            "dropped_group": self.dropped,
            "jitter": self.jitter,
            "condition_number": self.condition_number,
            "notes": list(self.notes),
        }


def wald_statistic(diff, cov) -> tuple[float, bool, float]:
    """diff^T cov^-1 diff by Cholesky; returns (statistic, jittered, cond)."""
    diff = np.atleast_1d(np.asarray(diff, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)):
        raise SingularCovarianceError("covariance has non-finite entries")
    cond = float(np.linalg.cond(cov))
    if not np.isfinite(cond) or cond > 1e10:
        raise SingularCovarianceError(
            f"summed covariance is singular or ill-conditioned (condition number {cond:.3g}); "
            "increase the number of bootstrap replicates B")
    jitter = False
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        jitter = True
        L = np.linalg.cholesky(cov + 1e-10 * np.eye(cov.shape[0]))
    z = np.linalg.solve(L, diff)
    return float(z @ z), jitter, cond


def wald_two_sample(p_hat_a, p_hat_b, V_hat_a, V_hat_b, alpha_hat_a=None, alpha_hat_b=None,
                    dropped: int = -1) -> TwoSampleResult:
    """Wald statistic for equal proportions, referred to chi^2 with
    len(p_hat) degrees of freedom. The inputs are the reduced (one group
    dropped) proportion vectors and their covariances."""
    pa = np.atleast_1d(np.asarray(p_hat_a, dtype=np.float64))
    pb = np.atleast_1d(np.asarray(p_hat_b, dtype=np.float64))
    Va = np.atleast_2d(np.asarray(V_hat_a, dtype=np.float64))
    Vb = np.atleast_2d(np.asarray(V_hat_b, dtype=np.float64))
    if pa.shape != pb.shape or Va.shape != (pa.size, pa.size) or Vb.shape != Va.shape:
        raise ValueError("proportion vectors and covariances disagree in shape")
    df = pa.size
    if df == 0:
        raise ValueError("nothing to compare with a single group")
    wald, jitter, cond = wald_statistic(pa - pb, Va + Vb)
    notes = ("covariance jittered by 1e-10 before inversion",) if jitter else ()
    empty = np.array([])
    return TwoSampleResult(
        np.asarray(alpha_hat_a if alpha_hat_a is not None else empty, dtype=np.float64),
        np.asarray(alpha_hat_b if alpha_hat_b is not None else empty, dtype=np.float64),
        pa, pb, Va, Vb, wald, df, chi_square_sf(wald, df), dropped, jitter, cond, notes)


@dataclass(frozen=True, eq=False)
class SampleAlphaFit:
    alpha: np.ndarray
    fit: FitResult
    replicate_proportions: np.ndarray
    failures: int


def _sample_alpha(data: Dataset, pi_fixed, B: int, fit_seed: int, boot_seed: int,
                  cfg: FitConfig, n_starts: int, scheme: ResampleScheme,
                  workers: int) -> SampleAlphaFit:
    alpha, fr = fit_alpha_given_pi(data, pi_fixed, n_starts, fit_seed, cfg, workers)
    summ = bootstrap_run(data, fr.theta.K, fr, scheme, B, boot_seed, cfg,
                         workers=workers, fix_pi=True)
    return SampleAlphaFit(alpha, fr, summ.proportions(), summ.failures)


def two_sample_test(data_a: Dataset, data_b: Dataset, pi_fixed, B: int = 300, seed: int = 0,
                    cfg: FitConfig = FitConfig(), n_starts: int = 20,
                    scheme: ResampleScheme = ResampleScheme(), drop: Optional[int] = None,
                    workers: int = 1) -> TwoSampleResult:
    """Fit alpha separately in each sample with pi fixed, bootstrap each fit
    (pi still fixed) for the covariance of the proportions, and form the
    Wald statistic with one group dropped (the last by default)."""
    pi_fixed = np.asarray(pi_fixed, dtype=np.float64)
    K = pi_fixed.shape[1]
    if K < 2:
        raise ValueError("the two-sample test needs K >= 2")
    if data_a.J != data_b.J:
        raise ValueError("the two samples have different numbers of items")
    keep = _drop(K, drop)
    # both samples share the multi-start seeds, so identical data give
    # identical estimates; the bootstrap streams are independent
    fit_seed = replicate_seed(seed, 0)
    fa = _sample_alpha(data_a, pi_fixed, B, fit_seed, replicate_seed(seed, 1), cfg, n_starts,
                       scheme, workers)
    fb = _sample_alpha(data_b, pi_fixed, B, fit_seed, replicate_seed(seed, 2), cfg, n_starts,
                       scheme, workers)
    Va = bootstrap_covariance(fa.replicate_proportions)[np.ix_(keep, keep)]
    Vb = bootstrap_covariance(fb.replicate_proportions)[np.ix_(keep, keep)]
    res = wald_two_sample(proportions(fa.alpha)[keep], proportions(fb.alpha)[keep], Va, Vb,
                          fa.alpha, fb.alpha, dropped=K - 1 if drop is None else int(drop))
    notes = list(res.notes)
    for name, f in (("a", fa), ("b", fb)):
        if f.failures > 0.05 * B:
            notes.append(f"sample {name}: {f.failures} of {B} bootstrap replicates failed")
    return TwoSampleResult(**{**res.__dict__, "notes": tuple(notes),
                              "replicates_a": fa.replicate_proportions,
                              "replicates_b": fb.replicate_proportions})
