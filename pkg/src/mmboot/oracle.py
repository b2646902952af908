"""Ground truth for checking the variational machinery: exact marginal
likelihood by enumeration, the population ELBO target, Kolmogorov distances
and the Monte Carlo coverage harness."""
from __future__ import annotations

import csv
import itertools
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .bootstrap import (ParametricBootstrapWarning, ResampleScheme, bootstrap_run,
                        percentile_ci, replicate_seed)
from .inference import FitConfig, fit, fit_patterns, random_init
from .model import Dataset, ModelParams, parameter_names, sample_dataset
from .parallel import map_ordered
from .special import log_gamma

ENUMERATION_LIMIT = 10 ** 6


def _assignments(J: int, K: int) -> np.ndarray:
    if K ** J > ENUMERATION_LIMIT:
        raise ValueError(f"K^J = {K ** J} exceeds the enumeration guard {ENUMERATION_LIMIT}")
    return np.array(list(itertools.product(range(K), repeat=J)), dtype=np.int64).reshape(-1, J)


def pattern_log_probs(theta: ModelParams, X: np.ndarray) -> np.ndarray:
    """log P(x) for each row of ``X`` by summing over all K^J group assignments."""
    X = np.asarray(X, dtype=np.int64)
    K, J = theta.K, theta.J
    g = _assignments(J, K)
    counts = np.stack([(g == k).sum(axis=1) for k in range(K)], axis=1)
    a = theta.alpha
    log_moment = (log_gamma(a.sum()) - log_gamma(a.sum() + J)
                  + (log_gamma(a[None, :] + counts) - log_gamma(a)[None, :]).sum(axis=1))
    with np.errstate(divide="ignore"):
        lp1 = np.log(theta.pi)
        lp0 = np.log1p(-theta.pi)
    cols = np.arange(J)[None, :]
    l1 = lp1[cols, g]          # (G, J)
    l0 = lp0[cols, g]
    out = np.empty(X.shape[0])
    for u, x in enumerate(X):
        lb = np.where(x[None, :] == 1, l1, l0).sum(axis=1) + log_moment
        m = lb.max()
        out[u] = m + np.log(np.exp(lb - m).sum()) if np.isfinite(m) else -np.inf
    return out


def all_patterns(J: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=J)), dtype=np.uint8).reshape(-1, J)


def exact_log_likelihood(theta: ModelParams, data: Dataset) -> float:
    """Observed-data log-likelihood by enumeration (requires K^J <= 1e6)."""
    if theta.J != data.J:
        raise ValueError("theta and data disagree on J")
    X, counts, _ = data.patterns
    return float(np.dot(counts, pattern_log_probs(theta, X)))


# ---------------------------------------------------------------------------
# population target
# ---------------------------------------------------------------------------

def _target_cfg(cfg: FitConfig) -> FitConfig:
    return replace(cfg, elbo_rel_tol=min(cfg.elbo_rel_tol, 1e-12),
                   max_outer_iters=max(cfg.max_outer_iters, 20000),
                   inner_rel_tol=min(cfg.inner_rel_tol, 1e-13))


@dataclass(frozen=True, eq=False)
class TargetEstimate:
    theta: ModelParams
    elbo: float
    converged: bool
    n_large: Optional[int]
    se_scale: float
    method: str


def population_theta_elbo(theta0: ModelParams, cfg: FitConfig = FitConfig(),
                          init: Optional[ModelParams] = None, n_starts: int = 20,
                          seed: int = 0) -> TargetEstimate:
    """Maximizer of the expected profiled ELBO under theta0, computed exactly
    by weighting all 2^J response patterns with their probabilities.

    The ascent is run from ``init`` (default theta0) and from ``n_starts``
    random starts; the highest expected ELBO wins.
    """
    X = all_patterns(theta0.J)
    w = np.exp(pattern_log_probs(theta0.clamped(cfg.pi_eps), X))
    w = w / w.sum()
    tcfg = _target_cfg(cfg)
    start = init if init is not None else theta0
    starts = [start] + [random_init(theta0.K, theta0.J, seed, s) for s in range(n_starts)]
    best = None
    for st in starts:
        raw = fit_patterns(X, w, st.alpha, st.pi, tcfg)
        if best is None or raw.elbo > best.elbo + 1e-12:
            best = raw
    return TargetEstimate(best.theta(), best.elbo, best.converged, None, 0.0, "exact")


def estimate_theta_elbo(theta0: ModelParams, n_large: int = 100_000, seed: int = 0,
                        cfg: FitConfig = FitConfig(),
                        init: Optional[ModelParams] = None) -> TargetEstimate:
    """Plug-in target: fit one large synthetic sample from theta0.

    Sampling error is of order sqrt(d / n_large), reported as ``se_scale``.
    """
    if n_large < 50_000:
        raise ValueError("n_large must be at least 50000")
    data, _ = sample_dataset(theta0, n_large, seed)
    X, w, _ = data.patterns
    start = init if init is not None else theta0
    raw = fit_patterns(X, w, start.alpha, start.pi, _target_cfg(cfg))
    if not raw.converged:
        raise RuntimeError("target fit did not converge")
    return TargetEstimate(raw.theta(), raw.elbo, True, n_large,
                          float(np.sqrt(theta0.d / n_large)), "sample")


# ---------------------------------------------------------------------------
# distances and label alignment
# ---------------------------------------------------------------------------

def kolmogorov_distance(sample_a, sample_b) -> float:
    """sup_t |F_a(t) - F_b(t)| for the two empirical CDFs."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(sample_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def align_permutation(theta: ModelParams, reference: ModelParams) -> tuple:
    """Group permutation of ``theta`` closest to ``reference`` in Frobenius
    distance on pi; ties go to the lexicographically first permutation."""
    best, best_d = None, np.inf
    for perm in itertools.permutations(range(theta.K)):
        d = float(np.sum((theta.pi[:, perm] - reference.pi) ** 2))
        if d < best_d - 1e-15:
            best, best_d = perm, d
    return best


# ---------------------------------------------------------------------------
# coverage harness
# ---------------------------------------------------------------------------

INTERVALS = ("percentile", "percentile_basic", "pivotal")


@dataclass(frozen=True, eq=False)
class CoverageReport:
    n: int
    J: int
    K: int
    B: int
    M: int
    scheme: str
    level: float
    seed: int
    names: tuple
    target: np.ndarray
    scored: np.ndarray
    coverage: dict
    mean_width: dict
    variance_ratio: np.ndarray
    mc_variance: np.ndarray
    mean_boot_variance: np.ndarray
    kolmogorov: np.ndarray
    kolmogorov_median: float
    failures: int
    flagged: bool
    rows: list = field(repr=False, default_factory=list)
    runtime: float = 0.0

    def to_json(self) -> dict:
        def arr(a):
            return np.where(np.isfinite(a), a, None).tolist()
        return {
            "schema_version": 1,
            "config": {"n": self.n, "J": self.J, "K": self.K, "B": self.B, "M": self.M,
                       "scheme": self.scheme, "level": self.level, "seed": self.seed},
            "names": list(self.names),
            "target": arr(self.target),
            "scored": self.scored.tolist(),
            "coverage": {k: arr(v) for k, v in self.coverage.items()},
            "mean_width": {k: arr(v) for k, v in self.mean_width.items()},
            "variance_ratio": arr(self.variance_ratio),
            "mc_variance": arr(self.mc_variance),
            "mean_boot_variance": arr(self.mean_boot_variance),
            "kolmogorov": arr(self.kolmogorov),
            "kolmogorov_median": self.kolmogorov_median,
            "failures": self.failures,
            "flagged": self.flagged,
        }

    def write_rows_csv(self, path) -> None:
        cols = ["rep", "param", "estimate", "boot_var", *(f"{k}_{e}" for k in INTERVALS
                                                         for e in ("lo", "hi", "covers"))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])


@dataclass
class _RepJob:
    theta0: ModelParams
    target: ModelParams
    n: int
    B: int
    scheme: ResampleScheme
    level: float
    seed: int
    cfg: FitConfig
    pivotal: bool
    bootstrap_reps: int


def _coverage_rep(args):
    job, m = args
    data, _ = sample_dataset(job.theta0, job.n, replicate_seed(job.seed, 2 * m))
    t = job.target
    fr = fit(data, t.K, init=t, cfg=job.cfg)
    if not fr.converged:
        return None
    perm = align_permutation(fr.theta, t)
    K, J = t.K, t.J
    idx = np.concatenate([np.asarray(perm), K + (np.arange(J)[:, None] * K
                                                 + np.asarray(perm)[None, :]).ravel()])
    theta_vec = fr.theta.to_vector()
    if m >= job.bootstrap_reps:
        return {"estimate": theta_vec[idx], "bootstrapped": False}
    alpha_level = 1.0 - job.level
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ParametricBootstrapWarning)
        summ = bootstrap_run(data, t.K, fr, job.scheme, job.B, replicate_seed(job.seed, 2 * m + 1),
                             job.cfg, alpha_level=alpha_level, studentize=job.pivotal)
    if summ.estimates.shape[0] < 2:
        return None
    est = summ.estimates
    basic = percentile_ci(est, theta_vec, alpha_level, "basic")
    piv = summ.pivotal_ci if job.pivotal else np.full((theta_vec.size, 2), np.nan)
    # express everything in the target's labelling
    return {
        "estimate": theta_vec[idx],
        "bootstrapped": True,
        "boot_var": summ.variance[idx],
        "boot_centered": (est - theta_vec)[:, idx],
        "percentile": summ.percentile_ci[idx],
        "percentile_basic": basic[idx],
        "pivotal": piv[idx],
        "failures": summ.failures,
    }


def coverage_experiment(theta0: ModelParams, n: int, B: int, M: int,
                        scheme: ResampleScheme = ResampleScheme(), level: float = 0.95,
                        seed: int = 0, cfg: FitConfig = FitConfig(), workers: int = 1,
                        target: Optional[ModelParams] = None, pivotal: bool = False,
                        bootstrap_reps: Optional[int] = None) -> CoverageReport:
    """Monte Carlo check of bootstrap intervals against the ELBO target.

    Each repetition draws a dataset of size n from theta0, fits it starting
    from the target, bootstraps B times and records whether each interval
    contains the target. The target defaults to the exact population
    maximizer reached from theta0. Alpha is not scored when K = 1.

    With ``bootstrap_reps`` set, only the first that many repetitions are
    bootstrapped; the rest only contribute to the sampling ensemble of
    theta_hat (Monte Carlo variance and the Kolmogorov reference).
    """
    if M < 1 or B < 2 or n < 1:
        raise ValueError("need M >= 1, B >= 2 and n >= 1")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    t0 = time.perf_counter()
    scheme = scheme if isinstance(scheme, ResampleScheme) else ResampleScheme(scheme)
    if target is None:
        target = population_theta_elbo(theta0, cfg).theta
    K, J = target.K, target.J
    d = K + J * K
    tvec = target.to_vector()
    scored = np.ones(d, dtype=bool)
    if K == 1:
        scored[:K] = False
    nboot = M if bootstrap_reps is None else min(int(bootstrap_reps), M)
    if nboot < 1:
        raise ValueError("bootstrap_reps must be at least 1")
    job = _RepJob(theta0, target, n, B, scheme, level, seed, cfg, pivotal, nboot)
    outs = map_ordered(_coverage_rep, [(job, m) for m in range(M)], workers)
    fitted = [o for o in outs if o is not None]
    good = [o for o in fitted if o["bootstrapped"]]
    failures = M - len(fitted) + sum(o["failures"] > 0.05 * B for o in good)
    if not good:
        raise RuntimeError("every bootstrapped repetition failed")
    est_all = np.array([o["estimate"] for o in fitted])
    coverage, widths, rows = {}, {}, []
    for kind in INTERVALS:
        ci = np.array([o[kind] for o in good])           # (M, d, 2)
        avail = ~np.isnan(ci).any(axis=2)
        covers = np.where(avail, (ci[:, :, 0] <= tvec) & (tvec <= ci[:, :, 1]), 0.0)
        count = avail.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            cov = np.where(count > 0, covers.sum(axis=0) / count, np.nan)
            wid = np.where(count > 0, np.where(avail, ci[:, :, 1] - ci[:, :, 0], 0.0).sum(axis=0)
                           / count, np.nan)
        coverage[kind] = np.where(scored, cov, np.nan)
        widths[kind] = np.where(scored, wid, np.nan)
    boot_var = np.array([o["boot_var"] for o in good])
    mc_var = est_all.var(axis=0, ddof=1) if len(fitted) > 1 else np.full(d, np.nan)
    mean_bv = boot_var.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(scored, mean_bv / mc_var, np.nan)
    # sampling ensemble of sqrt(n)(theta_hat - target) against each
    # repetition's bootstrap ensemble of sqrt(n)(theta* - theta_hat)
    delta_n = np.sqrt(n) * (est_all - tvec)
    ks = np.full(d, np.nan)
    for l in np.flatnonzero(scored):
        per_rep = [kolmogorov_distance(delta_n[:, l], np.sqrt(n) * o["boot_centered"][:, l])
                   for o in good]
        ks[l] = float(np.median(per_rep))
    for m, o in enumerate(good):
        for l in range(d):
            r = {"rep": m, "param": l, "estimate": float(o["estimate"][l]),
                 "boot_var": float(o["boot_var"][l])}
            for kind in INTERVALS:
                lo, hi = (float(v) for v in o[kind][l])
                r[f"{kind}_lo"], r[f"{kind}_hi"] = lo, hi
                r[f"{kind}_covers"] = int(lo <= tvec[l] <= hi)
            rows.append(r)
    names = tuple(parameter_names(K, [f"item{j + 1}" for j in range(J)]))
    return CoverageReport(n, J, K, B, M, scheme.kind, level, seed, names, tvec, scored,
                          coverage, widths, ratio, mc_var, mean_bv, ks,
                          float(np.nanmedian(ks)), failures, failures > 0.05 * M, rows,
                          time.perf_counter() - t0)
