"""Bootstrap uncertainty for the ELBO estimator: resampling schemes, the
replicate loop, variance, percentile and studentized (pivotal) intervals."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels as kern
from .inference import FitConfig, _sandwich_from_patterns, fit_patterns
from .model import Dataset, FitResult, ModelParams, make_rng, parameter_names, sample_dataset
from .parallel import map_ordered

SCHEMES = ("nonparametric", "weighted", "parametric")
_ALIASES = {"np": "nonparametric", "param": "parametric", "w": "weighted"}


class ParametricBootstrapWarning(UserWarning):
    """The ELBO estimator's target generally differs from the data-generating
    parameter, so intervals from P(theta_hat) need not reach nominal coverage."""


@dataclass(frozen=True)
class ResampleScheme:
    kind: str = "nonparametric"

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in SCHEMES:
            raise ValueError(f"unknown resampling scheme {self.kind!r}; expected one of {SCHEMES}")
        object.__setattr__(self, "kind", kind)

    @property
    def weights_law(self) -> Optional[str]:
        return "exponential(1)" if self.kind == "weighted" else None


def replicate_seed(seed: int, j: int) -> int:
    """Seed for replicate ``j``; depends only on (seed, j)."""
    state = np.random.SeedSequence(int(seed), spawn_key=(int(j),)).generate_state(2, np.uint64)
    return int(state[0] >> np.uint64(1))


def resample_rows(n: int, seed: int) -> np.ndarray:
    return make_rng(seed).integers(0, n, size=n)


def resample_weights(n: int, seed: int) -> np.ndarray:
    return make_rng(seed).exponential(1.0, size=n)


def resample(data: Dataset, scheme: ResampleScheme, theta_hat: Optional[ModelParams] = None,
             seed: int = 0):
    """One bootstrap draw: a resampled Dataset, or a weight vector for the
    weighted scheme."""
    if scheme.kind == "nonparametric":
        return data.take(resample_rows(data.n, seed))
    if scheme.kind == "weighted":
        return resample_weights(data.n, seed)
    if theta_hat is None:
        raise ValueError("the parametric bootstrap needs theta_hat")
    return sample_dataset(theta_hat, data.n, seed, data.item_labels)[0]


@dataclass(frozen=True, eq=False)
class BootstrapSummary:
    """Replicate estimates (natural scale: alpha then pi row-major) and the
    intervals built from them."""

    estimates: np.ndarray
    theta_hat: np.ndarray
    names: tuple
    K: int
    variance: np.ndarray
    percentile_ci: np.ndarray
    B: int
    seed: int
    failures: int
    scheme: str
    alpha_level: float
    orientation: str = "displayed"
    pivotal_ci: Optional[np.ndarray] = None
    t_stats: Optional[np.ndarray] = None
    sigma_hat: Optional[np.ndarray] = None
    replicate_se: Optional[np.ndarray] = None
    unreliable: bool = False
    notes: tuple = ()

    def proportions(self) -> np.ndarray:
        a = self.estimates[:, :self.K]
        return a / a.sum(axis=1, keepdims=True)

    def chart_estimates(self) -> np.ndarray:
        e = self.estimates
        with np.errstate(divide="ignore"):
            return np.column_stack([np.log(e[:, :self.K]),
                                    np.log(e[:, self.K:]) - np.log1p(-e[:, self.K:])])

    def to_json(self) -> dict:
        def arr(a):
            return None if a is None else np.where(np.isfinite(a), a, None).tolist()
        return {
            "schema_version": 1,
            "scheme": self.scheme,
            "B": self.B,
            "seed": self.seed,
            "failures": self.failures,
            "unreliable": self.unreliable,
            "alpha_level": self.alpha_level,
            "orientation": self.orientation,
            "names": list(self.names),
            "theta_hat": arr(self.theta_hat),
            "variance": arr(self.variance),
            "percentile_ci": arr(self.percentile_ci),
            "pivotal_ci": arr(self.pivotal_ci),
            "sigma_hat": arr(self.sigma_hat),
            "estimates": arr(self.estimates),
            "notes": list(self.notes),
        }

    def write_replicates_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", *self.names])
            for j, row in enumerate(self.estimates):
                w.writerow([j, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def empirical_quantile(values, q: float) -> float:
    """inf{t : F(t) >= q} for the empirical CDF of ``values``."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values")
    if q <= 0:
        return -np.inf
    m = int(np.ceil(q * v.size - 1e-9))
    return float(v[min(max(m, 1), v.size) - 1])


def bootstrap_variance(summary_or_estimates) -> np.ndarray:
    """Per-coordinate replicate variance with divisor B."""
    est = getattr(summary_or_estimates, "estimates", summary_or_estimates)
    est = np.asarray(est, dtype=np.float64)
    if est.ndim == 1:
        est = est[:, None]
    if est.shape[0] < 2:
        raise ValueError("bootstrap variance needs at least two replicates")
    centered = est - est.mean(axis=0)
    return (centered ** 2).mean(axis=0)


def bootstrap_covariance(estimates) -> np.ndarray:
    est = np.asarray(estimates, dtype=np.float64)
    if est.shape[0] < 2:
        raise ValueError("bootstrap covariance needs at least two replicates")
    c = est - est.mean(axis=0)
    return c.T @ c / est.shape[0]


def percentile_ci(summary_or_estimates, theta_hat, alpha_level: float = 0.05,
                  orientation: str = "displayed") -> np.ndarray:
    """Percentile interval from the centered replicates theta* - theta_hat.

    ``displayed`` evaluates the endpoints theta_hat + G^-1(1 - a/2) and
    theta_hat + G^-1(a/2) and orders them, which is the interval spanned by
    the replicate quantiles. ``basic`` reflects them around theta_hat:
    [theta_hat - G^-1(1 - a/2), theta_hat - G^-1(a/2)].
    ``alpha_level = 0`` gives the whole line.
    """
    est = np.asarray(getattr(summary_or_estimates, "estimates", summary_or_estimates), float)
    if est.ndim == 1:
        est = est[:, None]
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=np.float64))
    if not 0 <= alpha_level < 1:
        raise ValueError("alpha_level must lie in [0, 1)")
    if est.shape[0] < 2:
        raise ValueError("percentile interval needs at least two replicates")
    d = est.shape[1]
    out = np.empty((d, 2))
    if alpha_level == 0:
        out[:, 0], out[:, 1] = -np.inf, np.inf
        return out
    for l in range(d):
        c = est[:, l] - theta_hat[l]
        hi_q = empirical_quantile(c, 1 - alpha_level / 2)
        lo_q = empirical_quantile(c, alpha_level / 2)
        if orientation == "displayed":
            a, b = theta_hat[l] + hi_q, theta_hat[l] + lo_q
            out[l] = (min(a, b), max(a, b))
        elif orientation == "basic":
            out[l] = (theta_hat[l] - hi_q, theta_hat[l] - lo_q)
        else:
            raise ValueError(f"unknown orientation {orientation!r}")
    return out


def pivotal_ci(summary_or_estimates, theta_hat, sigma_hat, alpha_level: float = 0.05,
               replicate_se=None) -> np.ndarray:
    """Studentized interval theta_hat -/+ sigma_hat * t, with t the (1 - a/2)
    empirical quantile of |T*| = |theta* - theta_hat| / se*.

    Coordinates without a usable standard error come back as NaN.
    """
    est = np.asarray(getattr(summary_or_estimates, "estimates", summary_or_estimates), float)
    if replicate_se is None:
        replicate_se = getattr(summary_or_estimates, "replicate_se", None)
    if replicate_se is None:
        raise ValueError("pivotal interval needs per-replicate standard errors")
    rse = np.asarray(replicate_se, dtype=np.float64)
    if est.ndim == 1:
        est, rse = est[:, None], rse[:, None]
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=np.float64))
    sigma_hat = np.atleast_1d(np.asarray(sigma_hat, dtype=np.float64))
    if not 0 <= alpha_level < 1:
        raise ValueError("alpha_level must lie in [0, 1)")
    out = np.full((est.shape[1], 2), np.nan)
    for l in range(est.shape[1]):
        s = rse[:, l]
        if not (np.isfinite(sigma_hat[l]) and sigma_hat[l] > 0) or not np.all(np.isfinite(s) & (s > 0)):
            continue
        if alpha_level == 0:
            out[l] = (-np.inf, np.inf)
            continue
        t = empirical_quantile(np.abs(est[:, l] - theta_hat[l]) / s, 1 - alpha_level / 2)
        out[l] = (theta_hat[l] - sigma_hat[l] * t, theta_hat[l] + sigma_hat[l] * t)
    return out


def studentized_stats(estimates, theta_hat, replicate_se) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.asarray(estimates) - np.asarray(theta_hat)) / np.asarray(replicate_se)


# ---------------------------------------------------------------------------
# replicate loop
# ---------------------------------------------------------------------------

@dataclass
class _Context:
    X: np.ndarray
    inverse: np.ndarray
    phi_hat: np.ndarray
    alpha: np.ndarray
    pi: np.ndarray
    item_labels: tuple
    scheme: str
    cfg: FitConfig
    fix_pi: bool
    studentize: bool
    seed: int


def _replicate(args):
    ctx, j = args
    rseed = replicate_seed(ctx.seed, j)
    n = ctx.inverse.size
    U = ctx.X.shape[0]
    X, phi = ctx.X, ctx.phi_hat
    if ctx.scheme == "nonparametric":
        w = np.bincount(ctx.inverse[resample_rows(n, rseed)], minlength=U).astype(np.float64)
    elif ctx.scheme == "weighted":
        w = np.bincount(ctx.inverse, weights=resample_weights(n, rseed), minlength=U)
    else:
        theta = ModelParams(ctx.alpha, ctx.pi)
        new = sample_dataset(theta, n, rseed, ctx.item_labels)[0]
        X, w, _ = new.patterns
        lookup = {row.tobytes(): i for i, row in enumerate(ctx.X)}
        default = kern.initial_phi(ctx.alpha, X.shape[1], 1)[0]
        phi = np.array([ctx.phi_hat[lookup[r.tobytes()]] if r.tobytes() in lookup else default
                        for r in X])
    raw = fit_patterns(X, w, ctx.alpha, ctx.pi, ctx.cfg, phi=phi, fix_pi=ctx.fix_pi)
    vec = np.concatenate([raw.alpha, raw.pi.reshape(-1)])
    se = None
    if ctx.studentize and raw.converged:
        sw = _sandwich_from_patterns(raw.theta(), X, w, ctx.cfg, raw.phi)
        se = sw.se_natural if sw.available else np.full(vec.size, np.nan)
    return vec, raw.converged and bool(np.all(np.isfinite(vec))), se


def bootstrap_run(data: Dataset, K: int, theta_hat: FitResult,
                  scheme: ResampleScheme = ResampleScheme(), B: int = 200, seed: int = 0,
                  cfg: FitConfig = FitConfig(), alpha_level: float = 0.05,
                  workers: int = 1, studentize: bool = False, sigma_hat=None,
                  fix_pi: bool = False, orientation: str = "displayed") -> BootstrapSummary:
    """Refit the model on B resamples, each started from the original
    estimate (theta_hat and its variational parameters) to keep group labels
    aligned.

    With ``studentize`` each replicate also gets a sandwich standard error and
    the pivotal interval is formed with ``sigma_hat`` (natural scale; computed
    from the original sample when not given).
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    if theta_hat.theta.K != K:
        raise ValueError("theta_hat has a different number of groups")
    if not theta_hat.converged:
        warnings.warn("bootstrapping around a non-converged fit", RuntimeWarning, stacklevel=2)
    scheme = scheme if isinstance(scheme, ResampleScheme) else ResampleScheme(scheme)
    notes = []
    if scheme.kind == "parametric":
        warnings.warn("parametric bootstrap intervals may miss nominal coverage for the "
                      "ELBO estimator", ParametricBootstrapWarning, stacklevel=2)
        notes.append("parametric bootstrap: coverage not guaranteed for the ELBO estimator")
    X, _, inverse = data.patterns
    first = np.zeros(X.shape[0], dtype=np.int64)
    first[inverse[::-1]] = np.arange(data.n)[::-1]
    th = theta_hat.theta.clamped(cfg.pi_eps)
    ctx = _Context(X, inverse, np.array(theta_hat.omega.phi[first]), th.alpha.copy(),
                   th.pi.copy(), data.item_labels, scheme.kind, cfg, fix_pi, studentize, seed)
    results = map_ordered(_replicate, [(ctx, j) for j in range(B)], workers)
    ok = [r for r in results if r[1]]
    failures = B - len(ok)
    d = K + data.J * K
    est = np.array([r[0] for r in ok]).reshape(-1, d)
    theta_vec = theta_hat.theta.to_vector()
    names = tuple(parameter_names(K, data.item_labels))
    if est.shape[0] >= 2:
        var = bootstrap_variance(est)
        pct = percentile_ci(est, theta_vec, alpha_level, orientation)
        flat = [names[l] for l in range(d) if pct[l, 0] == pct[l, 1]]
        if flat:
            notes.append("zero-width percentile interval (all replicates equal): "
                         + ", ".join(flat))
    else:
        var = np.full(d, np.nan)
        pct = np.tile(theta_vec[:, None], (1, 2))
        notes.append("fewer than two successful replicates")
    piv = t_stats = rse = None
    if studentize:
        rse = np.array([r[2] for r in ok]).reshape(-1, d)
        if sigma_hat is None:
            sw = _sandwich_from_patterns(th, X, data.patterns[1], cfg, ctx.phi_hat)
            sigma_hat = sw.se_natural if sw.available else np.full(d, np.nan)
        sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
        t_stats = studentized_stats(est, theta_vec, rse)
        if est.shape[0] >= 1:
            piv = pivotal_ci(est, theta_vec, sigma_hat, alpha_level, rse)
        if not np.all(np.isfinite(piv)):
            notes.append("pivotal interval unavailable for some parameters")
    unreliable = failures > 0.05 * B
    if unreliable:
        notes.append(f"{failures} of {B} replicates failed")
    return BootstrapSummary(est, theta_vec, names, K, var, pct, B, seed, failures,
                            scheme.kind, alpha_level, orientation, piv, t_stats,
                            sigma_hat, rse, unreliable, tuple(notes))
