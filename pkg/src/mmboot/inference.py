"""ELBO maximization: coordinate updates, block coordinate ascent, multi-start
search, the profiled per-observation objective and its sandwich variance."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import _kernels as kern
from .model import (Dataset, FitResult, ModelParams, VariationalParams, make_rng)
from .parallel import map_ordered


class AlphaUpdateWarning(UserWarning):
    """Newton-Raphson for alpha found no ascent direction."""


@dataclass(frozen=True)
class FitConfig:
    max_outer_iters: int = 2000
    max_inner_iters: int = 5
    elbo_rel_tol: float = 1e-8
    inner_rel_tol: float = 1e-10
    newton_max_steps: int = 50
    newton_backtrack: float = 0.5
    pi_eps: float = 1e-6
    alpha_floor: float = 1e-4
    profile_rel_tol: float = 1e-14
    profile_max_iters: int = 10000

    def __post_init__(self):
        for name in ("elbo_rel_tol", "inner_rel_tol", "pi_eps", "alpha_floor", "profile_rel_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.newton_backtrack < 1:
            raise ValueError("newton_backtrack must lie in (0, 1)")
        if not self.pi_eps < 0.5:
            raise ValueError("pi_eps must be below 0.5")
        for name in ("max_outer_iters", "max_inner_iters", "newton_max_steps", "profile_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "FitConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "FitConfig":
        with Path(path).open() as fh:
            obj = json.load(fh)
        # either a bare FitConfig object or a sectioned run config
        if "fit" in obj or "coverage" in obj:
            obj = obj.get("fit", {})
        return cls.from_json(obj)


# ---------------------------------------------------------------------------
# single coordinate updates (public, row-level)
# ---------------------------------------------------------------------------

def update_delta(theta: ModelParams, phi_i, x_i) -> np.ndarray:
    """Optimal categorical probabilities (J, K) for one individual given phi."""
    phi_i = np.asarray(phi_i, dtype=np.float64)
    x_i = np.asarray(x_i, dtype=np.uint8)
    with np.errstate(divide="ignore"):
        lp1, lp0 = np.log(theta.pi), np.log1p(-theta.pi)
    elog = np.empty(theta.K)
    kern._expected_log_lambda(phi_i, elog)
    delta = np.empty((theta.J, theta.K))
    kern.delta_step(x_i, lp1, lp0, elog, delta)
    if not np.all(np.isfinite(delta)):
        raise ValueError("non-finite responsibilities: pi has left the clamped interval")
    return delta


def update_phi(alpha, delta_i) -> np.ndarray:
    """phi_k = alpha_k + sum_j delta_jk."""
    return np.asarray(alpha, dtype=np.float64) + np.asarray(delta_i, dtype=np.float64).sum(axis=0)


def update_pi(delta, data: Dataset, eps: float = 1e-6, current_pi=None,
              weights=None) -> np.ndarray:
    """Closed-form Bernoulli update, clamped to [eps, 1 - eps].

    Entries whose total responsibility is zero keep ``current_pi``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    w = np.ones(data.n) if weights is None else np.asarray(weights, dtype=np.float64)
    wd = delta * w[:, None, None]
    den = wd.sum(axis=0)
    num = (wd * data.x[:, :, None]).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.clip(num / den, eps, 1.0 - eps)
    keep = ~(den > 0)
    if keep.any():
        if current_pi is None:
            raise ValueError("zero responsibility for some (item, group) and no current pi")
        pi[keep] = np.asarray(current_pi)[keep]
    return pi


def alpha_objective(alpha, phi, weights=None) -> float:
    """The alpha-dependent part of the ELBO for fixed phi."""
    N, S = _alpha_stats(phi, weights)
    return float(kern.alpha_objective(np.asarray(alpha, dtype=np.float64), S, N))


def _alpha_stats(phi, weights):
    phi = np.asarray(phi, dtype=np.float64)
    w = np.ones(phi.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    from .special import digamma
    elog = digamma(phi) - digamma(phi.sum(axis=1))[:, None]
    return float(w.sum()), (w[:, None] * elog).sum(axis=0)


def update_alpha(alpha0, phi, cfg: FitConfig = FitConfig(), weights=None) -> np.ndarray:
    """Newton-Raphson maximization of the alpha terms with backtracking.

    Warns with :class:`AlphaUpdateWarning` and returns ``alpha0`` when no
    ascent step exists.
    """
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    if np.any(alpha0 <= 0):
        raise ValueError("alpha0 must be positive")
    N, S = _alpha_stats(phi, weights)
    alpha, status = kern.newton_alpha(alpha0, S, N, cfg.alpha_floor, cfg.newton_max_steps,
                                      cfg.newton_backtrack, 1e-10 * max(N, 1.0))
    if status:
        warnings.warn("no ascent step for alpha; returning the starting point",
                      AlphaUpdateWarning, stacklevel=2)
        return alpha0.copy()
    return alpha


# ---------------------------------------------------------------------------
# block coordinate ascent
# ---------------------------------------------------------------------------

@dataclass
class _RawFit:
    alpha: np.ndarray
    pi: np.ndarray
    phi: np.ndarray      # per pattern
    delta: np.ndarray    # per pattern
    trace: np.ndarray
    iterations: int
    converged: bool
    alpha_warnings: int
    inner_nonconverged: int

    @property
    def elbo(self) -> float:
        return float(self.trace[-1])

    def theta(self) -> ModelParams:
        return ModelParams(self.alpha, self.pi)


def fit_patterns(X: np.ndarray, w: np.ndarray, alpha: np.ndarray, pi: np.ndarray,
                 cfg: FitConfig, phi: Optional[np.ndarray] = None,
                 fix_pi: bool = False, fix_alpha: bool = False) -> _RawFit:
    """Run coordinate ascent on compressed data (patterns ``X`` with weights ``w``)."""
    alpha = np.array(alpha, dtype=np.float64)
    pi = np.clip(np.array(pi, dtype=np.float64), cfg.pi_eps, 1.0 - cfg.pi_eps)
    U, J = X.shape
    K = alpha.size
    if phi is None:
        phi = kern.initial_phi(alpha, J, U)
    else:
        phi = np.array(phi, dtype=np.float64)
    delta = np.empty((U, J, K))
    trace = np.empty(cfg.max_outer_iters)
    iters, conv, a_warn, in_bad = kern.fit_core(
        np.ascontiguousarray(X, dtype=np.uint8), np.asarray(w, dtype=np.float64),
        alpha, pi, phi, delta, cfg.pi_eps, cfg.alpha_floor, cfg.max_outer_iters,
        cfg.max_inner_iters, cfg.inner_rel_tol, cfg.elbo_rel_tol, cfg.newton_max_steps,
        cfg.newton_backtrack, not fix_pi, not fix_alpha, trace, cfg.profile_max_iters)
    return _RawFit(alpha, pi, phi, delta, trace[:iters].copy(), int(iters), bool(conv),
                   int(a_warn), int(in_bad))


def random_init(K: int, J: int, seed: int, start: int = 0) -> ModelParams:
    """alpha_k ~ U(0.1, 2), pi_jk ~ U(0.05, 0.95) from the stream (seed, start)."""
    rng = make_rng(seed, start)
    alpha = rng.uniform(0.1, 2.0, size=K)
    pi = rng.uniform(0.05, 0.95, size=(J, K))
    return ModelParams(alpha, pi)


def _row_weights(data: Dataset, weights) -> np.ndarray:
    X, counts, inverse = data.patterns
    if weights is None:
        return counts
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (data.n,):
        raise ValueError("need one weight per row")
    return np.bincount(inverse, weights=weights, minlength=X.shape[0])


def _pattern_phi(data: Dataset, omega: Optional[VariationalParams]):
    if omega is None:
        return None
    X, _, inverse = data.patterns
    first = np.zeros(X.shape[0], dtype=np.int64)
    first[inverse[::-1]] = np.arange(data.n)[::-1]
    return omega.phi[first]


def _to_result(raw: _RawFit, data: Dataset, diagnostics: dict) -> FitResult:
    _, _, inverse = data.patterns
    omega = VariationalParams(raw.phi[inverse], raw.delta[inverse])
    diag = {"alpha_warnings": raw.alpha_warnings,
            "inner_nonconverged": raw.inner_nonconverged}
    diag.update(diagnostics)
    return FitResult(raw.theta(), omega, raw.elbo, raw.iterations, raw.trace,
                     raw.converged, diag)


def fit(data: Dataset, K: int, init: Union[ModelParams, int, None] = None,
        cfg: FitConfig = FitConfig(), weights=None,
        omega_init: Optional[VariationalParams] = None, fix_pi: bool = False) -> FitResult:
    """Maximize the ELBO from one starting point.

    ``init`` is either starting parameters or a seed for :func:`random_init`.
    Non-convergence is reported through ``FitResult.converged``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if init is None:
        init = 0
    if not isinstance(init, ModelParams):
        init = random_init(K, data.J, int(init), 0)
    if init.K != K or init.J != data.J:
        raise ValueError("initial parameters do not match K / data")
    X, _, _ = data.patterns
    raw = fit_patterns(X, _row_weights(data, weights), init.alpha, init.pi, cfg,
                       phi=_pattern_phi(data, omega_init), fix_pi=fix_pi)
    return _to_result(raw, data, {})


def _start_job(args):
    X, w, K, seed, s, cfg, fixed_pi = args
    init = random_init(K, X.shape[1], seed, s)
    if fixed_pi is not None:
        init = ModelParams(init.alpha, fixed_pi)
    return fit_patterns(X, w, init.alpha, init.pi, cfg, fix_pi=fixed_pi is not None)


def _distinct_modes(elbos, rel=1e-6) -> int:
    vals = np.sort(np.asarray(elbos))[::-1]
    modes = 0
    last = None
    for v in vals:
        if last is None or abs(v - last) > rel * max(abs(last), 1.0):
            modes += 1
            last = v
    return modes


def multi_start_fit(data: Dataset, K: int, n_starts: int, seed: int,
                    cfg: FitConfig = FitConfig(), workers: int = 1, weights=None,
                    fixed_pi=None) -> FitResult:
    """Best-ELBO fit over ``n_starts`` random initializations.

    Start ``s`` draws its initialization from the stream ``(seed, s)``; ties
    in ELBO go to the lowest start index.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    X, _, _ = data.patterns
    w = _row_weights(data, weights)
    if fixed_pi is not None:
        fixed_pi = np.asarray(fixed_pi, dtype=np.float64)
    jobs = [(X, w, K, seed, s, cfg, fixed_pi) for s in range(n_starts)]
    raws = map_ordered(_start_job, jobs, workers)
    elbos = np.array([r.elbo for r in raws])
    best = int(np.argmax(elbos))  # first index among ties
    diag = {
        "n_starts": n_starts,
        "best_start": best,
        "start_elbos": elbos.tolist(),
        "nonconverged_starts": int(sum(not r.converged for r in raws)),
        "n_distinct_modes": _distinct_modes(elbos),
    }
    return _to_result(raws[best], data, diag)


# ---------------------------------------------------------------------------
# profiled objective and sandwich variance
# ---------------------------------------------------------------------------

def profiled_objective(theta: ModelParams, x_i, cfg: FitConfig = FitConfig()) -> float:
    """ELBO of one response row with its variational parameters optimized out."""
    x = np.ascontiguousarray(np.asarray(x_i, dtype=np.uint8).reshape(1, -1))
    if x.shape[1] != theta.J:
        raise ValueError("row length does not match theta")
    th = theta.clamped(cfg.pi_eps)
    phi = kern.initial_phi(th.alpha, theta.J, 1)
    e, bad = kern.profile_rows(x, th.alpha, th.pi, phi, cfg.profile_rel_tol, cfg.profile_max_iters)
    if bad:
        warnings.warn("inner coordinate ascent did not converge", RuntimeWarning, stacklevel=2)
    return float(e[0])


@dataclass(frozen=True, eq=False)
class SandwichEstimate:
    """A^-1 B A^-1 on the chart (log alpha, logit pi).

    ``active`` lists the chart coordinates that enter the objective (alpha is
    inert when K = 1); matrices are over active coordinates only while
    ``se`` and ``se_natural`` are full-length with NaN for inactive ones.
    """

    A_hat: np.ndarray
    B_hat: np.ndarray
    V_hat: Optional[np.ndarray]
    se: np.ndarray
    se_natural: np.ndarray
    active: np.ndarray
    n: float
    available: bool
    message: str = ""
    mean_gradient_norm: float = 0.0
    condition_number: float = float("nan")


def _fd_steps(u):
    return 1e-4 * (1.0 + np.abs(u))


class _Profiler:
    def __init__(self, X, w, K, cfg, phi0):
        self.X, self.w, self.K, self.cfg, self.phi0 = X, w, K, cfg, phi0
        self.N = float(w.sum())
        self.nonconverged = 0

    def rows(self, u):
        th = ModelParams.from_chart(u, self.K)
        pi = np.clip(th.pi, self.cfg.pi_eps, 1 - self.cfg.pi_eps)
        e, bad = kern.profile_rows(self.X, th.alpha, pi, self.phi0.copy(),
                                   self.cfg.profile_rel_tol, self.cfg.profile_max_iters)
        self.nonconverged += bad
        return e

    def mean(self, u):
        return float(np.dot(self.w, self.rows(u)) / self.N)


def _sandwich_from_patterns(theta_hat: ModelParams, X, w, cfg: FitConfig,
                            phi_warm=None) -> SandwichEstimate:
    K, J = theta_hat.K, theta_hat.J
    th = theta_hat.clamped(cfg.pi_eps)
    u0 = th.to_chart()
    d = u0.size
    active = np.arange(d) if K > 1 else np.arange(1, d)
    if phi_warm is None:
        phi_warm = kern.initial_phi(th.alpha, J, X.shape[0])
    phi0 = np.array(phi_warm, dtype=np.float64)
    kern.profile_rows(X, th.alpha, th.pi, phi0, cfg.profile_rel_tol, cfg.profile_max_iters)
    prof = _Profiler(X, w, K, cfg, phi0)
    N = prof.N
    h = _fd_steps(u0)
    m = active.size
    base_rows = prof.rows(u0)
    base = float(np.dot(w, base_rows) / N)
    plus = np.empty((m, X.shape[0]))
    minus = np.empty((m, X.shape[0]))
    for a, l in enumerate(active):
        e = np.zeros(d)
        e[l] = h[l]
        plus[a] = prof.rows(u0 + e)
        minus[a] = prof.rows(u0 - e)
    hl = h[active]
    G = ((plus - minus) / (2 * hl[:, None])).T          # (U, m) per-pattern gradients
    A = np.empty((m, m))
    for a in range(m):
        A[a, a] = (np.dot(w, plus[a]) / N - 2 * base + np.dot(w, minus[a]) / N) / hl[a] ** 2
    for a in range(m):
        for b in range(a + 1, m):
            ea = np.zeros(d)
            eb = np.zeros(d)
            ea[active[a]] = h[active[a]]
            eb[active[b]] = h[active[b]]
            f = (prof.mean(u0 + ea + eb) - prof.mean(u0 + ea - eb)
                 - prof.mean(u0 - ea + eb) + prof.mean(u0 - ea - eb))
            A[a, b] = A[b, a] = f / (4 * hl[a] * hl[b])
    Bm = (G * w[:, None]).T @ G / N
    Bm = 0.5 * (Bm + Bm.T)
    mean_grad = float(np.max(np.abs(w @ G / N))) if m else 0.0
    se = np.full(d, np.nan)
    se_nat = np.full(d, np.nan)
    jac = np.concatenate([th.alpha, (th.pi * (1 - th.pi)).reshape(-1)])
    msg = ""
    if prof.nonconverged:
        msg = f"{prof.nonconverged} inner optimizations did not converge; "
    if m == 0:
        return SandwichEstimate(A, Bm, None, se, se_nat, active, N, False,
                                msg + "no active parameters", mean_grad)
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > 1e10:
        return SandwichEstimate(A, Bm, None, se, se_nat, active, N, False,
                                msg + "sandwich unavailable: Hessian is singular or "
                                "ill-conditioned; use the percentile bootstrap interval",
                                mean_grad, cond)
    Ainv = np.linalg.inv(A)
    V = Ainv @ Bm @ Ainv
    V = 0.5 * (V + V.T)
    se[active] = np.sqrt(np.clip(np.diag(V), 0, None) / N)
    se_nat[active] = se[active] * jac[active]
    if mean_grad > 1e-4:
        msg += f"theta is not stationary (mean gradient {mean_grad:.2e}); "
    return SandwichEstimate(A, Bm, V, se, se_nat, active, N, True, msg.strip(), mean_grad, cond)


def sandwich(theta_hat: ModelParams, data: Dataset, cfg: FitConfig = FitConfig(),
             weights=None, omega: Optional[VariationalParams] = None) -> SandwichEstimate:
    """Sandwich variance of the ELBO estimator by finite differences of the
    profiled objective on the (log alpha, logit pi) chart."""
    X, _, _ = data.patterns
    return _sandwich_from_patterns(theta_hat, X, _row_weights(data, weights), cfg,
                                   _pattern_phi(data, omega))
