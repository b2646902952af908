"""Domain types, the ELBO, and the generative sampler for the Bernoulli
mixed membership model."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .special import digamma, log_gamma

PI_EPS = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class DataFormatError(ValueError):
    """Malformed input file; message carries the offending location."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable n x J binary response matrix."""

    x: np.ndarray
    item_labels: tuple = ()
    id: Optional[str] = None

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D matrix, got shape {x.shape}")
        if not np.all((x == 0) | (x == 1)):
            raise ValueError("responses must be 0 or 1")
        object.__setattr__(self, "x", _frozen(x.astype(np.uint8)))
        labels = tuple(self.item_labels) or tuple(f"item{j + 1}" for j in range(x.shape[1]))
        if len(labels) != x.shape[1]:
            raise ValueError(f"{len(labels)} item labels for {x.shape[1]} columns")
        object.__setattr__(self, "item_labels", tuple(str(s) for s in labels))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def J(self) -> int:
        return self.x.shape[1]

    @cached_property
    def patterns(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distinct response rows, their counts, and the row -> pattern index.

        The per-row profiled ELBO depends on a row only through its response
        pattern, so every fit runs on this compressed form.
        """
        uniq, inverse, counts = np.unique(self.x, axis=0, return_inverse=True,
                                          return_counts=True)
        return (np.ascontiguousarray(uniq, dtype=np.uint8), counts.astype(np.float64),
                inverse.reshape(-1))

    def column_means(self) -> np.ndarray:
        return self.x.mean(axis=0)

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.x[np.asarray(rows)], self.item_labels, self.id)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Structural parameters: Dirichlet concentration ``alpha`` (K,) and
    Bernoulli probabilities ``pi`` (J, K)."""

    alpha: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        pi = np.asarray(self.pi, dtype=np.float64)
        if pi.ndim == 1 and alpha.size == 1:
            pi = pi.reshape(-1, 1)
        if alpha.size < 1 or pi.ndim != 2 or pi.shape[1] != alpha.size:
            raise ValueError(f"alpha has {alpha.size} groups but pi has shape {pi.shape}")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise ValueError("alpha must be positive and finite")
        if not np.all((pi >= 0) & (pi <= 1)):
            raise ValueError("pi entries must lie in [0, 1]")
        object.__setattr__(self, "alpha", _frozen(alpha))
        object.__setattr__(self, "pi", _frozen(pi))

    @property
    def K(self) -> int:
        return self.alpha.size

    @property
    def J(self) -> int:
        return self.pi.shape[0]

    @property
    def d(self) -> int:
        return self.K + self.J * self.K

    def clamped(self, eps: float = PI_EPS) -> "ModelParams":
        return ModelParams(self.alpha, np.clip(self.pi, eps, 1.0 - eps))

    def proportions(self) -> np.ndarray:
        return self.alpha / self.alpha.sum()

    def to_vector(self) -> np.ndarray:
        """Natural-scale vector: alpha then pi row-major (item outer, group inner)."""
        return np.concatenate([self.alpha, self.pi.reshape(-1)])

    @classmethod
    def from_vector(cls, v, K: int) -> "ModelParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:K], v[K:].reshape(-1, K))

    def to_chart(self) -> np.ndarray:
        """Unconstrained coordinates: log alpha, logit pi."""
        return np.concatenate([np.log(self.alpha), _logit(self.pi.reshape(-1))])

    @classmethod
    def from_chart(cls, u, K: int) -> "ModelParams":
        u = np.asarray(u, dtype=np.float64)
        return cls(np.exp(u[:K]), _expit(u[K:]).reshape(-1, K))

    def permuted(self, perm: Sequence[int]) -> "ModelParams":
        perm = np.asarray(perm)
        return ModelParams(self.alpha[perm], self.pi[:, perm])

    def to_json(self) -> dict:
        return {"alpha": self.alpha.tolist(), "pi": self.pi.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelParams":
        return cls(np.asarray(obj["alpha"], dtype=float), np.asarray(obj["pi"], dtype=float))


def parameter_names(K: int, item_labels: Sequence[str]) -> list[str]:
    names = [f"alpha_{k + 1}" for k in range(K)]
    names += [f"pi_{lab}_{k + 1}" for lab in item_labels for k in range(K)]
    return names


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def _expit(u):
    u = np.asarray(u, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * u))


@dataclass(frozen=True, eq=False)
class VariationalParams:
    """Per-individual variational parameters: ``phi`` (n, K) Dirichlet
    parameters and ``delta`` (n, J, K) categorical probabilities."""

    phi: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        delta = np.asarray(self.delta, dtype=np.float64)
        if phi.ndim != 2 or delta.ndim != 3 or delta.shape[0] != phi.shape[0] \
                or delta.shape[2] != phi.shape[1]:
            raise ValueError(f"incompatible shapes phi {phi.shape}, delta {delta.shape}")
        if np.any(phi <= 0):
            raise ValueError("phi must be positive")
        if np.any(delta < 0) or np.max(np.abs(delta.sum(axis=2) - 1.0), initial=0.0) > 1e-12:
            raise ValueError("each delta slice must lie on the simplex")
        object.__setattr__(self, "phi", _frozen(phi))
        object.__setattr__(self, "delta", _frozen(delta))

    @property
    def n(self) -> int:
        return self.phi.shape[0]


@dataclass(frozen=True, eq=False)
class FitResult:
    theta: ModelParams
    omega: VariationalParams
    elbo: float
    iterations: int
    elbo_trace: np.ndarray
    converged: bool
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "elbo_trace", _frozen(np.asarray(self.elbo_trace, dtype=float)))

    def to_json(self) -> dict:
        return {
            "theta": self.theta.to_json(),
            "elbo": self.elbo,
            "iterations": self.iterations,
            "converged": self.converged,
            "elbo_trace": self.elbo_trace.tolist(),
            "diagnostics": self.diagnostics,
        }


def _check_dims(theta: ModelParams, omega: VariationalParams, data: Dataset):
    if theta.J != data.J:
        raise ValueError(f"theta has {theta.J} items, data has {data.J}")
    if omega.n != data.n or omega.delta.shape[1] != data.J or omega.phi.shape[1] != theta.K:
        raise ValueError("variational parameters do not match data/theta dimensions")


def elbo_terms(theta: ModelParams, omega: VariationalParams, data: Dataset) -> np.ndarray:
    """Per-individual ELBO contributions, shape (n,)."""
    _check_dims(theta, omega, data)
    alpha, pi = theta.alpha, theta.pi
    phi, delta = omega.phi, omega.delta
    x = data.x.astype(np.float64)[:, :, None]
    elog = digamma(phi) - digamma(phi.sum(axis=1))[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_pi = np.log(pi)[None]
        log_1mpi = np.log1p(-pi)[None]
        bern = delta * np.where(x == 1, log_pi, 0.0) + delta * np.where(x == 0, log_1mpi, 0.0)
        bern = np.where(delta == 0, 0.0, bern)
        ent = np.where(delta > 0, delta * np.log(np.where(delta > 0, delta, 1.0)), 0.0)
    out = (log_gamma(alpha.sum()) - log_gamma(alpha).sum()
           + ((alpha - 1.0)[None] * elog).sum(axis=1)
           + (delta * elog[:, None, :]).sum(axis=(1, 2))
           + bern.sum(axis=(1, 2))
           - log_gamma(phi.sum(axis=1)) + log_gamma(phi).sum(axis=1)
           - ((phi - 1.0) * elog).sum(axis=1)
           - ent.sum(axis=(1, 2)))
    return out


def elbo(theta: ModelParams, omega: VariationalParams, data: Dataset,
         weights: Optional[np.ndarray] = None) -> float:
    """Evidence lower bound summed over individuals, optionally weighted per row."""
    terms = elbo_terms(theta, omega, data)
    total = float(terms.sum() if weights is None else np.dot(np.asarray(weights, float), terms))
    if not np.isfinite(total):
        raise ValueError("ELBO is not finite; check pi against the clamp and phi > 0")
    return total


@dataclass(frozen=True, eq=False)
class LatentDraws:
    membership: np.ndarray  # (n, K) lambda
    groups: np.ndarray      # (n, J) g, zero-based


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-derived generator: same (seed, key) -> same stream."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def sample_dataset(theta: ModelParams, n: int, rng_seed: int,
                   item_labels: Sequence[str] = ()) -> tuple[Dataset, LatentDraws]:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = make_rng(rng_seed)
    K, J = theta.K, theta.J
    lam = rng.dirichlet(theta.alpha, size=n) if K > 1 else np.ones((n, 1))
    u = rng.random((n, J))
    cum = np.cumsum(lam, axis=1)
    cum[:, -1] = 1.0
    g = (u[:, :, None] > cum[:, None, :]).sum(axis=2)
    p = theta.pi[np.arange(J)[None, :], g]
    x = (rng.random((n, J)) < p).astype(np.uint8)
    return Dataset(x, tuple(item_labels)), LatentDraws(lam, g)


def read_csv(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        labels = [h.strip() for h in header]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(labels):
                raise DataFormatError(
                    f"{path}:{line_no}: expected {len(labels)} fields, got {len(row)}")
            vals = []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell not in ("0", "1"):
                    raise DataFormatError(
                        f"{path}:{line_no}: column {col + 1} ({labels[col]}) is {cell!r}, expected 0 or 1")
                vals.append(int(cell))
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=np.uint8), tuple(labels), path.stem)


def write_csv(data: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(data.item_labels)
        w.writerows(data.x.tolist())


def read_params(path) -> ModelParams:
    with Path(path).open() as fh:
        obj = json.load(fh)
    if "theta" in obj:
        obj = obj["theta"]
    return ModelParams.from_json(obj)
