"""Exponential-kernel Gaussian process regression.

Covariance k(a, b) = variance * exp(-||a - b||_1 / lengthscale), with the
L1 norm by default (an L2 switch exists for sensitivity studies).  The
kernel is non-smooth at zero distance, which suits fields that vary
sharply over short ranges.

Hyperparameters are optimized in log-space (positivity for free) by
maximizing the log marginal likelihood with analytic gradients and
multi-start L-BFGS-B.  The prior mean is zero: inputs are expected to be
background-normalized, which centers them near zero.

Predictions use the latent (noise-free) variance, since downstream
scores concern the underlying field rather than noisy re-measurements.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.linalg import cho_solve, cholesky, solve_triangular

from pmhotspot.errors import NumericalError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

# jitter escalation ladder, as fractions of the kernel variance
_JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True)
class KernelParams:
    """Exponential-kernel hyperparameters; all strictly positive."""

    variance: float
    lengthscale: float
    noise_variance: float

    def __post_init__(self):
        for name in ("variance", "lengthscale", "noise_variance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    def to_log_vector(self) -> np.ndarray:
        return np.log([self.variance, self.lengthscale, self.noise_variance])

    @staticmethod
    def from_log_vector(v: np.ndarray) -> "KernelParams":
        return KernelParams(*np.exp(v))


@dataclass(frozen=True)
class Prediction:
    """Posterior mean and latent variance at one query point."""

    mean: float
    variance: float


def pairwise_distances(a: np.ndarray, b: np.ndarray, norm: str = "l1") -> np.ndarray:
    """(n, m) distance matrix between rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    diff = a[:, None, :] - b[None, :, :]
    if norm == "l1":
        return np.abs(diff).sum(axis=2)
    if norm == "l2":
        return np.sqrt((diff ** 2).sum(axis=2))
    raise ValueError(f"unknown norm {norm!r}")


def kernel_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams,
                  norm: str = "l1") -> np.ndarray:
    return params.variance * np.exp(-pairwise_distances(a, b, norm) / params.lengthscale)


def kernel(a, b, params: KernelParams, norm: str = "l1") -> float:
    """Covariance between two points (accepts LocalXY or length-2 sequences)."""
    av = np.array([(a.x, a.y)] if hasattr(a, "x") else [a], dtype=float)
    bv = np.array([(b.x, b.y)] if hasattr(b, "x") else [b], dtype=float)
    return float(kernel_matrix(av, bv, params, norm)[0, 0])


def _factorize(k_noisy: np.ndarray, variance: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor with escalating jitter; jitter use is logged."""
    n = k_noisy.shape[0]
    for frac in _JITTER_LADDER:
        jitter = frac * variance
        try:
            L = cholesky(k_noisy + jitter * np.eye(n) if jitter else k_noisy, lower=True)
        except np.linalg.LinAlgError:
            continue
        if jitter:
            logger.warning("covariance factorization needed jitter %.3g "
                           "(%.0e of kernel variance)", jitter, frac)
        return L, jitter
    raise NumericalError(
        f"covariance matrix of size {n} not factorizable even with jitter "
        f"{_JITTER_LADDER[-1]:.0e} * variance")


class GPModel:
    """A fitted GP: hyperparameters plus cached factorization of the data fit.

    ``factor`` is the lower Cholesky factor of K(X, X) + noise * I and
    ``alpha`` solves (K + noise * I) alpha = y.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, params: KernelParams,
                 norm: str = "l1", lml: float | None = None):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float)
        self.params = params
        self.norm = norm
        k_noisy = kernel_matrix(self.X, self.X, params, norm)
        np.fill_diagonal(k_noisy, params.variance + params.noise_variance)
        self.factor, self.jitter = _factorize(k_noisy, params.variance)
        self.alpha = cho_solve((self.factor, True), self.y)
        if lml is None:
            lml = (-0.5 * float(self.y @ self.alpha)
                   - float(np.sum(np.log(np.diag(self.factor))))
                   - 0.5 * len(self.y) * LOG_2PI)
        self.lml = lml

    @property
    def n_training(self) -> int:
        return self.X.shape[0]


def log_marginal_likelihood(
    X: np.ndarray, y: np.ndarray, params: KernelParams, norm: str = "l1",
) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient w.r.t. the log-parameters.

    Returns (lml, d lml / d log[variance, lengthscale, noise_variance]).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    dist = pairwise_distances(X, X, norm)
    k_plain = params.variance * np.exp(-dist / params.lengthscale)
    k_noisy = k_plain + params.noise_variance * np.eye(n)
    L, jitter = _factorize(k_noisy, params.variance)
    alpha = cho_solve((L, True), y)

    lml = (-0.5 * float(y @ alpha)
           - float(np.sum(np.log(np.diag(L))))
           - 0.5 * n * LOG_2PI)

    k_inv = cho_solve((L, True), np.eye(n))
    # d lml / d theta = 0.5 alpha^T dK alpha - 0.5 tr(K^-1 dK), with dK the
    # derivative of the noisy covariance w.r.t. each log-parameter
    inner = np.outer(alpha, alpha) - k_inv
    d_variance = k_plain
    d_lengthscale = k_plain * (dist / params.lengthscale)
    grad = np.array([
        0.5 * float(np.sum(inner * d_variance)),
        0.5 * float(np.sum(inner * d_lengthscale)),
        0.5 * params.noise_variance * float(np.trace(inner)),
    ])
    return lml, grad


def default_init(X: np.ndarray, y: np.ndarray, norm: str = "l1") -> KernelParams:
    """Heuristic starting point: data variance and median pairwise distance."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    var_y = max(float(np.var(y)), 1e-6)
    if X.shape[0] > 500:
        idx = np.linspace(0, X.shape[0] - 1, 500).astype(int)
        sample = X[idx]
    else:
        sample = X
    dist = pairwise_distances(sample, sample, norm)
    off_diag = dist[np.triu_indices_from(dist, k=1)]
    positive = off_diag[off_diag > 0]
    lengthscale = float(np.median(positive)) if positive.size else 1.0
    return KernelParams(variance=var_y, lengthscale=max(lengthscale, 1e-6),
                        noise_variance=0.1 * var_y)


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings for hyperparameter fitting."""

    restarts: int = 3
    max_iter: int = 200
    grad_tol: float = 1e-6
    seed: int = 0
    log_bounds: tuple[float, float] = (-30.0, 30.0)


def fit(
    X: np.ndarray,
    y: np.ndarray,
    init: KernelParams | None = None,
    opts: FitOptions = FitOptions(),
    norm: str = "l1",
    optimize_params: bool = True,
) -> GPModel:
    """Fit hyperparameters by multi-start L-BFGS-B on the log marginal likelihood.

    With ``optimize_params=False`` the model is built directly at ``init``
    (which is then required), skipping optimization.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if not optimize_params:
        if init is None:
            raise ValueError("optimize_params=False requires explicit init params")
        return GPModel(X, y, init, norm)
    if X.shape[0] < 2:
        raise ValueError("hyperparameter optimization needs at least 2 points")

    start = (init or default_init(X, y, norm)).to_log_vector()
    rng = np.random.default_rng(opts.seed)
    lo, hi = opts.log_bounds
    starts = [start]
    for _ in range(max(opts.restarts - 1, 0)):
        starts.append(np.clip(start + rng.normal(0.0, 1.0, size=3), lo, hi))

    def objective(log_params: np.ndarray) -> tuple[float, np.ndarray]:
        lml, grad = log_marginal_likelihood(
            X, y, KernelParams.from_log_vector(log_params), norm)
        return -lml, -grad

    best: tuple[float, np.ndarray] | None = None
    failures: list[str] = []
    for s in starts:
        try:
            result = optimize.minimize(
                objective, np.clip(s, lo, hi), jac=True, method="L-BFGS-B",
                bounds=[(lo, hi)] * 3,
                options={"maxiter": opts.max_iter, "gtol": opts.grad_tol,
                         "ftol": 1e-13},
            )
        except NumericalError as exc:
            failures.append(str(exc))
            continue
        if best is None or -result.fun > best[0]:
            best = (-result.fun, result.x)
    if best is None:
        raise NumericalError(
            "all optimizer starts failed factorization: " + "; ".join(failures))
    lml, log_params = best
    return GPModel(X, y, KernelParams.from_log_vector(log_params), norm, lml=lml)


def predict(model: GPModel, queries: np.ndarray, chunk_size: int = 4096,
            ) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and latent variance at each query point.

    The variance excludes the observation noise; it lies in
    [0, kernel variance] up to rounding.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    n_q = queries.shape[0]
    mean = np.empty(n_q)
    var = np.empty(n_q)
    for start in range(0, n_q, chunk_size):
        stop = min(start + chunk_size, n_q)
        k_star = kernel_matrix(model.X, queries[start:stop], model.params, model.norm)
        mean[start:stop] = k_star.T @ model.alpha
        v = solve_triangular(model.factor, k_star, lower=True)
        var[start:stop] = model.params.variance - np.sum(v * v, axis=0)
    np.clip(var, 0.0, None, out=var)
    return mean, var


def predict_point(model: GPModel, point) -> Prediction:
    """Single-point convenience wrapper around :func:`predict`."""
    q = np.array([(point.x, point.y)] if hasattr(point, "x") else [point], dtype=float)
    mean, var = predict(model, q)
    return Prediction(mean=float(mean[0]), variance=float(var[0]))
