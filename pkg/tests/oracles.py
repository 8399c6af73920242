"""Independent reference implementations used as test oracles.

These deliberately avoid the library's own linear-algebra path: distances
come from scipy's cdist and solves from dense np.linalg routines.
"""

import numpy as np
from scipy.spatial.distance import cdist


def dense_gp_reference(X, y, variance, lengthscale, noise_variance,
                       queries, norm="l1"):
    """Direct dense GP posterior (full solve, no cached factorization)."""
    X = np.atleast_2d(np.asarray(X, float))
    queries = np.atleast_2d(np.asarray(queries, float))
    metric = "cityblock" if norm == "l1" else "euclidean"
    k_train = variance * np.exp(-cdist(X, X, metric) / lengthscale)
    k_noisy = k_train + noise_variance * np.eye(len(X))
    k_star = variance * np.exp(-cdist(X, queries, metric) / lengthscale)
    solved = np.linalg.solve(k_noisy, np.asarray(y, float))
    mean = k_star.T @ solved
    cov_reduction = k_star.T @ np.linalg.solve(k_noisy, k_star)
    var = variance - np.diag(cov_reduction)
    return mean, var


def sorted_median(values) -> float:
    """Plain sort-based median; even counts take the central-pair midpoint."""
    s = np.sort(np.asarray(values, float))
    mid = len(s) // 2
    return float(s[mid]) if len(s) % 2 else float((s[mid - 1] + s[mid]) / 2.0)
