"""Exact Kalman filter for the linear-Gaussian test models."""

import numpy as np


def kalman_means(A, H, Q, R, m0, P0, observations):
    """Posterior means and covariances with the forecast-then-analysis timing of the filters."""
    m, P = np.asarray(m0, dtype=float), np.asarray(P0, dtype=float)
    means, covs = [], []
    for y in observations:
        m, P = A @ m, A @ P @ A.T + Q
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        m = m + K @ (y - H @ m)
        P = P - K @ H @ P
        means.append(m)
        covs.append(P)
    return np.array(means), np.array(covs)
