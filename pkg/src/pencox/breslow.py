"""Cox partial-likelihood fit with the Breslow baseline estimator.

A deliberately separate code path from the full-likelihood core: risk sets
are built directly from ``(start, stop]`` intervals and nothing is shared
with the spline or quadrature machinery.  Used as a cross-check for the
coefficients and as the step-function comparator for the baseline hazard.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset


@dataclass
class BreslowFit:
    beta: np.ndarray
    event_times: np.ndarray
    jumps: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    sigma_b_sq: None = None

    def cumulative_hazard(self, t) -> np.ndarray:
        """Breslow step-function estimate of the cumulative baseline hazard."""
        t = np.asarray(t, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.jumps)])
        return cum[np.searchsorted(self.event_times, t, side="right")]

    def baseline_hazard(self, t) -> np.ndarray:
        """Derivative of the step function approximated by difference quotients.

        On ``(t_(k-1), t_(k)]`` the hazard is the jump at ``t_(k)`` divided by
        the gap to the previous distinct event time; zero after the last event.
        """
        t = np.asarray(t, dtype=float)
        prev = np.concatenate([[0.0], self.event_times[:-1]])
        rate = self.jumps / np.maximum(self.event_times - prev, 1e-300)
        k = np.searchsorted(self.event_times, t, side="left")
        out = np.zeros(t.shape)
        inside = k < self.event_times.size
        out[inside] = rate[k[inside]]
        return out


def fit_partial_likelihood(
    start,
    stop,
    event,
    X,
    max_iter: int = 50,
    tol: float = 1e-10,
) -> BreslowFit:
    """Newton-Raphson on the Breslow partial likelihood for counting-process data."""
    start = np.asarray(start, dtype=float)
    stop = np.asarray(stop, dtype=float)
    event = np.asarray(event, dtype=int)
    X = np.asarray(X, dtype=float)
    times = np.unique(stop[event == 1])
    # risk[k, e]: interval e at risk at the k-th distinct event time
    risk = (start[None, :] < times[:, None]) & (times[:, None] <= stop[None, :])
    risk = risk.astype(float)
    dead = (event[None, :] == 1) & (stop[None, :] == times[:, None])
    n_dead = dead.sum(axis=1).astype(float)
    x_dead = dead.astype(float) @ X

    beta = np.zeros(X.shape[1])

    def pieces(b):
        w = np.exp(X @ b)
        s0 = risk @ w
        s1 = risk @ (X * w[:, None])
        ll = float(np.sum(x_dead @ b) - n_dead @ np.log(s0))
        return w, s0, s1, ll

    w, s0, s1, ll = pieces(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = x_dead.sum(axis=0) - (n_dead / s0) @ s1
        weight = w * ((n_dead / s0) @ risk)
        hess = X.T @ (X * weight[:, None]) - s1.T @ (s1 * (n_dead / s0**2)[:, None])
        step = np.linalg.solve(hess, grad)
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            w_c, s0_c, s1_c, ll_c = pieces(cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, w, s0, s1 = cand, w_c, s0_c, s1_c
        change = abs(ll_c - ll)
        ll = ll_c
        if np.max(np.abs(t * step)) < tol or change < tol * max(1.0, abs(ll)):
            converged = True
            break
    return BreslowFit(
        beta=beta,
        event_times=times,
        jumps=n_dead / s0,
        loglik=ll,
        iterations=it,
        converged=converged,
    )


def fit_dataset(dataset: Dataset, columns=None) -> BreslowFit:
    """Partial-likelihood fit on the episode table of ``dataset``."""
    tab = dataset.table
    X = tab.X if columns is None else tab.X[:, [dataset.column(c) for c in columns]]
    return fit_partial_likelihood(tab.start, tab.stop, tab.event, X)
