"""Adaptive weights, regularization paths and cluster-wise cross-validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DataError, Dataset
from .estimator import BlockSolver, FitResult, FitSettings, SingularFisherError, fit, loglik_gradient_beta
from .likelihood import Design, ModelSpec, NumericError, ParameterState, PenaltyConfig, evaluate_model

log = logging.getLogger(__name__)

WEIGHT_CAP = 1e6
RIDGE_FALLBACK = 1e-4


def adaptive_weights(
    design: Design,
    settings: FitSettings | None = None,
    ridge: float = RIDGE_FALLBACK,
    max_condition: float = 1e12,
) -> np.ndarray:
    """``w_g = 1 / ||beta_g^ML||`` from an unpenalized fit (standardized scale).

    Falls back to a slightly ridge-penalized fit when the unpenalized one
    fails or its information matrix is ill-conditioned.  Weights are capped
    at ``1e6``; unpenalized groups get weight 1 (unused).
    """
    settings = settings or FitSettings()
    result = None
    try:
        result = fit(design, pen=design.penalty(0.0), settings=settings)
        cond = np.linalg.cond(BlockSolver(result.curvature).S)
        if not np.all(np.isfinite(result.params.beta)) or cond > max_condition:
            log.info("unpenalized fit ill-conditioned (cond %.3g); using ridge fallback", cond)
            result = None
    except (SingularFisherError, NumericError, np.linalg.LinAlgError):
        result = None
    if result is None:
        try:
            result = fit(design, pen=design.penalty(0.0, ridge=ridge), settings=settings)
        except (SingularFisherError, NumericError, np.linalg.LinAlgError) as exc:
            raise RuntimeError("unpenalized fit diverged even with ridge fallback") from exc
        if not np.all(np.isfinite(result.params.beta)):
            raise RuntimeError("unpenalized fit diverged even with ridge fallback")
    return weights_from_coefficients(result.params.beta, design.groups, design.penalized)


def weights_from_coefficients(beta, groups, penalized=None, cap: float = WEIGHT_CAP) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    w = np.ones(len(groups))
    for g, idx in enumerate(groups):
        if penalized is not None and not penalized[g]:
            continue
        norm = float(np.linalg.norm(beta[idx]))
        w[g] = cap if norm <= 1.0 / cap else min(1.0 / norm, cap)
    return w


def _all_out(result: FitResult) -> bool:
    return len(result.selected) == 0


def make_grid(
    design: Design,
    pen_base: PenaltyConfig,
    length: int = 30,
    settings: FitSettings | None = None,
    ratio: float = 1e-3,
) -> np.ndarray:
    """Descending log-spaced grid from ``xi_max`` down to ``ratio * xi_max``.

    ``xi_max`` is the smallest tested value (by doubling / halving from a
    gradient-based first guess) at which every penalized group is selected out.
    """
    if length < 2:
        raise ValueError("grid length must be at least 2")
    settings = settings or FitSettings()
    xi = _first_guess(design, pen_base, settings)
    res = fit(design, pen=pen_base.with_xi(xi), settings=settings)
    if _all_out(res):
        for _ in range(60):
            lower = xi / 2.0
            if not _all_out(fit(design, pen=pen_base.with_xi(lower), settings=settings)):
                break
            xi = lower
    else:
        for _ in range(60):
            xi *= 2.0
            if _all_out(fit(design, pen=pen_base.with_xi(xi), settings=settings)):
                break
    return np.geomspace(xi, xi * ratio, length)


def _first_guess(design: Design, pen_base: PenaltyConfig, settings: FitSettings) -> float:
    """Lasso entry value of the strongest group at the null model (penalized groups at zero)."""
    null = fit(design, pen=pen_base.with_xi(1e12), settings=settings)
    grad = loglik_gradient_beta(null.params, design, pen_base)
    ratios = [
        np.linalg.norm(grad[idx]) / (pen_base.weights[g] * np.sqrt(len(idx)))
        for g, idx in enumerate(pen_base.groups)
        if pen_base.penalized[g]
    ]
    guess = max(ratios) if ratios else 1.0
    return float(guess) if guess > 0 else 1.0


@dataclass
class PathResult:
    grid: np.ndarray
    coef_paths: np.ndarray  # (len(grid), p), original scale
    columns: tuple
    group_names: tuple
    selection_counts: np.ndarray
    objectives: np.ndarray
    converged: np.ndarray
    fits: list = field(default_factory=list, repr=False)

    def rows(self):
        """Long-format ``(xi, column, group, coefficient)`` records."""
        groups = {}
        for name, col in zip(self.group_names, self.columns):
            groups[col] = name
        for g, xi in enumerate(self.grid):
            for j, col in enumerate(self.columns):
                yield float(xi), col, groups.get(col, col), float(self.coef_paths[g, j])


def path(
    design: Design,
    pen_base: PenaltyConfig,
    grid,
    settings: FitSettings | None = None,
    keep_fits: bool = False,
) -> PathResult:
    """Fits along a descending ``grid`` with warm starts."""
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) >= 0):
        raise ValueError("grid must be strictly descending")
    settings = settings or FitSettings()
    start = None
    coefs, counts, objs, conv, fits = [], [], [], [], []
    for xi in grid:
        res = fit(design, pen=pen_base.with_xi(xi), settings=settings, start=start)
        if not res.converged:
            log.warning("path point xi=%.4g did not converge", xi)
        start = res.params
        coefs.append(res.beta)
        counts.append(len(res.selected))
        objs.append(res.objective)
        conv.append(res.converged)
        if keep_fits:
            fits.append(res)
    col_groups = []
    for g, idx in enumerate(design.groups):
        col_groups.extend([design.group_names[g]] * len(idx))
    return PathResult(
        grid=grid,
        coef_paths=np.array(coefs).reshape(grid.size, design.p),
        columns=design.columns,
        group_names=tuple(col_groups),
        selection_counts=np.array(counts),
        objectives=np.array(objs),
        converged=np.array(conv),
        fits=fits,
    )


@dataclass
class CvResult:
    grid: np.ndarray
    cv_error: np.ndarray
    cv_se: np.ndarray
    fold_loss: np.ndarray  # (K, len(grid))
    xi_opt: float
    xi_1se: float
    fold_assignment: dict


def fold_assignment(cluster_ids, K: int, seed: int) -> dict:
    """Deterministic map cluster id -> fold, from ``(seed, cluster ids)`` only."""
    ids = sorted(cluster_ids, key=lambda c: (str(type(c)), c))
    perm = np.random.default_rng(seed).permutation(len(ids))
    return {ids[j]: int(k % K) for k, j in enumerate(perm)}


def heldout_loss(result: FitResult, design: Design) -> float:
    """Negative full log-likelihood of ``design`` with frailties at zero."""
    alpha, beta = design.from_original(result.alpha, result.beta)
    params = ParameterState(
        alpha=alpha,
        beta=beta,
        b=np.zeros((0, design.r)),
        zeta=result.params.zeta,
    )
    return -evaluate_model(params, design).loglik


def cross_validate(
    dataset: Dataset,
    model: ModelSpec,
    weights,
    grid,
    K: int = 5,
    seed: int = 0,
    settings: FitSettings | None = None,
    basis=None,
    c: float | None = None,
) -> CvResult:
    """K-fold cross-validation over clusters.

    Every fold is fitted along ``grid`` with warm starts, using the given
    (full-data) adaptive ``weights``; the held-out loss is the negative full
    log-likelihood of the held-out clusters with frailties set to zero.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if dataset.n < K:
        raise DataError(f"need at least K={K} clusters, have {dataset.n}")
    settings = settings or FitSettings()
    grid = np.asarray(grid, dtype=float)
    full = Design(dataset, model, basis=basis)
    basis = full.basis

    events = {}
    for s in dataset.subjects:
        events[s.cluster_id] = events.get(s.cluster_id, 0) + s.event
    assignment = None
    for attempt in range(2):
        candidate = fold_assignment(dataset.clusters, K, seed + attempt)
        per_fold = np.zeros(K)
        for cid, k in candidate.items():
            per_fold[k] += events[cid]
        if np.all(per_fold > 0):
            assignment = candidate
            break
        log.warning("fold without events (seed %d); re-randomizing", seed + attempt)
    if assignment is None:
        raise DataError("a cross-validation fold has no events after re-randomization")

    losses = np.zeros((K, grid.size))
    for k in range(K):
        train_ids = [c for c in dataset.clusters if assignment[c] != k]
        test_ids = [c for c in dataset.clusters if assignment[c] == k]
        train = Design(dataset.subset(train_ids), model, basis=basis)
        test = Design(dataset.subset(test_ids), replace(model, frailty=False), basis=basis)
        pen = train.penalty(0.0, weights=weights, c=c if c is not None else full.penalty().c)
        pr = path(train, pen, grid, settings, keep_fits=True)
        for g, res in enumerate(pr.fits):
            losses[k, g] = heldout_loss(res, test)

    cv_error = losses.mean(axis=0)
    cv_se = losses.std(axis=0, ddof=1) / np.sqrt(K)
    xi_opt, xi_1se = one_se_rule(grid, cv_error, cv_se)
    return CvResult(
        grid=grid,
        cv_error=cv_error,
        cv_se=cv_se,
        fold_loss=losses,
        xi_opt=xi_opt,
        xi_1se=xi_1se,
        fold_assignment=assignment,
    )


def one_se_rule(grid, cv_error, cv_se) -> tuple[float, float]:
    """``(xi_opt, xi_1se)``: the CV minimizer and the largest xi within one SE of it."""
    grid = np.asarray(grid, dtype=float)
    cv_error = np.asarray(cv_error, dtype=float)
    opt = int(np.argmin(cv_error))
    within = np.flatnonzero(cv_error <= cv_error[opt] + np.asarray(cv_se, dtype=float)[opt])
    return float(grid[opt]), float(np.max(grid[within]))
