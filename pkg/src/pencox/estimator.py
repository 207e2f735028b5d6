"""Newton-Raphson fitting at fixed lasso strength.

The fit alternates an inner Newton loop over ``(beta, alpha, b)`` (local
quadratic approximation of the lasso, step halving) with closed-form
updates of the frailty covariance ``Q`` and the smoothing parameters
``zeta``.  Penalized groups whose lasso optimality condition holds at zero
are held exactly at zero (selected out) and released again when that
condition is violated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .data import DataError, Dataset
from .quadrature import EtaEvaluator, QuadratureRule, quadrature_nodes
from .likelihood import (
    Design,
    FrailtyCovariance,
    Information,
    ModelSpec,
    NumericError,
    ParameterState,
    PenaltyConfig,
    evaluate_model,
    information,
    lasso_matrix,
    penalized_loglik,
    score,
)

log = logging.getLogger(__name__)

# relative size of rounding noise in the penalized objective
NOISE_REL = 1e-10


class SingularFisherError(np.linalg.LinAlgError):
    """The penalized information matrix could not be factorized."""


@dataclass(frozen=True)
class FitSettings:
    max_outer: int = 100
    max_newton: int = 50
    tol_params: float = 1e-6
    tol_grad: float = 1e-5
    step_halving_max: int = 10
    ridge_jitter: float = 1e-8
    select_threshold: float = 1e-4
    zeta_init: float = 1e3
    zeta_bounds: tuple = (1e-6, 1e8)
    q_init: float = 0.1
    update_zeta: bool = True
    update_q: bool = True
    curve_points: int = 200
    lasso_curvature: str = "exact"

    def __post_init__(self):
        if min(self.tol_params, self.tol_grad, self.ridge_jitter) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    """Outcome of :func:`fit`.

    ``params`` are on the internal standardized scale; ``beta`` and
    ``alpha`` are on the original covariate scale.
    """

    params: ParameterState
    design: Design
    penalty: PenaltyConfig
    beta: np.ndarray
    alpha: np.ndarray
    selected: tuple
    selected_out: tuple
    curvature: Information
    objective: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)

    @property
    def sigma_b_sq(self):
        if self.params.frailty is None:
            return None
        return np.diag(self.params.frailty.Q).copy()

    @property
    def Q(self):
        return None if self.params.frailty is None else self.params.frailty.Q

    @property
    def coef(self) -> dict:
        return dict(zip(self.design.columns, self.beta))

    def baseline_log_hazard(self, t) -> np.ndarray:
        return self.design.basis.design(t) @ self.alpha[0]

    def baseline_hazard(self, t) -> np.ndarray:
        return np.exp(self.baseline_log_hazard(t))

    def tv_effect(self, k: int, t) -> np.ndarray:
        return self.design.basis.design(t) @ self.alpha[1 + k]

    def curve_grid(self, points: int | None = None) -> np.ndarray:
        return np.linspace(0.0, self.design.basis.t_max, points or 200)

    @property
    def baseline_curve(self):
        t = self.curve_grid()
        return t, self.baseline_hazard(t)

    @property
    def tv_curves(self):
        t = self.curve_grid()
        return t, np.array([self.tv_effect(k, t) for k in range(self.design.K)])

    @property
    def posterior_curvatures(self) -> np.ndarray:
        """``V_{b_i b_i}``: diagonal blocks of the inverse information."""
        return frailty_posterior_cov(self.curvature)

    def cumulative_hazard(self, t, x=None, z=None, b=None) -> np.ndarray:
        """Cumulative hazard at times ``t`` for time-constant covariates (original scale)."""
        return cumulative_hazard_curve(self.design.basis, self.alpha, self.beta, t, x, z, b)

    def survival(self, t, x=None, z=None, b=None) -> np.ndarray:
        return np.exp(-self.cumulative_hazard(t, x, z, b))

    def summary(self) -> dict:
        out = {
            "coefficients": {k: float(v) for k, v in self.coef.items()},
            "selected": list(self.selected),
            "selected_out": list(self.selected_out),
            "xi": float(self.penalty.xi),
            "weights": dict(zip(self.design.group_names, map(float, self.penalty.weights))),
            "zeta": [float(z) for z in self.params.zeta],
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "alpha": [[float(a) for a in row] for row in self.alpha],
            "knots": [float(k) for k in self.design.basis.knots],
            "degree": int(self.design.basis.degree),
            "tv": list(self.design.tv_names),
        }
        if self.params.frailty is not None:
            out["sigma_b_sq"] = [float(v) for v in self.sigma_b_sq]
            out["Q"] = self.Q.tolist()
        else:
            out["sigma_b_sq"] = None
        return out


def cumulative_hazard_curve(basis, alpha, beta, t, x=None, z=None, b=None) -> np.ndarray:
    """``int_0^t exp(eta(s)) ds`` for fixed covariates ``x`` and ``z`` and frailty offset ``b``.

    ``alpha`` has one row for the baseline and one per time-varying term.
    """
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    beta = np.asarray(beta, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.zeros(beta.size) if x is None else np.asarray(x, dtype=float)
    z = np.zeros(alpha.shape[0] - 1) if z is None else np.asarray(z, dtype=float)
    eta = EtaEvaluator(basis, alpha, beta, z)
    offset = 0.0 if b is None else float(np.ravel(b)[0])
    rule = QuadratureRule.gauss_legendre()
    grid = np.unique(np.concatenate([[0.0], t]))
    owner, s, w = quadrature_nodes(grid[:-1], grid[1:], basis.breakpoints, rule)
    pieces = np.bincount(owner, w * np.exp(eta(s, x) + offset), minlength=grid.size - 1)
    cum = np.concatenate([[0.0], np.cumsum(pieces)])
    return cum[np.searchsorted(grid, t)]


def initialize(design: Design, settings: FitSettings | None = None) -> ParameterState:
    """Starting values: zero effects, constant baseline at the exponential-model MLE."""
    settings = settings or FitSettings()
    events = design.event.sum()
    exposure = float(np.sum(design.stop - design.start))
    if exposure <= 0:
        raise DataError("zero total exposure time")
    rate = max(events, 0.5) / exposure
    alpha = np.zeros((1 + design.K, design.basis.M))
    alpha[0] = np.log(rate)
    frailty = None
    b = np.zeros((0, design.r))
    if design.frailty:
        frailty = FrailtyCovariance(settings.q_init * np.eye(design.r))
        b = np.zeros((design.n_clusters, design.r))
    return ParameterState(
        alpha=alpha,
        beta=np.zeros(design.p),
        b=b,
        zeta=np.full(1 + design.K, float(settings.zeta_init)),
        frailty=frailty,
    )


def _factor(S: np.ndarray, jitter: float):
    """Cholesky factor of ``S``, adding escalating ridge jitter if needed."""
    scale = max(1.0, float(np.mean(np.abs(np.diag(S)))))
    for attempt in range(4):
        try:
            add = 0.0 if attempt == 0 else jitter * scale * 100.0 ** (attempt - 1)
            return linalg.cho_factor(S + add * np.eye(S.shape[0]), lower=True), add
        except linalg.LinAlgError:
            continue
    raise SingularFisherError(
        f"information matrix singular after 3 jitter escalations (diag range "
        f"{np.min(np.diag(S)):.3g} .. {np.max(np.diag(S)):.3g})"
    )


def _mask(info: Information, frozen: np.ndarray) -> Information:
    if not frozen.size:
        return info
    G = info.G.copy()
    G[frozen, :] = 0.0
    G[:, frozen] = 0.0
    G[frozen, frozen] = 1.0
    C = info.C.copy()
    C[:, frozen, :] = 0.0
    return Information(G=G, C=C, B=info.B)


@dataclass
class BlockSolver:
    """Solves with ``-F`` using its block-arrow structure."""

    info: Information
    jitter: float = 1e-8

    def __post_init__(self):
        self.S, self.B_inv = self.info.schur()
        self.chol, self.jitter_used = _factor(self.S, self.jitter)

    def solve(self, rhs_f: np.ndarray, rhs_b: np.ndarray):
        C, B_inv = self.info.C, self.B_inv
        if self.info.n_clusters:
            tmp = np.einsum("irs,is->ir", B_inv, rhs_b)
            reduced = rhs_f - np.einsum("ifr,ir->f", C, tmp)
        else:
            reduced = rhs_f
        x_f = linalg.cho_solve(self.chol, reduced)
        if self.info.n_clusters:
            x_b = np.einsum("irs,is->ir", B_inv, rhs_b - np.einsum("ifr,f->ir", C, x_f))
        else:
            x_b = np.zeros_like(rhs_b)
        return x_f, x_b

    def fixed_inverse(self) -> np.ndarray:
        """Fixed-effect block of the full inverse (inverse Schur complement)."""
        return linalg.cho_solve(self.chol, np.eye(self.S.shape[0]))


def frailty_posterior_cov(info: Information, S_inv: np.ndarray | None = None) -> np.ndarray:
    """``V_ii = B_i^-1 + B_i^-1 C_i' S^-1 C_i B_i^-1`` for every cluster."""
    if info.n_clusters == 0:
        return np.zeros((0, 0, 0))
    S, B_inv = info.schur()
    if S_inv is None:
        S_inv = np.linalg.inv(S)
    W = np.einsum("irs,ifs->irf", B_inv, info.C)  # B_i^-1 C_i'
    return B_inv + np.einsum("irf,fg,isg->irs", W, S_inv, W)


def _group_index(pen: PenaltyConfig, groups) -> np.ndarray:
    if not len(groups):
        return np.zeros(0, dtype=int)
    return np.concatenate([pen.groups[g] for g in groups]).astype(int)


@dataclass
class StepReport:
    objective: float
    score_norm: float
    step_norm: float
    halvings: int
    accepted: bool
    predicted_gain: float = 0.0

    def stationary(self, tol_grad: float) -> bool:
        """Score below ``tol_grad``, or the remaining gain is below rounding noise."""
        noise = NOISE_REL * max(1.0, abs(self.objective))
        return self.score_norm < tol_grad or (not self.accepted and self.predicted_gain <= noise)


def newton_step(
    params: ParameterState,
    design: Design,
    pen: PenaltyConfig,
    settings: FitSettings | None = None,
    frozen=(),
):
    """One damped Newton-Raphson step; returns ``(new_params, StepReport)``.

    ``frozen`` lists penalized groups held at zero.  The step is halved
    until the penalized objective does not decrease.
    """
    settings = settings or FitSettings()
    fz = _group_index(pen, frozen)
    ev = evaluate_model(params, design)
    obj = penalized_loglik(params, design, pen, ev)
    sc = score(params, design, pen, ev)
    s_f = np.concatenate([sc.beta, sc.alpha])
    s_f[fz] = 0.0
    info = _mask(information(params, design, pen, ev, lasso_curvature=settings.lasso_curvature), fz)
    solver = BlockSolver(info, settings.ridge_jitter)
    d_f, d_b = solver.solve(s_f, sc.b)
    direction = np.concatenate([d_f, d_b.ravel()])
    grad_norm = float(np.max(np.abs(np.concatenate([s_f, sc.b.ravel()])), initial=0.0))
    gain = 0.5 * float(np.concatenate([s_f, sc.b.ravel()]) @ direction)

    v0 = params.vector()
    tol = 1e-12 * max(1.0, abs(obj))
    t = 1.0
    for halving in range(settings.step_halving_max + 1):
        cand = params.with_vector(v0 + t * direction)
        try:
            new_obj = penalized_loglik(cand, design, pen)
        except NumericError:
            new_obj = -np.inf
        if new_obj >= obj - tol:
            return cand, StepReport(new_obj, grad_norm, float(t * np.linalg.norm(direction)), halving, True, gain)
        t *= 0.5
    return params, StepReport(obj, grad_norm, 0.0, settings.step_halving_max, False, gain)


def update_variance(params: ParameterState, info: Information) -> FrailtyCovariance:
    """``Q = mean_i (V_ii + b_i b_i')`` with eigenvalues floored at 1e-8."""
    V = frailty_posterior_cov(info)
    Q = np.mean(V + np.einsum("ir,is->irs", params.b, params.b), axis=0)
    Q = 0.5 * (Q + Q.T)
    vals, vecs = np.linalg.eigh(Q)
    vals = np.maximum(vals, 1e-8)
    return FrailtyCovariance((vecs * vals) @ vecs.T)


def update_smoothing(
    params: ParameterState,
    S_inv_alpha: np.ndarray,
    P: np.ndarray,
    bounds: tuple = (1e-6, 1e8),
) -> np.ndarray:
    """Variance-component (Schall-type) update of the smoothing parameters.

    ``sigma_k^2 = a_k' P a_k / (rank(P) - zeta_k tr(Hinv_kk P))`` and
    ``zeta_k = 1 / sigma_k^2``, where ``Hinv_kk`` is the block of the
    inverse penalized information belonging to smooth term ``k``.
    """
    M = P.shape[0]
    rank = np.linalg.matrix_rank(P)
    zeta = params.zeta.copy()
    for k in range(zeta.size):
        a = params.alpha[k]
        quad = float(a @ P @ a)
        if quad <= 1e-14 * max(1.0, float(a @ a)) or rank == 0:
            continue
        block = S_inv_alpha[k * M : (k + 1) * M, k * M : (k + 1) * M]
        edf = rank - zeta[k] * float(np.sum(block * P))
        edf = max(edf, 1e-8)
        zeta[k] = float(np.clip(edf / quad, *bounds))
    return zeta


def _kkt_holds(grad: np.ndarray, pen: PenaltyConfig, g: int) -> bool:
    idx = pen.groups[g]
    bound = pen.xi * pen.weights[g] * np.sqrt(len(idx))
    return float(np.linalg.norm(grad[idx])) <= bound


def loglik_gradient_beta(params, design, pen, ev=None) -> np.ndarray:
    """Gradient of the unpenalized log-likelihood with respect to ``beta``."""
    sc = score(params, design, pen, ev)
    return sc.beta + lasso_matrix(params.beta, pen) @ params.beta


def _refresh_active_set(params, design, pen, frozen: set, settings: FitSettings):
    """Freeze groups satisfying the zero-optimality condition; seed violators.

    Returns ``(params, frozen, changed)``.
    """
    beta = params.beta.copy()
    candidates = [
        g
        for g, idx in enumerate(pen.groups)
        if pen.penalized[g]
        and pen.xi != 0.0
        and (g in frozen or np.linalg.norm(beta[idx]) < settings.select_threshold)
    ]
    # zero-optimality is judged at the point with all candidate groups at zero
    for g in candidates:
        beta[pen.groups[g]] = 0.0
    params_zero = replace(params, beta=beta.copy())
    ev = evaluate_model(params_zero, design)
    grad = loglik_gradient_beta(params_zero, design, pen, ev)
    active = [g for g, idx in enumerate(pen.groups) if pen.penalized[g] and pen.xi != 0.0 and g not in candidates]
    info = information(params, design, pen) if candidates or active else None
    frozen = set(frozen)
    changed = False
    for g, idx in enumerate(pen.groups):
        if g in active:
            # score at beta_g = 0 to first order; the smoothed penalty alone
            # keeps such groups at a small nonzero value
            block = info.G[np.ix_(idx, idx)] - lasso_matrix(params.beta, pen)[np.ix_(idx, idx)]
            shifted = grad.copy()
            shifted[idx] += block @ beta[idx]
            if _kkt_holds(shifted, pen, g):
                changed = True
                frozen.add(g)
                beta[idx] = 0.0
        elif g in candidates:
            if _kkt_holds(grad, pen, g):
                if g not in frozen or np.any(beta[idx] != 0):
                    changed = True
                frozen.add(g)
                beta[idx] = 0.0
            elif g not in frozen and np.any(params.beta[idx] != 0):
                beta[idx] = params.beta[idx]
            else:
                if g in frozen:
                    changed = True
                frozen.discard(g)
                # soft-thresholded Newton step from zero
                gg = grad[idx]
                norm = np.linalg.norm(gg)
                bound = pen.xi * pen.weights[g] * np.sqrt(len(idx))
                curv = np.diag(info.G)[idx] - np.diag(lasso_matrix(params.beta, pen))[idx]
                beta[idx] = (1.0 - bound / norm) * gg / np.maximum(curv, 1e-8)
    return replace(params, beta=beta), frozen, changed


def fit(
    data,
    model: ModelSpec | None = None,
    pen: PenaltyConfig | float | None = None,
    settings: FitSettings | None = None,
    *,
    start: ParameterState | None = None,
    basis=None,
) -> FitResult:
    """Fit the penalized full-likelihood model at fixed ``xi``.

    Parameters
    ----------
    data : Dataset or Design
    model : ModelSpec, optional
        Ignored when ``data`` is already a :class:`Design`.
    pen : PenaltyConfig or float, optional
        A bare number is taken as ``xi`` with unit weights.
    settings : FitSettings, optional
    start : ParameterState, optional
        Warm start (internal scale of ``data``).
    """
    settings = settings or FitSettings()
    design = data if isinstance(data, Design) else Design(data, model, basis=basis)
    if pen is None:
        pen = design.penalty(0.0)
    elif not isinstance(pen, PenaltyConfig):
        pen = design.penalty(float(pen))
    params = start if start is not None else initialize(design, settings)
    if design.frailty and params.frailty is None:
        params = replace(
            params,
            frailty=FrailtyCovariance(settings.q_init * np.eye(design.r)),
            b=np.zeros((design.n_clusters, design.r)),
        )

    frozen: set = set()
    params, frozen, _ = _refresh_active_set(params, design, pen, frozen, settings)
    trace = []
    iterations = 0
    converged = False
    prev = params.vector()
    stationary = False
    for outer in range(settings.max_outer):
        for _ in range(settings.max_newton):
            params, rep = newton_step(params, design, pen, settings, sorted(frozen))
            iterations += 1
            trace.append(rep.objective)
            stationary = rep.stationary(settings.tol_grad)
            params, frozen, changed = _refresh_active_set(params, design, pen, frozen, settings)
            if changed:
                stationary = False
                continue
            if stationary or not rep.accepted:
                break
            if rep.step_norm < 1e-3 * settings.tol_params * max(1.0, np.linalg.norm(prev)):
                break

        current = params.vector()
        change = np.linalg.norm(current - prev) / max(np.linalg.norm(prev), 1e-12)
        if outer > 0 and change < settings.tol_params and stationary:
            converged = True
            break
        prev = current

        ev = evaluate_model(params, design)
        info = _mask(information(params, design, pen, ev), _group_index(pen, sorted(frozen)))
        solver = BlockSolver(info, settings.ridge_jitter)
        updates = {}
        if design.frailty and settings.update_q:
            updates["frailty"] = update_variance(params, info)
        if settings.update_zeta:
            S_inv = solver.fixed_inverse()
            updates["zeta"] = update_smoothing(params, S_inv[design.p :, design.p :], design.P, settings.zeta_bounds)
        if not updates:
            converged = True
            break
        params = replace(params, **updates)

    ev = evaluate_model(params, design)
    obj = penalized_loglik(params, design, pen, ev)
    fz = _group_index(pen, sorted(frozen))
    info = _mask(information(params, design, pen, ev), fz)
    sc = score(params, design, pen, ev)
    s_all = np.concatenate([np.delete(sc.beta, fz), sc.alpha, sc.b.ravel()])
    if converged and np.max(np.abs(s_all), initial=0.0) >= settings.tol_grad:
        # accept only a point where no further ascent is numerically detectable
        _, rep = newton_step(params, design, pen, settings, sorted(frozen))
        converged = rep.stationary(settings.tol_grad) and not rep.accepted
    if not converged:
        log.info("fit did not converge after %d Newton iterations", iterations)

    alpha, beta = design.to_original(params)
    beta[fz] = 0.0
    out_groups = tuple(design.group_names[g] for g in sorted(frozen))
    in_groups = tuple(
        design.group_names[g] for g in range(len(design.groups)) if pen.penalized[g] and g not in frozen
    )
    return FitResult(
        params=params,
        design=design,
        penalty=pen,
        beta=beta,
        alpha=alpha,
        selected=in_groups,
        selected_out=out_groups,
        curvature=info,
        objective=obj,
        iterations=iterations,
        converged=converged,
        trace=trace,
    )
