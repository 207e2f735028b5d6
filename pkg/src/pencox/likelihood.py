"""Penalized full log-likelihood, score and Fisher blocks.

The objective for parameters ``(beta, alpha, b)`` at fixed frailty covariance
``Q`` and smoothing parameters ``zeta`` is::

    sum_e d_e eta_e(t_e) - int_e exp(eta_e(s)) ds
      - 1/2 sum_i b_i' Q^-1 b_i
      - 1/2 sum_k zeta_k alpha_k' D'D alpha_k
      - xi sum_g w_g sqrt(df_g) sqrt(||beta_g||^2 + c)

where ``e`` runs over episodes.  Linear covariates are standardized
internally; :meth:`Design.to_original` maps coefficients back.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .data import Dataset, SchemaError
from .quadrature import QuadratureRule, quadrature_nodes
from .splines import ConfigurationError, SplineBasis, build_basis, difference_penalty

DEFAULT_C = 1e-8


class NumericError(FloatingPointError):
    """Non-finite value while evaluating the likelihood."""


@dataclass(frozen=True)
class ModelSpec:
    """Which covariates enter how.

    ``penalized`` / ``unpenalized`` name linear terms (metric columns or
    factor names); ``tv`` names covariates with time-varying coefficients.
    ``penalized=None`` means every covariate not listed elsewhere.
    """

    penalized: tuple | None = None
    unpenalized: tuple = ()
    tv: tuple = ()
    frailty: bool = False
    M: int = 6
    degree: int = 3


@dataclass(frozen=True)
class FrailtyCovariance:
    """Frailty covariance ``Q`` stored through its log-Cholesky factor."""

    Q: np.ndarray
    Q_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        Q = 0.5 * (Q + Q.T)
        np.linalg.cholesky(Q)  # raises for non-PD input
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "Q_inv", np.linalg.inv(Q))

    @property
    def theta(self) -> np.ndarray:
        """Log-Cholesky parameters: log of the diagonal, then the strict lower triangle."""
        L = np.linalg.cholesky(self.Q)
        low = np.tril_indices_from(L, -1)
        return np.concatenate([np.log(np.diag(L)), L[low]])

    @classmethod
    def from_theta(cls, theta, r: int) -> "FrailtyCovariance":
        theta = np.asarray(theta, dtype=float)
        L = np.diag(np.exp(theta[:r]))
        L[np.tril_indices(r, -1)] = theta[r:]
        return cls(L @ L.T)


@dataclass(frozen=True)
class ParameterState:
    """Coefficients on the internal (standardized) scale.

    ``alpha`` has one row per smooth term (row 0 is the log-baseline),
    ``b`` one row per cluster (empty without frailty).
    """

    alpha: np.ndarray
    beta: np.ndarray
    b: np.ndarray
    zeta: np.ndarray
    frailty: FrailtyCovariance | None = None

    @property
    def theta(self):
        return None if self.frailty is None else self.frailty.theta

    def fixed(self) -> np.ndarray:
        """``(beta, alpha)`` stacked."""
        return np.concatenate([self.beta, self.alpha.ravel()])

    def vector(self) -> np.ndarray:
        """Full parameter vector ``(beta, alpha, b)``."""
        return np.concatenate([self.beta, self.alpha.ravel(), self.b.ravel()])

    def with_vector(self, v) -> "ParameterState":
        v = np.asarray(v, dtype=float)
        p, na = self.beta.size, self.alpha.size
        return replace(
            self,
            beta=v[:p].copy(),
            alpha=v[p : p + na].reshape(self.alpha.shape).copy(),
            b=v[p + na :].reshape(self.b.shape).copy(),
        )


@dataclass(frozen=True)
class PenaltyConfig:
    """Lasso / group-lasso configuration.

    ``groups`` holds column indices of each linear group; ``penalized``
    flags the groups subject to selection.
    """

    xi: float
    weights: np.ndarray
    groups: tuple
    penalized: np.ndarray
    c: float = DEFAULT_C
    ridge: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.groups),):
            raise ConfigurationError("one weight per group is required")
        if self.xi < 0 or not np.isfinite(self.xi):
            raise ConfigurationError(f"xi must be finite and >= 0, got {self.xi}")
        if self.c <= 0:
            raise ConfigurationError("c must be positive")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be non-negative")
        pen = np.asarray(self.penalized, dtype=bool)
        if np.any(~np.isfinite(w[pen])) or np.any(w[pen] <= 0):
            raise ConfigurationError("weights of penalized groups must be positive and finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "penalized", pen)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups], dtype=int)

    def with_xi(self, xi: float) -> "PenaltyConfig":
        return replace(self, xi=float(xi))


def _resolve(dataset: Dataset, names: Sequence[str]) -> list[str]:
    """Map user names (metric columns or factor names) to penalty groups."""
    groups = []
    for name in names:
        if name in dataset.group_map:
            groups.append(name)
        elif name in dataset.covariate_names:
            groups.append(dataset.group_of(name))
        else:
            raise SchemaError(f"unknown covariate {name!r}")
    return list(dict.fromkeys(groups))


class Design:
    """Precomputed arrays for one dataset under one model.

    Holds standardized linear covariates, time-varying covariates, frailty
    design, and the quadrature nodes with their spline design rows.
    """

    def __init__(
        self,
        dataset: Dataset,
        model: ModelSpec | None = None,
        basis: SplineBasis | None = None,
        rule: QuadratureRule | None = None,
        standardize: bool = True,
    ):
        model = model or ModelSpec()
        self.dataset = dataset
        self.model = model
        self.basis = basis or build_basis(model.M, model.degree, dataset.t_max)
        self.rule = rule or QuadratureRule.gauss_legendre()
        if model.M != self.basis.M:
            raise ConfigurationError("model M and basis M disagree")
        if dataset.t_max > self.basis.t_max:
            raise ConfigurationError("follow-up exceeds the spline support")

        tv_groups = _resolve(dataset, model.tv)
        unpen = _resolve(dataset, model.unpenalized)
        if model.penalized is None:
            pen = [g for g in dataset.group_map if g not in tv_groups and g not in unpen]
        else:
            pen = _resolve(dataset, model.penalized)
        if set(pen) & set(unpen) or (set(pen) | set(unpen)) & set(tv_groups):
            raise SchemaError("a covariate may appear in only one of penalized / unpenalized / tv")
        linear = [g for g in dataset.group_map if g in pen or g in unpen]

        tab = dataset.table
        cols = []
        groups = []
        for g in linear:
            idx = [dataset.column(c) for c in dataset.group_map[g]]
            groups.append(np.arange(len(cols), len(cols) + len(idx)))
            cols.extend(idx)
        self.group_names = tuple(linear)
        self.groups = tuple(groups)
        self.penalized = np.array([g in pen for g in linear], dtype=bool)
        self.columns = tuple(dataset.covariate_names[k] for k in cols)

        X = tab.X[:, cols] if cols else np.zeros((tab.start.size, 0))
        if standardize and X.shape[1]:
            # exposure-weighted moments are unchanged by splitting an interval
            expo = tab.stop - tab.start
            center = expo @ X / expo.sum()
            scale = np.sqrt(expo @ (X - center) ** 2 / expo.sum())
            scale[scale <= 1e-12] = 1.0
        else:
            center = np.zeros(X.shape[1])
            scale = np.ones(X.shape[1])
        self.x_center = center
        self.x_scale = scale
        self.X = (X - center) / scale

        tv_cols = [dataset.column(c) for g in tv_groups for c in dataset.group_map[g]]
        self.tv_names = tuple(dataset.covariate_names[k] for k in tv_cols)
        self.Z = tab.X[:, tv_cols] if tv_cols else np.zeros((tab.start.size, 0))
        self.K = self.Z.shape[1]
        self.Ztil = np.column_stack([np.ones(tab.start.size), self.Z])

        self.frailty = bool(model.frailty)
        self.U = tab.U
        self.r = self.U.shape[1]
        self.cluster = tab.cluster
        self.n_clusters = dataset.n if self.frailty else 0
        self.event = tab.event.astype(float)
        self.start = tab.start
        self.stop = tab.stop
        self.subject = tab.subject
        self.n_episodes = tab.start.size

        M = self.basis.M
        self.dim_alpha = (1 + self.K) * M
        ev = np.flatnonzero(tab.event == 1)
        self.event_idx = ev
        self.event_B = self.basis.design(tab.stop[ev])
        self.event_Phi = (self.Ztil[ev][:, :, None] * self.event_B[:, None, :]).reshape(ev.size, -1)

        owner, s, w = quadrature_nodes(tab.start, tab.stop, self.basis.breakpoints, self.rule)
        self.node_owner = owner
        self.node_s = s
        self.node_w = w
        self.node_B = self.basis.design(s)
        self.node_Phi = (self.Ztil[owner][:, :, None] * self.node_B[:, None, :]).reshape(s.size, -1)
        self.incidence = sp.csr_matrix(
            (np.ones(s.size), (owner, np.arange(s.size))), shape=(self.n_episodes, s.size)
        )
        if self.frailty:
            self.cluster_incidence = sp.csr_matrix(
                (np.ones(self.n_episodes), (self.cluster, np.arange(self.n_episodes))),
                shape=(self.n_clusters, self.n_episodes),
            )
        else:
            self.cluster_incidence = None

        if M >= 3:
            self.P = difference_penalty(M).gram
        else:
            self.P = np.zeros((M, M))

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def dim_fixed(self) -> int:
        return self.p + self.dim_alpha

    def penalty(self, xi: float = 0.0, weights=None, c: float = DEFAULT_C, ridge: float = 0.0) -> PenaltyConfig:
        """Penalty configuration matching this design's groups."""
        if weights is None:
            weights = np.ones(len(self.groups))
        return PenaltyConfig(
            xi=xi,
            weights=np.asarray(weights, dtype=float),
            groups=self.groups,
            penalized=self.penalized,
            c=c,
            ridge=ridge,
        )

    def to_original(self, params: ParameterState):
        """``(alpha, beta)`` on the original covariate scale."""
        beta = params.beta / self.x_scale
        alpha = params.alpha.copy()
        alpha[0] -= float(beta @ self.x_center)
        return alpha, beta

    def from_original(self, alpha, beta) -> tuple[np.ndarray, np.ndarray]:
        """Inverse of :meth:`to_original` for this design's scaling."""
        beta = np.asarray(beta, dtype=float)
        alpha = np.array(alpha, dtype=float, copy=True)
        alpha[0] += float(beta @ self.x_center)
        return alpha, beta * self.x_scale


@dataclass
class Evaluation:
    """Per-node and per-episode quantities at one parameter value."""

    eta_event: np.ndarray
    h: np.ndarray  # exp(eta) * weight at each node
    H: np.ndarray  # cumulative hazard of each episode
    loglik: float


def _frailty_offset(params: ParameterState, design: Design) -> np.ndarray:
    if not design.frailty or params.b.size == 0:
        return np.zeros(design.n_episodes)
    return np.einsum("er,er->e", design.U, params.b[design.cluster])


def evaluate_model(params: ParameterState, design: Design) -> Evaluation:
    """Unpenalized log-likelihood and the integrals it needs."""
    linear = design.X @ params.beta + _frailty_offset(params, design)
    smooth_node = design.node_Phi @ params.alpha.ravel()
    eta_node = smooth_node + linear[design.node_owner]
    with np.errstate(over="raise", invalid="raise"):
        try:
            h = design.node_w * np.exp(eta_node)
        except FloatingPointError:
            bad = int(design.node_owner[np.argmax(eta_node)])
            sid = design.dataset.subjects[design.subject[bad]].subject_id
            raise NumericError(f"exp(eta) overflow for subject {sid}") from None
    H = design.incidence @ h
    eta_event = design.event_Phi @ params.alpha.ravel() + linear[design.event_idx]
    ll = float(eta_event.sum() - H.sum())
    if not np.isfinite(ll):
        raise NumericError("non-finite log-likelihood")
    return Evaluation(eta_event=eta_event, h=h, H=H, loglik=ll)


def lasso_penalty(beta, pen: PenaltyConfig) -> float:
    """Approximated (differentiable) lasso / group-lasso penalty value, plus any ridge term."""
    beta = np.asarray(beta, dtype=float)
    total = 0.0
    for g, idx in enumerate(pen.groups):
        if pen.penalized[g]:
            total += pen.weights[g] * np.sqrt(len(idx)) * np.sqrt(beta[idx] @ beta[idx] + pen.c)
    return pen.xi * total + 0.5 * pen.ridge * float(beta @ beta)


def lasso_matrix(beta, pen: PenaltyConfig) -> np.ndarray:
    """Diagonal local-quadratic-approximation matrix ``A`` with ``A @ beta`` = penalty gradient."""
    beta = np.asarray(beta, dtype=float)
    diag = np.zeros(beta.size)
    for g, idx in enumerate(pen.groups):
        if pen.penalized[g]:
            diag[idx] = pen.xi * pen.weights[g] * np.sqrt(len(idx)) / np.sqrt(beta[idx] @ beta[idx] + pen.c)
    return np.diag(diag + pen.ridge)


def lasso_hessian(beta, pen: PenaltyConfig) -> np.ndarray:
    """Exact Hessian of :func:`lasso_penalty` (used to verify derivatives)."""
    beta = np.asarray(beta, dtype=float)
    out = np.zeros((beta.size, beta.size))
    for g, idx in enumerate(pen.groups):
        if pen.penalized[g]:
            bg = beta[idx]
            s = np.sqrt(bg @ bg + pen.c)
            k = pen.xi * pen.weights[g] * np.sqrt(len(idx))
            out[np.ix_(idx, idx)] = k * (np.eye(len(idx)) / s - np.outer(bg, bg) / s**3)
    return out + pen.ridge * np.eye(beta.size)


def smooth_matrix(zeta, P) -> np.ndarray:
    """Block-diagonal ``A_zeta`` with blocks ``zeta_k * P``.

    ``P`` is either the ``M x M`` difference-penalty Gram matrix or a
    :class:`SplineBasis` (whose second-order penalty is then used).
    """
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    if np.any(zeta < 0):
        raise ConfigurationError("smoothing parameters must be non-negative")
    if isinstance(P, SplineBasis):
        P = difference_penalty(P.M).gram if P.M >= 3 else np.zeros((P.M, P.M))
    return np.kron(np.diag(zeta), np.asarray(P, dtype=float))


def penalized_loglik(params: ParameterState, design: Design, pen: PenaltyConfig, ev: Evaluation | None = None) -> float:
    ev = ev or evaluate_model(params, design)
    value = ev.loglik
    value -= lasso_penalty(params.beta, pen)
    for k in range(params.alpha.shape[0]):
        a = params.alpha[k]
        value -= 0.5 * params.zeta[k] * (a @ design.P @ a)
    if design.frailty and params.b.size:
        Qi = params.frailty.Q_inv
        value -= 0.5 * float(np.einsum("ir,rs,is->", params.b, Qi, params.b))
    return float(value)


@dataclass
class Score:
    beta: np.ndarray
    alpha: np.ndarray
    b: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.alpha, self.b.ravel()])


def score(params: ParameterState, design: Design, pen: PenaltyConfig, ev: Evaluation | None = None) -> Score:
    """Penalized score blocks ``(s_beta, s_alpha, s_b)``."""
    ev = ev or evaluate_model(params, design)
    resid = design.event - ev.H
    s_beta = design.X.T @ resid - lasso_matrix(params.beta, pen) @ params.beta
    A_z = smooth_matrix(params.zeta, design.P)
    s_alpha = design.event_Phi.sum(axis=0) - design.node_Phi.T @ ev.h - A_z @ params.alpha.ravel()
    if design.frailty and params.b.size:
        s_b = design.cluster_incidence @ (design.U * resid[:, None]) - params.b @ params.frailty.Q_inv.T
    else:
        s_b = np.zeros((0, design.r))
    return Score(beta=s_beta, alpha=s_alpha, b=s_b)


@dataclass
class Information:
    """Negative Fisher matrix ``-F`` in block-arrow form.

    ``G`` is the fixed-effect block over ``(beta, alpha)``, ``C[i]`` the
    coupling of the fixed effects with ``b_i`` and ``B[i]`` the ``b_i``
    block.  Blocks between different clusters are identically zero and are
    never stored.
    """

    G: np.ndarray
    C: np.ndarray
    B: np.ndarray

    @property
    def n_clusters(self) -> int:
        return self.B.shape[0]

    def dense(self) -> np.ndarray:
        nf = self.G.shape[0]
        n, r = self.B.shape[0], self.B.shape[1] if self.B.ndim == 3 else 0
        out = np.zeros((nf + n * r, nf + n * r))
        out[:nf, :nf] = self.G
        for i in range(n):
            sl = slice(nf + i * r, nf + (i + 1) * r)
            out[:nf, sl] = self.C[i]
            out[sl, :nf] = self.C[i].T
            out[sl, sl] = self.B[i]
        return out

    def schur(self):
        """Fixed-effect Schur complement ``G - sum C_i B_i^-1 C_i'`` and ``B_i^-1``."""
        if self.n_clusters == 0:
            return self.G.copy(), np.zeros((0, 0, 0))
        B_inv = np.linalg.inv(self.B)
        S = self.G - np.einsum("ifr,irs,igs->fg", self.C, B_inv, self.C)
        return 0.5 * (S + S.T), B_inv


def information(
    params: ParameterState,
    design: Design,
    pen: PenaltyConfig,
    ev: Evaluation | None = None,
    lasso_curvature: str = "lqa",
) -> Information:
    """Blocks of ``-F``.

    ``lasso_curvature="lqa"`` adds the local-quadratic-approximation matrix
    ``A``; ``"exact"`` adds the true Hessian of the approximated penalty.
    """
    ev = ev or evaluate_model(params, design)
    X, H = design.X, ev.H
    hPhi = design.node_Phi * ev.h[:, None]
    R = design.incidence @ hPhi  # per-episode int exp(eta) Phi
    if lasso_curvature == "lqa":
        A = lasso_matrix(params.beta, pen)
    elif lasso_curvature == "exact":
        A = lasso_hessian(params.beta, pen)
    else:
        raise ValueError(f"unknown lasso_curvature {lasso_curvature!r}")
    I_bb = X.T @ (X * H[:, None]) + A
    I_ba = X.T @ R
    I_aa = design.node_Phi.T @ hPhi + smooth_matrix(params.zeta, design.P)
    G = np.block([[I_bb, I_ba], [I_ba.T, I_aa]])
    G = 0.5 * (G + G.T)

    n, r = design.n_clusters, design.r
    if design.frailty and n:
        UH = design.U * H[:, None]
        C = design.cluster_incidence @ (
            (design.X[:, :, None] * UH[:, None, :]).reshape(design.n_episodes, -1)
        )
        C = np.asarray(C).reshape(n, design.p, r)
        C_a = design.cluster_incidence @ ((R[:, :, None] * design.U[:, None, :]).reshape(design.n_episodes, -1))
        C_a = np.asarray(C_a).reshape(n, design.dim_alpha, r)
        C = np.concatenate([C, C_a], axis=1)
        Bm = design.cluster_incidence @ ((design.U[:, :, None] * UH[:, None, :]).reshape(design.n_episodes, -1))
        Bm = np.asarray(Bm).reshape(n, r, r) + params.frailty.Q_inv[None]
    else:
        C = np.zeros((0, design.dim_fixed, r))
        Bm = np.zeros((0, r, r))
    return Information(G=G, C=C, B=Bm)


def fisher(params: ParameterState, design: Design, pen: PenaltyConfig, lasso_curvature: str = "lqa") -> np.ndarray:
    """Dense penalized Fisher matrix ``F`` ordered ``(beta, alpha, b_1, ..., b_n)``.

    Intended for inspection and tests; the estimator works with the
    block form from :func:`information`.
    """
    return -information(params, design, pen, lasso_curvature=lasso_curvature).dense()
