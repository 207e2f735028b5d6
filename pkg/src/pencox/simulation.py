"""Simulation scenarios, event-time sampling by hazard inversion, and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special, stats

from .data import Dataset, Subject

TRUE_BETA = np.array([0.6, -0.7, 0.4, -0.8] + [0.0] * 16)


def _poisson_terms(lam: float, tail: float = 1e-12):
    """Poisson(lam/2) mixing weights truncated once the remaining mass is below ``tail``."""
    mu = 0.5 * lam
    if mu == 0:
        return np.array([0]), np.array([1.0])
    j_max = int(stats.poisson.isf(tail, mu)) + 1
    j = np.arange(j_max + 1)
    return j, stats.poisson.pmf(j, mu)


def ncx2_pdf(x, df: float, nc: float, tail: float = 1e-12) -> np.ndarray:
    """Noncentral chi-square density via its Poisson-mixture series."""
    x = np.asarray(x, dtype=float)
    j, w = _poisson_terms(nc, tail)
    k = 0.5 * (df + 2 * j)
    xx = np.maximum(x, 0.0)[..., None]
    with np.errstate(divide="ignore"):
        logc = (k - 1) * np.log(xx) - 0.5 * xx - k * np.log(2.0) - special.gammaln(k)
    dens = np.exp(logc) @ w
    return np.where(x > 0, dens, 0.0)


def ncx2_cdf(x, df: float, nc: float, tail: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    j, w = _poisson_terms(nc, tail)
    k = 0.5 * (df + 2 * j)
    return special.gammainc(k, 0.5 * np.maximum(x, 0.0)[..., None]) @ w


@dataclass(frozen=True)
class ChiSquareBaseline:
    """``lambda_0(t) = scale * f_chi2(t; df, nc) + floor``."""

    scale: float = 15.0
    df: float = 14.0
    nc: float = 2.0
    floor: float = 0.15

    def hazard(self, t) -> np.ndarray:
        return self.scale * ncx2_pdf(t, self.df, self.nc) + self.floor

    def cumulative(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.scale * ncx2_cdf(t, self.df, self.nc) + self.floor * t


@dataclass(frozen=True)
class ConstantBaseline:
    rate: float = 1.0

    def hazard(self, t) -> np.ndarray:
        return np.full(np.shape(t), self.rate, dtype=float)

    def cumulative(self, t) -> np.ndarray:
        return self.rate * np.asarray(t, dtype=float)

    def inverse_cumulative(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) / self.rate


def invert_cumulative(baseline, target, lo, hi, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Solve ``baseline.cumulative(t) = target`` for ``t`` in ``[lo, hi]`` (vectorized).

    Safeguarded Newton iteration on the monotone cumulative baseline; falls
    back to bisection whenever a Newton step leaves the bracket.
    """
    target = np.asarray(target, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), target.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    if hasattr(baseline, "inverse_cumulative"):
        return np.clip(baseline.inverse_cumulative(target), lo, hi)
    t = 0.5 * (lo + hi)
    active = np.ones(target.shape, dtype=bool)
    for _ in range(max_iter):
        f = baseline.cumulative(t[active]) - target[active]
        pos = f > 0
        hi_a, lo_a, t_a = hi[active], lo[active], t[active]
        hi_a[pos] = t_a[pos]
        lo_a[~pos] = t_a[~pos]
        deriv = baseline.hazard(t_a)
        newton = t_a - f / np.maximum(deriv, 1e-300)
        bad = (newton <= lo_a) | (newton >= hi_a) | ~np.isfinite(newton)
        new_t = np.where(bad, 0.5 * (lo_a + hi_a), newton)
        done = (np.abs(new_t - t_a) <= tol * np.maximum(1.0, np.abs(t_a))) | (hi_a - lo_a <= tol)
        hi[active], lo[active], t[active] = hi_a, lo_a, new_t
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            break
    return t


@dataclass(frozen=True)
class PiecewiseHazard:
    """Hazard ``multiplier_j * baseline(t)`` on ``[breaks_j, breaks_{j+1})``.

    The last piece extends to ``horizon``; ``baseline=None`` means a unit
    baseline, making the hazard piecewise constant.
    """

    breaks: np.ndarray
    multipliers: np.ndarray
    baseline: object | None = None
    horizon: float = np.inf

    def _base(self):
        return self.baseline if self.baseline is not None else ConstantBaseline(1.0)

    def hazard(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        j = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.breaks) - 1)
        return np.asarray(self.multipliers)[j] * self._base().hazard(t)

    def cumulative(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        base = self._base()
        edges = np.append(np.asarray(self.breaks, dtype=float), self.horizon)
        out = np.zeros(t.shape)
        for j, m in enumerate(self.multipliers):
            a, b = edges[j], edges[j + 1]
            seg = np.clip(t, a, b)
            out += m * (base.cumulative(seg) - base.cumulative(np.full(t.shape, a)))
        return out


def invert_survival(hazard: PiecewiseHazard, u: float) -> float:
    """Event time ``t`` with ``int_0^t hazard = -log(u)``; ``inf`` if never reached."""
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie in (0, 1)")
    target = -np.log(u)
    base = hazard._base()
    edges = np.append(np.asarray(hazard.breaks, dtype=float), hazard.horizon)
    for j, m in enumerate(hazard.multipliers):
        a, b = edges[j], edges[j + 1]
        start = float(base.cumulative(np.array(a)))
        mass = np.inf if np.isinf(b) else m * (float(base.cumulative(np.array(b))) - start)
        if target <= mass:
            level = start + target / m
            if np.isinf(b):
                b = max(a, 1.0)
                while float(base.cumulative(np.array(b))) < level:
                    b *= 2.0
            return float(invert_cumulative(base, np.array([level]), a, b)[0])
        target -= mass
    return float("inf")


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: int = 1
    n_subjects: int = 500
    n_clusters: int = 50
    p: int = 20
    true_beta: tuple = tuple(TRUE_BETA)
    frailty_sd: float = 1.0
    max_changes: int = 10
    censor_range: tuple = (0.0, 10.0)
    baseline: object = field(default_factory=ChiSquareBaseline)
    seed: int = 0

    def __post_init__(self):
        if self.scenario_id not in (1, 2, 3, 4):
            raise ValueError("scenario_id must be 1, 2, 3 or 4")
        if len(self.true_beta) != self.p:
            raise ValueError("true_beta must have p entries")

    @property
    def has_frailty(self) -> bool:
        return self.scenario_id in (2, 4)

    @property
    def has_changes(self) -> bool:
        return self.scenario_id in (3, 4)


@dataclass
class SimTruth:
    baseline: object
    beta: np.ndarray
    sigma_b: float
    b: np.ndarray
    event_times: np.ndarray
    censor_times: np.ndarray
    change_times: list


def generate(spec: ScenarioSpec) -> tuple[Dataset, SimTruth]:
    """Draw one data set of the given scenario."""
    rng = np.random.default_rng(spec.seed)
    n, p = spec.n_subjects, spec.p
    beta = np.asarray(spec.true_beta, dtype=float)
    lo_c, hi_c = spec.censor_range

    if spec.has_frailty:
        size = n // spec.n_clusters
        cluster = np.repeat(np.arange(spec.n_clusters), size)
        if cluster.size != n:
            raise ValueError("n_subjects must be a multiple of n_clusters")
        b = rng.normal(0.0, spec.frailty_sd, spec.n_clusters)
        offset = b[cluster]
    else:
        cluster = np.arange(n)
        b = np.zeros(0)
        offset = np.zeros(n)

    changes = []
    X = []
    for i in range(n):
        if spec.has_changes:
            k = int(rng.integers(0, spec.max_changes + 1))
            ch = np.sort(rng.uniform(lo_c, hi_c, k))
        else:
            ch = np.zeros(0)
        changes.append(ch)
        X.append(rng.uniform(0.0, 1.0, (ch.size + 1, p)))
    u = rng.uniform(size=n)
    censor = rng.uniform(lo_c, hi_c, n)

    # piecewise hazard pieces for all subjects at once
    owner = np.concatenate([np.full(ch.size + 1, i) for i, ch in enumerate(changes)])
    seg_lo = np.concatenate([np.concatenate([[0.0], ch]) for ch in changes])
    seg_hi = np.concatenate([np.concatenate([ch, [hi_c]]) for ch in changes])
    mult = np.exp(np.concatenate(X) @ beta + offset[owner])
    base = spec.baseline
    mass = mult * (base.cumulative(seg_hi) - base.cumulative(seg_lo))
    target = -np.log(u)
    running = np.cumsum(mass) - mass
    first_seg = np.concatenate([[0], np.flatnonzero(np.diff(owner)) + 1])
    cum_before = running - running[first_seg][owner]
    remaining = target[owner] - cum_before
    hit = (remaining >= 0) & (remaining <= mass)
    event = np.full(n, np.inf)
    if hit.any():
        level = base.cumulative(seg_lo[hit]) + remaining[hit] / mult[hit]
        times = invert_cumulative(base, level, seg_lo[hit], seg_hi[hit])
        subj, first = np.unique(owner[hit], return_index=True)
        event[subj] = times[first]

    observed = np.minimum(event, censor)
    status = (event <= censor).astype(int)
    subjects = []
    for i in range(n):
        keep = changes[i] < observed[i]
        times = np.concatenate([[0.0], changes[i][keep]])
        xs = X[i][: times.size]
        subjects.append(
            Subject(
                subject_id=i,
                cluster_id=int(cluster[i]),
                entry_time=0.0,
                exit_time=float(observed[i]),
                event=int(status[i]),
                covariate_track=tuple((float(t), x) for t, x in zip(times, xs)),
            )
        )
    names = tuple(f"x{k + 1}" for k in range(p))
    dataset = Dataset(subjects=tuple(subjects), covariate_names=names, group_map={c: (c,) for c in names})
    truth = SimTruth(
        baseline=base,
        beta=beta,
        sigma_b=spec.frailty_sd if spec.has_frailty else 0.0,
        b=b,
        event_times=event,
        censor_times=censor,
        change_times=changes,
    )
    return dataset, truth


def evaluation_grid(dataset: Dataset, points: int = 100, fraction: float = 0.9) -> np.ndarray:
    """Equidistant grid on ``[0, fraction * largest observed event time]``."""
    times = [s.exit_time for s in dataset.subjects if s.event == 1]
    t_end = fraction * (max(times) if times else dataset.t_max)
    return np.linspace(0.0, t_end, points)


def cumulative_weights(baseline, grid_T) -> np.ndarray:
    """``(Lambda_0(T) - Lambda_0(t)) / Lambda_0(T)`` with ``T`` the last grid point."""
    cum = np.asarray(baseline.cumulative(np.asarray(grid_T, dtype=float)))
    return (cum[-1] - cum) / cum[-1]


_RUN_FIELDS = ("mse_baseline", "mse_beta", "mse_sigma_b", "mse_sigma_b_sq", "tpr", "fdr")


@dataclass
class MetricReport:
    """Metric values per replication, with means over replications."""

    runs: list = field(default_factory=list)

    def mean(self, name: str) -> float:
        vals = [r[name] for r in self.runs if r.get(name) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def __getattr__(self, name):
        if name in _RUN_FIELDS:
            if len(self.runs) == 1:
                return self.runs[0][name]
            return self.mean(name)
        raise AttributeError(name)

    @classmethod
    def combine(cls, reports) -> "MetricReport":
        return cls(runs=[r for rep in reports for r in rep.runs])

    def summary(self) -> dict:
        return {f"mean_{k}": self.mean(k) for k in _RUN_FIELDS} | {"replications": len(self.runs)}


def metrics(fit, truth: SimTruth, grid_T, hazard: Callable | None = None) -> MetricReport:
    """Weighted baseline MSE, coefficient MSE, frailty MSE, TPR and FDR.

    ``fit`` needs ``beta`` (original scale) and ``baseline_hazard(t)``;
    ``selected`` (group names) and ``sigma_b_sq`` are used when present.
    """
    grid_T = np.asarray(grid_T, dtype=float)
    omega = cumulative_weights(truth.baseline, grid_T)
    lam_hat = np.asarray(hazard(grid_T) if hazard is not None else fit.baseline_hazard(grid_T))
    mse_base = float(np.sum(omega * (truth.baseline.hazard(grid_T) - lam_hat) ** 2))
    beta_hat = np.asarray(fit.beta, dtype=float)
    mse_beta = float(np.sum((truth.beta - beta_hat) ** 2))

    true_set = {k for k in np.flatnonzero(truth.beta)}
    selected = {k for k in np.flatnonzero(beta_hat != 0.0)}
    tpr = len(selected & true_set) / len(true_set) if true_set else 1.0
    fdr = len(selected - true_set) / max(1, len(selected))

    mse_sb = mse_sb2 = None
    sig2 = getattr(fit, "sigma_b_sq", None)
    if sig2 is not None and truth.sigma_b > 0:
        s2 = float(np.atleast_1d(sig2)[0])
        mse_sb = (truth.sigma_b - np.sqrt(s2)) ** 2
        mse_sb2 = (truth.sigma_b**2 - s2) ** 2
    run = dict(
        mse_baseline=mse_base,
        mse_beta=mse_beta,
        mse_sigma_b=mse_sb,
        mse_sigma_b_sq=mse_sb2,
        tpr=tpr,
        fdr=fdr,
    )
    return MetricReport(runs=[run])
