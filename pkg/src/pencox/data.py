"""Counting-process survival data: subjects, episodes, CSV ingestion."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

REQUIRED = ("id", "cluster", "start", "stop", "event")


class SchemaError(ValueError):
    """The input table does not have the columns the schema names."""


class DataError(ValueError):
    """The input values violate the counting-process data model."""


@dataclass(frozen=True)
class Subject:
    """One individual, with its piecewise-constant covariate history.

    ``covariate_track`` holds ``(change_time, x)`` pairs; the first change
    time is the entry time and all change times precede ``exit_time``.
    """

    subject_id: object
    cluster_id: object
    entry_time: float
    exit_time: float
    event: int
    covariate_track: tuple
    u_covariates: tuple = (1.0,)

    def __post_init__(self):
        times = [c for c, _ in self.covariate_track]
        if not times:
            raise DataError(f"subject {self.subject_id}: empty covariate track")
        if self.event not in (0, 1):
            raise DataError(f"subject {self.subject_id}: event flag {self.event!r} not in {{0, 1}}")
        if not np.isfinite(self.exit_time) or self.exit_time <= 0:
            raise DataError(f"subject {self.subject_id}: exit time must be finite and positive")
        if times[0] != self.entry_time:
            raise DataError(f"subject {self.subject_id}: first change time differs from entry time")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"subject {self.subject_id}: change times not strictly increasing")
        if times[-1] >= self.exit_time:
            raise DataError(f"subject {self.subject_id}: covariate change at or after exit time")


@dataclass(frozen=True)
class Episode:
    subject_id: object
    cluster_id: object
    start: float
    stop: float
    event: int
    x: np.ndarray


def split_episodes(subject: Subject) -> list[Episode]:
    """Cut a subject's follow-up at its covariate change points."""
    track = subject.covariate_track
    bounds = [c for c, _ in track[1:]] + [subject.exit_time]
    episodes = []
    start = track[0][0]
    for k, ((_, x), stop) in enumerate(zip(track, bounds)):
        last = k == len(track) - 1
        episodes.append(
            Episode(
                subject_id=subject.subject_id,
                cluster_id=subject.cluster_id,
                start=float(start),
                stop=float(stop),
                event=int(subject.event) if last else 0,
                x=np.asarray(x, dtype=float),
            )
        )
        start = stop
    return episodes


@dataclass(frozen=True)
class EpisodeTable:
    """Column-oriented view of all episodes, used by the numerical core."""

    start: np.ndarray
    stop: np.ndarray
    event: np.ndarray
    X: np.ndarray
    U: np.ndarray
    subject: np.ndarray  # index into Dataset.subjects
    cluster: np.ndarray  # index into Dataset.clusters


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of subjects and their derived episodes.

    ``group_map`` maps a penalty-group name to the covariate columns it
    contains; metric covariates are singleton groups, factors contribute one
    group of dummy columns.
    """

    subjects: tuple
    covariate_names: tuple
    group_map: Mapping[str, tuple]
    episodes: tuple = field(init=False)
    clusters: tuple = field(init=False)
    cluster_sizes: tuple = field(init=False)
    table: EpisodeTable = field(init=False, repr=False)

    def __post_init__(self):
        names = list(self.covariate_names)
        grouped = [c for cols in self.group_map.values() for c in cols]
        if sorted(grouped) != sorted(names) or len(set(grouped)) != len(grouped):
            raise SchemaError("every covariate column must belong to exactly one group")

        clusters: dict = {}
        for s in self.subjects:
            clusters[s.cluster_id] = clusters.get(s.cluster_id, 0) + 1
        cluster_index = {c: i for i, c in enumerate(clusters)}

        episodes = []
        subj_idx = []
        for i, s in enumerate(self.subjects):
            if s.entry_time != 0.0:
                raise DataError(f"subject {s.subject_id}: left truncation (entry time > 0) is not supported")
            eps = split_episodes(s)
            episodes.extend(eps)
            subj_idx.extend([i] * len(eps))

        p = len(names)
        r = len(self.subjects[0].u_covariates) if self.subjects else 1
        X = np.array([e.x for e in episodes], dtype=float).reshape(len(episodes), p)
        U = np.array([self.subjects[i].u_covariates for i in subj_idx], dtype=float).reshape(len(episodes), r)
        table = EpisodeTable(
            start=np.array([e.start for e in episodes], dtype=float),
            stop=np.array([e.stop for e in episodes], dtype=float),
            event=np.array([e.event for e in episodes], dtype=int),
            X=X,
            U=U,
            subject=np.array(subj_idx, dtype=int),
            cluster=np.array([cluster_index[e.cluster_id] for e in episodes], dtype=int),
        )
        object.__setattr__(self, "episodes", tuple(episodes))
        object.__setattr__(self, "clusters", tuple(clusters))
        object.__setattr__(self, "cluster_sizes", tuple(clusters.values()))
        object.__setattr__(self, "table", table)

    @property
    def n(self) -> int:
        """Number of clusters."""
        return len(self.clusters)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def t_max(self) -> float:
        return max(s.exit_time for s in self.subjects)

    def column(self, name: str) -> int:
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate column {name!r}") from None

    def group_of(self, column: str) -> str:
        for g, cols in self.group_map.items():
            if column in cols:
                return g
        raise SchemaError(f"unknown covariate column {column!r}")

    def subset(self, cluster_ids: Sequence) -> "Dataset":
        """Dataset restricted to the given clusters (order of subjects kept)."""
        keep = set(cluster_ids)
        subjects = tuple(s for s in self.subjects if s.cluster_id in keep)
        return Dataset(subjects=subjects, covariate_names=self.covariate_names, group_map=self.group_map)


def _dummy_encode(frame: pd.DataFrame, factors: Sequence[str]):
    """Reference-coded dummies; the first observed level is the reference."""
    columns = {}
    groups = {}
    for name in frame.columns:
        if name in factors:
            levels = list(dict.fromkeys(frame[name].tolist()))
            dummies = []
            for level in levels[1:]:
                col = f"{name}[{level}]"
                columns[col] = (frame[name] == level).astype(float).to_numpy()
                dummies.append(col)
            if not dummies:
                raise DataError(f"factor {name!r} has a single level")
            groups[name] = tuple(dummies)
        else:
            values = pd.to_numeric(frame[name], errors="coerce")
            if values.isna().any():
                raise DataError(f"covariate {name!r} is not numeric (declare it as a factor?)")
            columns[name] = values.to_numpy(dtype=float)
            groups[name] = (name,)
    return columns, groups


def dataset_from_frame(
    frame: pd.DataFrame,
    schema: Mapping[str, object] | None = None,
) -> Dataset:
    """Build a :class:`Dataset` from a long (counting-process) table.

    ``schema`` may rename the required columns (keys ``id``, ``cluster``,
    ``start``, ``stop``, ``event``), restrict the covariates (key
    ``covariates``) and declare categorical columns (key ``factors``).
    """
    schema = dict(schema or {})
    colmap = {k: schema.get(k, k) for k in REQUIRED}
    missing = [v for v in colmap.values() if v not in frame.columns]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    covariates = schema.get("covariates")
    if covariates is None:
        covariates = [c for c in frame.columns if c not in colmap.values()]
    covariates = list(covariates)
    absent = [c for c in covariates if c not in frame.columns]
    factors = list(schema.get("factors", ()))
    absent += [f for f in factors if f not in covariates]
    if absent:
        raise SchemaError(f"unknown covariate column(s): {', '.join(absent)}")
    if frame[list(colmap.values()) + covariates].isna().any().any():
        raise DataError("missing values are not permitted")

    columns, groups = _dummy_encode(frame[covariates], factors)
    names = tuple(columns)
    X = np.column_stack([columns[c] for c in names]) if names else np.zeros((len(frame), 0))

    ids = frame[colmap["id"]].to_numpy()
    cl = frame[colmap["cluster"]].to_numpy()
    start = pd.to_numeric(frame[colmap["start"]], errors="coerce").to_numpy(dtype=float)
    stop = pd.to_numeric(frame[colmap["stop"]], errors="coerce").to_numpy(dtype=float)
    event = pd.to_numeric(frame[colmap["event"]], errors="coerce").to_numpy(dtype=float)
    if np.isnan(start).any() or np.isnan(stop).any() or np.isnan(event).any():
        raise DataError("start, stop and event must be numeric")
    if not np.isin(event, (0.0, 1.0)).all():
        raise DataError("event flag outside {0, 1}")
    if (stop <= start).any():
        bad = ids[np.flatnonzero(stop <= start)[0]]
        raise DataError(f"subject {bad}: interval with stop <= start")

    rows: dict = {}
    for k, sid in enumerate(ids):
        rows.setdefault(sid, []).append(k)

    subjects = []
    for sid, idx in rows.items():
        idx = sorted(idx, key=lambda k: start[k])
        if len({cl[k] for k in idx}) != 1:
            raise DataError(f"subject {sid}: rows belong to different clusters")
        for a, b in zip(idx, idx[1:]):
            if start[b] != stop[a]:
                raise DataError(f"subject {sid}: intervals are not contiguous and non-overlapping")
            if event[a] != 0:
                raise DataError(f"subject {sid}: event flagged before the last interval")
        if start[idx[0]] != 0.0:
            raise DataError(f"subject {sid}: left truncation (first start > 0) is not supported")
        subjects.append(
            Subject(
                subject_id=sid,
                cluster_id=cl[idx[0]],
                entry_time=0.0,
                exit_time=float(stop[idx[-1]]),
                event=int(event[idx[-1]]),
                covariate_track=tuple((float(start[k]), X[k].copy()) for k in idx),
            )
        )
    return Dataset(subjects=tuple(subjects), covariate_names=names, group_map=groups)


def load_dataset(path, schema: Mapping[str, object] | None = None) -> Dataset:
    """Read a counting-process CSV file (one row per covariate-constant interval)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    frame = pd.read_csv(path)
    return dataset_from_frame(frame, schema)


def dataset_to_frame(dataset: Dataset) -> pd.DataFrame:
    """Counting-process table of ``dataset`` (inverse of :func:`dataset_from_frame`)."""
    tab = dataset.table
    frame = pd.DataFrame(
        {
            "id": [dataset.subjects[k].subject_id for k in tab.subject],
            "cluster": [dataset.subjects[k].cluster_id for k in tab.subject],
            "start": tab.start,
            "stop": tab.stop,
            "event": tab.event.astype(int),
        }
    )
    for j, name in enumerate(dataset.covariate_names):
        frame[name] = tab.X[:, j]
    return frame


@dataclass
class ValidationReport:
    covariate_variance: dict
    n_events: int
    cluster_sizes: dict
    flags: list

    def __str__(self) -> str:
        lines = [f"events: {self.n_events}", f"clusters: {len(self.cluster_sizes)}"]
        lines += [f"var({k}) = {v:.4g}" for k, v in self.covariate_variance.items()]
        lines += [f"FLAG: {f}" for f in self.flags] or ["no flags"]
        return "\n".join(lines)


def validate(dataset: Dataset) -> ValidationReport:
    """Summarize a dataset and flag obvious problems (reporting only)."""
    X = dataset.table.X
    variance = {name: float(np.var(X[:, k])) if len(X) else 0.0 for k, name in enumerate(dataset.covariate_names)}
    flags = [f"zero variance: {name}" for name, v in variance.items() if v <= 1e-14]
    n_events = int(sum(s.event for s in dataset.subjects))
    if n_events == 0:
        flags.append("no events")
    return ValidationReport(
        covariate_variance=variance,
        n_events=n_events,
        cluster_sizes=dict(zip(dataset.clusters, dataset.cluster_sizes)),
        flags=flags,
    )
