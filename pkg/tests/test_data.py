import numpy as np
import pandas as pd
import pytest

from pencox.data import (
    DataError,
    Dataset,
    SchemaError,
    Subject,
    dataset_from_frame,
    dataset_to_frame,
    load_dataset,
    split_episodes,
    validate,
)
from pencox.simulation import ScenarioSpec, generate


def _subject(track, exit_time=5.0, event=1, sid=1):
    return Subject(sid, 1, 0.0, exit_time, event, tuple(track))


def test_single_row_ingestion(tmp_path):
    path = tmp_path / "one.csv"
    pd.DataFrame(dict(id=[1], cluster=[1], start=[0.0], stop=[5.0], event=[1], x=[0.3])).to_csv(path, index=False)
    ds = load_dataset(path)
    assert ds.n_subjects == 1 and len(ds.episodes) == 1
    assert ds.episodes[0].x.tolist() == [0.3]


def test_rows_merge_into_one_subject():
    frame = pd.DataFrame(dict(id=[1, 1], cluster=[1, 1], start=[0.0, 2.0], stop=[2.0, 5.0], event=[0, 1], x=[0.1, 0.7]))
    ds = dataset_from_frame(frame)
    (s,) = ds.subjects
    assert len(s.covariate_track) == 2
    assert s.exit_time == 5.0 and s.event == 1


def test_three_level_factor_gives_group_of_two():
    frame = pd.DataFrame(
        dict(id=[1, 2, 3], cluster=[1, 2, 3], start=[0.0] * 3, stop=[1.0, 2.0, 3.0], event=[1, 0, 1], h=["a", "b", "c"])
    )
    ds = dataset_from_frame(frame, {"factors": ["h"]})
    assert ds.group_map == {"h": ("h[b]", "h[c]")}
    assert ds.table.X.tolist() == [[0, 0], [1, 0], [0, 1]]


def test_missing_column(tmp_path):
    frame = pd.DataFrame(dict(id=[1], start=[0.0], stop=[1.0], event=[1]))
    with pytest.raises(SchemaError):
        dataset_from_frame(frame)


def test_event_flag_validated():
    frame = pd.DataFrame(dict(id=[1], cluster=[1], start=[0.0], stop=[1.0], event=[2]))
    with pytest.raises(DataError):
        dataset_from_frame(frame)


def test_non_monotone_times_rejected():
    frame = pd.DataFrame(dict(id=[1, 1], cluster=[1, 1], start=[0.0, 1.5], stop=[2.0, 3.0], event=[0, 1], x=[0, 1]))
    with pytest.raises(DataError):
        dataset_from_frame(frame)


def test_zero_length_interval_rejected():
    frame = pd.DataFrame(dict(id=[1], cluster=[1], start=[1.0], stop=[1.0], event=[0]))
    with pytest.raises(DataError):
        dataset_from_frame(frame)


def test_left_truncation_rejected():
    with pytest.raises(DataError):
        Dataset((Subject(1, 1, 0.5, 2.0, 0, ((0.5, (0.0,)),)),), ("x",), {"x": ("x",)})


def test_missing_values_rejected():
    frame = pd.DataFrame(dict(id=[1], cluster=[1], start=[0.0], stop=[1.0], event=[1], x=[np.nan]))
    with pytest.raises(DataError):
        dataset_from_frame(frame)


def test_unreadable_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "absent.csv")


def test_split_no_changes():
    (ep,) = split_episodes(_subject([(0.0, (1.0,))]))
    assert (ep.start, ep.stop, ep.event) == (0.0, 5.0, 1)


def test_split_one_change():
    eps = split_episodes(_subject([(0.0, (1.0,)), (2.0, (3.0,))]))
    assert [(e.start, e.stop, e.event) for e in eps] == [(0.0, 2.0, 0), (2.0, 5.0, 1)]


def test_split_ten_changes():
    track = [(float(k), (k,)) for k in range(10)]
    eps = split_episodes(_subject(track, exit_time=12.0))
    assert len(eps) == 10


def test_subject_invariants():
    with pytest.raises(DataError):
        _subject([(0.0, (1.0,)), (5.0, (2.0,))])
    with pytest.raises(DataError):
        _subject([(0.0, (1.0,))], event=3)
    with pytest.raises(DataError):
        _subject([(0.0, (1.0,)), (2.0, (2.0,)), (1.0, (3.0,))])


def test_round_trip_and_partition():
    ds, _ = generate(ScenarioSpec(scenario_id=4, seed=5))
    for s in ds.subjects:
        eps = split_episodes(s)
        assert eps[0].start == s.entry_time and eps[-1].stop == s.exit_time
        assert all(a.stop == b.start for a, b in zip(eps, eps[1:]))
        assert sum(e.event for e in eps) == s.event
    assert len(ds.episodes) == sum(len(s.covariate_track) for s in ds.subjects)
    assert sum(ds.cluster_sizes) == ds.n_subjects
    again = dataset_from_frame(dataset_to_frame(ds))
    np.testing.assert_array_equal(again.table.X, ds.table.X)
    np.testing.assert_array_equal(again.table.stop, ds.table.stop)


def test_validate_flags():
    frame = pd.DataFrame(dict(id=[1, 2], cluster=[1, 2], start=[0.0, 0.0], stop=[1.0, 2.0], event=[0, 0], x=[1.0, 1.0]))
    report = validate(dataset_from_frame(frame))
    assert "zero variance: x" in report.flags
    assert "no events" in report.flags


def test_validate_scenario_one_clean():
    ds, _ = generate(ScenarioSpec(scenario_id=1, seed=0))
    report = validate(ds)
    assert len(report.covariate_variance) == 20
    assert report.flags == []
