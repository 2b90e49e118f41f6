import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pedflow import ingest
from pedflow.errors import DuplicateRowError, ImputationError, IngestError, PedflowError, ZeroStdError
from pedflow.ingest import (
    CsvSchema,
    NormStats,
    PanelSeries,
    SensorMeta,
    SplitSpec,
    chronological_split,
    impute_missing,
    make_windows,
    select_sensors,
)

from conftest import START, make_panel


def write_csv(path, rows, header="sensor_id,timestamp,count"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- ingest_csv

def test_ingest_complete(tmp_path):
    rows = [f"{s},2019-04-01T0{h}:00,{10 * h + i}" for h in range(3) for i, s in enumerate("AB")]
    panel = ingest.ingest_csv(write_csv(tmp_path / "c.csv", rows))
    assert panel.shape == (3, 2)
    assert not panel.missing_mask.any()
    assert panel.sensor_ids == ["A", "B"]
    np.testing.assert_array_equal(panel.values[:, 1], [1, 11, 21])


def test_ingest_gap_marks_missing(tmp_path):
    rows = ["A,2019-04-01T01:00,1", "A,2019-04-01T03:00,3",
            "B,2019-04-01T01:00,1", "B,2019-04-01T02:00,2", "B,2019-04-01T03:00,3"]
    panel = ingest.ingest_csv(write_csv(tmp_path / "c.csv", rows))
    assert panel.shape == (3, 2)
    assert panel.missing_mask.tolist() == [[False, False], [True, False], [False, False]]


def test_ingest_duplicate_reports_lines(tmp_path):
    rows = ["A,2019-04-01T01:00,1", "B,2019-04-01T01:00,1", "A,2019-04-01T01:00,5"]
    with pytest.raises(DuplicateRowError) as err:
        ingest.ingest_csv(write_csv(tmp_path / "c.csv", rows))
    assert err.value.lines == (2, 4)


def test_ingest_unparseable_line(tmp_path):
    rows = ["A,2019-04-01T01:00,1", "A,yesterday,2"]
    with pytest.raises(IngestError) as err:
        ingest.ingest_csv(write_csv(tmp_path / "c.csv", rows))
    assert err.value.line == 3


def test_ingest_empty_and_custom_schema(tmp_path):
    with pytest.raises(IngestError, match="no sensors"):
        ingest.ingest_csv(write_csv(tmp_path / "e.csv", []))
    schema = CsvSchema("id", "when", "n", "%d/%m/%Y %H:%M")
    rows = ["x,01/04/2019 05:00,7", "x,01/04/2019 06:00,8"]
    panel = ingest.ingest_csv(write_csv(tmp_path / "s.csv", rows, "id,when,n"), schema)
    assert panel.timestamps[0] == np.datetime64("2019-04-01T05", "h")
    np.testing.assert_array_equal(panel.values[:, 0], [7, 8])


def test_sensor_meta_ranges():
    with pytest.raises(PedflowError):
        SensorMeta("a", 91.0, 0.0)
    with pytest.raises(PedflowError):
        SensorMeta("a", 0.0, -181.0)


def test_panel_rejects_duplicate_ids_and_unsorted_time():
    with pytest.raises(PedflowError):
        make_panel(np.ones((2, 2)), ids=["a", "a"])
    with pytest.raises(PedflowError):
        PanelSeries(np.ones((2, 1)), [START + 1, START], [SensorMeta("a")])


# ------------------------------------------------------------ select_sensors

def _panel_with_missing(counts, ids):
    t = 10
    values = np.ones((t, len(counts)))
    for j, c in enumerate(counts):
        values[:c, j] = np.nan
    return make_panel(values, ids=ids)


def test_select_sensors_fewest_missing():
    panel = _panel_with_missing([5, 0, 3], ["a", "b", "c"])
    assert select_sensors(panel, 2).sensor_ids == ["b", "c"]
    assert select_sensors(panel, 3).sensor_ids == ["a", "b", "c"]


def test_select_sensors_tie_by_id():
    panel = _panel_with_missing([2, 2, 9], ["b", "a", "c"])
    assert select_sensors(panel, 1).sensor_ids == ["a"]
    with pytest.raises(PedflowError):
        select_sensors(panel, 4)


# ------------------------------------------------------------ impute_missing

def test_impute_same_hour_mean():
    values = np.full((72, 1), 1.0)
    values[9, 0], values[33, 0], values[57, 0] = 10, np.nan, 14
    out = impute_missing(make_panel(values))
    assert out.values[33, 0] == 12
    assert not out.missing_mask.any()


def test_impute_identity_and_error():
    panel = make_panel(np.arange(48.0))
    assert impute_missing(panel) is panel
    values = np.arange(48.0)
    values[[3, 27]] = np.nan
    with pytest.raises(ImputationError) as err:
        impute_missing(make_panel(values, ids=["z"]))
    assert err.value.sensor_id == "z" and err.value.hour == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_impute_idempotent(seed):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0, 100, (96, 3))
    values[rng.random(values.shape) < 0.2] = np.nan
    values[:24] = np.where(np.isnan(values[:24]), 1.0, values[:24])
    once = impute_missing(make_panel(values))
    np.testing.assert_array_equal(impute_missing(once).values, once.values)


# -------------------------------------------------------------- make_windows

@pytest.mark.parametrize("t,expected", [(10, 1), (12, 3)])
def test_window_count_examples(t, expected):
    assert len(make_windows(make_panel(np.arange(t)), 5, 5)) == expected


def test_window_too_short():
    with pytest.raises(PedflowError):
        make_windows(make_panel(np.arange(9)), 5, 5)


def test_window_rows():
    w = make_windows(make_panel(np.arange(20.0)), 3, 2, step=4)
    for s in w:
        t = s.anchor
        np.testing.assert_array_equal(s.input[:, 0], np.arange(t - 2, t + 1))
        np.testing.assert_array_equal(s.target[:, 0], [t + 1, t + 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.integers(1, 6), st.integers(1, 6), st.integers(1, 5))
def test_window_count_formula(t, l_in, l_out, step):
    if t < l_in + l_out:
        return
    w = make_windows(np.zeros((t, 1)), l_in, l_out, step)
    assert len(w) == (t - l_in - l_out) // step + 1
    assert w.anchors[-1] + l_out < t


def test_windows_respect_gaps():
    panel = make_panel(np.arange(30.0)).take_rows(np.r_[0:12, 18:30])
    assert len(make_windows(panel, 2, 1)) == 22
    w = make_windows(panel, 2, 1, respect_gaps=True)
    assert len(w) == 20


# -------------------------------------------------------- chronological_split

@pytest.mark.parametrize("t,lengths", [(100, (70, 10, 20)), (10, (7, 1, 2))])
def test_split_lengths(t, lengths):
    parts = chronological_split(make_panel(np.arange(float(t))))
    assert tuple(len(p) for p in parts) == lengths
    np.testing.assert_array_equal(np.concatenate([p.values for p in parts]),
                                  np.arange(float(t))[:, None])


def test_split_spec_invalid():
    with pytest.raises(PedflowError):
        SplitSpec(0.7, 0.1, 0.1)
    with pytest.raises(PedflowError):
        chronological_split(make_panel(np.arange(3.0)))


# -------------------------------------------------------------- normalization

def test_zscore_example_and_round_trip(rng):
    stats = NormStats(np.array([100.0]), np.array([50.0]))
    assert stats.transform([[150.0]])[0, 0] == 1.0
    panel = make_panel(rng.uniform(1, 1000, (50, 4)))
    st_ = NormStats.fit(panel)
    back = ingest.denormalize(ingest.normalize(panel, st_), st_)
    np.testing.assert_allclose(back.values, panel.values, rtol=1e-12, atol=0)


def test_zero_std_names_sensor():
    with pytest.raises(ZeroStdError, match="flat"):
        NormStats.fit(make_panel(np.c_[np.ones(5), np.arange(5.0)], ids=["flat", "ok"]))


# --------------------------------------------------------------- persistence

def test_panel_round_trip(tmp_path, rng):
    values = rng.uniform(0, 100, (30, 2))
    values[4, 1] = np.nan
    panel = PanelSeries(values, START + np.arange(30) * ingest.HOUR,
                        [SensorMeta("a", -37.8, 144.9, "x"), SensorMeta("b")])
    ingest.save_panel(panel, tmp_path / "p.csv")
    back = ingest.load_panel(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.values, panel.values)
    np.testing.assert_array_equal(back.timestamps, panel.timestamps)
    assert back.sensors == panel.sensors
    side = json.loads((tmp_path / "p.sensors.json").read_text())
    assert side["format"] == ingest.PANEL_FORMAT
