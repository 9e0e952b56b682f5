import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthgrowth.errors import (
    ConflictError,
    InsufficientDataError,
    RowError,
    SchemaError,
    ValidationError,
)
from synthgrowth.panel import (
    PANEL_COLUMNS,
    Panel,
    RegionSeries,
    Schema,
    derive,
    ingest_csv,
    monotonize,
    write_panel_csv,
)


def _write(tmp_path, rows, header="date,region_id,cumulative_cases,cumulative_tests"):
    path = tmp_path / "in.csv"
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def _series(rid, cases, tests=None, start="2020-09-01"):
    n = len(cases)
    dates = np.datetime64(start) + np.arange(n)
    return RegionSeries(rid, dates, cases, tests if tests is not None else np.arange(n) * 10.0)


def test_single_region_three_rows(tmp_path):
    path = _write(tmp_path, ["2020-09-01,A,1,10", "2020-09-02,A,3,20", "2020-09-03,A,4,30"])
    panel = ingest_csv(path)
    assert panel.region_ids == ["A"]
    assert len(panel) == 3


def test_negative_revision_is_monotonized(tmp_path):
    # hand-applied cleaning rule: x_t <- max(x_t, x_{t-1})
    rows = ["2020-09-01,A,10,100", "2020-09-02,A,14,110", "2020-09-03,A,12,120",
            "2020-09-04,A,15,125", "2020-09-05,A,15,140"]
    panel = ingest_csv(_write(tmp_path, rows))
    assert panel["A"].cumulative_cases.tolist() == [10, 14, 14, 15, 15]
    assert derive(panel)["A"].new_cases.tolist() == [4, 0, 1, 0]


def test_rows_sorted_and_aligned_to_intersection(tmp_path):
    rows = ["2020-09-03,B,5,1", "2020-09-02,A,2,1", "2020-09-01,A,1,1", "2020-09-03,A,3,1",
            "2020-09-02,B,4,1", "2020-09-04,B,6,1"]
    panel = ingest_csv(_write(tmp_path, rows))
    assert panel.region_ids == ["B", "A"]
    assert [str(d) for d in panel.dates] == ["2020-09-02", "2020-09-03"]
    assert panel["A"].cumulative_cases.tolist() == [2, 3]


def test_gap_filled_by_carry_forward(tmp_path):
    rows = ["2020-09-01,A,1,10", "2020-09-03,A,5,30"]
    panel = ingest_csv(_write(tmp_path, rows))
    assert panel["A"].cumulative_cases.tolist() == [1, 1, 5]


def test_custom_schema(tmp_path):
    path = _write(tmp_path, ["2020-09-01T18:00:00,A,1,10", "2020-09-02T18:00:00,A,2,11"],
                  header="data,denominazione_regione,totale_casi,tamponi")
    panel = ingest_csv(path, Schema.dpc())
    assert panel["A"].cumulative_tests.tolist() == [10, 11]


def test_missing_column(tmp_path):
    with pytest.raises(SchemaError):
        ingest_csv(_write(tmp_path, ["2020-09-01,A,1"], header="date,region_id,cumulative_cases"))


@pytest.mark.parametrize("bad", ["2020-13-01,A,1,1", "2020-09-02,A,x,1"])
def test_row_error_carries_line(tmp_path, bad):
    with pytest.raises(RowError) as info:
        ingest_csv(_write(tmp_path, ["2020-09-01,A,1,1", bad]))
    assert info.value.details["line"] == 3


def test_duplicate_is_conflict(tmp_path):
    with pytest.raises(ConflictError):
        ingest_csv(_write(tmp_path, ["2020-09-01,A,1,1", "2020-09-01,A,2,2"]))


def test_derive_examples():
    p = Panel((_series("A", [10, 15, 15, 22]), _series("B", [10, 8, 12, 12]), _series("C", [7, 7, 7, 7])))
    d = derive(p)
    assert d["A"].new_cases.tolist() == [5, 0, 7]
    assert d["B"].new_cases.tolist() == [0, 2, 0]
    assert d["C"].new_cases.tolist() == [0, 0, 0]
    assert len(d["A"]) == len(p) - 1
    # 2020-09-02 is a Wednesday; Monday is 0
    assert d["A"].day_of_week.tolist() == [2, 3, 4]


def test_derive_short_series():
    with pytest.raises(InsufficientDataError):
        derive(Panel((_series("A", [1]),)))


def test_panel_invariants():
    a, b = _series("A", [1, 2, 3]), _series("B", [1, 2, 3])
    with pytest.raises(ValidationError):
        Panel((a, b), treated_id="Z")
    with pytest.raises(ValidationError):
        Panel((a, b), treated_id="A", intervention_date="2020-09-01")
    with pytest.raises(ValidationError):
        Panel((a, _series("B", [1, 2, 3], start="2020-09-02")))
    with pytest.raises(ConflictError):
        Panel((a, a))
    p = Panel((a, b), treated_id="A", intervention_date="2020-09-03")
    assert p.pre_period_len == 2 and p.donor_ids == ["B"]


counts = st.lists(st.integers(0, 10_000), min_size=2, max_size=40)


@given(counts)
def test_resummation_reproduces_cleaned_series(raw):
    s = _series("A", raw)
    d = derive(Panel((s,)))["A"]
    cleaned = monotonize(raw)
    rebuilt = cleaned[0] + np.concatenate([[0.0], np.cumsum(d.new_cases)])
    assert np.array_equal(rebuilt, cleaned)
    assert np.all(d.new_cases >= 0)
    assert np.all(np.diff(cleaned) >= 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(counts, min_size=1, max_size=4))
def test_alignment_idempotent(tmp_path_factory, series):
    tmp = tmp_path_factory.mktemp("idem")
    rows = []
    for k, raw in enumerate(series):
        for t, v in enumerate(raw):
            rows.append(f"{np.datetime64('2020-09-01') + t},R{k},{v},{v * 3}")
    first = ingest_csv(_write(tmp, rows))
    out = tmp / "panel.csv"
    write_panel_csv(first, out)
    again = ingest_csv(out)
    assert again == first
    write_panel_csv(again, tmp / "panel2.csv")
    assert out.read_bytes() == (tmp / "panel2.csv").read_bytes()


def test_panel_csv_columns(tmp_path):
    p = Panel((_series("A", [1, 3, 6]),))
    write_panel_csv(p, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == ",".join(PANEL_COLUMNS)
    assert lines[1] == "A,2020-09-01,1,,0,"
    assert lines[3] == "A,2020-09-03,6,3,20,10"
