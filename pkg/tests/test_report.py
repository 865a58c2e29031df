import io
from pathlib import Path

import pandas as pd
import pytest
import yaml

from backend.core.errors import DataError
from backend.core.kinematics import compose_error
from backend.core.report import (
    TABLE_COLUMNS,
    emit_report,
    load_report,
    render_csv,
    render_yaml,
    report_table,
)
from backend.report_model import ComparisonRow, ComposedRow, FoldRow, JointMetrics, Report


def metrics(a, b, c):
    return JointMetrics(neck=a, head=b, jaw=c)


@pytest.fixture
def report():
    folds = [
        FoldRow(label="person 1", person_id=1, mpjpe=metrics(2.0, 4.0, 6.0), mpve=metrics(3.0, 5.0, 7.0), n_windows=10),
        FoldRow(label="person 2", person_id=2, mpjpe=metrics(4.0, 6.0, 8.0), mpve=metrics(5.0, 7.0, 9.0), n_windows=12),
    ]
    average = FoldRow(
        label="Average",
        mpjpe=JointMetrics.mean_of([f.mpjpe for f in folds]),
        mpve=JointMetrics.mean_of([f.mpve for f in folds]),
        n_windows=22,
    )
    return Report(
        folds=folds,
        average=average,
        comparisons=[ComparisonRow(label="constant midpoint", per_fold_mpjpe={1: 40.0, 2: 50.0})],
        composed=ComposedRow(
            label="reference", reference_mm=24.9, measured_mm=5.0, composed_mm=compose_error(24.9, 5.0)
        ),
        fingerprint="abc123def456",
        seed=7,
    )


def test_csv_matches_golden(report, data_dir):
    assert render_csv(report) == Path(data_dir, "report_golden.csv").read_text()


def test_column_order(report):
    assert list(report_table(report).columns) == TABLE_COLUMNS
    assert TABLE_COLUMNS[1:3] == ["Neck MPJPE", "Neck MPVE"]
    assert TABLE_COLUMNS[-2:] == ["Avg MPJPE", "Avg MPVE"]


def test_avg_is_mean_of_joints(report):
    table = report_table(report)
    for _, row in table.iterrows():
        mean = (row["Neck MPJPE"] + row["Head MPJPE"] + row["Jaw MPJPE"]) / 3
        assert row["Avg MPJPE"] == pytest.approx(mean, abs=0.05)


def test_yaml_and_csv_agree(report):
    document = yaml.safe_load(render_yaml(report))
    assert document["fingerprint"] == "abc123def456"
    assert document["seed"] == 7
    body = "\n".join(line for line in render_csv(report).splitlines() if not line.startswith("#"))
    table = pd.read_csv(io.StringIO(body))
    for _, row in table.iterrows():
        assert document["rows"][row["Row"]] == [row[c] for c in TABLE_COLUMNS[1:]]
    assert document["composed"]["composed_mm"] == 25.4
    assert document["comparisons"]["constant midpoint"]["average_mpjpe"] == 45.0


def test_emit_both(tmp_path, report):
    written = emit_report(report, tmp_path / "out" / "lopo", fmt="both")
    assert [p.name for p in written] == ["lopo.csv", "lopo.yaml"]
    assert written[0].read_text() == render_csv(report)


def test_format_from_suffix(tmp_path, report):
    (path,) = emit_report(report, tmp_path / "table.yml")
    assert yaml.safe_load(path.read_text())["seed"] == 7


def test_unknown_format(tmp_path, report):
    with pytest.raises(DataError):
        emit_report(report, tmp_path / "table.txt")


def test_json_round_trip(tmp_path, report):
    path = tmp_path / "report.json"
    path.write_text(report.model_dump_json())
    assert load_report(path) == report


def test_missing_report(tmp_path):
    with pytest.raises(DataError):
        load_report(tmp_path / "none.json")
