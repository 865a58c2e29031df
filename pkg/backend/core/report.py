"""
Report files.

The delimited form is one table with the fixed column order
``(Neck, Head, Jaw, Avg) x (MPJPE, MPVE)``, one row per fold and an
``Average`` row, preceded by a ``#`` line carrying the config fingerprint
and seed and followed by ``#`` lines for the comparison and composed rows.
The structured form is YAML with the same numbers. Every value is in
millimeters with one decimal.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
import yaml

from backend.core.errors import DataError
from backend.report_model import FoldRow, Report

logger = logging.getLogger(__name__)

JOINT_COLUMNS = ("Neck", "Head", "Jaw", "Avg")
METRIC_COLUMNS = ("MPJPE", "MPVE")
TABLE_COLUMNS = ["Row"] + [f"{j} {m}" for j in JOINT_COLUMNS for m in METRIC_COLUMNS]
FORMATS = ("csv", "yaml")


def _round(value: float) -> float:
    return float(f"{value:.1f}")


def _row_values(row: FoldRow) -> List[float]:
    values = []
    for joint in ("neck", "head", "jaw", "avg"):
        values.append(_round(getattr(row.mpjpe, joint)))
        values.append(_round(getattr(row.mpve, joint)))
    return values


def report_table(report: Report) -> pd.DataFrame:
    """The Table-style frame: fold rows then the average row."""
    rows = report.folds + [report.average]
    return pd.DataFrame([[r.label] + _row_values(r) for r in rows], columns=TABLE_COLUMNS)


def report_document(report: Report) -> Dict:
    table = report_table(report)
    return {
        "fingerprint": report.fingerprint,
        "seed": report.seed,
        "columns": TABLE_COLUMNS[1:],
        "rows": {
            row["Row"]: [float(row[c]) for c in TABLE_COLUMNS[1:]] for _, row in table.iterrows()
        },
        "comparisons": {
            c.label: {
                "average_mpjpe": _round(c.average_mpjpe),
                "per_fold_mpjpe": {int(k): _round(v) for k, v in c.per_fold_mpjpe.items()},
            }
            for c in report.comparisons
        },
        "composed": {
            "label": report.composed.label,
            "reference_mm": _round(report.composed.reference_mm),
            "measured_mm": _round(report.composed.measured_mm),
            "composed_mm": _round(report.composed.composed_mm),
        },
    }


def render_csv(report: Report) -> str:
    lines = [f"# fingerprint={report.fingerprint} seed={report.seed}"]
    body = report_table(report).to_csv(index=False, float_format="%.1f", lineterminator="\n")
    lines.extend(body.rstrip("\n").split("\n"))
    for c in report.comparisons:
        folds = " ".join(f"{k}={v:.1f}" for k, v in c.per_fold_mpjpe.items())
        lines.append(f"# comparison: {c.label}: average_mpjpe={c.average_mpjpe:.1f} {folds}")
    composed = report.composed
    lines.append(
        f"# composed: {composed.label}: reference_mm={composed.reference_mm:.1f} "
        f"measured_mm={composed.measured_mm:.1f} composed_mm={composed.composed_mm:.1f}"
    )
    return "\n".join(lines) + "\n"


def render_yaml(report: Report) -> str:
    return yaml.safe_dump(report_document(report), sort_keys=False, allow_unicode=True)


def emit_report(report: Report, path: Union[str, Path], fmt: Optional[str] = None) -> List[Path]:
    """
    Write the report as delimited text, YAML, or both.

    Args:
        report (Report): the report to write.
        path (str | Path): target file; with ``fmt="both"`` the suffix is
            replaced by ``.csv`` and ``.yaml``.
        fmt (str, optional): ``csv``, ``yaml`` or ``both``; inferred from the
            suffix when omitted.
    Returns:
        List[Path]: files written.
    Raises:
        DataError: unknown format or unwritable path.
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower().replace("yml", "yaml")
    if fmt not in FORMATS + ("both",):
        raise DataError(f"Unknown report format {fmt!r}; use csv, yaml or both")

    targets = {"csv": path, "yaml": path} if fmt != "both" else {
        "csv": path.with_suffix(".csv"), "yaml": path.with_suffix(".yaml")
    }
    renderers = {"csv": render_csv, "yaml": render_yaml}
    written = []
    for kind in (FORMATS if fmt == "both" else (fmt,)):
        target = targets[kind]
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(renderers[kind](report), encoding="utf-8")
        except OSError as e:
            logger.error(f"Could not write report to {target}: {e}")
            raise DataError(f"Could not write report to {target}: {e}") from e
        logger.info(f"Wrote {kind} report to {target}")
        written.append(target)
    return written


def load_report(path: Union[str, Path]) -> Report:
    """
    Load a report saved as JSON by ``Report.model_dump_json``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Report not found: {path}")
    return Report.model_validate_json(path.read_text(encoding="utf-8"))
