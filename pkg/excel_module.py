"""
excel_module.py – Excel workbook for experiment reports
-------------------------------------------------------
Writes the per-step conservation table, the run summary and the convergence
table of one experiment into report.xlsx. Rows that fail the divergence
check are highlighted and carry a comment with the residual and tolerance.
"""

import os
import logging
from typing import Dict, Optional

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Font, Alignment, PatternFill, Border, Side
from openpyxl.comments import Comment
from openpyxl.utils import get_column_letter

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

HEADER_FILL = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
WARNING_FILL = PatternFill(start_color="FFF9C4", end_color="FFF9C4", fill_type="solid")
THIN = Side(style="thin", color="D0D0D0")
BORDER = Border(left=THIN, right=THIN, top=THIN, bottom=THIN)
NUMBER_FORMAT = "0.000000000000000E+00"


def write_report(path: str, steps: Optional[pd.DataFrame], summary: Dict,
                 convergence: Optional[pd.DataFrame] = None) -> str:
    """
    Build the report workbook.

    Args:
        path: target .xlsx path
        steps: report rows (ConservationReport.frame()), may be None
        summary: flat or nested summary dict (nested values are JSON-ish strings)
        convergence: ConvergenceResult.frame(), optional

    Returns:
        str: the written path
    """
    try:
        wb = Workbook()
        ws = wb.active
        ws.title = "Summary"
        _write_summary(ws, summary)

        if steps is not None and not steps.empty:
            _write_steps(wb.create_sheet("Steps"), steps)
        if convergence is not None and not convergence.empty:
            _write_table(wb.create_sheet("Convergence"), convergence)

        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        wb.save(path)
        logger.info(f"✅ Excel report written: {os.path.basename(path)}")
        return path
    except Exception as e:
        logger.exception(f"❌ Excel write error: {e}")
        raise


def _write_headers(ws, headers):
    ws.append(list(headers))
    for col in range(1, len(headers) + 1):
        cell = ws.cell(row=1, column=col)
        cell.font = Font(bold=True, size=11, color="FFFFFF")
        cell.alignment = Alignment(horizontal="center", vertical="center", wrap_text=True)
        cell.fill = HEADER_FILL
        ws.column_dimensions[get_column_letter(col)].width = max(14, len(str(headers[col - 1])) + 4)


def _cell_value(value):
    if isinstance(value, float) and value != value:
        return None
    if hasattr(value, "item"):
        return value.item()
    return value


def _write_table(ws, frame: pd.DataFrame):
    _write_headers(ws, list(frame.columns))
    for values in frame.itertuples(index=False):
        ws.append([_cell_value(v) for v in values])
    for row in ws.iter_rows(min_row=2, max_row=ws.max_row):
        for cell in row:
            cell.border = BORDER
            if isinstance(cell.value, float):
                cell.number_format = NUMBER_FORMAT


def _write_steps(ws, steps: pd.DataFrame):
    _write_table(ws, steps)
    if "divergence_tolerance" not in steps.columns:
        return
    columns = len(steps.columns)
    for offset, record in enumerate(steps.to_dict("records")):
        residual = record.get("divergence_residual")
        tolerance = record.get("divergence_tolerance")
        if residual is None or tolerance is None or residual != residual or tolerance != tolerance:
            continue
        if abs(residual) <= tolerance:
            continue
        row = offset + 2
        comment = Comment(f"Divergence residual {residual:.3e} exceeds tolerance {tolerance:.3e}",
                          "ConservationCheck")
        comment.width = 300
        comment.height = 80
        ws.cell(row=row, column=1).comment = comment
        for col in range(1, columns + 1):
            ws.cell(row=row, column=col).fill = WARNING_FILL


def _write_summary(ws, summary: Dict):
    _write_headers(ws, ["Key", "Value"])
    ws.column_dimensions["A"].width = 28
    ws.column_dimensions["B"].width = 80
    for key, value in _flatten(summary):
        ws.append([key, value])
    for row in ws.iter_rows(min_row=2, max_row=ws.max_row):
        for cell in row:
            cell.border = BORDER
            cell.alignment = Alignment(vertical="center", wrap_text=True)


def _flatten(data: Dict, prefix: str = ""):
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, name + ".")
        elif isinstance(value, (list, tuple)):
            yield name, ", ".join(str(_cell_value(v)) for v in value)
        else:
            yield name, _cell_value(value)
