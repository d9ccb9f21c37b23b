"""CSV ingestion and serialization for the imputation front end.

Values are written with 15 significant digits and a '.' decimal separator
regardless of locale, so parse -> serialize -> parse is an identity at
that precision.
"""

from __future__ import annotations

import csv

import numpy as np


class CsvFormatError(ValueError):
    """Malformed numeric CSV (ragged row, bad cell, missing header)."""


def read_matrix_csv(path, na_token: str = "NA"):
    """Parse a rectangular numeric CSV with a header row.

    Returns (header, y, mask) where y holds NaN at cells equal to the NA
    token and mask is 1.0 at observed cells.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file (header row required)") from None
        width = len(header)
        if width == 0:
            raise CsvFormatError(f"{path}: empty header row")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise CsvFormatError(
                    f"{path}: line {lineno} has {len(row)} fields, expected {width}"
                )
            parsed = np.empty(width)
            for j, cell in enumerate(row):
                cell = cell.strip()
                if cell == na_token:
                    parsed[j] = np.nan
                    continue
                try:
                    parsed[j] = float(cell)
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: non-numeric cell at line {lineno}, column {j + 1} ({cell!r})"
                    ) from None
                if not np.isfinite(parsed[j]):
                    raise CsvFormatError(
                        f"{path}: non-finite value at line {lineno}, column {j + 1}"
                    )
            rows.append(parsed)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    y = np.vstack(rows)
    mask = np.isfinite(y).astype(float)
    return header, y, mask


def format_value(x: float) -> str:
    return f"{float(x):.15g}"


def write_matrix_csv(path, header, matrix) -> None:
    matrix = np.asarray(matrix, dtype=float)
    if len(header) != matrix.shape[1]:
        raise ValueError(f"header width {len(header)} != matrix width {matrix.shape[1]}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in matrix:
            writer.writerow([format_value(v) for v in row])


def fully_missing_columns(mask) -> list[int]:
    mask = np.asarray(mask, dtype=float)
    return np.where(mask.sum(axis=0) < 1)[0].tolist()
