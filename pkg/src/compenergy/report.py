"""Canonical JSON and derived CSV views of an experiment report."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from compenergy.errors import EmitError

SIG_DIGITS = 9
FORMATS = ("json", "csv")

CELL_COLUMNS = ("precision", "length", "component", "mean_mj", "std_mj", "rel_std_pct",
                "total_flops", "duration_s", "e_per_flop", "truth_mj", "repetitions",
                "zero_reading_trials")
MARGINAL_COLUMNS = ("precision", "component", "length_lo", "length_hi",
                    "marginal_e_per_flop")
FIT_COLUMNS = ("precision", "component", "e0_hat_mj", "k_hat_mj_per_gflop", "r_squared",
               "negative_intercept")
CAPTURE_COLUMNS = ("precision", "length", "capture_mj", "model_mj", "pct_capture")


def canonical(value):
    """The value as it reads back from :func:`to_json`."""
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return float(f"{value:.{SIG_DIGITS}g}")
    if isinstance(value, dict):
        return {str(k): canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [canonical(v) for v in value]
    return value


def to_json(report: dict) -> str:
    """Sorted keys, floats rounded to 9 significant digits, trailing newline."""
    return json.dumps(canonical(report), sort_keys=True, indent=2) + "\n"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "" if not math.isfinite(value) else f"{value:.{SIG_DIGITS}g}"
    return str(value)


def csv_table(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _wide(rows, value_key, length_key) -> str:
    """One row per length, one column per precision/component pair."""
    columns = sorted({f"{r['precision']}/{r['component']}" for r in rows})
    table: dict[int, dict] = {}
    for r in rows:
        table.setdefault(r[length_key], {})[f"{r['precision']}/{r['component']}"] = r[value_key]
    out = [{length_key: n, **table[n]} for n in sorted(table)]
    return csv_table((length_key, *columns), out)


def csv_views(report: dict) -> dict[str, str]:
    records = report.get("records", [])
    summary = report.get("summary", {})
    marginals = summary.get("marginals", [])
    return {
        "cells.csv": csv_table(CELL_COLUMNS, records),
        "captures.csv": csv_table(CAPTURE_COLUMNS, summary.get("captures", [])),
        "marginals.csv": csv_table(MARGINAL_COLUMNS, marginals),
        "fits.csv": csv_table(FIT_COLUMNS, summary.get("fits", [])),
        "series_e_per_flop.csv": _wide(records, "e_per_flop", "length"),
        "series_marginal.csv": _wide(marginals, "marginal_e_per_flop", "length_hi"),
    }


def emit(report: dict, output_dir: str | Path, formats=FORMATS) -> list[Path]:
    """Write ``report.json`` and/or the CSV views; returns the written paths.

    On any I/O failure every file written by this call is removed and
    :class:`EmitError` is raised.
    """
    formats = tuple(formats)
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown formats {sorted(unknown)}")
    payload: dict[str, str] = {}
    if "json" in formats:
        payload["report.json"] = to_json(report)
    if "csv" in formats:
        payload.update(csv_views(report))

    out = Path(output_dir)
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in payload.items():
            path = out / name
            written.append(path)
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(text)
    except OSError as exc:
        for path in written:
            path.unlink(missing_ok=True)
        raise EmitError(f"could not write report to {out}: {exc}") from exc
    return written
