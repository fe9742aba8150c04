"""Writing experiment results: tables, plot data and figures.

Files written into the output directory (``<ext>`` is ``csv`` or ``json``):

* ``detail.<ext>``   one row per (n, replication, metric)
* ``summary.<ext>``  per (metric, n): count, aborted, mean, stderr, log n, log mean
* ``fits.<ext>``     slope, intercept and r^2 per fitted metric
* ``timings.<ext>``  wall-clock runtime per row, kept apart so that the detail
  file is byte-identical between runs
* ``<metric>.dat``   two columns, log n and log mean error
* ``<metric>.png``   log-log plot of the same points with the fitted line

CSV follows RFC 4180 (header row, minimal quoting, CRLF line ends); floats
are written as their shortest round-trip decimal.  JSON files hold an array
of row objects with ``null`` for missing values.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, fields
from pathlib import Path

from .experiments import ExperimentResult, FitRecord, ResultRow, summarize

__all__ = ["DETAIL_FIELDS", "emit", "read_detail", "format_value", "write_table", "read_table"]

DETAIL_FIELDS = ("experiment_id", "n", "replication", "seed", "metric", "value", "aborted")
TIMING_FIELDS = ("experiment_id", "n", "replication", "metric", "runtime_ms")
SUMMARY_FIELDS = ("metric", "n", "count", "aborted", "mean", "stderr", "log_n", "log_mean")
FIT_FIELDS = tuple(f.name for f in fields(FitRecord))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_value(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_table(path: Path, header, records, fmt: str) -> None:
    if fmt == "json":
        payload = [{k: _json_value(rec[k]) for k in header} for rec in records]
        path.write_text(json.dumps(payload, indent=1) + "\n")
        return
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for rec in records:
        writer.writerow([format_value(rec[k]) for k in header])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def read_table(path) -> list[dict]:
    """Records of a table written by :func:`write_table`, values as strings (CSV) or JSON types."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _parse_float(value) -> float:
    return math.nan if value is None else float(value)


def _parse_bool(value) -> bool:
    return value if isinstance(value, bool) else value == "true"


def read_detail(directory, fmt: str = "csv") -> list[ResultRow]:
    """Rebuild the rows from ``detail`` and ``timings`` files."""
    directory = Path(directory)
    detail = read_table(directory / f"detail.{fmt}")
    timings = read_table(directory / f"timings.{fmt}")
    if len(detail) != len(timings):
        raise ValueError("detail and timings files disagree")
    rows = []
    for rec, tim in zip(detail, timings):
        rows.append(ResultRow(
            rec["experiment_id"], int(rec["n"]), int(rec["replication"]), int(rec["seed"]),
            rec["metric"], _parse_float(rec["value"]), _parse_float(tim["runtime_ms"]),
            _parse_bool(rec["aborted"]),
        ))
    return rows


def _plot(path: Path, metric: str, points, fit: FitRecord | None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(xs, ys, "o", label="mean over replications")
    if fit is not None and fit.status == "ok":
        line = [fit.intercept + fit.slope * x for x in xs]
        ax.plot(xs, line, "-", label=f"slope {fit.slope:.3f}, r2 {fit.r_squared:.3f}")
    ax.set_xlabel("log n")
    ax.set_ylabel(f"log {metric}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit(result: ExperimentResult, out_dir=None, fmt: str | None = None, figures: bool = True) -> Path:
    """Write all result files; returns the output directory."""
    config = result.config
    out = Path(out_dir if out_dir is not None else config.output)
    fmt = fmt or config.format
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    rows = [asdict(r) for r in result.rows]
    write_table(out / f"detail.{fmt}", DETAIL_FIELDS, rows, fmt)
    write_table(out / f"timings.{fmt}", TIMING_FIELDS, rows, fmt)
    summary = summarize(result.rows)
    write_table(out / f"summary.{fmt}", SUMMARY_FIELDS, summary, fmt)
    write_table(out / f"fits.{fmt}", FIT_FIELDS, [asdict(f) for f in result.fits], fmt)

    for rec in result.fits:
        points = sorted(
            (s["log_n"], s["log_mean"]) for s in summary
            if s["metric"] == rec.metric and math.isfinite(s["log_mean"])
        )
        with open(out / f"{rec.metric}.dat", "w") as fh:
            fh.write("# log_n log_mean\n")
            for x, y in points:
                fh.write(f"{x!r} {y!r}\n")
        if figures and points:
            _plot(out / f"{rec.metric}.png", rec.metric, points, rec)
    return out
