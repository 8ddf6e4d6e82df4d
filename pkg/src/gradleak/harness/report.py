"""Report artifacts: samples.csv, correlations.csv, SVG scatter plots, report.json.

Reals are written with 17 significant digits so every float64 survives a
round trip.  Files are UTF-8 with LF line endings.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import sys
from html import escape
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..gradmatch import GradLossKind
from ..lavp import PROXY_NAMES, ProxyRecord
from ..metrics import SimilarityScores
from .pipeline import SCORE_NAMES, CorrelationReport, ReportRow, compute_correlations

ALL_KINDS = (GradLossKind.L2, GradLossKind.COSINE)

SAMPLES_HEADER = (
    "sample_id", "label", *PROXY_NAMES,
    "mse_l2", "ssim_l2", "psnr_l2", "gmfinal_l2",
    "mse_cos", "ssim_cos", "psnr_cos", "gmfinal_cos",
    "status",
)
COUNT_ROW = "sample_count"


def fmt_real(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def _parse_real(text: str, where: str):
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{where}: not a number: {text!r}", 0) from None


def _write_csv(path: Path, records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(records)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


# -- samples.csv -------------------------------------------------------------

def samples_records(rows):
    yield SAMPLES_HEADER
    for r in rows:
        rec = [str(r.sample_id), str(r.label)]
        rec += [fmt_real(getattr(r.proxies, p)) for p in PROXY_NAMES]
        for kind in ALL_KINDS:
            sc = r.scores.get(kind)
            if sc is None:
                rec += ["", "", "", ""]
            else:
                rec += [fmt_real(sc.mse), fmt_real(sc.ssim), fmt_real(sc.psnr),
                        fmt_real(r.gm_final.get(kind))]
        rec.append(r.status)
        yield rec


def write_samples_csv(rows, path):
    _write_csv(Path(path), samples_records(rows))


def read_samples_csv(path):
    """``ReportRow`` objects rebuilt from a samples.csv file.

    Diagnostics and failure reasons beyond the status text are not stored
    in the CSV; a failed kind is restored with the reason ``"from csv"``
    unless the status field spells it out.
    """
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != SAMPLES_HEADER:
        raise ParseError(f"{path}: unexpected samples.csv header", 0)
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) != len(SAMPLES_HEADER):
            raise ParseError(f"{path}: line {lineno} has {len(rec)} fields", 0)
        field = dict(zip(SAMPLES_HEADER, rec))
        where = f"{path}:{lineno}"
        proxies = ProxyRecord(int(field["sample_id"]),
                              *(_parse_real(field[p], where) for p in PROXY_NAMES))
        row = ReportRow(int(field["sample_id"]), int(field["label"]), proxies)
        for kind in ALL_KINDS:
            k = kind.value
            mse = _parse_real(field[f"mse_{k}"], where)
            if mse is not None:
                row.scores[kind] = SimilarityScores(
                    mse=mse,
                    psnr=_parse_real(field[f"psnr_{k}"], where),
                    ssim=_parse_real(field[f"ssim_{k}"], where),
                )
                row.gm_final[kind] = _parse_real(field[f"gmfinal_{k}"], where)
        for part in field["status"].split(";"):
            if part.startswith("failed_"):
                k, _, reason = part[len("failed_"):].partition(":")
                row.failures[GradLossKind.parse(k)] = reason or "from csv"
        rows.append(row)
    return rows


def kinds_in(rows):
    """Attack kinds that have scores in at least one row, in canonical order."""
    present = {k for r in rows for k in (*r.scores, *r.failures)}
    return tuple(k for k in ALL_KINDS if k in present)


# -- correlations.csv --------------------------------------------------------

def write_correlations_csv(report: CorrelationReport, path):
    records = [("proxy", *report.columns)]
    for i, proxy in enumerate(report.proxies):
        records.append((proxy, *(fmt_real(v) for v in report.matrix[i])))
    records.append((COUNT_ROW, *(str(report.sample_counts[c.rsplit("_", 1)[1]])
                                 for c in report.columns)))
    _write_csv(Path(path), records)


def read_correlations_csv(path, digest="") -> CorrelationReport:
    text = Path(path).read_text(encoding="utf-8")
    records = list(csv.reader(io.StringIO(text)))
    if not records or records[0][0] != "proxy":
        raise ParseError(f"{path}: unexpected correlations.csv header", 0)
    columns = tuple(records[0][1:])
    proxies, values, counts = [], [], {}
    for rec in records[1:]:
        if rec[0] == COUNT_ROW:
            for col, n in zip(columns, rec[1:]):
                counts[col.rsplit("_", 1)[1]] = int(n)
            continue
        proxies.append(rec[0])
        values.append([float(v) for v in rec[1:]])
    matrix = np.array(values, dtype=np.float64).reshape(len(proxies), len(columns))
    return CorrelationReport(tuple(proxies), columns, matrix, counts, digest)


# -- SVG scatter plots -------------------------------------------------------

def decade_ticks(lo: float, hi: float):
    """Powers of ten spanning ``[lo, hi]`` (both positive)."""
    if not (lo > 0 and hi > 0):
        raise ValueError("log axis needs positive bounds")
    a = math.floor(math.log10(lo))
    b = math.ceil(math.log10(hi))
    if a == b:
        b += 1
    return [10.0**e for e in range(a, b + 1)]


def _fmt_tick(v):
    e = round(math.log10(v))
    return f"1e{e}"


def svg_scatter(xs, ys, title, xlabel, ylabel, width=420, height=320) -> str:
    """Standalone SVG scatter with a log10 x axis and linear y axis.

    Points with a non-positive or non-finite x are left out and counted in
    a footnote.
    """
    xs, ys = list(xs), list(ys)
    pts = [(float(x), float(y)) for x, y in zip(xs, ys)
           if x is not None and y is not None and x > 0 and math.isfinite(x) and math.isfinite(y)]
    dropped = len(xs) - len(pts)
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if pts:
        lx = [math.log10(x) for x, _ in pts]
        ticks = decade_ticks(min(x for x, _ in pts), max(x for x, _ in pts))
        x0, x1 = math.log10(ticks[0]), math.log10(ticks[-1])
        y_lo = min(y for _, y in pts)
        y_hi = max(y for _, y in pts)
        if y_hi == y_lo:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad

        def px(v):
            return left + (v - x0) / (x1 - x0) * pw

        def py(v):
            return top + ph - (v - y_lo) / (y_hi - y_lo) * ph

        for t in ticks:
            x = px(math.log10(t))
            out.append(f'<line class="xtick" x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" '
                       f'y2="{top + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{x:.2f}" y="{top + ph + 18}" text-anchor="middle" '
                       f'font-size="10" font-family="sans-serif">{_fmt_tick(t)}</text>')
        for frac in (0.0, 0.5, 1.0):
            v = y_lo + frac * (y_hi - y_lo)
            y = py(v)
            out.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
            out.append(f'<text x="{left - 8}" y="{y + 3:.2f}" text-anchor="end" font-size="10" '
                       f'font-family="sans-serif">{v:.3g}</text>')
        for (_, y), xl in zip(pts, lx):
            out.append(f'<circle cx="{px(xl):.2f}" cy="{py(y):.2f}" r="3" '
                       f'fill="steelblue" fill-opacity="0.8"/>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle" font-size="11" '
               f'font-family="sans-serif">{escape(xlabel)} (log scale)</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" font-size="11" '
               f'font-family="sans-serif" transform="rotate(-90 14 {top + ph / 2})">'
               f'{escape(ylabel)}</text>')
    if dropped:
        out.append(f'<text x="{width - right}" y="{height - 2}" text-anchor="end" font-size="9" '
                   f'font-family="sans-serif">{dropped} non-positive point(s) omitted</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_scatter_plots(rows, report: CorrelationReport, out_dir):
    out_dir = Path(out_dir)
    written = []
    for proxy in report.proxies:
        for column in report.columns:
            score, kind_name = column.rsplit("_", 1)
            kind = GradLossKind.parse(kind_name)
            usable = [r for r in rows if kind in r.scores]
            xs = [getattr(r.proxies, proxy) for r in usable]
            ys = [getattr(r.scores[kind], score) for r in usable]
            rho = report.get(proxy, column)
            rho_txt = "undefined" if math.isnan(rho) else f"{rho:+.3f}"
            title = f"{proxy} vs {column}: Spearman {rho_txt}"
            path = out_dir / f"scatter_{proxy}_{column}.svg"
            path.write_text(svg_scatter(xs, ys, title, proxy, column),
                            encoding="utf-8", newline="")
            written.append(path.name)
    return written


# -- report.json and the whole bundle ----------------------------------------

def environment_stamp():
    import scipy

    from .. import __version__

    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "gradleak": __version__,
    }


def emit_report(rows, report: CorrelationReport, output_dir, config_text=None):
    """Write every artifact for one experiment into ``output_dir``."""
    if not rows:
        raise ValueError("no rows to report")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_samples_csv(rows, out / "samples.csv")
    files = ["samples.csv"]
    if report is not None:
        write_correlations_csv(report, out / "correlations.csv")
        files.append("correlations.csv")
        files += write_scatter_plots(rows, report, out)
    if config_text is not None:
        (out / "config.txt").write_text(config_text, encoding="utf-8", newline="")
        files.append("config.txt")
    meta = {
        "config_digest": report.config_digest if report is not None else "",
        "sample_count": len(rows),
        "usable_rows": dict(report.sample_counts) if report is not None else {},
        "environment": environment_stamp(),
        "files": files,
    }
    (out / "report.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8", newline="")
    return out


def rerender(input_dir, output_dir=None):
    """Rebuild correlations and plots from an existing samples.csv.

    The config digest is recovered from ``config.txt`` when present.
    """
    from .config import parse_config

    src = Path(input_dir)
    rows = read_samples_csv(src / "samples.csv")
    config_path = src / "config.txt"
    config_text = config_path.read_text(encoding="utf-8") if config_path.exists() else None
    digest = parse_config(config_text).digest() if config_text else ""
    report = compute_correlations(rows, kinds_in(rows), digest)
    emit_report(rows, report, output_dir or src, config_text)
    return rows, report
