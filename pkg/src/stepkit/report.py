"""Static HTML and markdown rendering of evaluation results."""

from __future__ import annotations

import html
from typing import Optional, Sequence

from .evaluation import EvalReport


def _pct(x: Optional[float]) -> str:
    return "-" if x is None else f"{100 * x:.1f}"


def ksl_rows(report: EvalReport) -> list[list[str]]:
    rows = []
    for method, modes in report.ksl.items():
        for mode, s in modes.items():
            rows.append([method, mode, _pct(s["precision"]), _pct(s["recall"]), _pct(s["f1"]), _pct(s["iou"])])
    return rows


KSL_HEADER = ["method", "averaging", "P", "R", "F1", "IoU"]


def loss_curve_svg(losses: Sequence[float], width: int = 480, height: int = 200) -> str:
    if not losses:
        return "<p>no training history</p>"
    pad = 30
    lo, hi = min(losses), max(losses)
    span = (hi - lo) or 1.0
    n = len(losses)
    pts = []
    for i, v in enumerate(losses):
        x = pad + (width - 2 * pad) * (i / max(n - 1, 1))
        y = height - pad - (height - 2 * pad) * ((v - lo) / span)
        pts.append(f"{x:.1f},{y:.1f}")
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white" stroke="#ccc"/>'
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{" ".join(pts)}"/>'
        f'<text x="{pad}" y="{pad - 10}" font-size="11">loss {hi:.4g}</text>'
        f'<text x="{pad}" y="{height - 8}" font-size="11">loss {lo:.4g} (epoch {n})</text>'
        "</svg>"
    )


def _html_table(header, rows) -> str:
    head = "".join(f"<th>{html.escape(h)}</th>" for h in header)
    body = "".join("<tr>" + "".join(f"<td>{html.escape(str(c))}</td>" for c in r) + "</tr>" for r in rows)
    return f"<table><thead><tr>{head}</tr></thead><tbody>{body}</tbody></table>"


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def _sections(report: EvalReport):
    yield "Key-step localization", KSL_HEADER, ksl_rows(report)
    if report.phase_accuracy:
        yield "Phase classification", ["label fraction", "accuracy"], [
            [f, _pct(a)] for f, a in report.phase_accuracy.items()
        ]
    if report.kendalls_tau:
        rows = [[p["a"], p["b"], f"{p['tau']:.4f}"] for p in report.kendalls_tau["pairs"]]
        rows.append(["mean", "", f"{report.kendalls_tau['mean']:.4f}"])
        yield "Kendall's tau", ["video a", "video b", "tau"], rows


def render_html(report: EvalReport, losses: Optional[Sequence[float]] = None, title: str = "stepkit report") -> str:
    parts = [f"<!DOCTYPE html><html><head><meta charset='utf-8'><title>{html.escape(title)}</title>",
             "<style>body{font-family:sans-serif}table{border-collapse:collapse;margin-bottom:1em}"
             "td,th{border:1px solid #ccc;padding:2px 8px;text-align:right}</style></head><body>",
             f"<h1>{html.escape(title)}</h1>"]
    for name, header, rows in _sections(report):
        parts.append(f"<h2>{html.escape(name)}</h2>" + _html_table(header, rows))
    if losses is not None:
        parts.append("<h2>Training loss</h2>" + loss_curve_svg(losses))
    parts.append("</body></html>")
    return "\n".join(parts)


def render_markdown(report: EvalReport, title: str = "stepkit report") -> str:
    parts = [f"# {title}"]
    for name, header, rows in _sections(report):
        parts.append(f"## {name}\n\n" + _md_table(header, rows))
    return "\n\n".join(parts) + "\n"


def ksl_csv(report: EvalReport) -> str:
    lines = [",".join(KSL_HEADER)]
    lines += [",".join(r) for r in ksl_rows(report)]
    return "\n".join(lines) + "\n"
