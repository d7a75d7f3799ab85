"""Heatmap rendering of attribution reports as ANSI text or static HTML.

The top words by attribution are highlighted; sentence 1 words in pink,
sentence 2 words in cyan. Saturation encodes the attribution's quartile
bucket among the highlighted candidates, so a one-hot attribution shows a
single fully saturated word and a uniform one shows all candidates at the
lowest saturation.
"""

from __future__ import annotations

import html as _html

import numpy as np

from .errors import ContractError
from .explainers import AttributionReport
from .metrics import order_desc
from .models import PairExample

_HUES = ((233, 30, 99), (0, 151, 167))        # sentence 1 pink, sentence 2 cyan
_SATURATIONS = (0.25, 0.5, 0.75, 1.0)


def _buckets(report: AttributionReport, top: int) -> dict[int, int]:
    """Map highlighted word index -> saturation bucket 0..3.

    Candidates are the top-`top` words by attribution; quartile thresholds
    are taken over the candidates' values and only strictly greater values
    climb a bucket, so ties sink to the lowest saturation. Zero-attribution
    words are never highlighted.
    """
    theta = report.theta
    candidates = order_desc(theta)[:min(top, theta.shape[0])]
    qs = np.quantile(theta[candidates], [0.25, 0.5, 0.75])
    return {int(i): int(sum(theta[i] > q for q in qs))
            for i in candidates if theta[i] > 0.0}


def _blend(hue: tuple[int, int, int], saturation: float) -> tuple[int, int, int]:
    return tuple(round(255 * (1 - saturation) + c * saturation) for c in hue)


def _token_text(token: int) -> str:
    return f"w{token}"


def render_report(report: AttributionReport, example: PairExample,
                  fmt: str = "ansi", top: int = 4) -> str:
    """Render one example's heatmap; deterministic for fixed inputs."""
    if report.theta.shape[0] != example.n_words:
        raise ContractError(
            f"report for example {report.example_id} does not match the example length")
    if fmt not in ("ansi", "html"):
        raise ContractError(f"unknown format {fmt!r}")
    buckets = _buckets(report, top)
    n1 = report.n1

    def paint(flat_idx: int, token: int, sentence: int) -> str:
        text = _token_text(token)
        if flat_idx not in buckets:
            return _html.escape(text) if fmt == "html" else text
        r, g, b = _blend(_HUES[sentence], _SATURATIONS[buckets[flat_idx]])
        if fmt == "ansi":
            return f"\x1b[48;2;{r};{g};{b}m\x1b[30m{text}\x1b[0m"
        return (f'<span style="background: rgb({r},{g},{b})">'
                f"{_html.escape(text)}</span>")

    s1 = " ".join(paint(i, tok, 0) for i, tok in enumerate(example.tokens1))
    s2 = " ".join(paint(n1 + i, tok, 1) for i, tok in enumerate(example.tokens2))
    header = f"example {report.example_id} | {report.method} | predicted {report.predicted_label}"
    if fmt == "ansi":
        return f"{header}\n  s1: {s1}\n  s2: {s2}\n"
    return (f'<div class="example"><p class="meta">{_html.escape(header)}</p>'
            f"<p>{s1}</p><p>{s2}</p></div>")


def render_document(reports, examples, fmt: str = "ansi", top: int = 4) -> str:
    """Concatenate per-example renderings into one self-contained document."""
    blocks = [render_report(rep, examples[rep.example_id], fmt, top) for rep in reports]
    if fmt == "ansi":
        return "\n".join(blocks) + ("\n" if blocks else "")
    style = ("body{font-family:monospace;margin:2em}"
             ".meta{color:#555;margin:1em 0 0.2em}"
             "span{padding:0 2px;border-radius:2px}")
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
            f"<title>attribution heatmaps</title><style>{style}</style></head>\n"
            "<body>\n" + "\n".join(blocks) + "\n</body></html>\n")
