"""Minimal self-contained SVG line charts of benchmark tables."""

import math
from xml.sax.saxutils import escape

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf")

_AXIS = {"snrDb": "SNR (dB)", "rho": "inter-source correlation ρ", "Q": "number of sources Q"}
_OTHERS = {"snrDb": ("rho", "Q"), "rho": ("snrDb", "Q"), "Q": ("snrDb", "rho")}


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    step = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(step))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= step), default=step)
    first = math.ceil(lo / step - 1e-9) * step
    return [first + k * step for k in range(int((hi - first) / step + 1e-9) + 1)]


def _fmt(v):
    return f"{v:g}"


def error_chart(table, variable, stat="medianErr", width=640, height=420):
    """Median localization error (mm) against ``variable`` with one line per series.

    A series is a method together with the values of the other sweep
    variables.  Noiseless cells (``snrDb`` of ``None``) are left out of the
    SNR chart.
    """
    series = {}
    for row in table:
        x = getattr(row, variable)
        y = getattr(row, stat)
        if x is None or not math.isfinite(float(x)) or not math.isfinite(y):
            continue
        key = (row.method,) + tuple(getattr(row, o) for o in _OTHERS[variable])
        series.setdefault(key, []).append((float(x), float(y)))
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    y0, y1 = 0.0, max(max(ys), 1e-9) * 1.1
    left, right, top, bottom = 70, 180, 30, 60
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.2f}" y1="{top + ph}" x2="{sx(t):.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{sy(t):.2f}" x2="{left}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{sy(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 15}" text-anchor="middle">'
               f'{escape(_AXIS[variable])}</text>')
    out.append(f'<text transform="translate(18 {top + ph / 2}) rotate(-90)" text-anchor="middle">'
               f'{"median" if stat == "medianErr" else "mean"} localization error (mm)</text>')
    for i, (key, p) in enumerate(sorted(series.items(), key=lambda kv: str(kv[0]))):
        color = _PALETTE[i % len(_PALETTE)]
        p = sorted(p)
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in p:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        extra = ", ".join(f"{o}={_fmt(v) if v is not None else 'inf'}"
                          for o, v in zip(_OTHERS[variable], key[1:]))
        ly = top + 16 * i + 10
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}" font-size="10">'
                   f'{escape(key[0])} ({escape(extra)})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
