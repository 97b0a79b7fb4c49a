"""Static SVG accuracy curves from a results CSV, no plotting library needed."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .evaluation import SPLITS
from .experiment import read_csv

WIDTH, HEIGHT = 720, 360
MARGIN = {"left": 56, "right": 180, "top": 24, "bottom": 44}
COLORS = {"validation-current": "#1f77b4", "validation-task0": "#d62728", "test-seen": "#2ca02c"}
DASHES = ["", "6,3", "2,3", "8,3,2,3"]


class PlotError(ValueError):
    pass


def _series(rows: list[dict]) -> tuple[dict, list[int]]:
    """{(seed, split): [(step, value), ...]} plus the steps where a new task begins."""
    series: dict[tuple[int, str], list[tuple[int, float]]] = {}
    last_step: dict[int, int] = {}
    for r in rows:
        if r["metric"] != "accuracy" or r["split"] not in SPLITS:
            continue
        series.setdefault((r["seed"], r["split"]), []).append((r["step"], r["value"]))
        last_step[r["task"]] = max(last_step.get(r["task"], r["step"]), r["step"])
    for pts in series.values():
        pts.sort()
    tasks = sorted(last_step)
    boundaries = sorted({last_step[t] for t in tasks[:-1]})
    return series, boundaries


def render_svg(rows: list[dict]) -> str:
    series, boundaries = _series(rows)
    if not series:
        raise PlotError("no accuracy records to plot")
    steps = [s for pts in series.values() for s, _ in pts]
    x0, x1 = min(steps), max(steps)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(step):
        return MARGIN["left"] + (step - x0) / (x1 - x0) * pw

    def sy(acc):
        return MARGIN["top"] + (1.0 - acc) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<g class="axes" stroke="black" fill="none">'
        f'<line x1="{MARGIN["left"]}" y1="{sy(0):.2f}" x2="{MARGIN["left"] + pw}" y2="{sy(0):.2f}"/>'
        f'<line x1="{MARGIN["left"]}" y1="{sy(0):.2f}" x2="{MARGIN["left"]}" y2="{sy(1):.2f}"/></g>',
    ]
    ticks = ['<g class="ticks" font-family="sans-serif" font-size="10">']
    for k in range(6):
        acc = k / 5
        ticks.append(f'<text x="{MARGIN["left"] - 6}" y="{sy(acc) + 3:.2f}" text-anchor="end">{acc:.1f}</text>')
    ticks.append(f'<text x="{MARGIN["left"]}" y="{HEIGHT - 24}" text-anchor="middle">{x0}</text>')
    ticks.append(f'<text x="{MARGIN["left"] + pw}" y="{HEIGHT - 24}" text-anchor="middle">{x1}</text>')
    ticks.append(f'<text x="{MARGIN["left"] + pw / 2:.2f}" y="{HEIGHT - 8}" text-anchor="middle">step</text>')
    ticks.append("</g>")
    out.extend(ticks)

    out.append('<g class="task-boundaries" stroke="#888" stroke-dasharray="3,3">')
    for b in boundaries:
        out.append(f'<line x1="{sx(b):.2f}" y1="{sy(1):.2f}" x2="{sx(b):.2f}" y2="{sy(0):.2f}"/>')
    out.append("</g>")

    seeds = sorted({seed for seed, _ in series})
    legend_y = MARGIN["top"]
    for i, seed in enumerate(seeds):
        dash = DASHES[i % len(DASHES)]
        for split in SPLITS:
            pts = series.get((seed, split))
            if not pts:
                continue
            label = escape(f"seed {seed} {split}")
            dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
            coords = " ".join(f"{sx(s):.2f},{sy(v):.2f}" for s, v in pts)
            out.append(f'<g class="series" data-seed="{seed}" data-split="{split}">')
            out.append(f"<title>{label}</title>")
            out.append(f'<polyline fill="none" stroke="{COLORS[split]}" stroke-width="1.5"{dash_attr} points="{coords}"/>')
            if len(pts) == 1:
                out.append(f'<circle cx="{sx(pts[0][0]):.2f}" cy="{sy(pts[0][1]):.2f}" r="3" fill="{COLORS[split]}"/>')
            out.append("</g>")
            lx = MARGIN["left"] + pw + 12
            out.append(
                f'<g class="legend"><line x1="{lx}" y1="{legend_y}" x2="{lx + 18}" y2="{legend_y}" '
                f'stroke="{COLORS[split]}" stroke-width="1.5"{dash_attr}/>'
                f'<text x="{lx + 22}" y="{legend_y + 3}" font-family="sans-serif" font-size="10">{label}</text></g>'
            )
            legend_y += 14
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(csv_path, out_path) -> Path:
    """Render the accuracy curves of ``csv_path`` to ``out_path``.

    Nothing is written when the CSV is malformed or holds no accuracy rows.
    """
    svg = render_svg(read_csv(csv_path))
    out = Path(out_path)
    out.write_text(svg, encoding="utf-8")
    return out
