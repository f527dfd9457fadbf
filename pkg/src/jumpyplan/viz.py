"""Small hand-written SVG plots: planned score against obtained reward over an
episode, and a top-down view of the gripper path and the objects."""
from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 360
MARGIN = (56, 20, 24, 44)  # left, right, top, bottom
COLORS = {"score": "#1f77b4", "reward": "#d62728", "gripper": "#333333",
          "red": "#d62728", "green": "#2ca02c", "blue": "#1f77b4"}


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if abs(v) < 1e6 else f"{v:.3g}"


def _polyline(xs, ys, color, width=1.5) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>'


def _frame(title: str, xlabel: str, ylabel: str, x_range, y_range, ticks: int = 5):
    left, right, top, bottom = MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom
    (x0, x1), (y0, y1) = x_range, y_range

    def sx(x):
        return left + (x - x0) / (x1 - x0 or 1.0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0 or 1.0) * ph

    parts = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="white" stroke="#888"/>',
             f'<text x="{WIDTH / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle" font-size="12">'
             f'{escape(xlabel)}</text>',
             f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>']
    for i in range(ticks + 1):
        xv = x0 + (x1 - x0) * i / ticks
        yv = y0 + (y1 - y0) * i / ticks
        parts.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">'
                     f'{_fmt(xv)}</text>')
        parts.append(f'<text x="{left - 6}" y="{sy(yv) + 3:.1f}" text-anchor="end" font-size="10">'
                     f'{_fmt(yv)}</text>')
    return parts, sx, sy


def _document(parts) -> str:
    body = "\n".join(parts)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">\n{body}\n</svg>\n')


def _legend(entries, x: float, y: float) -> list[str]:
    out = []
    for i, (label, color) in enumerate(entries):
        yy = y + 16 * i
        out.append(f'<line x1="{x}" y1="{yy}" x2="{x + 18}" y2="{yy}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x + 24}" y="{yy + 4}" font-size="11">{escape(label)}</text>')
    return out


def score_trace_svg(rows, title: str = "") -> str:
    """``rows`` are (step, planned_score, reward); both curves share the y axis."""
    rows = list(rows)
    steps = [r[0] for r in rows]
    scores = [r[1] for r in rows]
    rewards = [r[2] for r in rows]
    finite = [v for v in scores + rewards if v == v]
    y_hi = max([1.0] + finite)
    parts, sx, sy = _frame(title or "planned score vs obtained reward", "step", "value",
                           (0, max(steps[-1], 1) if steps else 1), (0.0, y_hi))
    keep = [(t, s) for t, s in zip(steps, scores) if s == s]
    parts.append(_polyline([sx(t) for t, _ in keep], [sy(s) for _, s in keep], COLORS["score"]))
    parts.append(_polyline([sx(t) for t in steps], [sy(r) for r in rewards], COLORS["reward"]))
    parts += _legend([("planned score", COLORS["score"]), ("reward", COLORS["reward"])],
                     MARGIN[0] + 10, MARGIN[2] + 14)
    return _document(parts)


def topdown_svg(path, title: str = "") -> str:
    """``path`` rows: gx, gy, aperture, rx, ry, green x, green y, bx, by."""
    parts, sx, sy = _frame(title or "top-down view", "x", "y", (-1.0, 1.0), (0.0, 1.0), ticks=4)
    parts.append(f'<line x1="{sx(-1):.1f}" y1="{sy(0.05):.1f}" x2="{sx(1):.1f}" y2="{sy(0.05):.1f}" '
                 f'stroke="#bbb" stroke-dasharray="4 3"/>')
    parts.append(_polyline([sx(p[0]) for p in path], [sy(p[1]) for p in path], COLORS["gripper"], 1.0))
    for color, (ix, iy) in (("red", (3, 4)), ("green", (5, 6)), ("blue", (7, 8))):
        xs = [sx(p[ix]) for p in path]
        ys = [sy(p[iy]) for p in path]
        parts.append(_polyline(xs, ys, COLORS[color], 1.0))
        for (x, y), opacity in (((xs[0], ys[0]), 0.35), ((xs[-1], ys[-1]), 1.0)):
            parts.append(f'<rect x="{x - 5:.1f}" y="{y - 5:.1f}" width="10" height="10" '
                         f'fill="{COLORS[color]}" fill-opacity="{opacity}"/>')
    parts.append(f'<circle cx="{sx(path[-1][0]):.1f}" cy="{sy(path[-1][1]):.1f}" r="4" fill="none" '
                 f'stroke="{COLORS["gripper"]}" stroke-width="1.5"/>')
    parts += _legend([("gripper", COLORS["gripper"]), ("red", COLORS["red"]), ("green", COLORS["green"]),
                      ("blue", COLORS["blue"])], MARGIN[0] + 10, MARGIN[2] + 14)
    return _document(parts)
