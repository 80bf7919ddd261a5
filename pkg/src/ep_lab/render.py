"""Tick-panel rendering of patrol traces (ASCII and SVG).

Panels read everything from the per-tick annotations stored in the trace;
nothing is recomputed from the environment.
"""

from __future__ import annotations

from .core import EpisodeTrace

PANEL_ROW_WIDTH = 80
FIRST_INTERRUPTION, FIRST_ALARM_DURING_HANDLING = "first_interruption", "first_alarm_during_handling"
CRITERIA = (FIRST_INTERRUPTION, FIRST_ALARM_DURING_HANDLING)

MODE_COLORS = {"PatrolNav": "#9e9e9e", "Handling": "#1f77b4", "AlarmNav": "#ff7f0e",
               "Resolving": "#2ca02c"}
MODE_SHORT = {"PatrolNav": "nav", "Handling": "handle", "AlarmNav": "to-alarm", "Resolving": "resolve"}


def _window(trace: EpisodeTrace, start: int, n: int) -> list:
    if n < 1:
        raise ValueError("n_panels must be positive")
    if start < 0 or start + n > len(trace.records):
        raise ValueError(f"window [{start}, {start + n}) outside trace of {len(trace.records)} ticks")
    recs = trace.records[start:start + n]
    if any(r.annotation is None or "grid" not in r.annotation for r in recs):
        raise ValueError("trace has no patrol annotations to render")
    return recs


def _panel_lines(rec, width: int) -> list:
    a = rec.annotation
    g = a["grid"]
    cells = [["." for _ in range(g)] for _ in range(g)]
    for x, y in a["checkpoints"]:
        cells[y][x] = "C"
    alarm = a.get("alarm")
    if alarm:
        ax, ay = alarm["pos"]
        cells[ay][ax] = "!"
    x, y = a["pos"]
    cells[y][x] = "A" if not alarm or [x, y] != alarm["pos"] else "@"
    mode = a["mode"]
    lines = [f"t={rec.tick}", MODE_SHORT.get(mode, mode)]
    badge = f"h{a['handle_left']}" if mode == "Handling" else ""
    if a.get("phase"):
        badge += f" {a['phase']}:{a['phase_left']}"
    lines.append(badge.strip() or "-")
    lines.append(f"alarm {alarm['left']}" if alarm else "no alarm")
    acts = ",".join(sorted(str(x) for x in rec.interventions))
    lines.append(acts or "-")
    for row in range(g - 1, -1, -1):        # y grows upwards
        lines.append(" ".join(cells[row]))
    return [l[:width - 1].ljust(width) for l in lines]


def render_ascii(trace: EpisodeTrace, start: int, n_panels: int) -> str:
    recs = _window(trace, start, n_panels)
    need = 2 * recs[0].annotation["grid"]
    width = max(need, 16)
    per_row = max(1, PANEL_ROW_WIDTH // width)
    if width > PANEL_ROW_WIDTH:
        raise ValueError("grid too large for an 80-column panel row")
    out = []
    for i in range(0, len(recs), per_row):
        panels = [_panel_lines(r, width) for r in recs[i:i + per_row]]
        for parts in zip(*panels):
            out.append("".join(parts).ljust(PANEL_ROW_WIDTH))
        out.append(" " * PANEL_ROW_WIDTH)
    return "\n".join(out[:-1]) + "\n"


def render_svg(trace: EpisodeTrace, start: int, n_panels: int, cell: int = 24) -> str:
    recs = _window(trace, start, n_panels)
    g = recs[0].annotation["grid"]
    pad, head = 10, 52
    pw = g * cell + 2 * pad
    ph = g * cell + head + pad
    W, H = pw * len(recs), ph
    el = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
          f'viewBox="0 0 {W} {H}" font-family="monospace" font-size="11">',
          f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>']
    for k, rec in enumerate(recs):
        a = rec.annotation
        ox, oy = k * pw + pad, head
        mode = a["mode"]
        color = MODE_COLORS.get(mode, "#000000")
        el.append(f'<g id="tick-{rec.tick}">')
        el.append(f'<text x="{ox}" y="16">t={rec.tick}</text>')
        el.append(f'<rect x="{ox}" y="22" width="{g * cell}" height="14" fill="{color}"/>')
        label = mode + (f" / {a['phase']}" if a.get("phase") else "")
        el.append(f'<text x="{ox + 3}" y="33" fill="white">{label}</text>')
        for i in range(g):
            for j in range(g):
                el.append(f'<rect x="{ox + i * cell}" y="{oy + (g - 1 - j) * cell}" width="{cell}" '
                          f'height="{cell}" fill="none" stroke="#dddddd"/>')
        for cx, cy in a["checkpoints"]:
            el.append(f'<rect x="{ox + cx * cell + 4}" y="{oy + (g - 1 - cy) * cell + 4}" '
                      f'width="{cell - 8}" height="{cell - 8}" fill="#c7e9c0" stroke="#31a354"/>')
        alarm = a.get("alarm")
        if alarm:
            ax, ay = alarm["pos"]
            mx, my = ox + ax * cell + cell // 2, oy + (g - 1 - ay) * cell + cell // 2
            el.append(f'<circle cx="{mx}" cy="{my}" r="{cell // 2 - 1}" fill="none" stroke="#d62728" '
                      f'stroke-dasharray="3,2"/>')
            el.append(f'<text x="{mx + cell // 2}" y="{my - cell // 2}" fill="#d62728">{alarm["left"]}</text>')
        x, y = a["pos"]
        px, py = ox + x * cell + cell // 2, oy + (g - 1 - y) * cell + cell // 2
        el.append(f'<circle cx="{px}" cy="{py}" r="{cell // 3}" fill="{color}"/>')
        if mode == "Handling":
            el.append(f'<rect x="{px + 4}" y="{py - cell // 2 - 2}" width="22" height="12" rx="3" '
                      f'fill="#333333"/>')
            el.append(f'<text x="{px + 6}" y="{py - cell // 2 + 8}" fill="white" '
                      f'font-size="9">{a["handle_left"]}</text>')
        el.append("</g>")
    el.append("</svg>")
    return "\n".join(el) + "\n"


def render_window(trace: EpisodeTrace, start_tick: int, n_panels: int = 5, fmt: str = "ascii") -> str:
    if fmt == "ascii":
        return render_ascii(trace, start_tick, n_panels)
    if fmt == "svg":
        return render_svg(trace, start_tick, n_panels)
    raise ValueError(f"unknown format {fmt!r}")


def _mode(rec):
    return (rec.annotation or {}).get("mode")


def find_first_event(trace: EpisodeTrace, criterion: str):
    """Earliest tick meeting ``criterion``; ``None`` when there is none.

    ``first_interruption``: an intervention issued while handling a checkpoint,
    away from a module boundary.
    ``first_alarm_during_handling``: an alarm appears while the agent handles.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    prev_alarm = False
    for rec in trace.records:
        a = rec.annotation or {}
        handling = _mode(rec) == "Handling"
        alarm = bool(a.get("alarm"))
        if criterion == FIRST_INTERRUPTION and handling and rec.interventions and not a.get("boundary"):
            return rec.tick
        if criterion == FIRST_ALARM_DURING_HANDLING and handling and alarm and not prev_alarm:
            return rec.tick
        prev_alarm = alarm
    return None
