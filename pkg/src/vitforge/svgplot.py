"""Minimal hand-written SVG emission for run artifacts.

CSV files remain the canonical outputs; these plots are convenience views
generated without a plotting dependency. Output strings are deterministic
for deterministic inputs.
"""

from __future__ import annotations

from .metrics import ConfusionMatrix

__all__ = ["confusion_heatmap"]

_CELL = 64
_MARGIN = 110
_PAD = 20


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def confusion_heatmap(cm: ConfusionMatrix, title: str = "confusion matrix") -> str:
    """Render counts as a blue-scaled grid with axis labels."""
    k = cm.k
    width = _MARGIN + k * _CELL + _PAD
    height = _MARGIN + k * _CELL + _PAD
    peak = max(1, int(cm.counts.max()))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="monospace" font-size="16">{_esc(title)}</text>',
        f'<text x="{_MARGIN + k * _CELL / 2:.0f}" y="52" text-anchor="middle" '
        f'font-family="monospace" font-size="12">predicted</text>',
        f'<text x="18" y="{_MARGIN + k * _CELL / 2:.0f}" text-anchor="middle" '
        f'font-family="monospace" font-size="12" '
        f'transform="rotate(-90 18 {_MARGIN + k * _CELL / 2:.0f})">true</text>',
    ]
    for j, name in enumerate(cm.class_names):
        x = _MARGIN + j * _CELL + _CELL // 2
        parts.append(
            f'<text x="{x}" y="{_MARGIN - 8}" text-anchor="middle" '
            f'font-family="monospace" font-size="10">{_esc(name[:12])}</text>'
        )
    for i, name in enumerate(cm.class_names):
        y = _MARGIN + i * _CELL + _CELL // 2 + 4
        parts.append(
            f'<text x="{_MARGIN - 8}" y="{y}" text-anchor="end" '
            f'font-family="monospace" font-size="10">{_esc(name[:12])}</text>'
        )
    for i in range(k):
        for j in range(k):
            count = int(cm.counts[i, j])
            shade = count / peak
            # white -> deep blue ramp
            r = round(255 - 205 * shade)
            g = round(255 - 170 * shade)
            b = round(255 - 75 * shade)
            x = _MARGIN + j * _CELL
            y = _MARGIN + i * _CELL
            text_fill = "white" if shade > 0.55 else "black"
            parts.append(
                f'<rect x="{x}" y="{y}" width="{_CELL}" height="{_CELL}" '
                f'fill="rgb({r},{g},{b})" stroke="black" stroke-width="1"/>'
            )
            parts.append(
                f'<text x="{x + _CELL // 2}" y="{y + _CELL // 2 + 5}" '
                f'text-anchor="middle" font-family="monospace" font-size="14" '
                f'fill="{text_fill}">{count}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
