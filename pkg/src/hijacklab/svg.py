"""Small SVG chart writers (line, scatter, grouped bars) built on ElementTree."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Sequence

W, H = 480, 320
PAD_L, PAD_R, PAD_T, PAD_B = 56, 16, 32, 44
PALETTE = ("#1f77b4", "#ff7f0e", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


class _Frame:
    def __init__(self, title: str, xlabel: str, ylabel: str, xlim, ylim):
        self.root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(W), height=str(H))
        self.root.set("viewBox", f"0 0 {W} {H}")
        ET.SubElement(self.root, "rect", x="0", y="0", width=str(W), height=str(H), fill="white")
        x0, x1 = xlim
        y0, y1 = ylim
        if x1 <= x0:
            x0, x1 = x0 - 0.5, x0 + 0.5
        if y1 <= y0:
            y0, y1 = y0 - 0.5, y0 + 0.5
        self.xlim, self.ylim = (x0, x1), (y0, y1)
        t = ET.SubElement(self.root, "text", x=str(W // 2), y="20")
        t.set("text-anchor", "middle")
        t.set("font-size", "14")
        t.text = title
        ET.SubElement(
            self.root, "rect", x=str(PAD_L), y=str(PAD_T), width=str(W - PAD_L - PAD_R),
            height=str(H - PAD_T - PAD_B), fill="none", stroke="black",
        )
        for i in range(5):
            fx = x0 + (x1 - x0) * i / 4
            fy = y0 + (y1 - y0) * i / 4
            tx = ET.SubElement(self.root, "text", x=_fmt(self.px(fx)), y=str(H - PAD_B + 14))
            tx.set("text-anchor", "middle")
            tx.set("font-size", "10")
            tx.text = f"{fx:.3g}"
            ty = ET.SubElement(self.root, "text", x=str(PAD_L - 4), y=_fmt(self.py(fy) + 3))
            ty.set("text-anchor", "end")
            ty.set("font-size", "10")
            ty.text = f"{fy:.3g}"
        xl = ET.SubElement(self.root, "text", x=str(W // 2), y=str(H - 8))
        xl.set("text-anchor", "middle")
        xl.set("font-size", "12")
        xl.text = xlabel
        yl = ET.SubElement(self.root, "text", x="14", y=str(H // 2), transform=f"rotate(-90 14 {H // 2})")
        yl.set("text-anchor", "middle")
        yl.set("font-size", "12")
        yl.text = ylabel
        self.n_legend = 0

    def px(self, x: float) -> float:
        x0, x1 = self.xlim
        return PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R)

    def py(self, y: float) -> float:
        y0, y1 = self.ylim
        return H - PAD_B - (y - y0) / (y1 - y0) * (H - PAD_T - PAD_B)

    def legend(self, label: str, color: str):
        y = PAD_T + 12 + 14 * self.n_legend
        ET.SubElement(self.root, "rect", x=str(W - PAD_R - 110), y=str(y - 8), width="10", height="10", fill=color)
        t = ET.SubElement(self.root, "text", x=str(W - PAD_R - 96), y=str(y + 1))
        t.set("font-size", "10")
        t.text = label
        self.n_legend += 1

    def write(self, path: str | Path):
        ET.ElementTree(self.root).write(str(path), encoding="unicode", xml_declaration=False)


def _bounds(values, lo=None, hi=None):
    vals = [v for v in values if v is not None]
    if not vals:
        return (0.0, 1.0)
    a, b = min(vals), max(vals)
    return (a if lo is None else lo, b if hi is None else hi)


def line_plot(path, series: dict[str, tuple[Sequence[float], Sequence[float]]], title="", xlabel="", ylabel="", ylim=None):
    xs = [x for sx, _ in series.values() for x in sx]
    ys = [y for _, sy in series.values() for y in sy]
    f = _Frame(title, xlabel, ylabel, _bounds(xs), ylim or _bounds(ys, lo=min(0.0, min(ys, default=0.0))))
    for i, (label, (sx, sy)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(f.px(x))},{_fmt(f.py(y))}" for x, y in zip(sx, sy))
        ET.SubElement(f.root, "polyline", points=pts, fill="none", stroke=color)
        f.legend(label, color)
    f.write(path)


def scatter_plot(path, groups: dict[str, Sequence[tuple[float, float]]], title="", xlabel="", ylabel=""):
    xs = [p[0] for g in groups.values() for p in g]
    ys = [p[1] for g in groups.values() for p in g]
    f = _Frame(title, xlabel, ylabel, _bounds(xs), _bounds(ys))
    for i, (label, pts) in enumerate(groups.items()):
        color = PALETTE[i % len(PALETTE)]
        for x, y in pts:
            ET.SubElement(f.root, "circle", cx=_fmt(f.px(x)), cy=_fmt(f.py(y)), r="2", fill=color, opacity="0.6")
        f.legend(label, color)
    f.write(path)


def bar_plot(path, categories: Sequence[str], series: dict[str, Sequence[float]], title="", ylabel="", ylim=(0.0, 1.0)):
    n = max(len(categories), 1)
    f = _Frame(title, "", ylabel, (0.0, float(n)), ylim)
    k = max(len(series), 1)
    width = 0.8 / k
    for j, (label, vals) in enumerate(series.items()):
        color = PALETTE[j % len(PALETTE)]
        for i, v in enumerate(vals):
            if v is None:
                continue
            x = i + 0.1 + j * width
            top, base = f.py(v), f.py(ylim[0])
            ET.SubElement(
                f.root, "rect", x=_fmt(f.px(x)), y=_fmt(min(top, base)),
                width=_fmt(f.px(x + width) - f.px(x)), height=_fmt(abs(base - top)), fill=color,
            )
        f.legend(label, color)
    for i, c in enumerate(categories):
        t = ET.SubElement(f.root, "text", x=_fmt(f.px(i + 0.5)), y=str(H - PAD_B + 28))
        t.set("text-anchor", "middle")
        t.set("font-size", "10")
        t.text = str(c)
    f.write(path)
