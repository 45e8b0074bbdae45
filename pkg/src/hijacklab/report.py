"""CSV emitters and the run-directory summary (markdown tables + SVG plots)."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import svg

# header -> kind; files are recognised by their columns, not their names
KINDS = {
    ("condition", "sr", "asr", "n"): "metrics",
    ("axis", "value", "sr", "asr"): "sweep",
    ("threshold", "sr", "asr", "flag_rate"): "filter",
    ("step", "sr", "asr", "flag_rate"): "finetune",
    ("episode", "step", "speed"): "speed",
    ("class", "pc1", "pc2"): "projection",
    ("step", "l_fm", "l_bd", "l_mimic", "total", "lr"): "loss",
}
HEADERS = {v: list(k) for k, v in KINDS.items()}


def fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: str | Path, kind: str, rows: Iterable[Sequence]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADERS[kind])
        for r in rows:
            w.writerow([fmt(x) for x in r])
            n += 1
    return n


def _num(s: str):
    if s in ("", "NA"):
        return None
    return float(s)


def read_table(path: Path) -> tuple[str | None, list[dict]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return None, []
    kind = KINDS.get(tuple(rows[0]))
    return kind, [dict(zip(rows[0], r)) for r in rows[1:]]


def collect(run_dir: str | Path) -> dict[str, list[tuple[Path, list[dict]]]]:
    found: dict[str, list] = defaultdict(list)
    for p in sorted(Path(run_dir).glob("*.csv")):
        kind, rows = read_table(p)
        if kind is not None:
            found[kind].append((p, rows))
    return dict(found)


def _pct(x) -> str:
    return "NA" if x is None else f"{100 * x:.1f}"


def _md_table(header: Sequence[str], rows: Sequence[Sequence]) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return out


def _bc_2d(a: np.ndarray, b: np.ndarray) -> float:
    from .evalsuite import bhattacharyya_gaussian

    db = bhattacharyya_gaussian(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))
    return float(math.exp(-db))


def build_report(run_dir: str | Path, out_dir: str | Path | None = None) -> dict:
    """Write ``summary.md`` and SVG plots; returns {section: row count}.

    Raises FileNotFoundError naming every absent input kind when nothing
    usable is present.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    found = collect(run_dir)
    if not found:
        names = ", ".join(sorted(HEADERS))
        raise FileNotFoundError(f"{run_dir}: no recognised CSV inputs (looked for {names} tables)")
    lines = ["# Run summary", ""]
    counts: dict[str, int] = {}
    notices = []

    # attack efficacy, one row per metrics row
    if "metrics" in found:
        rows = []
        for path, table in found["metrics"]:
            for r in table:
                method, _, cond = r["condition"].partition(":")
                rows.append((method, cond or "-", _pct(_num(r["sr"])), _pct(_num(r["asr"])), r["n"], path.name))
        lines += ["## Attack efficacy (SR / ASR, %)", ""]
        lines += _md_table(("method", "condition", "SR", "ASR", "n", "source"), rows)
        lines.append("")
        counts["metrics"] = len(rows)
        ablation = [r for r in rows if "drop" in r[0]]
        if ablation:
            lines += ["## Ablation grid", ""]
            lines += _md_table(("method", "condition", "SR", "ASR", "n", "source"), ablation)
            lines.append("")
    else:
        notices.append("attack-efficacy and ablation tables skipped: no metrics CSV")

    if "sweep" in found:
        rows = []
        for path, table in found["sweep"]:
            for r in table:
                rows.append((r["axis"], r["value"], _pct(_num(r["sr"])), _pct(_num(r["asr"])), path.name))
            svg.bar_plot(
                out_dir / f"{path.stem}.svg",
                [r["value"] for r in table],
                {"ASR": [_num(r["asr"]) for r in table], "SR": [_num(r["sr"]) for r in table]},
                title=f"Trigger robustness ({table[0]['axis'] if table else ''})",
                ylabel="rate",
            )
        lines += ["## Trigger robustness", ""]
        lines += _md_table(("axis", "value", "SR", "ASR", "source"), rows)
        lines.append("")
        counts["sweep"] = len(rows)
    else:
        notices.append("robustness table skipped: no sweep CSV")

    if "speed" in found:
        series, rows = {}, []
        for path, table in found["speed"]:
            per_step = defaultdict(list)
            peaks = defaultdict(float)
            for r in table:
                per_step[int(r["step"])].append(float(r["speed"]))
                peaks[r["episode"]] = max(peaks[r["episode"]], float(r["speed"]))
            steps = sorted(per_step)
            series[path.stem] = (steps, [float(np.mean(per_step[s])) for s in steps])
            rows.append((path.stem, len(peaks), f"{np.mean(list(peaks.values())) if peaks else 0.0:.4f}"))
        svg.line_plot(out_dir / "velocity_overlay.svg", series, "Mean gripper speed", "step", "speed / step")
        lines += ["## Velocity profiles", ""]
        lines += _md_table(("source", "episodes", "mean peak speed"), rows)
        lines.append("")
        counts["speed"] = sum(len(t) for _, t in found["speed"])
    else:
        notices.append("velocity overlay skipped: no speed-profile CSV")

    if "projection" in found:
        rows = []
        for path, table in found["projection"]:
            groups = defaultdict(list)
            for r in table:
                groups[r["class"]].append((float(r["pc1"]), float(r["pc2"])))
            svg.scatter_plot(out_dir / f"{path.stem}.svg", groups, "Vector-field projection", "PC1", "PC2")
            bc = "NA"
            if len(groups.get("benign", ())) > 2 and len(groups.get("attack", ())) > 2:
                bc = f"{_bc_2d(np.array(groups['benign']), np.array(groups['attack'])):.4f}"
            rows.append((path.stem, len(table), bc))
        lines += ["## Projection overlap", ""]
        lines += _md_table(("source", "points", "Bhattacharyya coefficient"), rows)
        lines.append("")
        counts["projection"] = sum(len(t) for _, t in found["projection"])
    else:
        notices.append("projection scatter skipped: no projection CSV")

    if "filter" in found:
        rows = []
        for path, table in found["filter"]:
            for r in table:
                rows.append((r["threshold"], _pct(_num(r["sr"])), _pct(_num(r["asr"])), _pct(_num(r["flag_rate"])), path.name))
        lines += ["## Endpoint filter (residual ASR)", ""]
        lines += _md_table(("threshold", "SR", "residual ASR", "clean flag rate", "source"), rows)
        lines.append("")
        counts["filter"] = len(rows)
    else:
        notices.append("endpoint-filter table skipped: no filter CSV")

    if "finetune" in found:
        rows, series = [], {}
        for path, table in found["finetune"]:
            for r in table:
                rows.append((r["step"], _pct(_num(r["sr"])), _pct(_num(r["asr"])), path.name))
            steps = [float(r["step"]) for r in table]
            series[f"{path.stem} ASR"] = (steps, [_num(r["asr"]) or 0.0 for r in table])
            series[f"{path.stem} SR"] = (steps, [_num(r["sr"]) or 0.0 for r in table])
        svg.line_plot(out_dir / "finetune_decay.svg", series, "Clean fine-tuning", "step", "rate", ylim=(0.0, 1.0))
        lines += ["## Clean fine-tuning", ""]
        lines += _md_table(("step", "SR", "ASR", "source"), rows)
        lines.append("")
        counts["finetune"] = len(rows)
    else:
        notices.append("fine-tuning table skipped: no fine-tuning CSV")

    if "loss" in found:
        series = {}
        for path, table in found["loss"]:
            stride = max(1, len(table) // 200)
            sub = table[::stride]
            series[path.stem] = ([float(r["step"]) for r in sub], [float(r["total"]) for r in sub])
        svg.line_plot(out_dir / "loss_curves.svg", series, "Training loss", "step", "total loss")
        counts["loss"] = sum(len(t) for _, t in found["loss"])

    if notices:
        lines += ["## Notices", ""] + [f"- {n}" for n in notices] + [""]
    (out_dir / "summary.md").write_text("\n".join(lines))
    return counts
